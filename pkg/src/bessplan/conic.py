"""Cone-program modeling layer with a reference solver behind it.

Programs are built from named variables, linear rows, and second-order
cone rows (rotated v*l >= sum p_i^2 or standard ||u|| <= t). seal()
converts to the conic standard form consumed by the interior-point
reference backend (bessplan._ipm); a branch-and-bound layer handles
binary variables. Any backend exposing solve_relaxation / solve_misocp
with the same contracts can replace the reference one.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _ipm


@dataclass
class SolverConfig:
    """Solver tolerances and mixed-integer limits."""

    feas_tol: float = 1e-8
    cone_tol: float = 1e-8
    mip_gap: float = 0.001
    node_limit: int = 20000
    time_limit: float | None = None  # seconds, wall clock
    max_iters: int = 100  # interior-point iterations per solve
    int_tol: float = 1e-6  # integrality tolerance on binaries
    big_m: str = "capacity"  # big-M policy: derive M from capacity bounds

    def __post_init__(self):
        if self.feas_tol <= 0 or self.cone_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.mip_gap < 1.0:
            raise ValueError("mip_gap must be in (0, 1)")
        if self.big_m != "capacity":
            raise ValueError(f"unknown big-M policy {self.big_m!r}")


@dataclass
class SolveResult:
    status: str  # optimal | infeasible | unbounded | gap-limit | iteration-limit
    objective: float
    x: dict
    gap: float | None = None  # relative MIP gap, None for pure relaxations
    max_residual: float = math.nan
    iterations: int = 0

    def __getitem__(self, name):
        return self.x[name]


class ConicProgram:
    """Linear objective over continuous/binary variables with linear and
    second-order-cone rows. Mutable until sealed."""

    def __init__(self, name=""):
        self.name = name
        self._names = []
        self._index = {}
        self._lb = []
        self._ub = []
        self._binary = []
        self._obj = {}
        self._obj_const = 0.0
        self._eqs = []     # (coeffs: {idx: a}, rhs)
        self._ineqs = []   # (coeffs, rhs), meaning coeffs . x <= rhs
        self._cones = []   # ("r", v, l, [terms]) or ("s", t, [terms])
        self._sealed = None

    # -- construction ----------------------------------------------------

    def add_var(self, name, lb=None, ub=None, binary=False):
        self._mutable()
        if name in self._index:
            raise ValueError(f"variable {name!r} already declared")
        if binary:
            # binaries always carry [0,1] box, intersected with user bounds
            lb = 0.0 if lb is None else max(0.0, float(lb))
            ub = 1.0 if ub is None else min(1.0, float(ub))
        self._index[name] = len(self._names)
        self._names.append(name)
        self._lb.append(None if lb is None else float(lb))
        self._ub.append(None if ub is None else float(ub))
        if binary:
            self._binary.append(self._index[name])
        return name

    def minimize(self, coeffs, constant=0.0):
        self._mutable()
        self._obj = self._row(coeffs)
        self._obj_const = float(constant)

    def add_eq(self, coeffs, rhs):
        self._mutable()
        self._eqs.append((self._row(coeffs), float(rhs)))

    def add_ineq(self, coeffs, rhs):
        """coeffs . x <= rhs."""
        self._mutable()
        self._ineqs.append((self._row(coeffs), float(rhs)))

    def add_rotated_cone(self, v, l, terms):
        """v * l >= sum(t^2 for t in terms), v >= 0, l >= 0."""
        self._mutable()
        terms = [self._idx(t) for t in terms]
        if not terms:
            raise ValueError("rotated cone needs at least one term")
        vi, li = self._idx(v), self._idx(l)
        if vi == li:
            raise ValueError("rotated cone needs distinct v and l")
        self._cones.append(("r", vi, li, terms))

    def add_soc(self, t, terms):
        """||terms||_2 <= t."""
        self._mutable()
        terms = [self._idx(u) for u in terms]
        if not terms:
            raise ValueError("second-order cone needs at least one term")
        self._cones.append(("s", self._idx(t), None, terms))

    def _row(self, coeffs):
        return {self._idx(nm): float(a) for nm, a in coeffs.items()
                if a != 0.0}

    def _idx(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise ValueError(f"unknown variable {name!r}") from None

    def _mutable(self):
        if self._sealed is not None:
            raise ValueError("program is sealed")

    # -- sealed form -------------------------------------------------------

    @property
    def n_vars(self):
        return len(self._names)

    @property
    def binaries(self):
        return tuple(self._names[j] for j in self._binary)

    def seal(self):
        """Freeze and build the standard-form matrices (idempotent)."""
        if self._sealed is not None:
            return self._sealed
        n = self.n_vars
        rows, cols, vals, h = [], [], [], []
        lb_row = {}
        ub_row = {}

        def put(r, coeffs, rhs):
            for j, a in coeffs.items():
                rows.append(r)
                cols.append(j)
                vals.append(a)
            h.append(rhs)

        r = 0
        for j in range(n):
            if self._lb[j] is not None:
                lb_row[j] = r
                put(r, {j: -1.0}, -self._lb[j])
                r += 1
            if self._ub[j] is not None:
                ub_row[j] = r
                put(r, {j: 1.0}, self._ub[j])
                r += 1
        for coeffs, rhs in self._ineqs:
            put(r, coeffs, rhs)
            r += 1
        nl = r
        q = []
        for kind, a, b_, terms in self._cones:
            if kind == "r":
                # (v+l, v-l, 2p) in a second-order cone of size len(p)+2
                put(r, {a: -1.0, b_: -1.0}, 0.0)
                r += 1
                put(r, {a: -1.0, b_: 1.0}, 0.0)
                r += 1
                for tm in terms:
                    put(r, {tm: -2.0}, 0.0)
                    r += 1
                q.append(len(terms) + 2)
            else:
                put(r, {a: -1.0}, 0.0)
                r += 1
                for tm in terms:
                    put(r, {tm: -1.0}, 0.0)
                    r += 1
                q.append(len(terms) + 1)

        G = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
        hv = np.array(h, dtype=float)

        arows, acols, avals, bv = [], [], [], []
        for i, (coeffs, rhs) in enumerate(self._eqs):
            for j, a in coeffs.items():
                arows.append(i)
                acols.append(j)
                avals.append(a)
            bv.append(rhs)
        A = sp.csr_matrix((avals, (arows, acols)),
                          shape=(len(self._eqs), n))
        c = np.zeros(n)
        for j, a in self._obj.items():
            c[j] = a
        self._sealed = {
            "c": c, "G": G, "h": hv, "dims": {"l": nl, "q": q},
            "A": A, "b": np.array(bv, dtype=float),
            "lb_row": lb_row, "ub_row": ub_row,
        }
        return self._sealed

    def dump(self):
        """Debug text form, one row per line. Not a stable format."""
        out = [f"program {self.name or '<anon>'}: {self.n_vars} vars, "
               f"{len(self._binary)} binary"]
        for j, nm in enumerate(self._names):
            tag = " binary" if j in set(self._binary) else ""
            out.append(f"var {nm} in [{self._lb[j]}, {self._ub[j]}]{tag}")
        def f(coeffs):
            return " + ".join(f"{a:g}*{self._names[j]}"
                              for j, a in sorted(coeffs.items()))
        out.append("min " + (f(self._obj) or "0") +
                   (f" + {self._obj_const:g}" if self._obj_const else ""))
        for coeffs, rhs in self._eqs:
            out.append(f"eq: {f(coeffs)} = {rhs:g}")
        for coeffs, rhs in self._ineqs:
            out.append(f"ineq: {f(coeffs)} <= {rhs:g}")
        for kind, a, b_, terms in self._cones:
            ts = ", ".join(self._names[t] for t in terms)
            if kind == "r":
                out.append(f"rcone: {self._names[a]}*{self._names[b_]} >= "
                           f"sum sq({ts})")
            else:
                out.append(f"soc: ||({ts})|| <= {self._names[a]}")
        return "\n".join(out)


def max_residual(prog: ConicProgram, assignment) -> float:
    """Worst absolute violation of any declared row at the given point.

    Evaluates the rows as declared (bounds, equalities, inequalities,
    cones), not the sealed matrices, so it is an independent check on
    both the solver and the standard-form conversion.
    """
    x = np.empty(prog.n_vars)
    for nm, j in prog._index.items():
        if nm not in assignment:
            raise ValueError(f"assignment missing variable {nm!r}")
        x[j] = assignment[nm]
    worst = 0.0
    for j in range(prog.n_vars):
        if prog._lb[j] is not None:
            worst = max(worst, prog._lb[j] - x[j])
        if prog._ub[j] is not None:
            worst = max(worst, x[j] - prog._ub[j])
    for coeffs, rhs in prog._eqs:
        worst = max(worst, abs(sum(a * x[j] for j, a in coeffs.items()) - rhs))
    for coeffs, rhs in prog._ineqs:
        worst = max(worst, sum(a * x[j] for j, a in coeffs.items()) - rhs)
    for kind, a, b_, terms in prog._cones:
        if kind == "r":
            worst = max(worst, -x[a], -x[b_],
                        sum(x[t] ** 2 for t in terms) - x[a] * x[b_])
        else:
            worst = max(worst,
                        math.sqrt(sum(x[t] ** 2 for t in terms)) - x[a])
    return float(worst)


def _run_ipm(prog, cfg, fixes=None):
    """Continuous solve with optional binary fixings via bound-row edits."""
    sealed = prog.seal()
    h = sealed["h"]
    if fixes:
        h = h.copy()
        for j, val in fixes.items():
            h[sealed["lb_row"][j]] = -float(val)
            h[sealed["ub_row"][j]] = float(val)
    c = sealed["c"]
    scale = max(1.0, np.max(np.abs(c)) if c.size else 1.0)
    return _ipm.conelp(c / scale, sealed["G"], h, sealed["dims"],
                       sealed["A"], sealed["b"],
                       feastol=cfg.feas_tol, abstol=cfg.cone_tol,
                       reltol=cfg.cone_tol, maxiters=cfg.max_iters), scale


_STATUS = {
    "optimal": "optimal",
    "primal infeasible": "infeasible",
    "dual infeasible": "unbounded",
    "unknown": "iteration-limit",
}


def solve_relaxation(prog: ConicProgram, cfg: SolverConfig | None = None) \
        -> SolveResult:
    """Solve with binaries relaxed to [0,1]. Deterministic."""
    cfg = cfg or SolverConfig()
    raw, scale = _run_ipm(prog, cfg)
    status = _STATUS[raw["status"]]
    if raw["x"] is None:
        return SolveResult(status, math.inf, {}, None, math.inf,
                           raw["iterations"])
    xs = {nm: float(v) for nm, v in zip(prog._names, raw["x"])}
    obj = (raw["pcost"] if raw["pcost"] is not None else math.nan)
    obj = obj * scale + prog._obj_const
    if status == "unbounded":
        obj = -math.inf
        res = math.nan
    else:
        res = max_residual(prog, xs)
    return SolveResult(status, obj, xs, None, res, raw["iterations"])


def _heuristic_fixes(prog, relax_x, int_tol):
    """Round binaries up from any strictly positive relaxation value, then
    repair violated all-binary packing rows by keeping the largest
    relaxation value (ties to the lowest declaration index)."""
    binset = set(prog._binary)
    fixes = {j: (1.0 if relax_x[j] > int_tol else 0.0) for j in prog._binary}
    for coeffs, rhs in prog._ineqs:
        sup = list(coeffs)
        if not sup or any(j not in binset or coeffs[j] <= 0 for j in sup):
            continue
        if sum(coeffs[j] * fixes[j] for j in sup) <= rhs + 1e-12:
            continue
        keep = max(sup, key=lambda j: (relax_x[j], -j))
        for j in sup:
            if j != keep:
                fixes[j] = 0.0
    return fixes


def solve_misocp(prog: ConicProgram, cfg: SolverConfig | None = None,
                 trace: list | None = None) -> SolveResult:
    """Branch-and-bound on the binary variables over the conic relaxation.

    Best-bound node selection; branches on the most fractional binary,
    ties to the lowest declaration index. Stops at relative gap
    <= cfg.mip_gap, node limit, or time limit.

    If trace is a list, one (node_bound, incumbent_objective) pair is
    appended per processed node; bounds are non-decreasing and incumbent
    objectives non-increasing over the run.
    """
    cfg = cfg or SolverConfig()
    sealed = prog.seal()
    t0 = time.monotonic()
    binaries = list(prog._binary)

    def timed_out():
        return cfg.time_limit is not None and \
            time.monotonic() - t0 > cfg.time_limit

    def names_of(vec, fixes):
        out = {nm: float(v) for nm, v in zip(prog._names, vec)}
        for j, val in fixes.items():
            out[prog._names[j]] = float(val)
        return out

    def node_solve(fixes):
        raw, scale = _run_ipm(prog, cfg, fixes)
        status = _STATUS[raw["status"]]
        obj = None
        if raw["x"] is not None and raw["pcost"] is not None:
            obj = raw["pcost"] * scale + prog._obj_const
        return status, obj, raw["x"]

    incumbent = None  # (objective, assignment dict)
    nodes_done = 0

    def try_incumbent(fixes):
        """Solve the continuous restriction under full binary fixes."""
        nonlocal incumbent
        status, obj, xv = node_solve(fixes)
        if status == "optimal" and \
                (incumbent is None or obj < incumbent[0] - 1e-12):
            incumbent = (obj, names_of(xv, fixes))

    # Root relaxation.
    status, obj, xv = node_solve({})
    nodes_done += 1
    if status == "infeasible":
        return SolveResult("infeasible", math.inf, {}, math.inf, math.inf, 1)
    if status == "unbounded":
        return SolveResult("unbounded", -math.inf, {}, math.inf, math.nan, 1)
    if xv is None:
        return SolveResult("gap-limit", math.inf, {}, math.inf, math.inf, 1)

    counter = 0
    heap = []  # (bound, counter, fixes, frac_x)
    heapq.heappush(heap, (obj if obj is not None else -math.inf,
                          counter, {}, xv))

    def rel_gap():
        if incumbent is None:
            return math.inf
        lb = heap[0][0] if heap else incumbent[0]
        return max(0.0, incumbent[0] - lb) / max(1.0, abs(incumbent[0]))

    while heap:
        bound, _, fixes, xv = heapq.heappop(heap)
        if trace is not None:
            trace.append((bound, math.inf if incumbent is None
                          else incumbent[0]))
        if incumbent is not None and \
                bound >= incumbent[0] - cfg.mip_gap * max(1.0, abs(incumbent[0])):
            heapq.heappush(heap, (bound, counter + 10 ** 9, fixes, xv))
            break  # best-bound order: nothing left can improve enough
        if nodes_done >= cfg.node_limit or timed_out():
            heapq.heappush(heap, (bound, counter + 10 ** 9, fixes, xv))
            break

        # Choose the most fractional binary; integral point = incumbent.
        best_j, best_frac = None, cfg.int_tol
        for j in binaries:
            if j in fixes:
                continue
            frac = min(xv[j], 1.0 - xv[j])
            if frac > best_frac:
                best_j, best_frac = j, frac
        if best_j is None:
            full = dict(fixes)
            for j in binaries:
                if j not in full:
                    full[j] = 1.0 if xv[j] > 0.5 else 0.0
            try_incumbent(full)
            continue

        if nodes_done == 1 or nodes_done % 10 == 0:
            try_incumbent(_heuristic_fixes(prog, xv, cfg.int_tol))
            if incumbent is not None and bound >= incumbent[0] - \
                    cfg.mip_gap * max(1.0, abs(incumbent[0])):
                heapq.heappush(heap, (bound, counter + 10 ** 9, fixes, xv))
                break  # heuristic already within gap of this bound

        for val in (0.0, 1.0):
            child = dict(fixes)
            child[best_j] = val
            status, cobj, cxv = node_solve(child)
            nodes_done += 1
            if status == "infeasible" or cxv is None:
                continue
            cbound = cobj if status == "optimal" else bound
            if incumbent is not None and cbound >= incumbent[0] - \
                    cfg.mip_gap * max(1.0, abs(incumbent[0])):
                continue
            counter += 1
            heapq.heappush(heap, (max(cbound, bound), counter, child, cxv))

    gap = rel_gap()
    if incumbent is None:
        return SolveResult("gap-limit", math.inf, {}, math.inf, math.inf,
                           nodes_done)
    xs = incumbent[1]
    status = "optimal" if gap <= cfg.mip_gap else "gap-limit"
    return SolveResult(status, incumbent[0], xs, gap,
                       max_residual(prog, xs), nodes_done)
