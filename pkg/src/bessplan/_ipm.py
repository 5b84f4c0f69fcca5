"""Reference primal-dual interior-point solver for cone programs.

Solves
    minimize    c'x
    subject to  G x + s = h,   s in K
                A x = b
where K is a product of a nonnegative orthant of dimension l and
second-order cones of sizes q = [q_0, q_1, ...].

The method is the homogeneous self-dual embedding with Nesterov-Todd
scaling and a Mehrotra predictor-corrector step (the standard conelp
algorithm). Only 'l' and 'q' cones are supported; that is all the
planning models need. Fully deterministic: plain LU factorizations,
no randomization, no threading.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

STEP = 0.99
EXPON = 3
_TRACE = False

# Iterations without any merit improvement before the endgame is
# declared dead and the best iterate returned. Only armed once the best
# merit is already small: far from convergence a flat merit usually
# means an infeasibility certificate is still forming, not a plateau.
_PATIENCE = 8
_PATIENCE_ARM = 1e-3

# KKT systems at or below this size are solved dense.
_DENSE_LIMIT = 700

# Static quasidefinite shift applied to the sparse KKT diagonal so that
# pure diagonal pivoting never meets a zero pivot; solves refine the
# shift back out against the unshifted matrix.
_KKT_REG = 1e-8


class Cones:
    """Layout of K = R+^l x Q^{q_0} x ... with q blocks grouped by size.

    groups[m] is an (nblocks, m) index matrix gathering every cone of
    size m, so all Jordan-algebra operations vectorize per group.
    """

    def __init__(self, l, q):
        self.l = int(l)
        self.q = [int(m) for m in q]
        if self.l < 0 or any(m < 2 for m in self.q):
            raise ValueError("cone dims must have l >= 0 and q blocks >= 2")
        self.cdim = self.l + sum(self.q)
        self.degree = self.l + len(self.q)
        by_size = {}
        start = self.l
        heads = []
        for m in self.q:
            by_size.setdefault(m, []).append(start)
            heads.append(start)
            start += m
        self.heads = np.array(heads, dtype=np.intp)
        self.groups = {
            m: np.asarray(starts, dtype=np.intp)[:, None] + np.arange(m)
            for m, starts in sorted(by_size.items())
        }

    # -- elementary Jordan ops ------------------------------------------

    def sprod(self, x, y):
        """x o y."""
        out = np.empty(self.cdim)
        l = self.l
        out[:l] = x[:l] * y[:l]
        for idx in self.groups.values():
            X, Y = x[idx], y[idx]
            out[idx[:, 0]] = np.einsum("bi,bi->b", X, Y)
            out[idx[:, 1:]] = Y[:, :1] * X[:, 1:] + X[:, :1] * Y[:, 1:]
        return out

    def ssqr(self, y):
        """y o y."""
        out = np.empty(self.cdim)
        l = self.l
        out[:l] = y[:l] ** 2
        for idx in self.groups.values():
            Y = y[idx]
            out[idx[:, 0]] = np.einsum("bi,bi->b", Y, Y)
            out[idx[:, 1:]] = 2.0 * Y[:, :1] * Y[:, 1:]
        return out

    def sinv(self, x, y):
        """Solve y o z = x for z."""
        out = np.empty(self.cdim)
        l = self.l
        out[:l] = x[:l] / y[:l]
        for idx in self.groups.values():
            X, Y = x[idx], y[idx]
            aa = self._jsq(Y)
            cc = X[:, 0]
            dd = np.einsum("bi,bi->b", Y[:, 1:], X[:, 1:])
            out[idx[:, 0]] = (cc * Y[:, 0] - dd) / aa
            out[idx[:, 1:]] = (X[:, 1:] / Y[:, 0:1]
                               + ((dd / Y[:, 0] - cc) / aa)[:, None] * Y[:, 1:])
        return out

    @staticmethod
    def _jsq(X):
        """x0^2 - ||x1||^2 per row, clipped at zero."""
        return np.maximum(
            X[:, 0] ** 2 - np.einsum("bi,bi->b", X[:, 1:], X[:, 1:]), 0.0)

    def max_step(self, x):
        """min alpha such that x + alpha*e is in K, as a max of -x parts."""
        cands = []
        if self.l:
            cands.append(-x[:self.l].min())
        for idx in self.groups.values():
            X = x[idx]
            cands.append(
                (np.linalg.norm(X[:, 1:], axis=1) - X[:, 0]).max())
        return max(cands)

    def scale2(self, lmbda, x, inverse=False):
        """x := H(lambda^{1/2}) x, or H(lambda^{-1/2}) x when inverse."""
        out = x.copy()
        l = self.l
        if inverse:
            out[:l] *= lmbda[:l]
        else:
            out[:l] /= lmbda[:l]
        for idx in self.groups.values():
            L, X = lmbda[idx], x[idx]
            a = np.sqrt(self._jsq(L))
            if inverse:
                lx = np.einsum("bi,bi->b", L, X) / a
            else:
                lx = (L[:, 0] * X[:, 0]
                      - np.einsum("bi,bi->b", L[:, 1:], X[:, 1:])) / a
            x0 = X[:, 0].copy()
            cc = (lx + x0) / (L[:, 0] / a + 1.0) / a
            if not inverse:
                cc = -cc
            Xn = X.copy()
            Xn[:, 0] = lx
            Xn[:, 1:] += cc[:, None] * L[:, 1:]
            Xn *= (a if inverse else 1.0 / a)[:, None]
            out[idx] = Xn
        return out

    # -- Nesterov-Todd scaling ------------------------------------------

    def identity_w(self):
        return {
            "d": np.ones(self.l),
            "di": np.ones(self.l),
            "beta": {m: np.ones(idx.shape[0]) for m, idx in self.groups.items()},
            "v": {m: np.hstack([np.ones((idx.shape[0], 1)),
                                np.zeros((idx.shape[0], m - 1))])
                  for m, idx in self.groups.items()},
        }

    def compute_scaling(self, s, z):
        """Initial W with W^{-T} s = W z = lambda; returns (W, lambda)."""
        lmbda = np.empty(self.cdim)
        l = self.l
        d = np.sqrt(s[:l] / z[:l])
        lmbda[:l] = np.sqrt(s[:l] * z[:l])
        W = {"d": d, "di": 1.0 / d, "beta": {}, "v": {}}
        for m, idx in self.groups.items():
            S, Z = s[idx], z[idx]
            aa = np.sqrt(self._jsq(S))
            bb = np.sqrt(self._jsq(Z))
            W["beta"][m] = np.sqrt(aa / bb)
            Sb = S / aa[:, None]
            Zb = Z / bb[:, None]
            cc = np.sqrt((1.0 + np.einsum("bi,bi->b", Sb, Zb)) / 2.0)
            V = Sb.copy()
            V[:, 0] += Zb[:, 0]
            V[:, 1:] -= Zb[:, 1:]
            V /= (2.0 * cc)[:, None]
            dd = 2.0 * cc + Sb[:, 0] + Zb[:, 0]
            lam = np.empty_like(S)
            lam[:, 0] = cc
            lam[:, 1:] = ((cc + Zb[:, 0])[:, None] * Sb[:, 1:]
                          + (cc + Sb[:, 0])[:, None] * Zb[:, 1:]) / dd[:, None]
            lam *= np.sqrt(aa * bb)[:, None]
            lmbda[idx] = lam
            V[:, 0] += 1.0
            V /= np.sqrt(2.0 * V[:, 0])[:, None]
            W["v"][m] = V
        return W, lmbda

    def update_scaling(self, W, lmbda, s, z):
        """Rank-two NT update from the new scaled iterates s, z (modified)."""
        l = self.l
        sl = np.sqrt(s[:l])
        zl = np.sqrt(z[:l])
        W["d"] *= sl / zl
        W["di"] = 1.0 / W["d"]
        lmbda[:l] = sl * zl
        for m, idx in self.groups.items():
            S, Z, V = s[idx], z[idx], W["v"][m]
            aa = np.sqrt(self._jsq(S))
            S = S / aa[:, None]
            bb = np.sqrt(self._jsq(Z))
            Z = Z / bb[:, None]
            cc = np.sqrt((1.0 + np.einsum("bi,bi->b", S, Z)) / 2.0)
            vs = np.einsum("bi,bi->b", V, S)
            vz = V[:, 0] * Z[:, 0] - np.einsum("bi,bi->b", V[:, 1:], Z[:, 1:])
            vq = (vs + vz) / (2.0 * cc)
            vu = vs - vz
            wk0 = 2.0 * V[:, 0] * vq - (S[:, 0] + Z[:, 0]) / (2.0 * cc)
            dd = (V[:, 0] * vu - S[:, 0] / 2.0 + Z[:, 0] / 2.0) / (wk0 + 1.0)
            lam = np.empty((idx.shape[0], m))
            lam[:, 0] = cc
            lam[:, 1:] = (2.0 * (-dd * vq + 0.5 * vu)[:, None] * V[:, 1:]
                          + (0.5 * (1.0 - dd / cc))[:, None] * S[:, 1:]
                          + (0.5 * (1.0 + dd / cc))[:, None] * Z[:, 1:])
            lam *= np.sqrt(aa * bb)[:, None]
            lmbda[idx] = lam
            V *= (2.0 * vq)[:, None]
            V[:, 0] -= S[:, 0] / (2.0 * cc)
            V[:, 1:] += (0.5 / cc)[:, None] * S[:, 1:]
            V -= (0.5 / cc)[:, None] * Z
            V[:, 0] += 1.0
            V /= np.sqrt(2.0 * V[:, 0])[:, None]
            W["beta"][m] *= np.sqrt(aa / bb)

    def scale_w(self, W, x, inverse=False):
        """W x (or W^{-1} x). W is symmetric for 'l' and 'q' cones."""
        out = x.copy()
        l = self.l
        out[:l] *= W["di"] if inverse else W["d"]
        for m, idx in self.groups.items():
            V = W["v"][m]
            beta = W["beta"][m]
            X = x[idx]
            U = V if not inverse else np.hstack([V[:, :1], -V[:, 1:]])
            ux = np.einsum("bi,bi->b", U, X)
            JX = np.hstack([X[:, :1], -X[:, 1:]])
            Y = 2.0 * U * ux[:, None] - JX
            Y *= (1.0 / beta if inverse else beta)[:, None]
            out[idx] = Y
        return out

    def binv_parts(self, W):
        """(W'W)^{-1} as a dense diagonal for 'l' plus per-group blocks."""
        dl2 = W["di"] ** 2
        blocks = {}
        for m, idx in self.groups.items():
            V = W["v"][m]
            beta = W["beta"][m]
            U = np.hstack([V[:, :1], -V[:, 1:]])  # u = J v
            uu = np.einsum("bi,bi->b", U, U)
            blk = (4.0 * uu[:, None, None] * U[:, :, None] * U[:, None, :]
                   - 2.0 * U[:, :, None] * V[:, None, :]
                   - 2.0 * V[:, :, None] * U[:, None, :]
                   + np.eye(m)[None, :, :])
            blk /= (beta ** 2)[:, None, None]
            blocks[m] = blk
        return dl2, blocks


def _kkt_dense(G, A, cone):
    """Factor-and-solve closure for [H A'; A 0], H = G'(W'W)^{-1}G, dense."""
    Gd = G.toarray()
    Ad = A.toarray()
    n = Gd.shape[1]
    p = Ad.shape[0]

    def factor(W):
        dl2, blocks = cone.binv_parts(W)
        BG = np.empty_like(Gd)
        BG[:cone.l] = Gd[:cone.l] * dl2[:, None]
        for m, idx in cone.groups.items():
            BG[idx] = np.einsum("bij,bjn->bin", blocks[m], Gd[idx])
        K = np.zeros((n + p, n + p))
        K[:n, :n] = Gd.T @ BG
        K[:n, n:] = Ad.T
        K[n:, :n] = Ad
        try:
            lu, piv = scipy.linalg.lu_factor(K, check_finite=False)
        except (ValueError, scipy.linalg.LinAlgError):
            raise ArithmeticError("singular KKT matrix") from None
        diag = np.abs(np.diag(lu))
        if not np.all(np.isfinite(lu)) or diag.min() <= diag.max() * 1e-300:
            raise ArithmeticError("singular KKT matrix")

        def solve(bx, by, bz):
            rhs = np.concatenate([bx + BG.T @ bz, by])
            sol = scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)
            x, y = sol[:n], sol[n:]
            zhat = cone.scale_w(W, Gd @ x - bz, inverse=True)
            return x, y, zhat

        return solve

    return factor


def _kkt_sparse(G, A, cone):
    """Same contract as _kkt_dense using a sparse LU of the KKT system.

    The KKT matrix [[H, A'], [A, 0]] is symmetric with an empty trailing
    block. Threshold row pivoting on ill-conditioned iterates wrecks the
    fill-reducing ordering (observed: minutes instead of ~0.1s on a week
    horizon), so instead the matrix gets a static quasidefinite shift
    (+delta on the H block, -delta on the empty block), pivoting is
    pinned to the diagonal, and every solve polishes the shift away by
    iterative refinement against the unshifted matrix.
    """
    G = G.tocsr()
    A = A.tocsr()
    n = G.shape[1]
    p = A.shape[0]
    # (W'W)^{-1} sparsity pattern is fixed: diagonal 'l' entries plus one
    # dense block per q cone.
    rows = [np.arange(cone.l)]
    cols = [np.arange(cone.l)]
    for m, idx in cone.groups.items():
        rows.append(np.repeat(idx, m, axis=1).ravel())
        cols.append(np.tile(idx, (1, m)).ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shift = sp.diags(np.concatenate([np.full(n, _KKT_REG),
                                     np.full(p, -_KKT_REG)])).tocsc()
    # Most recent partial-pivoting factorization, shared across iterates:
    # near convergence the scaling moves slowly, so a stale accurate LU
    # still preconditions refinement on the current matrix and saves the
    # expensive rebuild.
    cache = {"lu": None, "mine": None}

    def factor(W):
        dl2, blocks = cone.binv_parts(W)
        data = [dl2] + [blocks[m].ravel() for m in cone.groups]
        Binv = sp.coo_matrix((np.concatenate(data), (rows, cols)),
                             shape=(cone.cdim, cone.cdim)).tocsr()
        BG = Binv @ G
        H = (G.T @ BG).tocsc()
        K = sp.bmat([[H, A.T], [A, None]], format="csc")
        if not np.all(np.isfinite(K.data)):
            raise ArithmeticError("singular KKT matrix")
        try:
            fast = spla.splu(K + shift, permc_spec="MMD_AT_PLUS_A",
                             diag_pivot_thresh=0.0,
                             options={"SymmetricMode": True})
        except RuntimeError:
            fast = None
        if fast is None:
            try:
                fast = spla.splu(K)
            except RuntimeError:
                raise ArithmeticError("singular KKT matrix") from None
        # Sticky accuracy escalation: once the partial-pivoting path beat
        # the diagonal-pivot factor for this matrix, later solves of the
        # same factorization skip the doomed fast attempt.
        me = object()
        state = {"slow_first": False}

        def refine(lu, rhs, sol):
            best = None
            for _ in range(4):
                r = rhs - K @ sol
                rn = float(np.linalg.norm(r))
                if best is None or rn < best[1]:
                    best = (sol, rn)
                else:
                    break
                if not np.isfinite(rn) or rn == 0.0:
                    break
                sol = sol + lu.solve(r)
            return best

        def solve(bx, by, bz):
            rhs = np.concatenate([bx + BG.T @ bz, by])
            tol = 1e-9 * max(1.0, float(np.linalg.norm(rhs)))
            sol, rn = None, math.inf
            if not state["slow_first"]:
                sol, rn = refine(fast, rhs, fast.solve(rhs))
            if not rn <= tol:
                for _ in (0, 1):
                    lu = cache["lu"]
                    if lu is not None:
                        s2, r2 = refine(lu, rhs, lu.solve(rhs))
                        if sol is None or (np.isfinite(r2) and r2 < rn):
                            sol, rn = s2, r2
                            state["slow_first"] = True
                    if rn <= tol or cache["mine"] is me:
                        break
                    try:
                        cache["lu"] = spla.splu(K)
                        cache["mine"] = me
                    except RuntimeError:
                        break
            if sol is None:
                sol, rn = refine(fast, rhs, fast.solve(rhs))
            x, y = sol[:n], sol[n:]
            zhat = cone.scale_w(W, G @ x - bz, inverse=True)
            return x, y, zhat

        return solve

    return factor


def _equilibrate(G, A, cone, rounds=8):
    """Ruiz row/column equilibration of the stacked [G; A] matrix.

    All rows of one second-order cone share a single factor (a cone is
    invariant only under uniform positive scaling); orthant rows and
    equality rows scale individually. Returns (Gs, As, dc, drg, dra)
    with Gs = diag(drg) G diag(dc) and As = diag(dra) A diag(dc).
    """
    n, p = G.shape[1], A.shape[0]
    drg = np.ones(cone.cdim)
    dra = np.ones(p)
    dc = np.ones(n)
    Gs = G.copy().tocsr()
    As = A.copy().tocsr()
    for _ in range(rounds):
        aG = Gs.copy()
        aG.data = np.abs(aG.data)
        aA = As.copy()
        aA.data = np.abs(aA.data)
        rg = aG.max(axis=1).toarray().ravel()
        for _, idx in cone.groups.items():
            rg[idx] = rg[idx].max(axis=1)[:, None]
        ra = aA.max(axis=1).toarray().ravel() if p else np.zeros(0)
        cmax = aG.max(axis=0).toarray().ravel()
        if p:
            cmax = np.maximum(cmax, aA.max(axis=0).toarray().ravel())
        spread = [v for v in (rg, ra, cmax) if v.size]
        if max(float(np.abs(np.log(np.where(v > 0, v, 1.0))).max())
               for v in spread) < 0.05:
            break
        fg = 1.0 / np.sqrt(np.where(rg > 0, rg, 1.0))
        fa = 1.0 / np.sqrt(np.where(ra > 0, ra, 1.0))
        fc = 1.0 / np.sqrt(np.where(cmax > 0, cmax, 1.0))
        Gs = sp.diags(fg) @ Gs @ sp.diags(fc)
        if p:
            As = sp.diags(fa) @ As @ sp.diags(fc)
        drg *= fg
        dra *= fa
        dc *= fc
    return Gs.tocsr(), As.tocsr(), dc, drg, dra


def conelp(c, G, h, dims, A, b, feastol=1e-8, abstol=1e-8, reltol=1e-8,
           maxiters=100, refinement=None):
    """Solve the cone LP; returns a dict with status and iterates.

    status is 'optimal', 'primal infeasible', 'dual infeasible' or
    'unknown'. For 'optimal'/'unknown' the primal x, s and dual y, z are
    returned unscaled; infeasibility certificates replace them otherwise.
    The problem data is Ruiz-equilibrated internally; the reported pres
    and dres refer to the scaled system, while x, y, s, z and the cost
    values are always in original units. refinement counts the Newton
    correction rounds per step; None picks 2 on the dense path and 1 on
    the sparse path, whose KKT solves self-refine already.

    The endgame of the embedding can break down in floating point one or
    two iterations past the requested tolerances; intermediate overflow
    there is expected, handled by the stall guard, and must not warn.
    """
    old = np.seterr(divide="ignore", invalid="ignore", over="ignore")
    try:
        return _conelp(c, G, h, dims, A, b, feastol, abstol, reltol,
                       maxiters, refinement)
    finally:
        np.seterr(**old)


def _conelp(c, G, h, dims, A, b, feastol, abstol, reltol, maxiters,
            refinement):
    c = np.asarray(c, dtype=float)
    h = np.asarray(h, dtype=float)
    b = np.asarray(b, dtype=float)
    G = sp.csr_matrix(G)
    A = sp.csr_matrix(A) if A is not None else sp.csr_matrix((0, len(c)))
    cone = Cones(dims.get("l", 0), dims.get("q", ()))
    n, p = len(c), A.shape[0]
    if G.shape != (cone.cdim, n):
        raise ValueError("G shape does not match dims and c")
    if cone.cdim == 0:
        raise ValueError("empty cone")

    dense = n + p <= _DENSE_LIMIT
    if dense:
        # small systems solve accurately as-is; skipping the scaling
        # keeps their results bit-stable
        dc, drg, dra = np.ones(n), np.ones(cone.cdim), np.ones(p)
    else:
        G, A, dc, drg, dra = _equilibrate(G, A, cone)
        c = c * dc
        h = h * drg
        b = b * dra
    if refinement is None:
        refinement = 2 if dense else 1
    factor = (_kkt_dense if dense else _kkt_sparse)(G, A, cone)
    GT, AT = G.T.tocsr(), A.T.tocsr()

    resx0 = max(1.0, np.linalg.norm(c))
    resy0 = max(1.0, np.linalg.norm(b))
    resz0 = max(1.0, np.linalg.norm(h))

    def result(status, x, y, s, z, **kw):
        out = {"status": status,
               "x": None if x is None else x * dc,
               "y": None if y is None else y * dra,
               "s": None if s is None else s / drg,
               "z": None if z is None else z * drg,
               "iterations": kw.pop("iterations", 0)}
        out.update(kw)
        return out

    # Initial point from two least-squares solves with W = I.
    try:
        f0 = factor(cone.identity_w())
    except ArithmeticError:
        raise ValueError("Rank(A) < p or Rank([G; A]) < n") from None
    x, _, zh = f0(np.zeros(n), b.copy(), h.copy())
    s = -zh
    ts = cone.max_step(s)
    if ts >= -1e-8 * max(1.0, np.linalg.norm(s)):
        a = 1.0 + ts
        s[:cone.l] += a
        s[cone.heads] += a
    _, y, z = f0(-c, np.zeros(p), np.zeros(cone.cdim))
    tz = cone.max_step(z)
    if tz >= -1e-8 * max(1.0, np.linalg.norm(z)):
        a = 1.0 + tz
        z[:cone.l] += a
        z[cone.heads] += a

    tau, kappa = 1.0, 1.0
    gap = float(s @ z)
    W = lmbda = lg = dg = dgi = None
    pcost = dcost = relgap = pres = dres = None
    pinfres = dinfres = None
    best = None  # (merit, kwargs of the best near-feasible iterate)
    last_gain = 0

    for iters in range(maxiters + 1):
        # Unscaled residuals of the self-dual embedding.
        hrx = -(AT @ y) - (GT @ z)
        hresx = np.linalg.norm(hrx)
        rx = hrx - c * tau
        resx = np.linalg.norm(rx) / tau
        hry = A @ x
        hresy = np.linalg.norm(hry)
        ry = hry - b * tau
        resy = np.linalg.norm(ry) / tau
        hrz = s + G @ x
        hresz = np.linalg.norm(hrz)
        rz = hrz - h * tau
        resz = np.linalg.norm(rz) / tau

        cx = float(c @ x)
        by = float(b @ y)
        hz = float(h @ z)
        rt = kappa + cx + by + hz

        pcost = cx / tau
        dcost = -(by + hz) / tau
        if pcost < 0.0:
            relgap = gap / -pcost
        elif dcost > 0.0:
            relgap = gap / dcost
        else:
            relgap = None
        pres = max(resy / resy0, resz / resz0)
        dres = resx / resx0
        pinfres = (hresx / resx0 / (-hz - by)) if hz + by < 0.0 else None
        dinfres = (max(hresy / resy0, hresz / resz0) / -cx) if cx < 0.0 else None

        if _TRACE:
            print(f"it {iters:3d} pcost {pcost:+.6e} dcost {dcost:+.6e} "
                  f"gap {gap:.2e} pres {pres:.2e} dres {dres:.2e} "
                  f"tau {tau:.2e} kappa {kappa:.2e}")
        if pres <= feastol and dres <= feastol and \
                (gap <= abstol or (relgap is not None and relgap <= reltol)):
            return result("optimal", x / tau, y / tau, s / tau, z / tau,
                          iterations=iters, pcost=pcost, dcost=dcost,
                          gap=gap, relgap=relgap, pres=pres, dres=dres)
        if pinfres is not None and pinfres <= feastol:
            scal = -hz - by
            return result("primal infeasible", None, y / scal, None, z / scal,
                          iterations=iters, pcost=None, dcost=1.0,
                          gap=None, relgap=None, pres=pres, dres=dres,
                          pinfres=pinfres)
        if dinfres is not None and dinfres <= feastol:
            return result("dual infeasible", x / -cx, None, s / -cx, None,
                          iterations=iters, pcost=-1.0, dcost=None,
                          gap=None, relgap=None, pres=pres, dres=dres,
                          dinfres=dinfres)

        # Track the most balanced iterate seen; once the search was nearly
        # converged, a large relapse or a dead plateau means numerical
        # breakdown, so stop instead of burning the remaining iterations.
        merit = max(pres, dres, relgap if relgap is not None else gap)
        bad = not np.isfinite(merit)
        snap = dict(iterations=iters, pcost=pcost, dcost=dcost, gap=gap,
                    relgap=relgap, pres=pres, dres=dres)
        if best is None or (not bad and merit < best[0]):
            best = (merit, (x / tau, y / tau, s / tau, z / tau), snap)
            last_gain = iters
        stalled = bad or (best[0] <= 1e-6 and merit > 1e4 * best[0]) \
            or (best[0] <= _PATIENCE_ARM and iters - last_gain >= _PATIENCE)
        if iters == maxiters or stalled:
            bs = best[2]
            near = bs["pres"] <= 100 * feastol and bs["dres"] <= 100 * feastol \
                and (bs["gap"] <= 100 * abstol or
                     (bs["relgap"] is not None and bs["relgap"] <= 100 * reltol))
            return result("optimal" if near else "unknown",
                          *best[1], **bs)

        # Nesterov-Todd scaling of the current iterate.
        if iters == 0:
            W, lmbda = cone.compute_scaling(s, z)
            dg = math.sqrt(kappa / tau)
            dgi = math.sqrt(tau / kappa)
            lg = math.sqrt(tau * kappa)
        try:
            f3 = factor(W)
        except ArithmeticError:
            return result("unknown", x / tau, y / tau, s / tau, z / tau,
                          iterations=iters, pcost=pcost, dcost=dcost,
                          gap=gap, relgap=relgap, pres=pres, dres=dres)
        x1, y1, z1 = f3(-c, b.copy(), h.copy())
        x1 *= dgi
        y1 *= dgi
        z1 *= dgi
        th = cone.scale_w(W, h, inverse=True)
        z1z1 = float(z1 @ z1)

        def f6_no_ir(bx, by_, bz, btau, bs, bkappa):
            # See the conelp references: solves the scaled Newton system
            # with the homogenizing (tau, kappa) row folded in.
            uy = -by_
            us = -cone.sinv(bs, lmbda)
            uz = -(bz + cone.scale_w(W, us))
            ux, uy, uz = f3(bx, uy, uz)
            ukappa = -bkappa / lg
            utau = btau + ukappa / dgi
            utau = dgi * (utau + float(c @ ux) + float(b @ uy)
                          + float(th @ uz)) / (1.0 + z1z1)
            ux = ux + utau * x1
            uy = uy + utau * y1
            uz = uz + utau * z1
            us = us - uz
            ukappa -= utau
            return ux, uy, uz, utau, us, ukappa

        def f6(bx, by_, bz, btau, bs, bkappa):
            ux, uy, uz, utau, us, ukappa = f6_no_ir(
                bx, by_, bz, btau, bs, bkappa)
            for _ in range(refinement):
                # residual of the Newton system at the current solution
                wz = cone.scale_w(W, uz, inverse=True)
                vx = bx - (AT @ uy) - (GT @ wz) - c * (utau / dg)
                vy = by_ + A @ ux - b * (utau / dg)
                vz = bz + G @ ux - h * (utau / dg) + cone.scale_w(W, us)
                vtau = btau + dg * ukappa + float(c @ ux) + float(b @ uy) \
                    + float(h @ wz)
                vs = bs + cone.sprod(lmbda, uz + us)
                vkappa = bkappa + lg * (utau + ukappa)
                dx_, dy_, dz_, dtau_, ds_, dk_ = f6_no_ir(
                    vx, vy, vz, vtau, vs, vkappa)
                ux = ux + dx_
                uy = uy + dy_
                uz = uz + dz_
                utau += dtau_
                us = us + ds_
                ukappa += dk_
            return ux, uy, uz, utau, us, ukappa

        lmbdasq = cone.ssqr(lmbda)
        lgsq = lg * lg
        mu = (float(lmbda @ lmbda) + lgsq) / (1 + cone.degree)
        sigma = 0.0
        ws3 = None
        wkappa3 = 0.0
        for i in (0, 1):
            ds = lmbdasq.copy()
            dkappa = lgsq
            if i == 1:
                ds += ws3
                ds[:cone.l] -= sigma * mu
                ds[cone.heads] -= sigma * mu
                dkappa += wkappa3 - sigma * mu
            dx = (1.0 - sigma) * rx
            dy = (1.0 - sigma) * ry
            dz = (1.0 - sigma) * rz
            dtau = (1.0 - sigma) * rt
            dx, dy, dz, dtau, ds, dkappa = f6(dx, dy, dz, dtau, ds, dkappa)
            if i == 0:
                ws3 = cone.sprod(ds, dz)
                wkappa3 = dtau * dkappa
            ds = cone.scale2(lmbda, ds)
            dz = cone.scale2(lmbda, dz)
            ts = cone.max_step(ds)
            tz = cone.max_step(dz)
            tt = -dtau / lg
            tk = -dkappa / lg
            t = max(0.0, ts, tz, tt, tk)
            if t == 0.0:
                step = 1.0
            else:
                step = min(1.0, (1.0 if i == 0 else STEP) / t)
            if i == 0:
                sigma = (1.0 - step) ** EXPON

        x = x + step * dx
        y = y + step * dy

        # ds, dz become the updated iterates in the current scaling.
        ds = step * ds
        dz = step * dz
        ds[:cone.l] += 1.0
        dz[:cone.l] += 1.0
        ds[cone.heads] += 1.0
        dz[cone.heads] += 1.0
        ds = cone.scale2(lmbda, ds, inverse=True)
        dz = cone.scale2(lmbda, dz, inverse=True)

        cone.update_scaling(W, lmbda, ds, dz)
        dg *= math.sqrt(1.0 - step * tk) / math.sqrt(1.0 - step * tt)
        dgi = 1.0 / dg
        lg *= math.sqrt(1.0 - step * tt) * math.sqrt(1.0 - step * tk)

        s = cone.scale_w(W, lmbda)
        z = cone.scale_w(W, lmbda, inverse=True)
        kappa = lg / dgi
        tau = lg * dgi
        gap = (np.linalg.norm(lmbda) / tau) ** 2
