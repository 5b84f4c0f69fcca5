"""Radial feeder data model, topology queries, and load-profile storage.

Everything downstream (power-flow screening, storage planning, validation)
assumes the network loaded here is a tree rooted at a single slack bus.
Impedances are converted to per-unit at ingestion; load profiles are kept in
kW / kvar and converted by the model builders that need per-unit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np


class NetworkError(ValueError):
    """Raised for any malformed network document."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # "slack" or "pq"
    p_base_kw: float
    q_base_kvar: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r_pu: float
    x_pu: float
    i_sq_limit_pu: float | None = None  # squared-current cap, p.u.


_BUS_KEYS = {"id", "kind", "p_base_kw", "q_base_kvar"}
_BRANCH_KEYS = {"from", "to", "r_ohm", "x_ohm", "r_pu", "x_pu", "i_limit_a"}
_TOP_KEYS = {"buses", "branches", "bases", "limits", "name", "slack_voltage_pu"}


class Network:
    """Immutable rooted radial network.

    Branches are re-oriented parent -> child during construction (declaration
    order preserved). Index arrays use positional bus indices, not ids.

    Attributes
    ----------
    buses, branches : tuples of Bus / Branch (branches oriented downstream)
    ids : tuple of bus ids, file order
    idx : dict id -> position
    slack : positional index of the slack bus
    fidx, tidx : (m,) from/to positions per branch
    r, x : (m,) per-unit impedances
    parent, parent_branch, depth : (n,) rooted-tree arrays (-1 at slack)
    order : (n,) BFS order, parents before children
    down : tuple of (k,) arrays, branch indices leaving each bus
    p_base_kw, q_base_kvar : (n,) base demand
    """

    def __init__(self, name, buses, branches, s_base_mva, v_base_kv,
                 v_lower, v_upper, slack_voltage=1.0):
        self.name = name
        self.buses = tuple(buses)
        self.s_base_mva = float(s_base_mva)
        self.v_base_kv = float(v_base_kv)
        self.v_lower = float(v_lower)
        self.v_upper = float(v_upper)
        if np.ndim(slack_voltage) == 0:
            self.slack_voltage = float(slack_voltage)
        else:
            self.slack_voltage = _frozen(np.asarray(slack_voltage, dtype=float))

        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise NetworkError(f"duplicate ids: buses {dup} declared more than once")
        self.ids = tuple(ids)
        self.idx = {bid: i for i, bid in enumerate(ids)}

        slacks = [i for i, b in enumerate(self.buses) if b.kind == "slack"]
        if len(slacks) == 0:
            raise NetworkError("missing slack: no bus has kind 'slack'")
        if len(slacks) > 1:
            raise NetworkError(
                f"duplicate ids: more than one slack bus ({[ids[i] for i in slacks]})")
        self.slack = slacks[0]

        n = len(self.buses)
        m = len(branches)
        if m != n - 1:
            raise NetworkError(
                f"non-radial topology: {m} branches for {n} buses (need {n - 1})")

        for br in branches:
            if br.from_bus not in self.idx or br.to_bus not in self.idx:
                raise NetworkError(
                    f"unknown bus id in branch {br.from_bus}-{br.to_bus}")
            if br.from_bus == br.to_bus:
                raise NetworkError(f"non-radial topology: self-loop at bus {br.from_bus}")
            if br.r_pu < 0 or br.x_pu < 0:
                raise NetworkError(
                    f"negative impedance on branch {br.from_bus}-{br.to_bus}")
        pairs = {frozenset((br.from_bus, br.to_bus)) for br in branches}
        if len(pairs) != m:
            raise NetworkError("non-radial topology: parallel branch pair")

        # Root at the slack: BFS assigns each bus its parent and feeding branch.
        adj = [[] for _ in range(n)]
        for k, br in enumerate(branches):
            a, b = self.idx[br.from_bus], self.idx[br.to_bus]
            adj[a].append((b, k))
            adj[b].append((a, k))
        parent = np.full(n, -1, dtype=np.intp)
        parent_branch = np.full(n, -1, dtype=np.intp)
        depth = np.full(n, -1, dtype=np.intp)
        order = np.empty(n, dtype=np.intp)
        depth[self.slack] = 0
        order[0] = self.slack
        head, tail = 0, 1
        while head < tail:
            u = order[head]
            head += 1
            for v, k in adj[u]:
                if depth[v] < 0:
                    depth[v] = depth[u] + 1
                    parent[v] = u
                    parent_branch[v] = k
                    order[tail] = v
                    tail += 1
        if tail != n:
            missing = sorted(ids[i] for i in range(n) if depth[i] < 0)
            raise NetworkError(f"disconnected graph: unreachable buses {missing}")

        oriented = []
        for k, br in enumerate(branches):
            a, b = self.idx[br.from_bus], self.idx[br.to_bus]
            if parent[b] == a:
                oriented.append(br)
            else:
                oriented.append(Branch(br.to_bus, br.from_bus, br.r_pu, br.x_pu,
                                       br.i_sq_limit_pu))
        self.branches = tuple(oriented)
        self.fidx = _frozen(np.array([self.idx[br.from_bus] for br in oriented],
                                     dtype=np.intp))
        self.tidx = _frozen(np.array([self.idx[br.to_bus] for br in oriented],
                                     dtype=np.intp))
        self.r = _frozen(np.array([br.r_pu for br in oriented], dtype=float))
        self.x = _frozen(np.array([br.x_pu for br in oriented], dtype=float))
        self.i_sq_limit = _frozen(np.array(
            [np.nan if br.i_sq_limit_pu is None else br.i_sq_limit_pu
             for br in oriented], dtype=float))
        self.parent = _frozen(parent)
        self.parent_branch = _frozen(parent_branch)
        self.depth = _frozen(depth)
        self.order = _frozen(order)
        down = [[] for _ in range(n)]
        for k in range(m):
            down[self.fidx[k]].append(k)
        self.down = tuple(_frozen(np.array(d, dtype=np.intp)) for d in down)
        self.p_base_kw = _frozen(np.array([b.p_base_kw for b in self.buses]))
        self.q_base_kvar = _frozen(np.array([b.q_base_kvar for b in self.buses]))

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        return len(self.branches)

    def slack_v(self, hour_index):
        """Slack voltage magnitude (p.u.) for an absolute hour index."""
        if isinstance(self.slack_voltage, float):
            return self.slack_voltage
        if hour_index >= len(self.slack_voltage):
            raise NetworkError(
                f"slack voltage schedule shorter than horizon ({hour_index})")
        return float(self.slack_voltage[hour_index])

    def to_pu_power(self, kw):
        """kW (or kvar) to per-unit on the network power base."""
        return np.asarray(kw, dtype=float) / (1000.0 * self.s_base_mva)

    def downstream(self, bus_id):
        """Downstream neighbor set D(i), as bus ids."""
        i = self._pos(bus_id)
        return {self.ids[self.tidx[k]] for k in self.down[i]}

    def upstream(self, bus_id):
        """Upstream neighbor set U(i): the parent, empty at the slack."""
        i = self._pos(bus_id)
        p = self.parent[i]
        return set() if p < 0 else {self.ids[p]}

    def _pos(self, bus_id):
        try:
            return self.idx[bus_id]
        except KeyError:
            raise NetworkError(f"unknown bus id {bus_id}") from None


def _frozen(arr):
    arr.flags.writeable = False
    return arr


def load_network(document) -> Network:
    """Build a Network from a dict, a JSON string, or a path to a JSON file.

    Rejects (with distinct messages): non-radial topology, disconnected
    graphs, duplicate ids, and a missing slack bus.
    """
    doc = _as_dict(document)
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise NetworkError(f"unknown keys in network document: {sorted(unknown)}")
    for key in ("buses", "branches", "bases", "limits"):
        if key not in doc:
            raise NetworkError(f"network document missing '{key}'")
    bases = doc["bases"]
    if "s_mva" not in bases or "v_kv" not in bases:
        raise NetworkError("bases must give s_mva and v_kv")
    s_mva = float(bases["s_mva"])
    v_kv = float(bases["v_kv"])
    if s_mva <= 0 or v_kv <= 0:
        raise NetworkError("bases must be positive")
    z_base = v_kv ** 2 / s_mva  # ohm
    i_base_a = s_mva * 1e6 / (math.sqrt(3) * v_kv * 1e3)

    limits = doc["limits"]
    v_lo = float(limits.get("v_lower_pu", 0.95))
    v_hi = float(limits.get("v_upper_pu", 1.05))
    if not 0 < v_lo < v_hi:
        raise NetworkError("voltage limits must satisfy 0 < v_lower < v_upper")

    buses = []
    for rec in doc["buses"]:
        unknown = set(rec) - _BUS_KEYS
        if unknown:
            raise NetworkError(f"unknown bus keys: {sorted(unknown)}")
        kind = rec.get("kind", "pq")
        if kind not in ("slack", "pq", "load"):
            raise NetworkError(f"bus {rec.get('id')}: unknown kind '{kind}'")
        buses.append(Bus(id=rec["id"],
                         kind="slack" if kind == "slack" else "pq",
                         p_base_kw=float(rec.get("p_base_kw", 0.0)),
                         q_base_kvar=float(rec.get("q_base_kvar", 0.0))))

    branches = []
    for rec in doc["branches"]:
        unknown = set(rec) - _BRANCH_KEYS
        if unknown:
            raise NetworkError(f"unknown branch keys: {sorted(unknown)}")
        r = _impedance(rec, "r", z_base)
        x = _impedance(rec, "x", z_base)
        lim = rec.get("i_limit_a")
        lim_pu = None if lim is None else (float(lim) / i_base_a) ** 2
        branches.append(Branch(rec["from"], rec["to"], r, x, lim_pu))

    return Network(doc.get("name", ""), buses, branches, s_mva, v_kv,
                   v_lo, v_hi, doc.get("slack_voltage_pu", 1.0))


def _impedance(rec, which, z_base):
    ohm, pu = rec.get(which + "_ohm"), rec.get(which + "_pu")
    if (ohm is None) == (pu is None):
        raise NetworkError(
            f"branch {rec.get('from')}-{rec.get('to')}: give exactly one of "
            f"{which}_ohm / {which}_pu")
    return float(pu) if ohm is None else float(ohm) / z_base


def _as_dict(document):
    if isinstance(document, dict):
        return document
    if isinstance(document, Path):
        return json.loads(document.read_text())
    if isinstance(document, str):
        s = document.lstrip()
        if s.startswith("{"):
            return json.loads(document)
        return json.loads(Path(document).read_text())
    raise NetworkError(f"cannot load network from {type(document).__name__}")


def load_bundled(name) -> Network:
    """Load a packaged fixture: 'ieee33' or 'ieee69'."""
    ref = resources.files("bessplan.data").joinpath(f"{name}.json")
    return load_network(json.loads(ref.read_text()))


def electrical_distance(net: Network, a, b) -> float:
    """Sum of |r + jx| over the unique a-b tree path, p.u.

    Per-branch magnitudes are summed (not the magnitude of the complex sum)
    so the metric is exactly additive along any path, which the selection
    logic relies on.
    """
    i, j = net._pos(a), net._pos(b)
    zm = np.hypot(net.r, net.x)
    d = 0.0
    while net.depth[i] > net.depth[j]:
        d += zm[net.parent_branch[i]]
        i = net.parent[i]
    while net.depth[j] > net.depth[i]:
        d += zm[net.parent_branch[j]]
        j = net.parent[j]
    while i != j:
        d += zm[net.parent_branch[i]] + zm[net.parent_branch[j]]
        i, j = net.parent[i], net.parent[j]
    return d


def leaf_buses(net: Network) -> set:
    """All non-slack buses of degree 1, as bus ids."""
    deg = np.zeros(net.n_bus, dtype=int)
    np.add.at(deg, net.fidx, 1)
    np.add.at(deg, net.tidx, 1)
    return {net.ids[i] for i in range(net.n_bus)
            if deg[i] == 1 and i != net.slack}


class LoadProfileSet:
    """Hourly demand series per bus, stored in kW / kvar.

    horizon : (H,) numpy datetime64[h], strictly increasing, hourly spacing
    bus_ids : tuple of covered bus ids (columns)
    p_kw, q_kvar : (H, len(bus_ids)) arrays
    """

    def __init__(self, horizon, bus_ids, p_kw, q_kvar):
        horizon = np.asarray(horizon, dtype="datetime64[h]")
        p_kw = np.asarray(p_kw, dtype=float)
        q_kvar = np.asarray(q_kvar, dtype=float)
        if horizon.ndim != 1 or len(horizon) == 0:
            raise ValueError("horizon must be a non-empty 1-d timestamp array")
        steps = np.diff(horizon).astype("timedelta64[h]").astype(int)
        if len(steps) and not np.all(steps == 1):
            raise ValueError("horizon must be strictly increasing with hourly spacing")
        if len(set(bus_ids)) != len(bus_ids):
            raise ValueError("duplicate bus ids in profile set")
        if p_kw.shape != (len(horizon), len(bus_ids)) or q_kvar.shape != p_kw.shape:
            raise ValueError("profile arrays must be (hours, buses)")
        self.horizon = _frozen(horizon)
        self.bus_ids = tuple(bus_ids)
        self.p_kw = _frozen(p_kw.copy())
        self.q_kvar = _frozen(q_kvar.copy())
        self._col = {bid: j for j, bid in enumerate(self.bus_ids)}

    @property
    def n_hours(self):
        return len(self.horizon)

    @classmethod
    def constant(cls, net: Network, start, hours):
        """Replicate the network base demand over an hourly horizon."""
        horizon = np.datetime64(start, "h") + np.arange(hours)
        p = np.tile(net.p_base_kw, (hours, 1))
        q = np.tile(net.q_base_kvar, (hours, 1))
        return cls(horizon, net.ids, p, q)

    def aligned(self, net: Network):
        """(P, Q) kW arrays of shape (H, n_bus) in network bus order.

        Every non-slack network bus must be covered; the slack bus, if
        absent from the set, gets zero demand.
        """
        P = np.zeros((self.n_hours, net.n_bus))
        Q = np.zeros_like(P)
        for i, bid in enumerate(net.ids):
            j = self._col.get(bid)
            if j is None:
                if i != net.slack:
                    raise ValueError(f"profile set missing non-slack bus {bid}")
                continue
            P[:, i] = self.p_kw[:, j]
            Q[:, i] = self.q_kvar[:, j]
        return P, Q

    def window(self, start, end):
        """Contiguous sub-horizon [start, end) by timestamp."""
        t0 = np.datetime64(start, "h")
        t1 = np.datetime64(end, "h")
        mask = (self.horizon >= t0) & (self.horizon < t1)
        if not mask.any():
            raise ValueError(f"window [{start}, {end}) outside horizon")
        return LoadProfileSet(self.horizon[mask], self.bus_ids,
                              self.p_kw[mask], self.q_kvar[mask])

    def hour_index(self, ts):
        """Position of a timestamp in the horizon."""
        t = np.datetime64(ts, "h")
        k = int(np.searchsorted(self.horizon, t))
        if k >= self.n_hours or self.horizon[k] != t:
            raise ValueError(f"timestamp {ts} not in horizon")
        return k

    @classmethod
    def from_csv(cls, path):
        """Read delimited rows (timestamp, bus_id, p_kw, q_kvar).

        Rows may be in any order; every bus present must cover the same
        full set of timestamps.
        """
        stamps = {}
        data = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if [h.strip() for h in header] != ["timestamp", "bus_id", "p_kw", "q_kvar"]:
                raise ValueError(f"unexpected profile header {header}")
            for ts, bid, p, q in reader:
                t = np.datetime64(ts, "h")
                key = stamps.setdefault(t, len(stamps))
                data.setdefault(int(bid), {})[key] = (float(p), float(q))
        if not stamps:
            raise ValueError("empty profile file")
        horizon = np.array(sorted(stamps), dtype="datetime64[h]")
        # remap first-seen order to sorted order
        remap = {stamps[t]: k for k, t in enumerate(horizon)}
        bus_ids = sorted(data)
        H = len(horizon)
        p = np.empty((H, len(bus_ids)))
        q = np.empty((H, len(bus_ids)))
        for j, bid in enumerate(bus_ids):
            series = data[bid]
            if len(series) != H:
                raise ValueError(
                    f"bus {bid} covers {len(series)} of {H} timestamps")
            for old, (pv, qv) in series.items():
                k = remap[old]
                p[k, j] = pv
                q[k, j] = qv
        return cls(horizon, bus_ids, p, q)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "bus_id", "p_kw", "q_kvar"])
            for k in range(self.n_hours):
                ts = str(self.horizon[k])
                for j, bid in enumerate(self.bus_ids):
                    writer.writerow([ts, bid,
                                     repr(float(self.p_kw[k, j])),
                                     repr(float(self.q_kvar[k, j]))])


def scale_profiles(profiles: LoadProfileSet, growth: float) -> LoadProfileSet:
    """Uniform demand growth: p and q multiplied by a positive factor."""
    if not growth > 0:
        raise ValueError(f"growth must be positive, got {growth}")
    return LoadProfileSet(profiles.horizon, profiles.bus_ids,
                          profiles.p_kw * growth, profiles.q_kvar * growth)
