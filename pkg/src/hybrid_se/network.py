"""Network cases, branch coefficients, per-bus PMU models and bus colorings.

Case files are JSON documents::

    {
      "name": "ieee14",                                  (optional)
      "buses":    [{"id": 1, "vm": 1.06, "va": 0.0, "shunt_b": 0.0}, ...],
      "branches": [{"from": 1, "to": 2, "g": 4.99, "b": -15.26,
                    "tap": 1.0, "shift": 0.0}, ...],
      "pmu_buses": [2, 6, 7, 9]
    }

Angles are radians and admittances per-unit. ``tap`` is the turn-ratio
magnitude seen from the ``from`` end; the ``to`` end has unit ratio and sees
the phase shift with opposite sign. A MATPOWER off-nominal ratio ``t``
corresponds to ``tap = 1/t``.
"""
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "Bus",
    "Branch",
    "NetworkCase",
    "KappaCoefficients",
    "BusMeasurementModel",
    "Coloring",
    "CaseError",
    "MalformedCaseError",
    "DanglingBranchError",
    "DisconnectedNetworkError",
    "EmptyCaseError",
    "parse_case",
    "load_case",
    "dump_case",
    "bundled_case",
    "kappa",
    "build_measurement_model",
    "distance2_coloring",
    "check_coloring",
    "greedy_pmu_placement",
]

# voltage-row pattern of G_ii: d/dtheta of the rotated voltage at theta = 0
ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


class CaseError(ValueError):
    """Base class for invalid network cases."""


class MalformedCaseError(CaseError):
    pass


class DanglingBranchError(CaseError):
    pass


class DisconnectedNetworkError(CaseError):
    pass


class EmptyCaseError(CaseError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    vm: float = 1.0
    va: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float
    tap: float = 1.0
    shift: float = 0.0

    def other(self, bus_id):
        if bus_id == self.from_bus:
            return self.to_bus
        if bus_id == self.to_bus:
            return self.from_bus
        raise ValueError(f"bus {bus_id} is not an endpoint of branch "
                         f"{self.from_bus}-{self.to_bus}")

    def ratios(self, bus_id):
        """(|rho_ij|, |rho_ji|, phi_i^j) seen from endpoint ``bus_id``."""
        if bus_id == self.from_bus:
            return self.tap, 1.0, self.shift
        if bus_id == self.to_bus:
            return 1.0, self.tap, -self.shift
        raise ValueError(f"bus {bus_id} is not an endpoint of branch "
                         f"{self.from_bus}-{self.to_bus}")


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple
    branches: tuple
    pmu_buses: frozenset = frozenset()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "pmu_buses", frozenset(self.pmu_buses))
        _validate(self)

    @cached_property
    def bus_ids(self):
        """Bus ids in ascending order; this is the state ordering."""
        return tuple(sorted(b.id for b in self.buses))

    @cached_property
    def index(self):
        return {bid: k for k, bid in enumerate(self.bus_ids)}

    @cached_property
    def bus(self):
        return {b.id: b for b in self.buses}

    @cached_property
    def adjacency(self):
        adj = {bid: set() for bid in self.bus_ids}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        return {k: tuple(sorted(v)) for k, v in adj.items()}

    @cached_property
    def branch_between(self):
        out = {}
        for br in self.branches:
            out[(br.from_bus, br.to_bus)] = br
            out[(br.to_bus, br.from_bus)] = br
        return out

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def pmu_list(self):
        return tuple(sorted(self.pmu_buses))

    def neighborhood(self, i):
        """M(i): bus ``i`` and its direct neighbours, ascending."""
        return tuple(sorted((i,) + self.adjacency[i]))

    def with_pmus(self, pmu_buses):
        return NetworkCase(self.buses, self.branches, frozenset(pmu_buses), self.name)

    def to_dict(self):
        out = {}
        if self.name:
            out["name"] = self.name
        out["buses"] = [
            {"id": b.id, "vm": b.vm, "va": b.va, "shunt_b": b.shunt_b}
            for b in sorted(self.buses, key=lambda b: b.id)
        ]
        out["branches"] = [
            {"from": br.from_bus, "to": br.to_bus, "g": br.g, "b": br.b,
             "tap": br.tap, "shift": br.shift}
            for br in self.branches
        ]
        out["pmu_buses"] = list(self.pmu_list)
        return out


def _validate(case):
    if not case.buses:
        raise EmptyCaseError("case has no buses")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise MalformedCaseError("duplicate bus ids")
    for b in case.buses:
        if not isinstance(b.id, (int, np.integer)) or b.id < 1:
            raise MalformedCaseError(f"bus id must be an integer >= 1, got {b.id!r}")
        if not b.vm > 0:
            raise MalformedCaseError(f"bus {b.id}: voltage magnitude must be positive")
    known = set(ids)
    seen = set()
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise DanglingBranchError(
                    f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise MalformedCaseError(f"self-loop branch at bus {br.from_bus}")
        if not br.tap > 0:
            raise MalformedCaseError(
                f"branch {br.from_bus}-{br.to_bus}: tap ratio must be positive")
        key = frozenset((br.from_bus, br.to_bus))
        if key in seen:
            raise MalformedCaseError(
                f"parallel branches between {br.from_bus} and {br.to_bus}; merge them")
        seen.add(key)
    missing = set(case.pmu_buses) - known
    if missing:
        raise MalformedCaseError(f"PMU placed at unknown buses {sorted(missing)}")

    adj = {i: [] for i in ids}
    for br in case.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    stack, reached = [ids[0]], {ids[0]}
    while stack:
        for j in adj[stack.pop()]:
            if j not in reached:
                reached.add(j)
                stack.append(j)
    if len(reached) != len(ids):
        raise DisconnectedNetworkError(
            f"{len(ids) - len(reached)} buses unreachable from bus {ids[0]}")


def _num(entry, key, default=None):
    if key not in entry:
        if default is None:
            raise MalformedCaseError(f"missing field {key!r} in {entry!r}")
        return default
    val = entry[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise MalformedCaseError(f"field {key!r} must be a number, got {val!r}")
    return float(val)


def _int(entry, key):
    val = entry.get(key)
    if isinstance(val, bool) or not isinstance(val, int):
        raise MalformedCaseError(f"field {key!r} must be an integer, got {val!r}")
    return val


def parse_case(source):
    """Build a validated ``NetworkCase`` from JSON text or an already-loaded dict."""
    if isinstance(source, (str, bytes)):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise MalformedCaseError(f"invalid JSON: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict):
        raise MalformedCaseError("case document must be a JSON object")
    for key in ("buses", "branches"):
        if not isinstance(doc.get(key), list):
            raise MalformedCaseError(f"top-level key {key!r} must be an array")
    pmus = doc.get("pmu_buses", [])
    if not isinstance(pmus, list) or not all(
            isinstance(p, int) and not isinstance(p, bool) for p in pmus):
        raise MalformedCaseError("pmu_buses must be an array of bus ids")
    if not doc["buses"]:
        raise EmptyCaseError("case has no buses")

    try:
        buses = [
            Bus(_int(e, "id"), _num(e, "vm", 1.0), _num(e, "va", 0.0),
                _num(e, "shunt_b", 0.0))
            for e in doc["buses"]
        ]
        branches = [
            Branch(_int(e, "from"), _int(e, "to"), _num(e, "g"), _num(e, "b"),
                   _num(e, "tap", 1.0), _num(e, "shift", 0.0))
            for e in doc["branches"]
        ]
    except AttributeError as exc:
        raise MalformedCaseError("bus and branch entries must be objects") from exc
    return NetworkCase(tuple(buses), tuple(branches), frozenset(pmus),
                       str(doc.get("name", "")))


def load_case(path):
    with open(path) as fh:
        return parse_case(fh.read())


def dump_case(case, path=None):
    text = json.dumps(case.to_dict(), indent=1)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def bundled_case(name):
    """Load one of the packaged cases: ``ieee14``, ``ieee118``, ``ieee300``."""
    from importlib import resources

    text = resources.files("hybrid_se.data").joinpath(f"{name}.json").read_text()
    return parse_case(text)


@dataclass(frozen=True)
class KappaCoefficients:
    k1: float
    k2: float
    k3: float
    k4: float


def kappa(branch, bus_side):
    """Current-model coefficients of ``branch`` seen from ``bus_side``.

    ``bus_side`` is a ``Bus`` (its shunt enters k2). The measured branch
    current is ``(k1 + j k2) E_i - (k3 + j k4) E_j``.
    """
    rho_ij, rho_ji, phi = branch.ratios(bus_side.id)
    g, b = branch.g, branch.b
    k1 = rho_ij**2 * g
    k2 = rho_ij**2 * (b + bus_side.shunt_b)
    k3 = rho_ij * rho_ji * (math.cos(phi) * g - math.sin(phi) * b)
    k4 = rho_ij * rho_ji * (math.cos(phi) * b + math.sin(phi) * g)
    return KappaCoefficients(k1, k2, k3, k4)


@dataclass(frozen=True)
class BusMeasurementModel:
    """Blocks of ``z_i = sum_j (H_ij + theta_i G_ij) s_j + w_i``.

    Rows 0-1 hold the bus voltage, rows 2k, 2k+1 (k >= 1) the current toward
    the k-th other neighbour in ascending id order. Non-PMU buses carry
    empty block maps.
    """
    bus: int
    neighbors: tuple
    H: dict = field(default_factory=dict)
    G: dict = field(default_factory=dict)

    @property
    def has_pmu(self):
        return bool(self.H)

    @property
    def n_rows(self):
        return 2 * len(self.neighbors) if self.has_pmu else 0

    def stacked(self):
        """(H_local, G_local): blocks side by side in ``neighbors`` order."""
        if not self.has_pmu:
            return np.zeros((0, 0)), np.zeros((0, 0))
        H = np.hstack([self.H[j] for j in self.neighbors])
        G = np.hstack([self.G[j] for j in self.neighbors])
        return H, G


def build_measurement_model(case, i, *, allow_stub=False):
    """Per-bus linearised PMU model for bus ``i``.

    Raises ``ValueError`` when ``i`` has no PMU unless ``allow_stub`` is set,
    in which case an empty model is returned.
    """
    nbrs = case.neighborhood(i)
    if i not in case.pmu_buses:
        if allow_stub:
            return BusMeasurementModel(i, nbrs)
        raise ValueError(f"bus {i} has no PMU")
    m = len(nbrs)
    H = {j: np.zeros((2 * m, 2)) for j in nbrs}
    G = {j: np.zeros((2 * m, 2)) for j in nbrs}
    H[i][0:2] = np.eye(2)
    G[i][0:2] = ROTATION
    me = case.bus[i]
    others = [j for j in nbrs if j != i]
    for k, j in enumerate(others, start=1):
        kc = kappa(case.branch_between[(i, j)], me)
        r = slice(2 * k, 2 * k + 2)
        H[i][r] += [[kc.k1, -kc.k2], [kc.k2, kc.k1]]
        H[j][r] = [[-kc.k3, kc.k4], [-kc.k4, -kc.k3]]
        G[i][r] += [[-kc.k2, -kc.k1], [kc.k1, -kc.k2]]
        G[j][r] = [[kc.k4, kc.k3], [-kc.k3, kc.k4]]
    for blk in (*H.values(), *G.values()):
        blk.setflags(write=False)
    return BusMeasurementModel(i, nbrs, H, G)


@dataclass(frozen=True)
class Coloring:
    color: dict
    num_colors: int

    def groups(self):
        """Bus ids per color, each group ascending."""
        out = [[] for _ in range(self.num_colors)]
        for bid in sorted(self.color):
            out[self.color[bid]].append(bid)
        return [tuple(g) for g in out]


def _two_hop(case, i):
    adj = case.adjacency
    near = set(adj[i])
    for j in adj[i]:
        near.update(adj[j])
    near.discard(i)
    return near


def distance2_coloring(case):
    """Greedy distance-2 coloring, buses visited in ascending id order."""
    color = {}
    for i in case.bus_ids:
        taken = {color[j] for j in _two_hop(case, i) if j in color}
        c = 0
        while c in taken:
            c += 1
        color[i] = c
    return Coloring(color, max(color.values()) + 1)


def check_coloring(case, coloring):
    """Exhaustively confirm that no two buses within two hops share a color."""
    if set(coloring.color) != set(case.bus_ids):
        return False
    return all(coloring.color[i] != coloring.color[j]
               for i in case.bus_ids for j in _two_hop(case, i))


def greedy_pmu_placement(case):
    """A PMU set making every bus a PMU bus or adjacent to one.

    Greedy dominating set: repeatedly pick the bus covering the most
    uncovered buses, lowest id on ties.
    """
    uncovered = set(case.bus_ids)
    chosen = []
    while uncovered:
        best = max(case.bus_ids,
                   key=lambda i: (len(uncovered.intersection(case.neighborhood(i))), -i))
        chosen.append(best)
        uncovered.difference_update(case.neighborhood(best))
    return sorted(chosen)
