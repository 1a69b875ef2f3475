"""Static data model of an islanded radial feeder.

All device powers are in kW/kvar and energies in kWh. Line impedances are
per-unit on ``base_kva`` (1 MVA by default); the conversion to per-unit
happens at the power-flow boundary.

DER ordering is fixed everywhere in the package: fuel units first (the first
one is the slack/reference unit), then storage, then renewables.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import MISSING, asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed network config documents."""


@dataclass(frozen=True)
class LineSpec:
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True)
class FuelDerSpec:
    bus: int
    p_min: float
    p_max: float
    alpha_min: float
    alpha_max: float
    energy: float  # kWh budget E
    name: str = "fuel"


@dataclass(frozen=True)
class StorageSpec:
    bus: int
    p_ch_max: float
    p_dis_max: float
    soc_min: float
    soc_max: float
    s0_mean: float
    s0_std: float
    s0_low: float
    s0_high: float
    alpha_min: float
    alpha_max: float
    eta_ch: float = 0.95
    eta_dis: float = 0.95
    name: str = "storage"


@dataclass(frozen=True)
class RenewableSpec:
    bus: int
    p_max: float
    kind: str  # "pv" or "wind"
    alpha_min: float
    alpha_max: float
    # (sunrise, sunset) in hours of day; only meaningful for pv
    daylight: tuple[float, float] | None = None
    name: str = "renewable"

    def ceiling(self, hours) -> np.ndarray:
        """Maximum possible output (kW) at the given hours of day.

        PV follows a raised-cosine clear-sky bell over the daylight window that
        peaks at ``p_max``; wind (or PV without a daylight window) is flat.
        """
        hours = np.asarray(hours, dtype=float)
        if self.kind != "pv" or self.daylight is None:
            return np.full(hours.shape, float(self.p_max))
        rise, sset = self.daylight
        h = np.mod(hours, 24.0)
        phase = (h - rise) / (sset - rise)
        inside = (phase > 0.0) & (phase < 1.0)
        bell = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.clip(phase, 0.0, 1.0)))
        return np.where(inside, self.p_max * bell, 0.0)


@dataclass(frozen=True)
class LoadSpec:
    bus: int
    p_demand: float
    q_demand: float
    priority: float  # zeta
    shed_penalty: float = 100.0  # epsilon
    name: str = "load"


@dataclass(frozen=True)
class SystemConfig:
    tau: float = 1.0 / 12.0
    T: int = 72
    v_min: float = 0.95
    v_max: float = 1.05
    lam: float = 1e8
    reward_scale: float = 1e-3

    @property
    def steps_per_hour(self) -> int:
        return int(round(1.0 / self.tau))


@dataclass(frozen=True)
class Topology:
    """Tree view of the line graph rooted at the reference bus."""

    order: np.ndarray  # buses in BFS order, order[0] == ref
    parent: np.ndarray  # parent bus, -1 for ref
    parent_line: np.ndarray  # line index connecting bus to its parent, -1 for ref
    r: np.ndarray  # per-bus series r of the line to its parent (0 for ref)
    x: np.ndarray
    # desc[j, k] = 1 if bus k is in the subtree rooted at j (j inclusive)
    desc: np.ndarray
    # shared path resistance/reactance from ref: R[j, k] = sum of r over
    # lines common to the paths ref->j and ref->k
    path_r: np.ndarray
    path_x: np.ndarray


@dataclass(frozen=True)
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "network ok"
        return "\n".join(f"- {v}" for v in self.violations)


@dataclass(frozen=True)
class NetworkModel:
    name: str
    buses: tuple[str, ...]
    ref_bus: int
    lines: tuple[LineSpec, ...]
    fuel: tuple[FuelDerSpec, ...]
    storage: tuple[StorageSpec, ...]
    renewables: tuple[RenewableSpec, ...]
    loads: tuple[LoadSpec, ...]
    system: SystemConfig = SystemConfig()
    base_kva: float = 1000.0
    base_kv: float = 4.16

    # -- sizes -------------------------------------------------------------
    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_loads(self) -> int:
        return len(self.loads)

    @property
    def n_fuel(self) -> int:
        return len(self.fuel)

    @property
    def n_storage(self) -> int:
        return len(self.storage)

    @property
    def n_renewables(self) -> int:
        return len(self.renewables)

    @property
    def n_ders(self) -> int:
        return self.n_fuel + self.n_storage + self.n_renewables

    @property
    def ders(self) -> tuple:
        return self.fuel + self.storage + self.renewables

    @property
    def slack(self) -> FuelDerSpec:
        return self.fuel[0]

    # -- vectorised device parameters -------------------------------------
    @cached_property
    def demand(self) -> np.ndarray:
        return np.array([ld.p_demand for ld in self.loads], dtype=float)

    @cached_property
    def q_ratio(self) -> np.ndarray:
        return np.array([ld.q_demand / ld.p_demand for ld in self.loads], dtype=float)

    @cached_property
    def priority(self) -> np.ndarray:
        return np.array([ld.priority for ld in self.loads], dtype=float)

    @cached_property
    def shed_penalty(self) -> np.ndarray:
        return np.array([ld.shed_penalty for ld in self.loads], dtype=float)

    @cached_property
    def load_bus(self) -> np.ndarray:
        return np.array([ld.bus for ld in self.loads], dtype=int)

    @cached_property
    def der_bus(self) -> np.ndarray:
        return np.array([d.bus for d in self.ders], dtype=int)

    @cached_property
    def alpha_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([d.alpha_min for d in self.ders], dtype=float)
        hi = np.array([d.alpha_max for d in self.ders], dtype=float)
        return lo, hi

    @cached_property
    def renewable_pmax(self) -> np.ndarray:
        return np.array([r.p_max for r in self.renewables], dtype=float)

    @cached_property
    def topology(self) -> Topology:
        return _build_topology(self)

    def to_dict(self) -> dict:
        return network_to_dict(self)


def _adjacency(n: int, lines) -> list[list[tuple[int, int]]]:
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, ln in enumerate(lines):
        if 0 <= ln.from_bus < n and 0 <= ln.to_bus < n:
            adj[ln.from_bus].append((ln.to_bus, k))
            adj[ln.to_bus].append((ln.from_bus, k))
    return adj


def _build_topology(net: NetworkModel) -> Topology:
    n = net.n_buses
    adj = _adjacency(n, net.lines)
    parent = np.full(n, -1, dtype=int)
    parent_line = np.full(n, -1, dtype=int)
    seen = np.zeros(n, dtype=bool)
    order = []
    queue = deque([net.ref_bus])
    seen[net.ref_bus] = True
    while queue:
        i = queue.popleft()
        order.append(i)
        for j, k in sorted(adj[i]):
            if not seen[j]:
                seen[j] = True
                parent[j] = i
                parent_line[j] = k
                queue.append(j)
    if len(order) != n or len(net.lines) != n - 1:
        raise ConfigError("line graph is not a spanning tree rooted at the reference bus")
    r = np.zeros(n)
    x = np.zeros(n)
    for j in range(n):
        if parent_line[j] >= 0:
            r[j] = net.lines[parent_line[j]].r
            x[j] = net.lines[parent_line[j]].x
    desc = np.zeros((n, n))
    for k in range(n):
        j = k
        while j >= 0:
            desc[j, k] = 1.0
            j = parent[j]
    # path_r[j, k] = sum over buses m (excluding ref) that are ancestors-or-self of
    # both j and k of r[m]
    anc = desc.T  # anc[k, m] = 1 if m is ancestor-or-self of k
    path_r = anc @ np.diag(r) @ anc.T
    path_x = anc @ np.diag(x) @ anc.T
    return Topology(
        order=np.array(order, dtype=int),
        parent=parent,
        parent_line=parent_line,
        r=r,
        x=x,
        desc=desc,
        path_r=path_r,
        path_x=path_x,
    )


def _check_tree(net: NetworkModel, out: list[str]) -> None:
    n = net.n_buses
    if not (0 <= net.ref_bus < n):
        out.append(f"reference bus {net.ref_bus} does not exist")
        return
    for k, ln in enumerate(net.lines):
        if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
            out.append(f"line {k} references a missing bus")
        elif ln.from_bus == ln.to_bus:
            out.append(f"line {k} is a self loop")
        if ln.r < 0 or ln.x < 0:
            out.append(f"line {k} has negative impedance")
    adj = _adjacency(n, net.lines)
    seen = {net.ref_bus}
    stack = [net.ref_bus]
    while stack:
        i = stack.pop()
        for j, _ in adj[i]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != n:
        out.append(f"not radial: {n - len(seen)} bus(es) unreachable from reference bus")
    if len(net.lines) != n - 1:
        out.append(f"not radial: {len(net.lines)} lines for {n} buses (tree needs {n - 1})")


def validate_network(net: NetworkModel) -> ValidationReport:
    """Check radiality, device placement and per-type invariants."""
    out: list[str] = []
    _check_tree(net, out)
    n = net.n_buses

    def bus_ok(kind: str, idx: int, bus: int) -> None:
        if not (0 <= bus < n):
            out.append(f"{kind} {idx} sits on missing bus {bus}")

    def angle_ok(kind: str, idx: int, lo: float, hi: float) -> None:
        if not (0.0 <= lo <= hi < math.pi / 2):
            out.append(f"{kind} {idx}: angle bounds must satisfy 0 <= alpha_min <= alpha_max < pi/2")

    if not net.fuel:
        out.append("at least one fuel DER is required (slack unit)")
    elif net.fuel[0].bus != net.ref_bus:
        out.append("slack fuel DER must sit on the reference bus")
    for i, g in enumerate(net.fuel):
        bus_ok("fuel DER", i, g.bus)
        angle_ok("fuel DER", i, g.alpha_min, g.alpha_max)
        if not (0.0 <= g.p_min <= g.p_max):
            out.append(f"fuel DER {i}: need 0 <= p_min <= p_max")
        elif g.p_min != 0.0:
            # the preprocessor's last-resort all-zero action must stay feasible
            out.append(f"fuel DER {i}: p_min must be 0 (units can always be switched off)")
        if not g.energy > 0:
            out.append(f"fuel DER {i}: energy budget must be positive")
    for i, s in enumerate(net.storage):
        bus_ok("storage", i, s.bus)
        angle_ok("storage", i, s.alpha_min, s.alpha_max)
        if not s.soc_min < s.soc_max:
            out.append(f"storage {i}: soc_min must be below soc_max")
        if not (s.soc_min <= s.s0_low <= s.s0_high <= s.soc_max):
            out.append(f"storage {i}: initial SOC truncation must lie inside [soc_min, soc_max]")
        if not (s.s0_std >= 0 and s.s0_low <= s.s0_mean <= s.s0_high):
            out.append(f"storage {i}: initial SOC distribution is malformed")
        if not (0 < s.eta_ch <= 1 and 0 < s.eta_dis <= 1):
            out.append(f"storage {i}: efficiencies must be in (0, 1]")
        if s.p_ch_max < 0 or s.p_dis_max < 0:
            out.append(f"storage {i}: power limits must be non-negative")
    for i, r in enumerate(net.renewables):
        bus_ok("renewable", i, r.bus)
        angle_ok("renewable", i, r.alpha_min, r.alpha_max)
        if r.kind not in ("pv", "wind"):
            out.append(f"renewable {i}: kind must be 'pv' or 'wind'")
        if not r.p_max > 0:
            out.append(f"renewable {i}: capacity must be positive")
        if r.daylight is not None and not (0 <= r.daylight[0] < r.daylight[1] <= 24):
            out.append(f"renewable {i}: daylight window must satisfy 0 <= sunrise < sunset <= 24")
    for i, ld in enumerate(net.loads):
        bus_ok("load", i, ld.bus)
        if not ld.p_demand > 0:
            out.append(f"load {i}: p_demand must be positive")
        if ld.q_demand < 0:
            out.append(f"load {i}: q_demand must be non-negative")
        if not (0 < ld.priority <= 1):
            out.append(f"load {i}: priority must be in (0, 1]")
        if ld.shed_penalty < 0:
            out.append(f"load {i}: shed penalty must be non-negative")
    sysc = net.system
    steps = 1.0 / sysc.tau if sysc.tau > 0 else float("nan")
    if not (sysc.tau > 0 and abs(steps - round(steps)) < 1e-9):
        out.append("system: 1/tau must be an integer")
    if sysc.T < 1:
        out.append("system: T must be >= 1")
    if not (sysc.v_min < 1.0 < sysc.v_max):
        out.append("system: need v_min < 1 < v_max")
    if not sysc.lam > 0:
        out.append("system: voltage penalty weight must be positive")
    if not sysc.reward_scale > 0:
        out.append("system: reward scale must be positive")
    return ValidationReport(out)


def dispatchable_energy_bound(net: NetworkModel) -> float:
    """Upper bound (kWh) on energy the dispatchable units can ever deliver."""
    fuel = sum(g.energy for g in net.fuel)
    stored = sum((s.s0_high - s.soc_min) * s.eta_dis for s in net.storage)
    return float(fuel + stored)


# -- config file round trip --------------------------------------------------

_SECTIONS = {
    "lines": LineSpec,
    "fuel": FuelDerSpec,
    "storage": StorageSpec,
    "renewables": RenewableSpec,
    "loads": LoadSpec,
}
_TOP_KEYS = {"name", "buses", "ref_bus", "base_kva", "base_kv", "system", *_SECTIONS}


def network_to_dict(net: NetworkModel) -> dict:
    doc = {
        "name": net.name,
        "buses": list(net.buses),
        "ref_bus": net.ref_bus,
        "base_kva": net.base_kva,
        "base_kv": net.base_kv,
        "system": asdict(net.system),
    }
    for key in _SECTIONS:
        items = []
        for item in getattr(net, key):
            d = asdict(item)
            if "daylight" in d and d["daylight"] is not None:
                d["daylight"] = list(d["daylight"])
            items.append(d)
        doc[key] = items
    return doc


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    required = {f.name for f in fields(cls) if f.default is MISSING and f.default_factory is MISSING}
    missing = sorted(required - set(data))
    if missing:
        raise ConfigError(f"{where}: missing key(s) {missing}")
    kwargs = dict(data)
    if "daylight" in kwargs and kwargs["daylight"] is not None:
        kwargs["daylight"] = tuple(float(v) for v in kwargs["daylight"])
    return cls(**kwargs)


def network_from_dict(doc: dict) -> NetworkModel:
    if not isinstance(doc, dict):
        raise ConfigError("network document must be an object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    missing = sorted({"name", "buses", "ref_bus", "lines", "fuel", "loads"} - set(doc))
    if missing:
        raise ConfigError(f"missing top-level key(s) {missing}")
    sections = {
        key: tuple(_strict(cls, item, f"{key}[{i}]") for i, item in enumerate(doc.get(key, [])))
        for key, cls in _SECTIONS.items()
    }
    system = _strict(SystemConfig, doc.get("system", {}), "system")
    return NetworkModel(
        name=doc["name"],
        buses=tuple(doc["buses"]),
        ref_bus=doc["ref_bus"],
        system=system,
        base_kva=doc.get("base_kva", 1000.0),
        base_kv=doc.get("base_kv", 4.16),
        **sections,
    )


def save_network(net: NetworkModel, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2) + "\n")


def load_network(path) -> NetworkModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return network_from_dict(doc)
