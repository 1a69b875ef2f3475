"""Built-in feeder fixtures.

Device ratings of the 13-bus feeder follow the published case-study table;
bus placements, load demands and line impedances are our own choices (the
published figure is pictorial). The 123-bus feeder is fully synthetic and only
matches the published device counts.
"""
from __future__ import annotations

import math

from .network import (
    FuelDerSpec,
    LineSpec,
    LoadSpec,
    NetworkModel,
    RenewableSpec,
    StorageSpec,
    SystemConfig,
)

PRIORITIES_13 = (1.0, 1.0, 0.9, 0.85, 0.8, 0.8, 0.75, 0.7, 0.65, 0.5, 0.45, 0.4, 0.3, 0.3, 0.2)

# single-phase equivalent of the IEEE 13-bus layout; per-unit on 1 MVA / 4.16 kV
_BUSES_13 = ("650", "632", "633", "634", "645", "646", "671", "680", "684", "611", "652", "692", "675")
_LINES_13 = (
    # from, to, r, x
    (0, 1, 0.0200, 0.0400),  # 650-632
    (1, 2, 0.0120, 0.0180),  # 632-633
    (2, 3, 0.0240, 0.0440),  # 633-634 (transformer)
    (1, 4, 0.0140, 0.0160),  # 632-645
    (4, 5, 0.0100, 0.0120),  # 645-646
    (1, 6, 0.0220, 0.0440),  # 632-671
    (6, 7, 0.0160, 0.0240),  # 671-680
    (6, 8, 0.0120, 0.0140),  # 671-684
    (8, 9, 0.0120, 0.0140),  # 684-611
    (8, 10, 0.0220, 0.0180),  # 684-652
    (6, 11, 0.0020, 0.0020),  # 671-692 (switch)
    (11, 12, 0.0140, 0.0180),  # 692-675
)
# (bus, kW, kvar) for the 15 critical loads, in priority order
_LOADS_13 = (
    (6, 120.0, 50.0),
    (3, 80.0, 35.0),
    (12, 100.0, 45.0),
    (10, 90.0, 40.0),
    (5, 110.0, 55.0),
    (9, 70.0, 30.0),
    (11, 130.0, 60.0),
    (2, 85.0, 40.0),
    (4, 95.0, 45.0),
    (7, 115.0, 50.0),
    (8, 75.0, 35.0),
    (12, 105.0, 50.0),
    (3, 90.0, 40.0),
    (10, 80.0, 35.0),
    (9, 100.0, 45.0),
)

QUARTER_PI = math.pi / 4


def build_fixture_13bus() -> NetworkModel:
    lines = tuple(LineSpec(f, t, r, x) for f, t, r, x in _LINES_13)
    loads = tuple(
        LoadSpec(bus=b, p_demand=p, q_demand=q, priority=z, shed_penalty=100.0, name=f"L{i + 1}")
        for i, ((b, p, q), z) in enumerate(zip(_LOADS_13, PRIORITIES_13))
    )
    fuel = (
        FuelDerSpec(bus=0, p_min=0.0, p_max=400.0, alpha_min=0.0, alpha_max=QUARTER_PI, energy=1200.0, name="microturbine"),
    )
    storage = (
        StorageSpec(
            bus=1, p_ch_max=250.0, p_dis_max=250.0, soc_min=160.0, soc_max=1250.0,
            s0_mean=1000.0, s0_std=250.0, s0_low=750.0, s0_high=1250.0,
            alpha_min=0.0, alpha_max=QUARTER_PI, name="battery",
        ),
    )
    renewables = (
        RenewableSpec(bus=12, p_max=300.0, kind="pv", alpha_min=0.0, alpha_max=QUARTER_PI, daylight=(6.0, 19.0), name="pv"),
        RenewableSpec(bus=7, p_max=400.0, kind="wind", alpha_min=0.0, alpha_max=QUARTER_PI, name="wind"),
    )
    return NetworkModel(
        name="ieee13-islanded",
        buses=_BUSES_13,
        ref_bus=0,
        lines=lines,
        fuel=fuel,
        storage=storage,
        renewables=renewables,
        loads=loads,
        system=SystemConfig(),
    )


def build_fixture_123bus() -> NetworkModel:
    """Synthetic 123-bus radial feeder: 6 DERs, 30 loads, uniform segments."""
    n = 123
    r_seg, x_seg = 0.01, 0.02
    # trunk of 12 buses from the root, each trunk bus feeding a short lateral tree
    parents = [-1]
    trunk = [0]
    for _ in range(11):
        parents.append(trunk[-1])
        trunk.append(len(parents) - 1)
    k = 0
    while len(parents) < n:
        # laterals: alternate depth-3 chains with a fork at the second bus
        base = trunk[k % len(trunk)]
        a = len(parents)
        parents.append(base)
        if len(parents) < n:
            parents.append(a)
        if len(parents) < n:
            parents.append(a + 1)
        if len(parents) < n:
            parents.append(a)
        k += 1
    lines = tuple(LineSpec(parents[j], j, r_seg, x_seg) for j in range(1, n))
    buses = tuple(f"b{j}" for j in range(n))
    leaves = [j for j in range(1, n) if j not in set(parents)]
    load_buses = leaves[::max(1, len(leaves) // 30)][:30]
    while len(load_buses) < 30:
        load_buses.append(n - 1 - len(load_buses))
    loads = tuple(
        LoadSpec(
            bus=b,
            p_demand=20.0 + 5.0 * (i % 5),
            q_demand=8.0 + 2.0 * (i % 5),
            priority=round(1.0 - 0.025 * i, 3),
            shed_penalty=100.0,
            name=f"L{i + 1}",
        )
        for i, b in enumerate(load_buses)
    )
    fuel = (
        FuelDerSpec(bus=0, p_min=0.0, p_max=400.0, alpha_min=0.0, alpha_max=QUARTER_PI, energy=1200.0, name="microturbine"),
        FuelDerSpec(bus=trunk[6], p_min=0.0, p_max=150.0, alpha_min=0.0, alpha_max=QUARTER_PI, energy=450.0, name="diesel"),
    )
    storage = tuple(
        StorageSpec(
            bus=bus, p_ch_max=150.0, p_dis_max=150.0, soc_min=100.0, soc_max=750.0,
            s0_mean=600.0, s0_std=150.0, s0_low=450.0, s0_high=750.0,
            alpha_min=0.0, alpha_max=QUARTER_PI, name=f"battery{i + 1}",
        )
        for i, bus in enumerate((trunk[3], trunk[9]))
    )
    renewables = (
        RenewableSpec(bus=trunk[5], p_max=300.0, kind="pv", alpha_min=0.0, alpha_max=QUARTER_PI, daylight=(6.0, 19.0), name="pv"),
        RenewableSpec(bus=trunk[11], p_max=400.0, kind="wind", alpha_min=0.0, alpha_max=QUARTER_PI, name="wind"),
    )
    return NetworkModel(
        name="ieee123-synthetic",
        buses=buses,
        ref_bus=0,
        lines=lines,
        fuel=fuel,
        storage=storage,
        renewables=renewables,
        loads=loads,
        system=SystemConfig(),
    )


def build_toy_network(
    loads=((400.0, 0.0, 1.0),),
    fuel_pmax: float = 400.0,
    fuel_energy: float = 1200.0,
    storage: StorageSpec | None = None,
    renewables=(),
    r: float = 0.001,
    x: float = 0.002,
    system: SystemConfig | None = None,
) -> NetworkModel:
    """Two-bus feeder: slack fuel unit on bus 0, every other device on bus 1.

    ``loads`` holds (kW, kvar, priority) triples; ``renewables`` holds
    (kind, p_max) pairs.
    """
    lds = tuple(
        LoadSpec(bus=1, p_demand=p, q_demand=q, priority=z, shed_penalty=100.0, name=f"L{i + 1}")
        for i, (p, q, z) in enumerate(loads)
    )
    ren = tuple(
        RenewableSpec(bus=1, p_max=pm, kind=kind, alpha_min=0.0, alpha_max=QUARTER_PI, name=f"{kind}{i + 1}")
        for i, (kind, pm) in enumerate(renewables)
    )
    return NetworkModel(
        name="toy-2bus",
        buses=("0", "1"),
        ref_bus=0,
        lines=(LineSpec(0, 1, r, x),),
        fuel=(FuelDerSpec(bus=0, p_min=0.0, p_max=fuel_pmax, alpha_min=0.0, alpha_max=QUARTER_PI, energy=fuel_energy, name="fuel"),),
        storage=() if storage is None else (storage,),
        renewables=ren,
        loads=lds,
        system=system or SystemConfig(),
    )
