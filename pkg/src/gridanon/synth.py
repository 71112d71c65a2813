"""Synthetic reference data: random radial LV networks and load profiles.

Stand-in for confidential metering data.  Defaults mirror the six-network
reference case: 257 meters across the listed category counts and median
annual consumptions, of which 39 aggregate three or more customers.
Profiles are shape templates (residential double peak, business-hours
plateau) with weekly and seasonal modulation and multiplicative noise,
scaled so each meter hits its drawn annual-energy target exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError
from .model import Bus, Line, LoadCategory, LoadDatabase, LoadProfile, Network, TimeGrid, UnknownLoad

YEAR_SECONDS = 365.0 * 86400.0
MWH_J = 3.6e9


@dataclass(frozen=True)
class CategoryMix:
    category: LoadCategory
    count: int
    median_annual_mwh: float

    def __post_init__(self):
        if self.count < 0:
            raise DataFormatError("category count must be >= 0")
        if self.median_annual_mwh <= 0:
            raise DataFormatError("median annual consumption must be positive")


# Reference-case defaults: per-network category counts and medians (MWh).
DEFAULT_NETWORKS: dict[str, tuple[CategoryMix, ...]] = {
    "3716": (
        CategoryMix(LoadCategory.APARTMENT, 13, 11.2),
        CategoryMix(LoadCategory.HOUSE, 15, 5.4),
        CategoryMix(LoadCategory.NON_RESIDENTIAL, 22, 11.6),
    ),
    "4178": (
        CategoryMix(LoadCategory.APARTMENT, 9, 20.2),
        CategoryMix(LoadCategory.HOUSE, 51, 4.5),
        CategoryMix(LoadCategory.NON_RESIDENTIAL, 6, 10.0),
    ),
    "4513": (
        CategoryMix(LoadCategory.APARTMENT, 18, 4.1),
        CategoryMix(LoadCategory.HOUSE, 3, 3.7),
        CategoryMix(LoadCategory.NON_RESIDENTIAL, 9, 11.0),
    ),
    "4756": (
        CategoryMix(LoadCategory.APARTMENT, 3, 4.3),
        CategoryMix(LoadCategory.HOUSE, 28, 5.4),
        CategoryMix(LoadCategory.NON_RESIDENTIAL, 18, 9.9),
    ),
    "4769": (
        CategoryMix(LoadCategory.APARTMENT, 4, 4.2),
        CategoryMix(LoadCategory.HOUSE, 26, 4.9),
        CategoryMix(LoadCategory.NON_RESIDENTIAL, 14, 12.5),
    ),
    "7575": (
        CategoryMix(LoadCategory.APARTMENT, 2, 65.9),
        CategoryMix(LoadCategory.HOUSE, 11, 4.9),
        CategoryMix(LoadCategory.NON_RESIDENTIAL, 5, 5.1),
    ),
}

# External database defaults: two residential measurement campaigns plus a
# small non-residential pool.
DEFAULT_DATABASE: tuple[CategoryMix, ...] = (
    CategoryMix(LoadCategory.APARTMENT, 38, 3.3),
    CategoryMix(LoadCategory.HOUSE, 46, 4.4),
    CategoryMix(LoadCategory.NON_RESIDENTIAL, 1, 22.4),
    CategoryMix(LoadCategory.APARTMENT, 44, 2.1),
    CategoryMix(LoadCategory.HOUSE, 48, 4.2),
    CategoryMix(LoadCategory.NON_RESIDENTIAL, 3, 407.0),
)


@dataclass(frozen=True)
class SynthSpec:
    networks: dict[str, tuple[CategoryMix, ...]] = field(default_factory=lambda: dict(DEFAULT_NETWORKS))
    seed: int = 1
    start: str = "2023-01-02T00:00:00Z"  # a Monday
    n_steps: int = 672  # one week at 15 minutes
    step_seconds: float = 900.0
    multicustomer_total: int = 39
    v_nominal_v: float = 400.0
    segment_m: tuple[float, float] = (10.0, 40.0)
    r_ohm_per_km: float = 0.25
    x_ohm_per_km: float = 0.08

    def grid(self) -> TimeGrid:
        return TimeGrid.from_start(self.start, self.n_steps, self.step_seconds)


def _median_corrected_targets(rng: np.random.Generator, count: int, median_mwh: float) -> np.ndarray:
    """Annual-energy draws (J) whose sample median equals the spec median."""
    draws = median_mwh * np.exp(rng.normal(0.0, 0.45, size=count))
    med = float(np.median(draws))
    return draws * (median_mwh / med) * MWH_J


def _gauss_bump(hod: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((hod - mu) / sigma) ** 2)


def _shape(rng: np.random.Generator, grid: TimeGrid, category: LoadCategory, smooth: float) -> np.ndarray:
    hod = grid.hour_of_day()
    weekend = grid.day_of_week() >= 5
    doy = grid.day_index() % 365
    seasonal = 1.0 + 0.25 * np.cos(2.0 * np.pi * (doy - 15) / 365.0)
    if category is LoadCategory.NON_RESIDENTIAL:
        base = 0.15 + 1.0 * ((hod >= 7.5) & (hod < 18.0))
        weekly = np.where(weekend, 0.3, 1.0)
        sigma = 0.20 * smooth
    else:
        mu_morning = rng.uniform(6.0, 8.5)
        mu_evening = rng.uniform(17.5, 20.5)
        base = 0.22 + 0.35 * _gauss_bump(hod, mu_morning, 1.3) + 0.6 * _gauss_bump(hod, mu_evening, 2.2)
        weekly = np.where(weekend, 1.15, 1.0)
        sigma = 0.35 * smooth
    noise = np.exp(rng.normal(0.0, sigma, size=len(grid)))
    return base * weekly * seasonal * noise


def _make_profile(
    rng: np.random.Generator,
    grid: TimeGrid,
    meter_id: str,
    category: LoadCategory,
    target_annual_j: float,
    customer_count: int,
) -> LoadProfile:
    smooth = 1.0 / np.sqrt(customer_count)
    p = _shape(rng, grid, category, smooth)
    span_energy = target_annual_j * grid.span_seconds / YEAR_SECONDS
    p *= span_energy / (p.sum() * grid.step_seconds)
    return LoadProfile(meter_id=meter_id, category=category, power_w=p, customer_count=customer_count)


def _multicustomer_quota(networks: dict[str, tuple[CategoryMix, ...]], total: int) -> dict[str, int]:
    """Largest-remainder apportionment of the multi-customer meter count."""
    sizes = {name: sum(m.count for m in mixes) for name, mixes in networks.items()}
    n_all = sum(sizes.values())
    if n_all == 0 or total <= 0:
        return {name: 0 for name in networks}
    total = min(total, n_all)
    exact = {name: total * sz / n_all for name, sz in sizes.items()}
    quota = {name: int(exact[name]) for name in networks}
    rest = total - sum(quota.values())
    by_rem = sorted(networks, key=lambda nm: (-(exact[nm] - quota[nm]), nm))
    for name in by_rem[:rest]:
        quota[name] += 1
    return {name: min(quota[name], sizes[name]) for name in networks}


def _build_tree(rng: np.random.Generator, spec: SynthSpec, name: str, n_loads: int):
    """Feeder-like random tree: mostly chain extensions, some branching."""
    buses = [Bus(f"{name}_B000", spec.v_nominal_v)]
    lines = []
    recent: list[int] = [0]
    for i in range(1, n_loads + 1):
        if i == 1 or rng.random() < 0.65:
            parent = recent[-1]
        else:
            parent = int(rng.integers(0, i))
        length_m = rng.uniform(*spec.segment_m)
        buses.append(Bus(f"{name}_B{i:03d}", spec.v_nominal_v))
        lines.append(
            Line(
                from_bus=buses[parent].id,
                to_bus=buses[i].id,
                r_ohm=spec.r_ohm_per_km * length_m / 1000.0,
                x_ohm=spec.x_ohm_per_km * length_m / 1000.0,
                ampacity_a=float(rng.choice([200.0, 250.0, 315.0, 400.0])),
            )
        )
        recent.append(i)
        if len(recent) > 4:
            recent.pop(0)
    return buses, lines


def synth_reference(spec: SynthSpec) -> tuple[dict[str, Network], TimeGrid]:
    """Seeded ground-truth networks: every load sits at its true bus."""
    grid = spec.grid()
    rng = np.random.Generator(np.random.Philox(spec.seed))
    quota = _multicustomer_quota(spec.networks, spec.multicustomer_total)
    networks: dict[str, Network] = {}
    for name in sorted(spec.networks):
        mixes = spec.networks[name]
        n_loads = sum(m.count for m in mixes)
        buses, lines = _build_tree(rng, spec, name, n_loads)

        # multi-customer flags, preferring apartments, then non-residential
        cats: list[LoadCategory] = []
        for mix in mixes:
            cats.extend([mix.category] * mix.count)
        pref = sorted(
            range(n_loads),
            key=lambda i: {LoadCategory.APARTMENT: 0, LoadCategory.NON_RESIDENTIAL: 1, LoadCategory.HOUSE: 2}[cats[i]],
        )
        multi = set(pref[: quota[name]])
        counts = [int(rng.integers(3, 7)) if i in multi else 1 for i in range(n_loads)]

        profiles: list[LoadProfile] = []
        i_load = 0
        for mix in mixes:
            targets = _median_corrected_targets(rng, mix.count, mix.median_annual_mwh)
            for t_j in targets:
                profiles.append(
                    _make_profile(rng, grid, f"{name}_M{i_load:03d}", mix.category, float(t_j), counts[i_load])
                )
                i_load += 1

        order = rng.permutation(n_loads)  # decorrelate category and feeder position
        known = {buses[1 + i].id: profiles[int(order[i])] for i in range(n_loads)}
        networks[name] = Network(
            buses=tuple(buses),
            lines=tuple(lines),
            transformer_bus=buses[0].id,
            known_loads=known,
            unknown_loads={},
            grid=grid,
        )
    return networks, grid


def synth_database(
    grid: TimeGrid,
    mixes: tuple[CategoryMix, ...] = DEFAULT_DATABASE,
    seed: int = 7,
) -> LoadDatabase:
    """Seeded external profile database on the given grid."""
    rng = np.random.Generator(np.random.Philox(seed))
    entries: list[LoadProfile] = []
    i = 0
    for mix in mixes:
        targets = _median_corrected_targets(rng, mix.count, mix.median_annual_mwh)
        for t_j in targets:
            entries.append(_make_profile(rng, grid, f"DB_M{i:03d}", mix.category, float(t_j), 1))
            i += 1
    return LoadDatabase(entries=tuple(entries), grid=grid)


def planner_view(network: Network, threshold: int, measurement: LoadProfile | None) -> Network:
    """Planner-side copy of a ground-truth network: multi-customer loads stay
    known at their bus, every other load becomes an unknown node carrying
    only its category and its true energy total."""
    if network.grid is None:
        raise DataFormatError("ground-truth network carries no grid")
    known = {}
    unknown = {}
    for bus, prof in network.known_loads.items():
        if prof.customer_count >= threshold:
            known[bus] = prof
        else:
            unknown[bus] = UnknownLoad(e_ref_j=prof.energy_j(network.grid), category=prof.category)
    return Network(
        buses=network.buses,
        lines=network.lines,
        transformer_bus=network.transformer_bus,
        known_loads=known,
        unknown_loads=unknown,
        transformer_measurement=measurement,
        grid=network.grid,
    )
