"""Domain types for networks, meters and time series, plus the file formats
shared by every other module.

Units are strict: powers are watts, energies joules, impedances ohms,
voltages volts. File formats use kWh/W with explicit unit suffixes in the
headers; conversion happens at the I/O boundary only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from types import MappingProxyType

import numpy as np

from .errors import DataFormatError, TopologyError

JOULES_PER_KWH = 3.6e6

# Longest run of missing cells that linear interpolation may bridge.
MAX_INTERP_GAP = 4


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class LoadCategory(Enum):
    """Consumer category label attached to every metered load."""

    APARTMENT = "Apartment"
    HOUSE = "House"
    NON_RESIDENTIAL = "NonResidential"

    @classmethod
    def parse(cls, text: str) -> "LoadCategory":
        for c in cls:
            if c.value == text:
                return c
        raise DataFormatError(f"unknown load category {text!r}")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform series of UTC instants shared by all profiles of one study."""

    timestamps: np.ndarray  # datetime64[s], strictly increasing
    step_seconds: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        if ts.ndim != 1 or ts.size < 1:
            raise DataFormatError("time grid needs at least one timestamp")
        if self.step_seconds <= 0:
            raise DataFormatError("step_seconds must be positive")
        if ts.size > 1:
            steps = np.diff(ts.astype(np.int64))
            if np.any(steps <= 0):
                raise DataFormatError("timestamps must be strictly increasing")
            if np.any(steps != steps[0]):
                raise DataFormatError("non-uniform timestep in time grid")
            if float(steps[0]) != float(self.step_seconds):
                raise DataFormatError("step_seconds disagrees with timestamps")
        object.__setattr__(self, "timestamps", _readonly(ts))

    @classmethod
    def from_timestamps(cls, timestamps) -> "TimeGrid":
        ts = np.asarray(timestamps, dtype="datetime64[s]")
        if ts.size < 2:
            raise DataFormatError("cannot infer step from fewer than two timestamps")
        step = float(ts.astype(np.int64)[1] - ts.astype(np.int64)[0])
        return cls(ts, step)

    @classmethod
    def from_start(cls, start: str | datetime, n_steps: int, step_seconds: float) -> "TimeGrid":
        t0 = _parse_instant(start) if isinstance(start, str) else _to_utc_seconds(start)
        ts = (np.int64(t0) + np.arange(n_steps, dtype=np.int64) * np.int64(round(step_seconds))).astype(
            "datetime64[s]"
        )
        return cls(ts, float(step_seconds))

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def span_seconds(self) -> float:
        return float(len(self)) * self.step_seconds

    def hour_of_day(self) -> np.ndarray:
        """Fractional hour of day (UTC) per timestep."""
        secs = self.timestamps.astype(np.int64)
        return (secs % 86400) / 3600.0

    def day_index(self) -> np.ndarray:
        """Calendar day number (days since epoch, UTC) per timestep."""
        return self.timestamps.astype("datetime64[D]").astype(np.int64)

    def day_of_week(self) -> np.ndarray:
        """0=Monday .. 6=Sunday per timestep."""
        return (self.day_index() + 3) % 7


@dataclass(frozen=True)
class LoadProfile:
    """Active-power series of one meter, aligned to a TimeGrid."""

    meter_id: str
    category: LoadCategory
    power_w: np.ndarray
    customer_count: int = 1

    def __post_init__(self):
        p = np.asarray(self.power_w, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise DataFormatError(f"meter {self.meter_id}: empty power series")
        if not np.all(np.isfinite(p)):
            raise DataFormatError(f"meter {self.meter_id}: non-finite power value")
        if np.any(p < 0):
            raise DataFormatError(f"meter {self.meter_id}: negative power value")
        if self.customer_count < 1:
            raise DataFormatError(f"meter {self.meter_id}: customer_count must be >= 1")
        object.__setattr__(self, "power_w", _readonly(p))

    def energy_j(self, grid: TimeGrid) -> float:
        if len(grid) != self.power_w.size:
            raise DataFormatError(f"meter {self.meter_id}: series not aligned to grid")
        return float(np.sum(self.power_w) * grid.step_seconds)


@dataclass(frozen=True)
class Bus:
    id: str
    v_nominal_v: float


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r_ohm: float
    x_ohm: float
    ampacity_a: float


@dataclass(frozen=True)
class UnknownLoad:
    """A bus whose series is unknown but whose energy total is estimated."""

    e_ref_j: float
    category: LoadCategory


@dataclass(frozen=True)
class Network:
    """Radial low-voltage network with measured and unmeasured load buses."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    transformer_bus: str
    known_loads: dict[str, LoadProfile]
    unknown_loads: dict[str, UnknownLoad]
    transformer_measurement: LoadProfile | None = None
    grid: TimeGrid | None = None

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate bus id")
        bus_set = set(ids)
        if self.transformer_bus not in bus_set:
            raise TopologyError(f"unknown bus referenced: {self.transformer_bus!r}")
        for ln in self.lines:
            for b in (ln.from_bus, ln.to_bus):
                if b not in bus_set:
                    raise TopologyError(f"unknown bus referenced: {b!r}")
            if ln.r_ohm < 0 or ln.x_ohm < 0:
                raise TopologyError(f"negative impedance on line {ln.from_bus}-{ln.to_bus}")
        for b in list(self.known_loads) + list(self.unknown_loads):
            if b not in bus_set:
                raise TopologyError(f"unknown bus referenced: {b!r}")
        overlap = set(self.known_loads) & set(self.unknown_loads)
        if overlap:
            raise TopologyError(f"bus in both known and unknown load sets: {sorted(overlap)}")
        if self.transformer_bus in self.known_loads or self.transformer_bus in self.unknown_loads:
            raise TopologyError("transformer bus cannot also carry a load")
        self._check_radial(bus_set)
        object.__setattr__(self, "known_loads", MappingProxyType(dict(self.known_loads)))
        object.__setattr__(self, "unknown_loads", MappingProxyType(dict(self.unknown_loads)))

    def _check_radial(self, bus_set: set) -> None:
        if len(self.lines) != len(self.buses) - 1:
            raise TopologyError("network not radial: |lines| != |buses| - 1")
        adj: dict[str, list[str]] = {b: [] for b in bus_set}
        seen_edges = set()
        for ln in self.lines:
            key = tuple(sorted((ln.from_bus, ln.to_bus)))
            if ln.from_bus == ln.to_bus or key in seen_edges:
                raise TopologyError("network not radial: duplicate or self line")
            seen_edges.add(key)
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
        # BFS from the transformer; with |E| = |V|-1, connected <=> acyclic.
        seen = {self.transformer_bus}
        queue = [self.transformer_bus]
        while queue:
            cur = queue.pop()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        if len(seen) != len(self.buses):
            missing = sorted(bus_set - seen)
            raise TopologyError(f"network not radial: disconnected bus {missing[0]!r}")

    def __reduce__(self):
        # the read-only load maps do not pickle; rebuild through __init__
        return (
            Network,
            (
                self.buses,
                self.lines,
                self.transformer_bus,
                dict(self.known_loads),
                dict(self.unknown_loads),
                self.transformer_measurement,
                self.grid,
            ),
        )

    def bus_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses)


@dataclass(frozen=True)
class LoadDatabase:
    """Externally sourced load profiles available for allocation."""

    entries: tuple[LoadProfile, ...]
    grid: TimeGrid

    def __post_init__(self):
        ids = [e.meter_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate meter_id in load database")
        for e in self.entries:
            if e.power_w.size != len(self.grid):
                raise DataFormatError(f"database entry {e.meter_id} not aligned to grid")
        object.__setattr__(self, "entries", tuple(self.entries))

    def by_category(self) -> dict[LoadCategory, list[LoadProfile]]:
        out: dict[LoadCategory, list[LoadProfile]] = {}
        for e in self.entries:
            out.setdefault(e.category, []).append(e)
        return out


# ---------------------------------------------------------------------------
# Profile CSV format
#
#   # category,House,Apartment
#   # customers,1,3
#   timestamp,M001 [W],M002 [W]
#   2018-01-01T00:00:00Z,235.0,118.5
#
# The two leading comment rows are optional on read (defaults: House, 1) and
# always written.  Values are watts; floats use the shortest representation
# that round-trips exactly.
# ---------------------------------------------------------------------------

_POWER_SUFFIX = " [W]"


def _parse_instant(text: str) -> int:
    """ISO-8601 string to UTC epoch seconds."""
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataFormatError(f"bad timestamp {text!r}") from exc
    return _to_utc_seconds(dt)


def _to_utc_seconds(dt: datetime) -> int:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    if dt.microsecond:
        raise DataFormatError("sub-second timestamps are not supported")
    return int(dt.timestamp())


def _format_instant(t: np.datetime64) -> str:
    return str(np.datetime64(t, "s")) + "Z"


def read_profiles_csv(path, grid_policy: str = "strict") -> tuple[TimeGrid, list[LoadProfile]]:
    """Read a profile CSV into a TimeGrid and one LoadProfile per column.

    grid_policy "strict" rejects missing cells; "infer" fills interior gaps
    of up to MAX_INTERP_GAP steps by linear interpolation.
    """
    if grid_policy not in ("strict", "infer"):
        raise DataFormatError(f"unknown grid_policy {grid_policy!r}")
    path = Path(path)
    lines = path.read_text().splitlines()
    meta: dict[str, list[str]] = {}
    row_iter = iter(lines)
    header = None
    for raw in row_iter:
        if raw.startswith("#"):
            cells = [c.strip() for c in raw.lstrip("#").split(",")]
            if cells and cells[0] in ("category", "customers"):
                meta[cells[0]] = cells[1:]
            continue
        header = [c.strip() for c in raw.split(",")]
        break
    if header is None or not header or header[0] != "timestamp":
        raise DataFormatError(f"{path}: header must start with 'timestamp'")
    meter_ids = []
    for cell in header[1:]:
        mid = cell[: -len(_POWER_SUFFIX)] if cell.endswith(_POWER_SUFFIX) else cell
        if not mid:
            raise DataFormatError(f"{path}: empty meter id in header")
        if mid in meter_ids:
            raise DataFormatError(f"{path}: duplicate meter_id {mid!r}")
        meter_ids.append(mid)
    n_meters = len(meter_ids)
    if n_meters == 0:
        raise DataFormatError(f"{path}: no meter columns")

    times: list[int] = []
    rows: list[list[float]] = []
    for raw in row_iter:
        if not raw.strip():
            continue
        cells = raw.split(",")
        if len(cells) != n_meters + 1:
            raise DataFormatError(f"{path}: row has {len(cells)} cells, expected {n_meters + 1}")
        times.append(_parse_instant(cells[0].strip()))
        vals = []
        for mid, cell in zip(meter_ids, cells[1:]):
            cell = cell.strip()
            if not cell:
                vals.append(np.nan)
                continue
            try:
                vals.append(float(cell))
            except ValueError as exc:
                raise DataFormatError(f"{path}: bad value {cell!r} for meter {mid}") from exc
        rows.append(vals)
    if len(times) < 2:
        raise DataFormatError(f"{path}: need at least two rows to establish the timestep")
    grid = TimeGrid.from_timestamps(np.array(times, dtype=np.int64).astype("datetime64[s]"))

    data = np.asarray(rows, dtype=np.float64)
    for col, mid in enumerate(meter_ids):
        series = data[:, col]
        missing = np.isnan(series)
        if missing.any():
            if grid_policy == "strict":
                t = int(np.argmax(missing))
                raise DataFormatError(f"{path}: missing value for meter {mid} at row {t}")
            _interpolate_gaps(series, mid, path)
        if np.any(series < 0):
            raise DataFormatError(f"{path}: negative power for meter {mid}")

    categories = meta.get("category", [])
    customers = meta.get("customers", [])
    profiles = []
    for col, mid in enumerate(meter_ids):
        cat = LoadCategory.parse(categories[col]) if col < len(categories) else LoadCategory.HOUSE
        cnt = int(customers[col]) if col < len(customers) else 1
        profiles.append(LoadProfile(mid, cat, data[:, col], cnt))
    return grid, profiles


def _interpolate_gaps(series: np.ndarray, meter_id: str, path) -> None:
    """Fill interior NaN runs of length <= MAX_INTERP_GAP linearly, in place."""
    missing = np.isnan(series)
    idx = np.flatnonzero(missing)
    # split into consecutive runs
    run_start = 0
    while run_start < idx.size:
        run_end = run_start
        while run_end + 1 < idx.size and idx[run_end + 1] == idx[run_end] + 1:
            run_end += 1
        lo, hi = idx[run_start], idx[run_end]
        gap = hi - lo + 1
        if gap > MAX_INTERP_GAP:
            raise DataFormatError(f"{path}: gap of {gap} steps for meter {meter_id} exceeds {MAX_INTERP_GAP}")
        if lo == 0 or hi == series.size - 1:
            raise DataFormatError(f"{path}: gap at series edge for meter {meter_id} cannot be interpolated")
        left, right = series[lo - 1], series[hi + 1]
        frac = np.arange(1, gap + 1, dtype=np.float64) / (gap + 1)
        series[lo : hi + 1] = left + frac * (right - left)
        run_start = run_end + 1


def write_profiles_csv(path, grid: TimeGrid, profiles) -> None:
    """Write profiles in the CSV format read by read_profiles_csv."""
    profiles = list(profiles)
    for p in profiles:
        if p.power_w.size != len(grid):
            raise DataFormatError(f"meter {p.meter_id} not aligned to grid")
    out = []
    out.append("# category," + ",".join(p.category.value for p in profiles))
    out.append("# customers," + ",".join(str(p.customer_count) for p in profiles))
    out.append("timestamp," + ",".join(p.meter_id + _POWER_SUFFIX for p in profiles))
    cols = [p.power_w for p in profiles]
    for t in range(len(grid)):
        stamp = _format_instant(grid.timestamps[t])
        out.append(stamp + "," + ",".join(repr(float(c[t])) for c in cols))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Network JSON format (schema shipped in docs/network.schema.json)
# ---------------------------------------------------------------------------


def read_network_json(path) -> Network:
    """Read and validate a network document.

    Load series are pulled from the CSV referenced by the document's
    "profiles_csv" key, resolved relative to the JSON file.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("buses", "lines", "transformer"):
        if key not in doc:
            raise DataFormatError(f"{path}: missing key {key!r}")

    trafo = doc["transformer"]
    if isinstance(trafo, list):
        if len(trafo) != 1:
            raise DataFormatError(f"{path}: more than one transformer")
        trafo = trafo[0]
    if isinstance(trafo, str):
        trafo = {"bus": trafo}
    if not isinstance(trafo, dict) or "bus" not in trafo:
        raise DataFormatError(f"{path}: transformer must name a bus")

    try:
        buses = tuple(Bus(str(b["id"]), float(b["v_nominal_v"])) for b in doc["buses"])
        lines = tuple(
            Line(str(l["from_bus"]), str(l["to_bus"]), float(l["r_ohm"]), float(l["x_ohm"]), float(l["ampacity_a"]))
            for l in doc["lines"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: malformed bus or line record: {exc}") from exc

    known_refs = {str(b): str(m) for b, m in doc.get("known_loads", {}).items()}
    unknown = {}
    for b, rec in doc.get("unknown_loads", {}).items():
        try:
            unknown[str(b)] = UnknownLoad(float(rec["e_ref_kwh"]) * JOULES_PER_KWH, LoadCategory.parse(rec["category"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: malformed unknown_loads record for {b!r}: {exc}") from exc

    grid = None
    by_meter: dict[str, LoadProfile] = {}
    trafo_meter = trafo.get("meter")
    if known_refs or trafo_meter:
        csv_ref = doc.get("profiles_csv")
        if not csv_ref:
            raise DataFormatError(f"{path}: profiles_csv required when load series are referenced")
        grid, profiles = read_profiles_csv(path.parent / csv_ref)
        by_meter = {p.meter_id: p for p in profiles}

    def resolve(meter_id: str) -> LoadProfile:
        if meter_id not in by_meter:
            raise DataFormatError(f"{path}: meter {meter_id!r} not found in profiles_csv")
        return by_meter[meter_id]

    known = {b: resolve(m) for b, m in known_refs.items()}
    measurement = resolve(trafo_meter) if trafo_meter else None
    return Network(
        buses=buses,
        lines=lines,
        transformer_bus=str(trafo["bus"]),
        known_loads=known,
        unknown_loads=unknown,
        transformer_measurement=measurement,
        grid=grid,
    )


def write_network_json(path, network: Network, profiles_csv: str | None = None) -> None:
    """Write a network document; load series go to a sibling CSV."""
    path = Path(path)
    doc: dict = {
        "buses": [{"id": b.id, "v_nominal_v": b.v_nominal_v} for b in network.buses],
        "lines": [
            {"from_bus": l.from_bus, "to_bus": l.to_bus, "r_ohm": l.r_ohm, "x_ohm": l.x_ohm, "ampacity_a": l.ampacity_a}
            for l in network.lines
        ],
        "transformer": {"bus": network.transformer_bus},
        "known_loads": {b: p.meter_id for b, p in sorted(network.known_loads.items())},
        "unknown_loads": {
            b: {"e_ref_kwh": u.e_ref_j / JOULES_PER_KWH, "category": u.category.value}
            for b, u in sorted(network.unknown_loads.items())
        },
    }
    series = [network.known_loads[b] for b in sorted(network.known_loads)]
    if network.transformer_measurement is not None:
        doc["transformer"]["meter"] = network.transformer_measurement.meter_id
        series.append(network.transformer_measurement)
    if series:
        if network.grid is None:
            raise DataFormatError("network carries load series but no grid")
        if profiles_csv is None:
            profiles_csv = path.stem + "_profiles.csv"
        write_profiles_csv(path.parent / profiles_csv, network.grid, series)
        doc["profiles_csv"] = profiles_csv
    path.write_text(json.dumps(doc, indent=1) + "\n")


def aggregate_multicustomer(profiles, threshold: int) -> tuple[list[LoadProfile], list[LoadProfile]]:
    """Split profiles into (fixed, anonymisable) by metered customer count.

    Meters aggregating at least `threshold` customers may keep their true
    bus without breaching anonymity; everything else must be anonymised.
    """
    if threshold < 1:
        raise DataFormatError("threshold must be >= 1")
    fixed = [p for p in profiles if p.customer_count >= threshold]
    anonymisable = [p for p in profiles if p.customer_count < threshold]
    return fixed, anonymisable
