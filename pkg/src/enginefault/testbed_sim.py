"""Synthetic diesel-engine runs in the five-table testbed layout.

A run consists of a reference driving cycle (engine speed and torque at 1 Hz)
and three signal tables sampled at ``signal_rate_hz``:

* ``input_signal``  -- 5 actuator/control measurements
* ``states_signal`` -- 13 internal states, first-order lag responses of the inputs
* ``output_signal`` -- 9 sensors, noisy linear readouts of the states

Faults are injected at one of three sites (actuator, state, sensor). The
dynamics are deliberately not physical; only the data layout and the fault
signatures matter here.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

OMEGA_COLUMNS = ["omega_ref_rpm"]
TORQUE_COLUMNS = ["torque_ref_nm"]
INPUT_COLUMNS = [
    "throttle_area", "wastegate", "engine_speed_rpm", "ambient_temp_k", "ambient_pressure_kpa",
]
OUTPUT_COLUMNS = [
    "compressor_temp_k", "intercooler_temp_k", "intake_manifold_temp_k",
    "compressor_pressure_kpa", "intercooler_pressure_kpa", "intake_manifold_pressure_kpa",
    "exhaust_manifold_pressure_kpa", "air_filter_mass_flow_kgs", "engine_torque_nm",
]
STATE_COLUMNS = [
    "air_filter_temp_k", "air_filter_pressure_kpa",
    "compressor_temp_k", "compressor_pressure_kpa",
    "intercooler_temp_k", "intercooler_pressure_kpa",
    "intake_manifold_temp_k", "intake_manifold_pressure_kpa",
    "exhaust_manifold_temp_k", "exhaust_manifold_pressure_kpa",
    "turbine_temp_k", "turbine_pressure_kpa",
    "turbine_speed_krpm",
]

TABLES = {
    "omega": OMEGA_COLUMNS,
    "torque": TORQUE_COLUMNS,
    "input_signal": INPUT_COLUMNS,
    "output_signal": OUTPUT_COLUMNS,
    "states_signal": STATE_COLUMNS,
}
NUM_CLASSES = 12
IDLE_RPM = 800.0
MAX_RPM = 4000.0
PERIODIC_PERIOD_S = 20.0


class InvalidArgument(ValueError):
    pass


class CorpusWriteError(OSError):
    pass


class Site(str, Enum):
    ACTUATOR = "ACTUATOR"
    STATE = "STATE"
    SENSOR = "SENSOR"


class Shape(str, Enum):
    ABRUPT = "ABRUPT"
    PULSE = "PULSE"
    DRIFT = "DRIFT"
    PERIODIC = "PERIODIC"
    STUCK = "STUCK"
    GAIN = "GAIN"


SITE_WIDTH = {Site.ACTUATOR: len(INPUT_COLUMNS), Site.STATE: len(STATE_COLUMNS), Site.SENSOR: len(OUTPUT_COLUMNS)}


@dataclass(frozen=True)
class FaultSpec:
    fault_id: int
    site: Site
    channel: int
    shape: Shape
    onset_s: float
    duration_s: float = math.inf
    magnitude: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "site", Site(self.site))
        object.__setattr__(self, "shape", Shape(self.shape))
        if not 1 <= self.fault_id <= NUM_CLASSES - 1:
            raise InvalidArgument(f"fault_id must be in [1, 11], got {self.fault_id}")
        width = SITE_WIDTH[self.site]
        if not 0 <= self.channel < width:
            raise InvalidArgument(
                f"channel {self.channel} is out of range for site {self.site.value} (0-{width - 1})")
        if self.magnitude < 0:
            raise InvalidArgument(f"magnitude must be >= 0, got {self.magnitude}")
        if not self.duration_s > 0:
            raise InvalidArgument(f"duration_s must be > 0, got {self.duration_s}")
        if self.onset_s < 0:
            raise InvalidArgument(f"onset_s must be >= 0, got {self.onset_s}")

    def to_meta(self) -> dict:
        return {
            "fault_id": self.fault_id,
            "site": self.site.value,
            "channel": self.channel,
            "shape": self.shape.value,
            "onset_s": self.onset_s,
            # JSON has no infinity; a persistent fault is written as null
            "duration_s": None if math.isinf(self.duration_s) else self.duration_s,
            "magnitude": self.magnitude,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "FaultSpec | None":
        if not meta.get("fault_id"):
            return None
        dur = meta.get("duration_s")
        return cls(meta["fault_id"], meta["site"], meta["channel"], meta["shape"],
                   meta["onset_s"], math.inf if dur is None else dur, meta["magnitude"])


@dataclass(frozen=True)
class FaultTemplate:
    """A fault class: everything but the onset, which is drawn per run."""

    fault_id: int
    site: Site
    channel: int
    shape: Shape
    duration_s: float = math.inf

    def spec(self, onset_s: float, magnitude: float) -> FaultSpec:
        return FaultSpec(self.fault_id, self.site, self.channel, self.shape, onset_s,
                         self.duration_s, magnitude)


# Stand-in taxonomy: 4 actuator, 3 state, 4 sensor faults, each on its own channel.
DEFAULT_TEMPLATES = (
    FaultTemplate(1, Site.ACTUATOR, 0, Shape.ABRUPT),
    FaultTemplate(2, Site.ACTUATOR, 1, Shape.GAIN),
    FaultTemplate(3, Site.ACTUATOR, 2, Shape.STUCK),
    FaultTemplate(4, Site.ACTUATOR, 3, Shape.PULSE, 30.0),
    FaultTemplate(5, Site.STATE, 4, Shape.DRIFT),
    FaultTemplate(6, Site.STATE, 7, Shape.ABRUPT),
    FaultTemplate(7, Site.STATE, 12, Shape.PERIODIC),
    FaultTemplate(8, Site.SENSOR, 0, Shape.ABRUPT),
    FaultTemplate(9, Site.SENSOR, 6, Shape.GAIN),
    FaultTemplate(10, Site.SENSOR, 7, Shape.PULSE, 30.0),
    FaultTemplate(11, Site.SENSOR, 8, Shape.STUCK),
)


@dataclass
class DrivingCycle:
    duration_s: int
    time_s: np.ndarray
    speed_rpm: np.ndarray
    torque_nm: np.ndarray


@dataclass
class Table:
    time_s: np.ndarray
    values: np.ndarray  # (rows, channels)

    def copy(self) -> "Table":
        return Table(self.time_s.copy(), self.values.copy())


@dataclass
class SimulationRun:
    omega: Table
    torque: Table
    input_signal: Table
    output_signal: Table
    states_signal: Table
    seed: int
    fault: FaultSpec | None = None
    cycle_seed: int | None = None
    noise_scale: float = 1.0

    @property
    def duration_s(self) -> float:
        return float(self.omega.time_s[-1])

    def tables(self) -> dict[str, Table]:
        return {name: getattr(self, name) for name in TABLES}


@dataclass
class SimConfig:
    signal_rate_hz: float = 2.0
    noise_scale: float = 1.0


# --------------------------------------------------------------------------
# driving cycle

def generate_cycle(seed: int, duration_s: int) -> DrivingCycle:
    """Seeded WLTP-like speed/torque reference at 1 Hz over ``[0, duration_s]``."""
    if duration_s <= 0:
        raise InvalidArgument(f"duration_s must be positive, got {duration_s}")
    if duration_s < 10:
        raise InvalidArgument(f"duration_s must be at least 10 s, got {duration_s}")
    rng = np.random.default_rng([seed, 0xC7C1E])
    # knots of a piecewise-linear speed profile: idle, accelerate, cruise, decelerate
    knots_t = [0.0]
    knots_v = [IDLE_RPM]
    t = 0.0
    while t < duration_s:
        kind = rng.choice(["idle", "accel", "cruise", "decel"], p=[0.15, 0.35, 0.3, 0.2])
        if kind == "idle":
            dt, v = rng.uniform(3, 15), IDLE_RPM
        elif kind == "accel":
            dt, v = rng.uniform(5, 20), min(MAX_RPM * 0.9, knots_v[-1] + rng.uniform(300, 1500))
        elif kind == "cruise":
            dt, v = rng.uniform(10, 40), knots_v[-1]
        else:
            dt, v = rng.uniform(5, 15), max(IDLE_RPM, knots_v[-1] - rng.uniform(300, 1500))
        t += dt
        knots_t.append(t)
        knots_v.append(v)
    time_s = np.arange(duration_s + 1, dtype=np.float64)
    speed = np.interp(time_s, knots_t, knots_v)
    speed = _smooth(speed, 5)
    accel = np.gradient(speed)
    torque = 40.0 + 0.06 * (speed - IDLE_RPM) + 1.5 * np.clip(accel, -50, 150)
    torque = np.clip(_smooth(torque, 3), 0.0, None)
    return DrivingCycle(duration_s, time_s, np.clip(speed, 0.0, None), torque)


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    pad = width // 2
    padded = np.pad(x, pad, mode="edge")
    return np.convolve(padded, np.ones(width) / width, mode="valid")


# --------------------------------------------------------------------------
# engine response

# state targets: base + gains @ normalised drive [throttle, wastegate, speed, T_amb, p_amb]
_STATE_BASE = np.array([298, 100, 330, 130, 310, 128, 315, 125, 700, 160, 650, 115, 60.0])
_STATE_GAIN = np.array([
    [2, 0, 3, 8, 0],
    [-1.5, 0, -2, 0, 3],
    [25, -10, 35, 8, 0],
    [30, -20, 40, 0, 3],
    [6, -3, 8, 6, 0],
    [27, -18, 36, 0, 3],
    [8, -4, 10, 6, 0],
    [35, -15, 30, 0, 3],
    [150, 20, 90, 5, 0],
    [40, -25, 45, 0, 2],
    [120, 15, 80, 4, 0],
    [20, -18, 22, 0, 2],
    [40, -30, 55, 0, 0.5],
], dtype=np.float64)
_STATE_TAU_S = np.array([8, 2, 3, 1.5, 6, 1.5, 5, 1, 4, 1.2, 5, 1.5, 2.5])

# sensor readouts: output j = sum_k coef * state k + offset
_READOUT = [
    ((2, 1.0),),
    ((4, 1.0),),
    ((6, 1.0),),
    ((3, 1.0),),
    ((5, 1.0),),
    ((7, 1.0),),
    ((9, 1.0),),
    ((12, 0.004), (7, 0.0015)),
    ((7, 1.8), (8, 0.1)),
]
_READOUT_OFFSET = np.array([0, 0, 0, 0, 0, 0, 0, 0, -230.0])
_SENSOR_NOISE = np.array([0.4, 0.3, 0.3, 0.4, 0.4, 0.4, 0.6, 0.004, 2.0])
_INPUT_NOISE = np.array([0.01, 0.01, 15.0, 0.1, 0.05])


def _inputs(cycle: DrivingCycle, t: np.ndarray, seed: int, noise_scale: float) -> np.ndarray:
    speed = np.interp(t, cycle.time_s, cycle.speed_rpm)
    torque = np.interp(t, cycle.time_s, cycle.torque_nm)
    rng = np.random.default_rng([seed, 1])
    phase = rng.uniform(0, 2 * np.pi, size=2)
    slow = 2 * np.pi * t / max(cycle.duration_s, 1)
    cols = np.column_stack([
        0.1 + 0.8 * np.clip(torque / 250.0, 0, 1),
        0.2 + 0.6 * np.clip((speed - IDLE_RPM) / (MAX_RPM - IDLE_RPM), 0, 1),
        speed,
        # ambient wander counts as environment noise and scales with it
        298.0 + 2.0 * noise_scale * np.sin(0.5 * slow + phase[0]),
        101.3 + 0.8 * noise_scale * np.sin(0.7 * slow + phase[1]),
    ])
    noise = rng.standard_normal(cols.shape) * _INPUT_NOISE
    return cols + noise_scale * noise


def _drive(inputs: np.ndarray) -> np.ndarray:
    ref = np.array([0.3, 0.25, 1500.0, 298.0, 101.3])
    scale = np.array([0.2, 0.1, 800.0, 2.0, 0.8])
    return (inputs - ref) / scale


def _integrate_states(inputs: np.ndarray, dt: float) -> np.ndarray:
    targets = _STATE_BASE + _drive(inputs) @ _STATE_GAIN.T
    alpha = 1.0 - np.exp(-dt / _STATE_TAU_S)
    states = np.empty_like(targets)
    states[0] = targets[0]
    for k in range(1, len(targets)):
        states[k] = states[k - 1] + alpha * (targets[k] - states[k - 1])
    return states


def _readout(states: np.ndarray, seed: int, noise_scale: float) -> np.ndarray:
    out = np.empty((states.shape[0], len(_READOUT)))
    for j, terms in enumerate(_READOUT):
        col = np.full(states.shape[0], _READOUT_OFFSET[j])
        for k, coef in terms:
            col = col + coef * states[:, k]
        out[:, j] = col
    noise = np.random.default_rng([seed, 2]).standard_normal(out.shape) * _SENSOR_NOISE
    return out + noise_scale * noise


def simulate_run(cycle: DrivingCycle, seed: int, config: SimConfig | None = None) -> SimulationRun:
    """Clean (fault-free) run driven by ``cycle``."""
    config = config or SimConfig()
    dt = 1.0 / config.signal_rate_hz
    n = int(round(cycle.duration_s / dt)) + 1
    t = np.arange(n) * dt
    inputs = _inputs(cycle, t, seed, config.noise_scale)
    states = _integrate_states(inputs, dt)
    outputs = _readout(states, seed, config.noise_scale)
    return SimulationRun(
        omega=Table(cycle.time_s.copy(), cycle.speed_rpm[:, None].copy()),
        torque=Table(cycle.time_s.copy(), cycle.torque_nm[:, None].copy()),
        input_signal=Table(t.copy(), inputs),
        output_signal=Table(t.copy(), outputs),
        states_signal=Table(t, states),
        seed=seed,
        noise_scale=config.noise_scale,
    )


# --------------------------------------------------------------------------
# fault injection

def apply_shape(x: np.ndarray, t: np.ndarray, spec: FaultSpec, run_end: float) -> np.ndarray:
    """Return a copy of the 1-D signal ``x`` with the fault shape applied on its window."""
    y = x.copy()
    if spec.magnitude == 0:
        return y
    end = min(spec.onset_s + spec.duration_s, run_end + 1e-9)
    mask = (t >= spec.onset_s) & (t < spec.onset_s + spec.duration_s)
    if not mask.any():
        return y
    std = float(np.std(x))
    offset = spec.magnitude * std
    shape = spec.shape
    if shape in (Shape.ABRUPT, Shape.PULSE):
        y[mask] += offset
    elif shape is Shape.GAIN:
        y[mask] *= 1.0 + spec.magnitude
    elif shape is Shape.DRIFT:
        span = max(end - spec.onset_s, 1e-12)
        y[mask] += offset * (t[mask] - spec.onset_s) / span
    elif shape is Shape.PERIODIC:
        phase = np.mod(t[mask] - spec.onset_s, PERIODIC_PERIOD_S)
        y[mask] += np.where(phase < PERIODIC_PERIOD_S / 2, offset, -offset)
    elif shape is Shape.STUCK:
        held = x[np.argmax(mask)]
        y[mask] += min(spec.magnitude, 1.0) * (held - x[mask])
    return y


def inject_fault(run: SimulationRun, spec: FaultSpec) -> SimulationRun:
    """Copy of ``run`` with ``spec`` applied.

    Actuator and state faults propagate downstream: corrupted inputs drive the
    state integration, corrupted states are read out by the sensors.
    """
    if run.fault is not None:
        raise InvalidArgument("run already carries a fault")
    width = SITE_WIDTH[Site(spec.site)]
    if not 0 <= spec.channel < width:
        raise InvalidArgument(f"channel {spec.channel} invalid for site {spec.site}")
    if not 0 <= spec.onset_s < run.duration_s:
        raise InvalidArgument(f"onset {spec.onset_s} s outside run [0, {run.duration_s})")
    out = dataclasses.replace(
        run,
        input_signal=run.input_signal.copy(),
        states_signal=run.states_signal.copy(),
        output_signal=run.output_signal.copy(),
        fault=spec,
    )
    end = run.duration_s
    t = out.input_signal.time_s
    dt = float(t[1] - t[0])
    if spec.site is Site.ACTUATOR:
        inputs = out.input_signal.values
        inputs[:, spec.channel] = apply_shape(inputs[:, spec.channel], t, spec, end)
        out.states_signal.values = _integrate_states(inputs, dt)
        out.output_signal.values = _readout(out.states_signal.values, run.seed, run.noise_scale)
    elif spec.site is Site.STATE:
        states = out.states_signal.values
        states[:, spec.channel] = apply_shape(states[:, spec.channel], out.states_signal.time_s, spec, end)
        out.output_signal.values = _readout(states, run.seed, run.noise_scale)
    else:
        outputs = out.output_signal.values
        outputs[:, spec.channel] = apply_shape(outputs[:, spec.channel], out.output_signal.time_s, spec, end)
    return out


# --------------------------------------------------------------------------
# files

def write_run(run: SimulationRun, directory, missing_fraction: float = 0.0) -> None:
    """Write the five CSV tables and ``meta.json`` into ``directory``.

    ``missing_fraction`` blanks that share of ``input_signal`` cells (logging
    dropouts); the pattern is seeded by the run seed.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    holes = None
    if missing_fraction > 0:
        rng = np.random.default_rng([run.seed, 3])
        holes = rng.random(run.input_signal.values.shape) < missing_fraction
    for name, columns in TABLES.items():
        table = getattr(run, name)
        _write_csv(directory / f"{name}.csv", table, columns, holes if name == "input_signal" else None)
    meta = {"fault_id": 0, "site": None, "channel": None, "shape": None, "onset_s": None,
            "duration_s": None, "magnitude": None}
    if run.fault is not None:
        meta.update(run.fault.to_meta())
    meta["seed"] = run.seed
    meta["cycle_seed"] = run.cycle_seed
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, table: Table, columns: list[str], holes=None) -> None:
    lines = [",".join(["time_s", *columns])]
    for i, (t, row) in enumerate(zip(table.time_s, table.values)):
        cells = [_fmt(t)]
        for j, v in enumerate(row):
            cells.append("" if holes is not None and holes[i, j] else _fmt(v))
        lines.append(",".join(cells))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


def read_table(path) -> Table:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64, ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: {data.shape[1]} columns but {len(header)} header fields")
    return Table(data[:, 0], data[:, 1:])


def read_run(directory) -> SimulationRun:
    directory = Path(directory)
    tables = {name: read_table(directory / f"{name}.csv") for name in TABLES}
    meta = json.loads((directory / "meta.json").read_text())
    return SimulationRun(**tables, seed=meta["seed"], fault=FaultSpec.from_meta(meta),
                         cycle_seed=meta.get("cycle_seed"))


# --------------------------------------------------------------------------
# corpus

@dataclass
class CorpusConfig:
    runs_per_class: int = 40
    duration_s: int = 300
    signal_rate_hz: float = 2.0
    magnitude: float = 2.0
    onset_fraction: tuple[float, float] = (0.4, 0.75)
    noise_scale: float = 1.0
    missing_fraction: float = 0.002
    seed: int = 0
    templates: tuple[FaultTemplate, ...] = field(default=DEFAULT_TEMPLATES)


def run_plan(cfg: CorpusConfig, fault_id: int, index: int) -> tuple[int, int, FaultSpec | None]:
    """Seeds and fault spec for run ``index`` of class ``fault_id``."""
    ss = np.random.SeedSequence([cfg.seed, fault_id, index])
    cycle_seed, run_seed = (int(s) for s in ss.generate_state(2))
    if fault_id == 0:
        return cycle_seed, run_seed, None
    template = {t.fault_id: t for t in cfg.templates}[fault_id]
    lo, hi = cfg.onset_fraction
    rng = np.random.default_rng([cfg.seed, fault_id, index, 7])
    onset = float(np.floor(rng.uniform(lo, hi) * cfg.duration_s))
    return cycle_seed, run_seed, template.spec(onset, cfg.magnitude)


def build_run(cfg: CorpusConfig, fault_id: int, index: int) -> SimulationRun:
    cycle_seed, run_seed, spec = run_plan(cfg, fault_id, index)
    cycle = generate_cycle(cycle_seed, cfg.duration_s)
    run = simulate_run(cycle, run_seed, SimConfig(cfg.signal_rate_hz, cfg.noise_scale))
    run.cycle_seed = cycle_seed
    if spec is not None:
        run = inject_fault(run, spec)
    return run


def _generate_one(args) -> str:
    cfg, root, fault_id, index = args
    target = Path(root) / str(fault_id) / f"run_{index:04d}"
    partial = target.with_name(target.name + ".partial")
    try:
        run = build_run(cfg, fault_id, index)
        if partial.exists():
            shutil.rmtree(partial)
        write_run(run, partial, cfg.missing_fraction)
        if target.exists():
            shutil.rmtree(target)
        partial.rename(target)
    except OSError as exc:
        shutil.rmtree(partial, ignore_errors=True)
        raise CorpusWriteError(f"failed writing run {target}: {exc}") from exc
    return str(target)


def worker_count(default: int | None = None) -> int:
    """Worker pool size, capped by ``ENGINEFAULT_THREADS``."""
    n = default or os.cpu_count() or 1
    cap = os.environ.get("ENGINEFAULT_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def generate_dataset(cfg: CorpusConfig, root, workers: int | None = None) -> list[Path]:
    """Write ``runs_per_class`` runs for each of the 12 classes under ``root``."""
    root = Path(root)
    ids = sorted({0, *(t.fault_id for t in cfg.templates)})
    if ids != list(range(NUM_CLASSES)):
        raise InvalidArgument(f"templates must cover fault ids 1-11 exactly, got {ids[1:]}")
    jobs = [(cfg, str(root), fid, i) for fid in ids for i in range(cfg.runs_per_class)]
    for fid in ids:
        (root / str(fid)).mkdir(parents=True, exist_ok=True)
    n = worker_count(workers)
    if n <= 1 or len(jobs) < 2:
        paths = [_generate_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            paths = list(pool.map(_generate_one, jobs, chunksize=4))
    log.info("wrote %d runs under %s", len(paths), root)
    return [Path(p) for p in paths]
