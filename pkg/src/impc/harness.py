"""Scenarios, control metrics, repeated trials, wind thresholds and plots."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .ionet import MlpWeights, load_checkpoint
from .sensors import WindEvent
from .simulation import FlightLog, fly
from .trainer import METHODS, Environment, TrainConfig, method_switches

SETTLE_BAND_DEG = 1.5
STEADY_WINDOW = 0.5          # s averaged for the final steady attitude


@dataclass
class Scenario:
    method: str = "iMPC"
    init_deg: float = 0.0                 # applied to roll, pitch and yaw
    wind: WindEvent | None = None
    trials: int = 10
    seeds: tuple | None = None            # default: seed0, seed0 + 1, ...
    seed0: int = 2001
    duration: float = 3.0
    condition: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.duration <= STEADY_WINDOW:
            raise ValueError(f"duration must exceed the {STEADY_WINDOW} s steady window")
        if self.seeds is None:
            self.seeds = tuple(range(self.seed0, self.seed0 + self.trials))
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) != self.trials:
            raise ValueError("need one seed per trial")
        if not self.condition:
            if self.wind is None:
                self.condition = f"{self.init_deg:g}deg"
            else:
                self.condition = f"{self.wind.kind} {self.wind.speed:g}m/s"

    def x0(self) -> np.ndarray:
        return dyn.hover_state(np.radians([self.init_deg] * 3))


@dataclass
class MetricReport:
    """Per-trial ST (s, None if never settled), RMSE and SSE (deg), IMU
    attitude RMSE (rad) and failure flags. Aggregates use the population
    std over the finite per-trial values."""

    method: str = ""
    condition: str = ""
    st: list = field(default_factory=list)
    rmse: list = field(default_factory=list)
    sse: list = field(default_factory=list)
    imu_rmse: list = field(default_factory=list)
    failed: list = field(default_factory=list)

    @staticmethod
    def _finite(vals):
        return np.array([v for v in vals if v is not None and math.isfinite(v)], dtype=float)

    def mean(self, name: str) -> float:
        v = self._finite(getattr(self, name))
        return float(np.mean(v)) if len(v) else float("nan")

    def std(self, name: str) -> float:
        v = self._finite(getattr(self, name))
        return float(np.std(v)) if len(v) else float("nan")

    def median(self, name: str) -> float:
        v = self._finite(getattr(self, name))
        return float(np.median(v)) if len(v) else float("nan")

    @property
    def n_failed(self) -> int:
        return int(sum(bool(f) for f in self.failed))

    @property
    def any_failed(self) -> bool:
        return self.n_failed > 0

    @classmethod
    def combine(cls, reports, method: str = "", condition: str = "") -> "MetricReport":
        out = cls(method, condition)
        for r in reports:
            for name in ("st", "rmse", "sse", "imu_rmse", "failed"):
                getattr(out, name).extend(getattr(r, name))
        return out

    def row(self) -> dict:
        row = {"method": self.method, "condition": self.condition, "trials": len(self.failed),
               "failed": self.n_failed}
        for name in ("st", "rmse", "sse", "imu_rmse"):
            row[f"{name}_mean"] = self.mean(name)
            row[f"{name}_std"] = self.std(name)
        return row

    def to_dict(self) -> dict:
        clean = lambda vals: [None if v is None or not math.isfinite(v) else float(v) for v in vals]
        return {"method": self.method, "condition": self.condition, "st": clean(self.st),
                "rmse": clean(self.rmse), "sse": clean(self.sse), "imu_rmse": clean(self.imu_rmse),
                "failed": [bool(f) for f in self.failed]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        nan = lambda vals: [float("nan") if v is None else float(v) for v in vals]
        return cls(d["method"], d["condition"], [None if v is None else float(v) for v in d["st"]],
                   nan(d["rmse"]), nan(d["sse"]), nan(d["imu_rmse"]), [bool(f) for f in d["failed"]])

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricReport):
            return NotImplemented
        same = lambda a, b: len(a) == len(b) and all(
            (x is None and y is None) or (x is not None and y is not None and (x == y or (x != x and y != y)))
            for x, y in zip(a, b))
        return (self.method, self.condition, self.failed) == (other.method, other.condition, other.failed) and \
            all(same(getattr(self, n), getattr(other, n)) for n in ("st", "rmse", "sse", "imu_rmse"))


def _wrap_deg(a):
    return (np.asarray(a) + 180.0) % 360.0 - 180.0


def settling_time(times, err_deg, band: float = SETTLE_BAND_DEG, window: float = STEADY_WINDOW):
    """First time after which every angle stays within ``band`` of its mean
    over the final ``window`` seconds. None unless the whole final window is
    inside the band (the response must remain there, not just end there)."""
    times = np.asarray(times, dtype=float)
    err = np.atleast_2d(np.asarray(err_deg, dtype=float).T).T
    tail = times >= times[-1] - window
    steady = np.mean(err[tail], axis=0)
    outside = np.max(np.abs(_wrap_deg(err - steady)), axis=1) > band
    if np.any(outside[tail]):
        return None, steady
    idx = np.flatnonzero(outside)
    return (float(times[0]) if len(idx) == 0 else float(times[idx[-1] + 1])), steady


def compute_metrics(times, attitude, desired=(0.0, 0.0, 0.0), imu_rmse: float = float("nan"),
                    failed: bool = False, method: str = "", condition: str = "") -> MetricReport:
    """Single-trial report from an attitude trajectory in radians.

    RMSE is over all samples and angles; SSE is the largest per-angle
    distance between the final-window mean and the desired attitude."""
    times = np.asarray(times, dtype=float)
    att = np.atleast_2d(np.asarray(attitude, dtype=float))
    if len(times) != len(att) or len(times) < 2:
        raise ValueError("need matching times and attitudes (at least two samples)")
    if failed:
        return MetricReport(method, condition, [None], [float("nan")], [float("nan")], [imu_rmse], [True])
    err = _wrap_deg(np.degrees(att - np.asarray(desired, dtype=float)))
    st, steady = settling_time(times, err)
    rmse = float(np.sqrt(np.mean(err ** 2)))
    sse = float(np.max(np.abs(steady)))
    return MetricReport(method, condition, [st], [rmse], [sse], [float(imu_rmse)], [False])


# ---------------------------------------------------------------- learner per method


@dataclass
class Learned:
    """Network and parameters available to the methods.

    Methods without a learned network fly the zero-head (classic) integrator;
    methods without learned dynamics fly the nominal (initial-offset) model."""

    nominal: dyn.VehicleParams
    learned: dyn.VehicleParams | None = None
    weights: MlpWeights | None = None

    @classmethod
    def untrained(cls, env: Environment, cfg: TrainConfig | None = None) -> "Learned":
        cfg = cfg or TrainConfig()
        tp = env.true_params
        return cls(dyn.VehicleParams(cfg.init_offset * tp.m, tuple(cfg.init_offset * j for j in tp.J)))

    @classmethod
    def from_checkpoint(cls, path, env: Environment, cfg: TrainConfig | None = None,
                        expected_net=None) -> "Learned":
        w, extra = load_checkpoint(path)
        if expected_net is not None and w.config != expected_net:
            raise ValueError(f"checkpoint architecture {w.config} does not match the configured {expected_net}")
        out = cls.untrained(env, cfg)
        out.learned = dyn.VehicleParams(float(extra["m"]), tuple(float(j) for j in extra["J"]))
        out.weights = w
        return out

    def resolve(self, method: str):
        """(weights or None, model params) flown by ``method``."""
        net, params = method_switches(method)
        w = self.weights if net and self.weights is not None else None
        p = self.learned if params and self.learned is not None else self.nominal
        return w, p


# ---------------------------------------------------------------- trials and grids


def run_trial(env: Environment, scenario: Scenario, learned: Learned, seed: int) -> tuple[FlightLog, MetricReport]:
    weights, params = learned.resolve(scenario.method)
    log = fly(env.problem(params), env.true_params, scenario.x0(), scenario.duration, weights, env.plant,
              env.noise_for(seed), scenario.wind, seed)
    rep = compute_metrics(log.times, log.measured_att, imu_rmse=log.imu_rmse(), failed=log.failed,
                          method=scenario.method, condition=scenario.condition)
    return log, rep


def _trace(log: FlightLog, every: int) -> dict:
    att = np.degrees(log.states[::every, 3:6])
    return {"t": log.times[::every].tolist(), "roll": att[:, 0].tolist(), "pitch": att[:, 1].tolist(),
            "yaw": att[:, 2].tolist()}


def _scenario_job(args):
    env, scenario, learned, every = args
    reports, trace = [], None
    for seed in scenario.seeds:
        log, rep = run_trial(env, scenario, learned, seed)
        reports.append(rep)
        if trace is None:
            trace = _trace(log, every)
    return MetricReport.combine(reports, scenario.method, scenario.condition), trace


def run_grid(env: Environment, scenarios, learned: Learned, out_dir=None, workers: int = 1,
             name: str = "results"):
    """Run every scenario's trials. Returns (reports, traces); traces hold the
    first trial's attitude (deg) at control rate. Writes ``<name>.csv`` and
    ``<name>.json`` when ``out_dir`` is given."""
    scenarios = list(scenarios)
    every = env.plant.substeps
    jobs = [(env, s, learned, every) for s in scenarios]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_scenario_job, jobs))
    else:
        done = [_scenario_job(j) for j in jobs]
    reports = [r for r, _ in done]
    traces = {f"{r.method} | {r.condition}": t for r, t in done}
    if out_dir is not None:
        write_results(Path(out_dir), reports, traces, name)
    return reports, traces


CSV_FIELDS = ["method", "condition", "trials", "failed", "st_mean", "st_std", "rmse_mean", "rmse_std",
              "sse_mean", "sse_std", "imu_rmse_mean", "imu_rmse_std"]


def write_results(out_dir, reports, traces=None, name: str = "results"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.row().items()})
    doc = {"reports": [r.to_dict() for r in reports], "traces": traces or {}}
    (out_dir / f"{name}.json").write_text(json.dumps(doc, indent=1))
    return out_dir / f"{name}.csv", out_dir / f"{name}.json"


def read_results(path):
    """(reports, traces) from a results JSON."""
    doc = json.loads(Path(path).read_text())
    return [MetricReport.from_dict(d) for d in doc["reports"]], doc.get("traces", {})


def initial_condition_grid(degs=(10.0, 15.0, 20.0), methods=METHODS, trials: int = 10, duration: float = 3.0,
                           seed0: int = 2001) -> list[Scenario]:
    return [Scenario(m, d, None, trials, seed0=seed0, duration=duration) for d in degs for m in methods]


def wind_event(kind: str, speed: float, start: float = 0.5, duration: float = 0.3, **kw) -> WindEvent:
    return WindEvent(kind=kind, start=start, duration=duration, speed=speed, **kw)


def wind_grid(kinds=("impulse", "step"), speeds=(10.0, 15.0, 20.0), methods=METHODS, trials: int = 10,
              duration: float = 3.0, seed0: int = 2001) -> list[Scenario]:
    return [Scenario(m, 0.0, wind_event(k, v), trials, seed0=seed0, duration=duration)
            for k in kinds for v in speeds for m in methods]


# ---------------------------------------------------------------- wind threshold


@dataclass
class ThresholdResult:
    kind: str
    method: str
    speed: float | None                   # lowest failing speed, None if none up to the cap
    cap: float
    trace: list = field(default_factory=list)   # (speed, failed) in evaluation order

    @property
    def monotone(self) -> bool:
        """Failure flags never go back to survival as speed increases."""
        flags = [f for _, f in sorted(self.trace)]
        return all(not a or b for a, b in zip(flags, flags[1:]))

    def message(self) -> str:
        if self.speed is None:
            return f"{self.method} {self.kind}: no failure <= cap {self.cap:g} m/s"
        return f"{self.method} {self.kind}: loses control at {self.speed:g} m/s"


def find_failure_threshold(env: Environment, learned: Learned, kind: str, method: str = "iMPC",
                           cap: float = 1000.0, resolution: float = 1.0, seed: int = 2001,
                           duration: float = 2.0, start: float = 0.5, wind_duration: float = 0.3) -> ThresholdResult:
    """Bisection on wind speed for the lowest speed at which the closed loop
    diverges or flips. Survival is assumed monotone in speed; the trace lets
    callers check it."""
    if kind not in ("impulse", "step"):
        raise ValueError("kind must be 'impulse' or 'step'")
    if cap <= 0 or resolution <= 0:
        raise ValueError("cap and resolution must be positive")
    res = ThresholdResult(kind, method, None, cap)

    def fails(speed: float) -> bool:
        sc = Scenario(method, 0.0, wind_event(kind, speed, start, wind_duration), 1, (seed,), duration=duration)
        log, _ = run_trial(env, sc, learned, seed)
        res.trace.append((float(speed), bool(log.failed)))
        return log.failed

    if not fails(cap):
        return res
    lo, hi = 0.0, float(cap)
    while hi - lo > resolution:
        mid = math.floor((lo + hi) / 2 / resolution) * resolution
        if mid <= lo:
            mid = lo + resolution
        if mid >= hi:
            break
        if fails(mid):
            hi = mid
        else:
            lo = mid
    res.speed = hi
    return res


# ---------------------------------------------------------------- plots


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name).strip("_")


def emit_plots(traces: dict, out_dir, names=None, angle: str = "pitch") -> list[Path]:
    """One SVG line chart of attitude (deg) vs time per scenario. Output is
    byte-identical for identical input."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(traces) if names is None else list(names)
    if not names:
        raise ValueError("no series to plot")
    for n in names:
        if n not in traces:
            raise KeyError(f"missing series {n!r}")
        if len(traces[n].get("t", [])) == 0:
            raise ValueError(f"series {n!r} is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with matplotlib.rc_context({"svg.hashsalt": "impc", "svg.fonttype": "none"}):
        for n in names:
            tr = traces[n]
            fig, ax = plt.subplots(figsize=(6, 3.5))
            for key in ("roll", "pitch", "yaw") if angle == "all" else (angle,):
                if key not in tr:
                    plt.close(fig)
                    raise KeyError(f"series {n!r} has no {key!r} column")
                ax.plot(tr["t"], tr[key], label=key)
            ax.set_xlabel("time [s]")
            ax.set_ylabel("attitude [deg]")
            ax.set_title(n)
            ax.grid(True, alpha=0.3)
            ax.legend(loc="upper right")
            fig.tight_layout()
            p = out_dir / f"{_safe(n)}.svg"
            fig.savefig(p, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(p)
    return paths
