"""Command line entry point: ``impc {train,evaluate,sweep,threshold,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import harness
from .config import ConfigError, Config, echo_config, load_config, resolve_output_dir
from .trainer import run_training

log = logging.getLogger("impc")


def _setup(args) -> tuple[Config, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = resolve_output_dir(cfg, args.output_dir)
    cfg.output_dir = str(out)
    echo_config(cfg, out)
    return cfg, out


def _learned(cfg: Config, out: Path, checkpoint) -> harness.Learned:
    env = cfg.environment()
    path = Path(checkpoint) if checkpoint else Path(cfg.evaluation.checkpoint)
    if not path.is_absolute() and not path.exists():
        path = out / path
    if not path.is_file():
        raise ConfigError("evaluation.checkpoint", f"checkpoint not found: {path}")
    try:
        return harness.Learned.from_checkpoint(path, env, cfg.train_config(), expected_net=cfg.network)
    except (ValueError, KeyError) as e:
        raise ConfigError("evaluation.checkpoint", str(e)) from None


def cmd_train(args) -> int:
    cfg, out = _setup(args)
    t0 = time.perf_counter()
    tr = run_training(cfg.environment(), cfg.train_config(), out, cfg.network)
    p = tr.state.params()
    log.info("trained %d steps in %.1f s; m=%.4f J=%s; %d failures", tr.step_count, time.perf_counter() - t0,
             p.m, [round(j, 6) for j in p.J], len(tr.failures))
    print(f"checkpoints written to {out}")
    return 0


def _evaluate(cfg: Config, out: Path, learned: harness.Learned) -> list:
    ev = cfg.evaluation
    env = cfg.environment()
    written = []
    if ev.init_degs:
        sc = harness.initial_condition_grid(ev.init_degs, ev.methods, ev.trials, ev.duration, ev.seed0)
        reps, _ = harness.run_grid(env, sc, learned, out, ev.workers, name="initial_conditions")
        written.append(("initial_conditions", reps))
    if ev.wind_kinds and ev.wind_speeds:
        sc = [harness.Scenario(m, 0.0, cfg.wind.event(k, v), ev.trials, seed0=ev.seed0, duration=ev.duration)
              for k in ev.wind_kinds for v in ev.wind_speeds for m in ev.methods]
        reps, _ = harness.run_grid(env, sc, learned, out, ev.workers, name="wind")
        written.append(("wind", reps))
    for name, reps in written:
        print(f"{name}: {len(reps)} rows -> {out / (name + '.csv')}")
    return written


def cmd_evaluate(args) -> int:
    cfg, out = _setup(args)
    _evaluate(cfg, out, _learned(cfg, out, args.checkpoint))
    return 0


def cmd_sweep(args) -> int:
    """Train, then evaluate the fresh best checkpoint in the same run directory."""
    cfg, out = _setup(args)
    run_training(cfg.environment(), cfg.train_config(), out, cfg.network)
    _evaluate(cfg, out, _learned(cfg, out, out / "best.json"))
    return 0


def cmd_threshold(args) -> int:
    cfg, out = _setup(args)
    th = cfg.threshold
    if args.cap is not None:
        if args.cap <= 0:
            raise ConfigError("threshold.cap", "must be positive")
        th = dataclasses.replace(th, cap=args.cap)
    kinds = [args.kind] if args.kind else list(th.kinds)
    learned = _learned(cfg, out, args.checkpoint)
    env = cfg.environment()
    results = {}
    for kind in kinds:
        r = harness.find_failure_threshold(env, learned, kind, th.method, th.cap, th.resolution, th.seed,
                                           th.duration, cfg.wind.start, cfg.wind.duration)
        print(r.message())
        results[kind] = {"speed": r.speed, "cap": r.cap, "method": r.method, "monotone": r.monotone,
                         "trace": r.trace}
    (out / "thresholds.json").write_text(json.dumps(results, indent=1))
    return 0


def cmd_plot(args) -> int:
    cfg, out = _setup(args)
    sources = [Path(p) for p in args.results] if args.results else sorted(out.glob("*.json"))
    traces = {}
    for p in sources:
        if not p.is_file():
            raise ConfigError("results", f"results file not found: {p}")
        try:
            _, tr = harness.read_results(p)
        except (ValueError, KeyError):
            if args.results:
                raise ConfigError("results", f"not a results file: {p}") from None
            continue
        traces.update(tr)
    if not traces:
        raise ConfigError("results", f"no results with traces found in {out}")
    paths = harness.emit_plots(traces, out / "plots", angle=args.angle)
    print(f"{len(paths)} plots -> {out / 'plots'}")
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "threshold": cmd_threshold,
            "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="impc", description="Imperative MPC for quadrotor attitude control")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__)
        p.add_argument("config", help="YAML config file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--output-dir", help="override the output directory")
        if name in ("evaluate", "threshold"):
            p.add_argument("--checkpoint", help="checkpoint file (default: evaluation.checkpoint)")
        if name == "threshold":
            p.add_argument("--kind", choices=("impulse", "step"))
            p.add_argument("--cap", type=float, help="highest wind speed tried, m/s")
        if name == "plot":
            p.add_argument("--results", nargs="*", help="results JSON files (default: all in the output dir)")
            p.add_argument("--angle", default="pitch", choices=("roll", "pitch", "yaw", "all"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as e:  # any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
