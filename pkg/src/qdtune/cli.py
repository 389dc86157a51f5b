"""Command-line front end: gen, train, calibrate, tune, bench, render."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synthgen
from .calibrate import DEFAULT_GRID_STEP, DEFAULT_TAU, calibrate
from .detector import ModelDetector, OracleDetector, default_spec, dumps_detector, loads_detector, train
from .diagram import DiagramError, atomic_write, list_manifests, load_diagram, save_diagram
from .harness import (
    ExperimentError,
    batch_detections,
    load_config,
    patches_by_diagram,
    random_start,
    run_experiment,
)
from .explorer import TuningOutcome, TuningPriors, tune
from .render import render_trace

log = logging.getLogger("qdtune")


def _setup_logging() -> None:
    level = os.environ.get("QDTUNE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _diagrams_in(path: str):
    p = Path(path)
    if p.is_dir():
        files = list_manifests(p)
        if not files:
            raise DiagramError(f"no diagram manifests in {p}")
        return [load_diagram(f) for f in files]
    return [load_diagram(p)]


def _load_model(path: str):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"model not found: {p}")
    return loads_detector(p.read_bytes())


def cmd_gen(args) -> int:
    cfg = synthgen.make_profile(args.profile)
    out = Path(args.out)
    for d in synthgen.generate_many(cfg, args.count, args.seed):
        save_diagram(d, out / f"{d.id}.json")
        print(out / f"{d.id}.json")
    return 0


def cmd_train(args) -> int:
    profile = synthgen.dataset_profile(args.profile)
    diagrams = _diagrams_in(args.data)
    patches = [p for ps in patches_by_diagram(diagrams, profile) for p in ps]
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(len(patches))
    n_val = max(1, int(round(args.val_fraction * len(patches))))
    val = [patches[i] for i in perm[:n_val]]
    tr = [patches[i] for i in perm[n_val:]]
    spec = default_spec(args.model, seed=args.seed)
    if args.desk_scale:
        spec = spec.desk_scale()
    if args.updates:
        spec = replace(spec, train_updates=args.updates)
    det = train(spec, tr, val)
    atomic_write(Path(args.out), dumps_detector(det))
    best = max((e["val_accuracy"] for e in det.log), default=None)
    print(json.dumps({"model": args.out, "patches": len(patches), "best_val_accuracy": best}))
    return 0


def cmd_calibrate(args) -> int:
    det = _load_model(args.model)
    profile = synthgen.dataset_profile(args.profile)
    diagrams = _diagrams_in(args.val)
    patches = [p for ps in patches_by_diagram(diagrams, profile) for p in ps]
    if not patches:
        raise DiagramError("validation set has no patches")
    t = calibrate(batch_detections(det, patches, args.seed), args.tau, args.grid_step)
    atomic_write(Path(args.out), dumps_detector(det.with_thresholds(t)))
    print(json.dumps(t.to_dict(), sort_keys=True))
    return 0


def _parse_start(text: str) -> tuple[float, float]:
    try:
        g1, g2 = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected g1,g2 but got {text!r}") from None
    return g1, g2


def cmd_tune(args) -> int:
    d = load_diagram(args.diagram)
    profile = synthgen.dataset_profile(args.profile)
    if args.model == "oracle":
        detector, thresholds = OracleDetector(profile.detection_offset_px), None
    else:
        trained = _load_model(args.model)
        detector, thresholds = ModelDetector(trained), trained.thresholds
    over = {"max_steps": args.max_steps}
    if args.missed_line_check is not None:
        over["use_last_line_validation"] = args.missed_line_check == "on"
    priors = TuningPriors.from_profile(profile, **over)
    rng = np.random.default_rng(args.seed)
    start = args.start if args.start is not None else random_start(d, rng)
    out = tune(d, detector, thresholds, priors, start, rng, uncertainty_based=not args.no_uncertainty)
    print(json.dumps(out.to_dict(), sort_keys=True))
    if args.trace:
        atomic_write(Path(args.trace), render_trace(out, d).encode())
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    report = run_experiment(cfg, jobs=args.jobs)
    atomic_write(Path(args.out), report.to_json().encode())
    if args.csv:
        atomic_write(Path(args.csv), report.to_csv().encode())
    print(json.dumps(report.aggregate, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    d = load_diagram(args.diagram)
    p = Path(args.outcome)
    if not p.is_file():
        raise FileNotFoundError(f"outcome not found: {p}")
    out = TuningOutcome.from_dict(json.loads(p.read_text()))
    atomic_write(Path(args.out), render_trace(out, d).encode())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qdtune", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    profiles = list(synthgen.PROFILE_NAMES)

    p = sub.add_parser("gen", help="generate synthetic diagrams")
    p.add_argument("--profile", choices=profiles, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a patch detector")
    p.add_argument("--data", required=True, help="diagram manifest or directory")
    p.add_argument("--profile", choices=profiles, required=True)
    p.add_argument("--model", "--spec", dest="model", choices=["ff", "cnn", "bcnn"], required=True)
    p.add_argument("--desk-scale", action="store_true", help="a tenth of the updates, batches of 128")
    p.add_argument("--updates", type=int, default=None, help="override the number of updates")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="calibrate confidence thresholds on a validation set")
    p.add_argument("--model", required=True)
    p.add_argument("--val", required=True, help="diagram manifest or directory")
    p.add_argument("--profile", choices=profiles, default="si-sg")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--grid-step", type=float, default=DEFAULT_GRID_STEP)
    p.add_argument("--seed", type=int, default=0, help="sampling seed for Bayesian models")
    p.add_argument("--out", required=True, help="calibrated checkpoint path (input is left untouched)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("tune", help="run one tuning episode")
    p.add_argument("--diagram", required=True)
    p.add_argument("--model", required=True, help="checkpoint path, or 'oracle'")
    p.add_argument("--profile", choices=profiles, required=True)
    p.add_argument("--start", type=_parse_start, default=None, help="g1,g2 in volts (default: random)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-uncertainty", action="store_true", help="ignore confidence thresholds")
    p.add_argument("--missed-line-check", choices=["on", "off"], default=None)
    p.add_argument("--max-steps", type=int, default=1000)
    p.add_argument("--trace", default=None, help="write an SVG of the trace here")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("bench", help="run an experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", default=None, help="per-episode CSV path")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="draw a saved tuning outcome as SVG")
    p.add_argument("--diagram", required=True)
    p.add_argument("--outcome", required=True, help="outcome JSON printed by 'tune'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DiagramError, ExperimentError, ValueError, OSError, RuntimeError) as e:
        msg = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(msg), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
