"""Offline evaluation: dataset splits, seeded experiments, baselines and reports.

An experiment is a grid of units, one per (seed, fold). Each unit trains and
calibrates a detector on the fold's training and validation patches (or
plugs in a baseline), scores the test patches, then runs tuning episodes
from random starts on the fold's test diagrams. Every random draw comes
from a ``SeedSequence`` keyed by the master seed and the unit or episode
coordinates, so results do not depend on execution order or job count.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import synthgen
from .calibrate import UNKNOWN, ThresholdSet, apply_threshold, calibrate
from .detector import (
    Detection,
    ModelDetector,
    ModelSpec,
    NoisyOracleDetector,
    OracleDetector,
    TrainingError,
    default_spec,
    train,
)
from .detector.model import stack_patches
from .diagram import (
    LINE,
    NO_LINE,
    DatasetProfile,
    PatchSample,
    StabilityDiagram,
    extract_patches,
    list_manifests,
    load_diagram,
    region_at,
)
from .explorer import TuningPriors, tune
from .render import render_trace

log = logging.getLogger(__name__)

FOLD_MODES = ("cross_validation", "pooled")
BASELINES = ("oracle", "random", "noisy-oracle")
CV_VAL_FRACTION = 0.1
POOLED_FRACTIONS = (0.7, 0.1, 0.2)
LINE_METRICS = (
    "accuracy",
    "accuracy_above_threshold",
    "error_reduction_using_threshold",
    "rate_below_threshold",
)
TUNING_METRICS = ("success_rate", "mean_steps")

# Stream tags for SeedSequence keys.
_SPLIT, _TRAIN, _NOISE = 1, 2, 3


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class Fold:
    index: int
    test_diagrams: tuple[int, ...]
    train: tuple[PatchSample, ...]
    val: tuple[PatchSample, ...]
    test: tuple[PatchSample, ...]


def patches_by_diagram(diagrams: Sequence[StabilityDiagram], profile: DatasetProfile) -> list[list[PatchSample]]:
    return [extract_patches(d, profile) for d in diagrams]


def _cv_fold(per_diagram: list[list[PatchSample]], i: int, rng: np.random.Generator) -> Fold:
    pool = [p for j, ps in enumerate(per_diagram) if j != i for p in ps]
    perm = rng.permutation(len(pool))
    n_val = max(1, int(round(CV_VAL_FRACTION * len(pool))))
    val = tuple(pool[k] for k in perm[:n_val])
    train_ = tuple(pool[k] for k in perm[n_val:])
    return Fold(i, (i,), train_, val, tuple(per_diagram[i]))


def split_cross_validation(
    diagrams: Sequence[StabilityDiagram],
    profile: DatasetProfile,
    rng: np.random.Generator,
    per_diagram: list[list[PatchSample]] | None = None,
) -> list[Fold]:
    """One fold per diagram: its patches are the test set, the rest split 90/10."""
    if len(diagrams) < 2:
        raise ExperimentError("cross-validation needs at least 2 diagrams")
    per = per_diagram if per_diagram is not None else patches_by_diagram(diagrams, profile)
    return [_cv_fold(per, i, rng) for i in range(len(diagrams))]


def _pooled_fold(per_diagram: list[list[PatchSample]], rng: np.random.Generator) -> Fold:
    pool = [p for ps in per_diagram for p in ps]
    n = len(pool)
    if n < 10:
        raise ExperimentError(f"pooled split needs at least 10 patches, got {n}")
    perm = rng.permutation(n)
    n_tr = int(POOLED_FRACTIONS[0] * n)
    n_va = int(POOLED_FRACTIONS[1] * n)
    take = lambda ks: tuple(pool[k] for k in ks)  # noqa: E731
    return Fold(
        0,
        tuple(range(len(per_diagram))),
        take(perm[:n_tr]),
        take(perm[n_tr:n_tr + n_va]),
        take(perm[n_tr + n_va:]),
    )


def split_pooled(
    diagrams: Sequence[StabilityDiagram],
    profile: DatasetProfile,
    rng: np.random.Generator,
    per_diagram: list[list[PatchSample]] | None = None,
) -> Fold:
    """A single 70/10/20 random partition of the patches of every diagram."""
    per = per_diagram if per_diagram is not None else patches_by_diagram(diagrams, profile)
    return _pooled_fold(per, rng)


# ---------------------------------------------------------------- metrics


def compute_line_metrics(detections_with_truth: Sequence[tuple[Detection, str]], thresholds: ThresholdSet) -> dict:
    """Plain and thresholded accuracy of a set of verdicts.

    ``error_reduction_using_threshold`` is 1.0 when there are no errors at
    all, and ``accuracy_above_threshold`` is None when every verdict is
    below threshold.
    """
    if len(detections_with_truth) == 0:
        raise ValueError("no detections to score")
    total = len(detections_with_truth)
    correct = errors_above = unknown = correct_above = 0
    for det, truth in detections_with_truth:
        ok = det.category == truth
        correct += ok
        if apply_threshold(det, thresholds) == UNKNOWN:
            unknown += 1
        elif ok:
            correct_above += 1
        else:
            errors_above += 1
    errors = total - correct
    above = total - unknown
    return {
        "count": total,
        "errors": errors,
        "errors_above_threshold": errors_above,
        "below_threshold": unknown,
        "accuracy": correct / total,
        "accuracy_above_threshold": correct_above / above if above else None,
        "error_reduction_using_threshold": 1.0 - errors_above / errors if errors else 1.0,
        "rate_below_threshold": unknown / total,
    }


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    """What to run. ``diagrams`` lists manifest files or directories of manifests;
    ``synthetic`` (``{"profile", "count", "seed", "overrides"}``) generates them instead."""

    diagrams: tuple[str, ...] = ()
    synthetic: dict | None = None
    profile: str = "si-sg"
    model: dict = field(default_factory=lambda: {"kind": "cnn"})
    desk_scale: bool = True
    folds: str = "cross_validation"
    seeds: int = 10
    starts_per_diagram: int = 50
    tau: float = 0.2
    grid_step: float = 0.001
    uncertainty_based: bool = True
    baseline: str | None = None
    noisy_error_rate: float = 0.05
    noisy_low_conf_given_error: float = 0.8
    use_last_line_validation: bool | None = None
    max_steps: int = 1000
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "diagrams", tuple(self.diagrams))
        if self.seeds < 1:
            raise ExperimentError("seeds must be >= 1")
        if self.starts_per_diagram < 1:
            raise ExperimentError("starts_per_diagram must be >= 1")
        if self.folds not in FOLD_MODES:
            raise ExperimentError(f"folds must be one of {FOLD_MODES}, got {self.folds!r}")
        if self.baseline is not None and self.baseline not in BASELINES:
            raise ExperimentError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if self.profile not in synthgen.PROFILE_NAMES:
            raise ExperimentError(f"unknown profile {self.profile!r}")
        if self.baseline is None and self.model.get("kind") not in ("ff", "cnn", "bcnn"):
            raise ExperimentError(f"unknown model kind {self.model.get('kind')!r}")
        if not self.diagrams and not self.synthetic:
            raise ExperimentError("config lists no diagrams and no synthetic set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diagrams"] = list(self.diagrams)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ExperimentError(f"unknown config keys: {', '.join(sorted(extra))}")
        return cls(**raw)

    def dataset_profile(self) -> DatasetProfile:
        return synthgen.dataset_profile(self.profile)

    def priors(self) -> TuningPriors:
        over = {"max_steps": self.max_steps}
        if self.use_last_line_validation is not None:
            over["use_last_line_validation"] = self.use_last_line_validation
        return TuningPriors.from_profile(self.dataset_profile(), **over)

    def model_spec(self, seed: int) -> ModelSpec:
        raw = dict(self.model)
        spec = default_spec(raw.pop("kind"), seed=seed)
        if self.desk_scale:
            spec = spec.desk_scale()
        return replace(spec, **raw) if raw else spec


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ExperimentError(f"config not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ExperimentError(f"{path}: invalid JSON at offset {e.pos}: {e.msg}") from None
    files = []
    for entry in raw.get("diagrams", []):
        p = Path(entry)
        if not p.is_absolute():
            p = path.parent / p
        files.append(str(p))
    raw["diagrams"] = files
    return ExperimentConfig.from_dict(raw)


def load_diagrams(cfg: ExperimentConfig) -> list[StabilityDiagram]:
    if cfg.synthetic:
        syn = dict(cfg.synthetic)
        base = synthgen.make_profile(syn.get("profile", cfg.profile))
        over = dict(syn.get("overrides", {}))
        if "fade" in over and isinstance(over["fade"], dict):
            f = dict(over["fade"])
            if f.get("lines") is not None:
                f["lines"] = tuple(f["lines"])
            over["fade"] = synthgen.Fade(**f)
        if "background_osc" in over and isinstance(over["background_osc"], dict):
            over["background_osc"] = synthgen.Oscillation(**over["background_osc"])
        base = replace(base, **over)
        return synthgen.generate_many(base, int(syn.get("count", 10)), int(syn.get("seed", 0)))
    out = []
    for entry in cfg.diagrams:
        p = Path(entry)
        paths = list_manifests(p) if p.is_dir() else [p]
        out.extend(load_diagram(q) for q in paths)
    if not out:
        raise ExperimentError("no diagrams found")
    return out


# ---------------------------------------------------------------- experiment


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def episode_rng(master: int, seed_index: int, diagram_index: int, start_index: int) -> np.random.Generator:
    return _rng(master, seed_index, diagram_index, start_index)


def random_start(d: StabilityDiagram, rng: np.random.Generator) -> tuple[float, float]:
    lo, hi = d.bounds_v
    return float(rng.uniform(lo[0], hi[0])), float(rng.uniform(lo[1], hi[1]))


def batch_detections(trained, patches: Sequence[PatchSample], seed: int) -> list[tuple[Detection, str]]:
    x, _ = stack_patches(patches)
    y, conf = trained.infer_batch(x, sampling_seed=seed)
    return [
        (Detection(float(yi), LINE if yi >= 0.5 else NO_LINE, float(ci)), p.category)
        for yi, ci, p in zip(y, conf, patches)
    ]


def _oracle_detections(det, patches, by_id, rng) -> list[tuple[Detection, str]]:
    return [(det.classify(by_id[p.diagram_id], p.rect, rng), p.category) for p in patches]


def _run_unit(cfg: ExperimentConfig, diagrams, per_diagram, seed_index: int, fold_index: int) -> dict:
    master = cfg.master_seed
    profile = cfg.dataset_profile()
    split_rng = _rng(master, seed_index, fold_index, _SPLIT)
    if cfg.baseline == "random":
        # No patches are involved; only the test diagrams matter.
        tests = (fold_index,) if cfg.folds == "cross_validation" else tuple(range(len(diagrams)))
        fold = Fold(fold_index, tests, (), (), ())
    elif cfg.folds == "cross_validation":
        fold = _cv_fold(per_diagram, fold_index, split_rng)
    else:
        fold = _pooled_fold(per_diagram, split_rng)
    by_id = {d.id: d for d in diagrams}

    detector, thresholds, metrics = None, ThresholdSet(tau=cfg.tau), None
    if cfg.baseline is None:
        train_seed = int(np.random.SeedSequence([master, seed_index, fold_index, _TRAIN]).generate_state(1)[0])
        spec = cfg.model_spec(train_seed)
        try:
            trained = train(spec, fold.train, fold.val)
        except TrainingError as e:
            raise ExperimentError(f"fold {fold_index} seed {seed_index}: {e}") from e
        thresholds = calibrate(batch_detections(trained, fold.val, train_seed), cfg.tau, cfg.grid_step)
        detector = ModelDetector(trained.with_thresholds(thresholds))
        metrics = compute_line_metrics(batch_detections(trained, fold.test, train_seed), thresholds)
    elif cfg.baseline == "oracle":
        detector = OracleDetector(profile.detection_offset_px)
        metrics = compute_line_metrics(_oracle_detections(detector, fold.test, by_id, None), thresholds)
    elif cfg.baseline == "noisy-oracle":
        detector = NoisyOracleDetector(
            profile.detection_offset_px, cfg.noisy_error_rate, cfg.noisy_low_conf_given_error
        )
        noise = _rng(master, seed_index, fold_index, _NOISE)
        thresholds = calibrate(_oracle_detections(detector, fold.val, by_id, noise), cfg.tau, cfg.grid_step)
        metrics = compute_line_metrics(_oracle_detections(detector, fold.test, by_id, noise), thresholds)

    priors = cfg.priors()
    episodes = []
    for di in fold.test_diagrams:
        d = diagrams[di]
        for k in range(cfg.starts_per_diagram):
            rng = episode_rng(master, seed_index, di, k)
            start = random_start(d, rng)
            if cfg.baseline == "random":
                final, steps, reason = start, 0, None
                success = region_at(d, start) == "1"
            else:
                out = tune(d, detector, thresholds, priors, start, rng, cfg.uncertainty_based)
                final, steps, reason, success = out.final_v, out.steps, out.failure_reason, out.success
            episodes.append({
                "fold": fold_index,
                "seed": seed_index,
                "diagram_index": di,
                "diagram_id": d.id,
                "start_index": k,
                "start_v": list(start),
                "final_v": list(final),
                "success": bool(success),
                "steps": int(steps),
                "failure_reason": reason,
            })
    log.info("fold %d seed %d: %d episodes", fold_index, seed_index, len(episodes))
    return {
        "fold": fold_index,
        "seed": seed_index,
        "test_diagram_ids": [diagrams[i].id for i in fold.test_diagrams],
        "split_sizes": {"train": len(fold.train), "val": len(fold.val), "test": len(fold.test)},
        "thresholds": thresholds.to_dict(),
        "line_metrics": metrics,
        **_tuning_summary(episodes),
        "episodes": episodes,
    }


def _tuning_summary(episodes: list[dict]) -> dict:
    n = len(episodes)
    return {
        "episodes_count": n,
        "success_rate": math.fsum(e["success"] for e in episodes) / n if n else 0.0,
        "mean_steps": math.fsum(e["steps"] for e in episodes) / n if n else 0.0,
    }


def _patches_for(cfg: ExperimentConfig, diagrams) -> list[list[PatchSample]]:
    if cfg.baseline == "random":
        return [[] for _ in diagrams]
    return patches_by_diagram(diagrams, cfg.dataset_profile())


_WORKER: dict = {}


def _init_worker(cfg, diagrams):
    _WORKER["cfg"] = cfg
    _WORKER["diagrams"] = diagrams
    _WORKER["per"] = _patches_for(cfg, diagrams)


def _unit_worker(key):
    seed_index, fold_index = key
    return _run_unit(_WORKER["cfg"], _WORKER["diagrams"], _WORKER["per"], seed_index, fold_index)


def _mean_std(values: list[float]) -> dict:
    v = [x for x in values if x is not None]
    if not v:
        return {"mean": None, "std": None}
    mean = math.fsum(v) / len(v)
    return {"mean": mean, "std": math.sqrt(math.fsum((x - mean) ** 2 for x in v) / len(v))}


def aggregate(units: list[dict], seeds: int) -> tuple[list[dict], dict]:
    """Per-seed summaries and their mean and population std across seeds."""
    per_seed = []
    for s in range(seeds):
        mine = sorted((u for u in units if u["seed"] == s), key=lambda u: u["fold"])
        eps = [e for u in mine for e in u["episodes"]]
        row = {"seed": s, **_tuning_summary(eps)}
        for m in LINE_METRICS:
            vals = [u["line_metrics"][m] for u in mine if u["line_metrics"] and u["line_metrics"][m] is not None]
            row[m] = math.fsum(vals) / len(vals) if vals else None
        per_seed.append(row)
    agg = {m: _mean_std([r[m] for r in per_seed]) for m in TUNING_METRICS + LINE_METRICS}
    agg["episodes_count"] = sum(r["episodes_count"] for r in per_seed)
    return per_seed, agg


@dataclass
class Report:
    config: dict
    units: list[dict]
    per_seed: list[dict]
    aggregate: dict
    notes: list[str]

    @property
    def episodes(self) -> list[dict]:
        return [e for u in self.units for e in u["episodes"]]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "units": self.units,
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "Report":
        return cls(raw["config"], raw["units"], raw["per_seed"], raw["aggregate"], raw["notes"])

    def to_csv(self) -> str:
        cols = [
            "fold", "seed", "diagram_index", "diagram_id", "start_index",
            "start_g1", "start_g2", "final_g1", "final_g2", "success", "steps", "failure_reason",
        ]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for e in self.episodes:
            w.writerow([
                e["fold"], e["seed"], e["diagram_index"], e["diagram_id"], e["start_index"],
                repr(e["start_v"][0]), repr(e["start_v"][1]), repr(e["final_v"][0]), repr(e["final_v"][1]),
                int(e["success"]), e["steps"], e["failure_reason"] or "",
            ])
        return buf.getvalue()


def run_experiment(
    cfg: ExperimentConfig, diagrams: Sequence[StabilityDiagram] | None = None, jobs: int = 1
) -> Report:
    diagrams = list(diagrams) if diagrams is not None else load_diagrams(cfg)
    if cfg.folds == "cross_validation" and len(diagrams) < 2:
        raise ExperimentError("cross-validation needs at least 2 diagrams")
    ids = [d.id for d in diagrams]
    if len(set(ids)) != len(ids):
        raise ExperimentError("diagram ids must be unique")
    n_folds = len(diagrams) if cfg.folds == "cross_validation" else 1
    keys = [(s, f) for s in range(cfg.seeds) for f in range(n_folds)]
    if jobs > 1 and len(keys) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(cfg, diagrams)) as ex:
            units = list(ex.map(_unit_worker, keys))
    else:
        per = _patches_for(cfg, diagrams)
        units = [_run_unit(cfg, diagrams, per, s, f) for s, f in keys]
    units.sort(key=lambda u: (u["seed"], u["fold"]))
    per_seed, agg = aggregate(units, cfg.seeds)
    notes = []
    if any(u["line_metrics"] and u["line_metrics"]["errors"] == 0 for u in units):
        notes.append("error_reduction_using_threshold is reported as 1.0 for test sets without errors")
    cfg_dict = cfg.to_dict()
    cfg_dict["diagram_ids"] = ids
    return Report(cfg_dict, units, per_seed, agg, notes)


def leakage_audit(folds: Sequence[Fold]) -> int:
    """Number of train or validation patches that come from a fold's test diagrams."""
    bad = 0
    for f in folds:
        test_ids = {p.diagram_id for p in f.test}
        bad += sum(p.diagram_id in test_ids for p in f.train + f.val)
    return bad


__all__ = [
    "BASELINES",
    "ExperimentConfig",
    "ExperimentError",
    "FOLD_MODES",
    "Fold",
    "Report",
    "aggregate",
    "batch_detections",
    "compute_line_metrics",
    "episode_rng",
    "leakage_audit",
    "load_config",
    "load_diagrams",
    "patches_by_diagram",
    "random_start",
    "render_trace",
    "run_experiment",
    "split_cross_validation",
    "split_pooled",
]
