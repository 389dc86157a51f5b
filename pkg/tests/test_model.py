from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from qdtune.calibrate import ThresholdSet
from qdtune.detector import (
    ShapeError,
    TrainedDetector,
    TrainingError,
    default_spec,
    dumps_detector,
    infer,
    loads_detector,
    train,
)
from qdtune.detector.model import Network, balanced_weights
from qdtune.diagram import LINE, NO_LINE, PatchSample, Rect


def test_default_specs_match_architecture_table():
    ff, cnn, bcnn = (default_spec(k) for k in ("ff", "cnn", "bcnn"))
    assert ff.hidden == (400, 100) and ff.conv_channels == ()
    assert (ff.train_updates, ff.learning_rate, ff.dropout_rate) == (15000, 5e-4, 0.6)
    assert cnn.conv_channels == (12, 24) and cnn.kernel_size == 4 and cnn.hidden == (200, 100)
    assert (cnn.train_updates, cnn.learning_rate, cnn.dropout_rate) == (30000, 1e-3, 0.6)
    assert bcnn.conv_channels == (12, 24) and bcnn.dropout_rate == 0.0 and bcnn.bayes_samples == 10
    assert {s.batch_size for s in (ff, cnn, bcnn)} == {512}


def test_desk_scale():
    s = default_spec("cnn").desk_scale()
    assert (s.train_updates, s.batch_size) == (3000, 128)


def test_parameter_counts():
    rng = np.random.default_rng(0)
    assert Network(default_spec("ff"), rng).n_params == 324 * 400 + 400 + 400 * 100 + 100 + 101
    # conv 4x4: 18 -> 15 -> pool 7 -> 4 -> pool 2; flatten 24 * 2 * 2 = 96.
    cnn = 16 * 12 + 12 + 12 * 16 * 24 + 24 + 96 * 200 + 200 + 200 * 100 + 100 + 101
    assert Network(default_spec("cnn"), rng).n_params == cnn
    assert Network(default_spec("bcnn"), rng).n_params == 2 * cnn


def test_unknown_kind():
    with pytest.raises(ValueError):
        default_spec("rnn")


# ---------------------------------------------------------------- data helpers


def separable_patches(n: int, seed: int) -> list[PatchSample]:
    """Line patches have a brighter detection square; its mean separates the classes."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        v = rng.uniform(0, 0.5, (18, 18))
        line = i % 3 == 0
        if line:
            v[6:12, 6:12] += 0.25
        v[0, 0] = 1.0  # pin the normalization range
        out.append(PatchSample(v, Rect(0, 0, 18), LINE if line else NO_LINE, f"s{i % 7}"))
    return out


def square_mean(p: PatchSample) -> float:
    return float(p.values[6:12, 6:12].mean())


@pytest.fixture(scope="module")
def separable():
    data = separable_patches(5000, 0)
    return data[:4000], data[4000:4500], data[4500:]


@pytest.fixture(scope="module")
def ff_separable(separable):
    tr, va, _ = separable
    spec = replace(default_spec("ff", seed=3).desk_scale(), train_updates=600)
    return train(spec, tr, va)


def test_separable_oracle_is_perfect(separable):
    # The threshold-on-mean oracle defines the construction.
    _, _, test = separable
    cut = 0.5 * (
        max(square_mean(p) for p in test if p.category == NO_LINE)
        + min(square_mean(p) for p in test if p.category == LINE)
    )
    assert all((square_mean(p) > cut) == (p.category == LINE) for p in test)


def test_ff_learns_separable_set(ff_separable, separable):
    _, _, test = separable
    x = np.stack([p.values for p in test])
    y, _ = ff_separable.infer_batch(x)
    acc = np.mean((y >= 0.5) == np.array([p.category == LINE for p in test]))
    assert acc >= 0.95
    assert max(e["val_accuracy"] for e in ff_separable.log) >= 0.95


def test_ff_confidence_is_heuristic(ff_separable, separable):
    for p in separable[2][:20]:
        det = infer(ff_separable, p.values)
        assert det.confidence == abs(0.5 - det.y) * 2
        assert det.category == (LINE if det.y >= 0.5 else NO_LINE)


def test_training_is_deterministic(separable):
    tr, va, _ = separable
    for kind in ("ff", "cnn"):
        spec = replace(default_spec(kind, seed=1), train_updates=20, batch_size=32)
        a, b = train(spec, tr[:500], va[:100]), train(spec, tr[:500], va[:100])
        assert a.checksum() == b.checksum()
        assert a.log == b.log


def test_single_class_rejected(separable):
    tr, va, _ = separable
    lines = [p for p in tr if p.category == LINE]
    with pytest.raises(TrainingError, match="single-class"):
        train(default_spec("ff"), lines, va)


def test_empty_split_rejected(separable):
    with pytest.raises(TrainingError):
        train(default_spec("ff"), [], separable[1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_update(separable):
    tr, va, _ = separable
    bad = [replace(p, values=np.full((18, 18), np.nan)) for p in tr[:200]]
    spec = replace(default_spec("ff"), train_updates=5, batch_size=16)
    with pytest.raises(TrainingError, match="update 1$"):
        train(spec, bad, va)


def test_balanced_weights_even_out_classes():
    labels = np.array([1] * 30 + [0] * 1008, dtype=float)  # about 33.6:1
    w = balanced_weights(labels)
    assert w.sum() == pytest.approx(1.0)
    assert w[labels == 1].sum() == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    draws = rng.choice(len(labels), size=(200, 512), p=w)
    ratio = labels[draws].mean()
    assert ratio == pytest.approx(0.5, abs=0.01)


def test_shape_error(ff_separable):
    with pytest.raises(ShapeError):
        infer(ff_separable, np.zeros((17, 17)))


# ---------------------------------------------------------------- Bayesian


@pytest.fixture(scope="module")
def tiny_bcnn(separable):
    tr, va, _ = separable
    spec = replace(default_spec("bcnn", seed=2), train_updates=10, batch_size=32)
    return train(spec, tr[:300], va[:100])


def test_bcnn_seeded_inference(tiny_bcnn, separable):
    p = separable[2][0].values
    a, b = infer(tiny_bcnn, p, sampling_seed=5), infer(tiny_bcnn, p, sampling_seed=5)
    assert a == b
    samples = tiny_bcnn.predict_samples(p, 5)[:, 0]
    assert len(samples) == 10
    assert a.y == pytest.approx(samples.mean())
    assert a.confidence == pytest.approx(max(0.0, 1 - 2 * samples.std()))


def test_bcnn_zero_scale_gives_full_confidence(tiny_bcnn, separable):
    net = Network(tiny_bcnn.spec, np.random.default_rng(0))
    net.set_flat(tiny_bcnn.parameters)
    for layer in net.bayes_layers():
        for k in layer.params:
            if k.endswith("_rho"):
                layer.params[k][...] = -1e3  # softplus underflows to 0
    det = TrainedDetector(tiny_bcnn.spec, net.get_flat())
    for p in separable[2][:5]:
        assert infer(det, p.values, sampling_seed=1).confidence == 1.0


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(ff_separable, separable):
    det = ff_separable.with_thresholds(ThresholdSet(0.7, 0.6))
    back = loads_detector(dumps_detector(det))
    assert back.checksum() == det.checksum()
    assert back.spec == det.spec
    assert back.thresholds == det.thresholds
    assert back.log == det.log
    p = separable[2][3].values
    assert infer(back, p) == infer(det, p)


def test_checkpoint_rejects_foreign_json():
    with pytest.raises(ValueError):
        loads_detector(b'{"format": "other"}')
