import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from checks import fusion_grad_check
from magtac.dataset import split
from magtac.fusion import (
    Arrays,
    DivergenceError,
    EarlyStopping,
    ForceModel,
    TrainConfig,
    architecture_audit,
    compute_metrics,
    evaluate,
    load_arrays,
    load_checkpoint,
    metrics_row,
    predict,
    save_checkpoint,
    train,
)
from magtac.nn import ShapeError


def _inputs(rng, n=3, size=32):
    return rng.standard_normal((n, 3, size, size)), rng.standard_normal((n, 20, 24))


def test_paper_architecture():
    audit = architecture_audit(ForceModel("fusion", 224, seed=0, dtype=np.float32))
    stages = dict(audit["stages"])
    assert stages["CBR1"] == (1, 16, 112, 112)
    assert stages["CBR2"] == (1, 32, 56, 56)
    assert stages["CBR3"] == (1, 64, 28, 28)
    assert stages["Flatten"] == (1, 50176)
    assert stages["FC1"] == (1, 512) and stages["FC2"] == (1, 32)
    assert stages["GRU h_T"] == (1, 32)
    shapes = {name: shape for name, shape, _ in audit["parameters"]}
    assert shapes["cnn.layers.4.weight"] == (512, 50176)
    assert shapes["cnn.layers.5.weight"] == (32, 512)
    assert shapes["gru.layers.0.weight_ih"] == (96, 24)
    assert shapes["gru.layers.2.weight_hh"] == (96, 32)
    assert audit["head"] == (64, 1)


def test_desk_architecture_differs_only_at_fc1():
    paper = {n: s for n, s, _ in architecture_audit(ForceModel("fusion", 224, dtype=np.float32))["parameters"]}
    desk = {n: s for n, s, _ in architecture_audit(ForceModel("fusion", 64, dtype=np.float32))["parameters"]}
    assert [n for n in paper if paper[n] != desk[n]] == ["cnn.layers.4.weight"]
    assert desk["cnn.layers.4.weight"] == (512, 4096)


@pytest.mark.parametrize("mode,width", [("fusion", 64), ("mag-only", 32), ("image-only", 32)])
def test_head_width(mode, width):
    assert ForceModel(mode, 32).head.in_features == width


def test_zero_head_predicts_zero(rng):
    model = ForceModel("fusion", 32, seed=3)
    model.head.weight.value[:] = 0
    model.eval()
    np.testing.assert_array_equal(model.forward(*_inputs(rng)), 0.0)


def test_eval_forward_deterministic(rng):
    model = ForceModel("fusion", 32, seed=3)
    model.eval()
    x = _inputs(rng)
    assert model.forward(*x).tobytes() == model.forward(*x).tobytes()


def test_single_modality_ignores_other_input(rng):
    img, mag = _inputs(rng)
    m = ForceModel("mag-only", 32, seed=1)
    m.eval()
    np.testing.assert_array_equal(m.forward(img, mag), m.forward(img * 7 + 1, mag))
    np.testing.assert_array_equal(m.forward(None, mag), m.forward(img, mag))
    i = ForceModel("image-only", 32, seed=1)
    i.eval()
    np.testing.assert_array_equal(i.forward(img, mag), i.forward(img, -mag))
    with pytest.raises(ShapeError):
        m.forward(img, None)
    with pytest.raises(ShapeError):
        i.forward(None, mag)


def test_zeroed_branch_equals_restricted_head(rng):
    model = ForceModel("fusion", 32, seed=5)
    model.head.bias.value[:] = 0.25
    model.eval()
    img, mag = _inputs(rng)
    feats = model.features(img, mag)
    w, b = model.head.weight.value[0], model.head.bias.value[0]
    model.cnn.layers[-1].weight.value[:] = 0
    model.cnn.layers[-1].bias.value[:] = 0
    np.testing.assert_allclose(model.forward(img, mag), feats[:, :32] @ w[:32] + b, rtol=1e-12)


def test_shape_errors(rng):
    model = ForceModel("fusion", 32)
    img, mag = _inputs(rng)
    with pytest.raises(ShapeError):
        model.forward(img[:, :, :16], mag)
    with pytest.raises(ShapeError):
        model.forward(img, mag[:, :, :20])
    with pytest.raises(ValueError):
        ForceModel("audio-only")


def test_full_model_gradients(tiny_dataset):
    from magtac.fusion import standardize_images

    img = standardize_images(tiny_dataset.images[5:6])
    mag = np.asarray(tiny_dataset.mag[5:6], dtype=np.float64)
    report, _ = fusion_grad_check(img, mag, float(tiny_dataset.labels[5]), probes=6)
    assert report.passed, str(report)


# -- early stopping ------------------------------------------------------------


def test_early_stopping_example():
    stopper = EarlyStopping(3)
    stops = [stopper.update(v) for v in [0.5, 0.4, 0.41, 0.42, 0.43]]
    assert stops == [False, False, False, False, True]
    assert stopper.best_epoch == 2 and stopper.best == 0.4


def test_equal_loss_is_not_improvement():
    stopper = EarlyStopping(3)
    assert [stopper.update(v) for v in [1.0, 1.0, 1.0, 1.0]] == [False, False, False, True]
    assert stopper.best_epoch == 1


@settings(max_examples=200)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40), st.integers(1, 5))
def test_early_stopping_never_overruns(losses, patience):
    stopper = EarlyStopping(patience)
    run = []
    for v in losses:
        run.append(v)
        if stopper.update(v):
            break
    best = int(np.argmin(run))  # first minimum
    assert stopper.best_epoch == best + 1
    assert len(run) - stopper.best_epoch <= patience


# -- metrics ---------------------------------------------------------------------


def test_metric_oracles():
    m = compute_metrics([0.1, 0.9], [0.0, 1.0])
    assert m.mse == pytest.approx(0.01, rel=1e-12)
    assert m.rmse == pytest.approx(0.1, rel=1e-12)
    assert m.r2 == pytest.approx(0.96, rel=1e-12)
    perfect = compute_metrics([0.2, 0.5, 0.9], [0.2, 0.5, 0.9])
    assert (perfect.mse, perfect.rmse, perfect.r2) == (0.0, 0.0, 1.0)
    y = np.array([0.1, 0.4, 0.7])
    assert compute_metrics(np.full(3, y.mean()), y).r2 == pytest.approx(0.0, abs=1e-15)


def test_r2_undefined_for_constant_labels():
    m = compute_metrics([0.1, 0.3], [0.5, 0.5])
    assert m.r2 is None
    assert metrics_row("fusion", 1e-4, m)["R2"] == "undefined"


def _ulp_close(a, b):
    return abs(a - b) <= math.ulp(max(abs(a), abs(b)))


@settings(max_examples=300)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=2, max_size=50), st.integers(0, 2**32 - 1))
def test_rmse_squared_is_mse(pred, seed):
    target = np.random.default_rng(seed).uniform(0, 1, len(pred))
    m = compute_metrics(pred, target)
    assert _ulp_close(m.rmse * m.rmse, m.mse)


def test_metric_shape_mismatch():
    with pytest.raises(ShapeError):
        compute_metrics([1.0], [1.0, 2.0])


# -- training ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_splits(tiny_dataset):
    parts = split(tiny_dataset)
    return {mode: [load_arrays(tiny_dataset, p, mode) for p in parts] for mode in ("fusion", "mag-only")}


def test_training_deterministic(tiny_splits):
    tr, te, _ = tiny_splits["fusion"]
    runs = []
    for _ in range(2):
        model = ForceModel("fusion", 32, seed=7, dtype=np.float32)
        res = train(model, tr, te, TrainConfig(mode="fusion", seed=7, max_epochs=2))
        runs.append(([(h["train_loss"], h["test_loss"]) for h in res.history], predict(model, te)))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_training_reduces_loss_and_restores_best(tiny_splits):
    tr, te, va = tiny_splits["mag-only"]
    model = ForceModel("mag-only", 32, seed=0, dtype=np.float32)
    res = train(model, tr, te, TrainConfig(mode="mag-only", lr=1e-3, max_epochs=6))
    losses = [h["test_loss"] for h in res.history]
    assert losses[-1] < losses[0]
    best = min(losses)
    assert losses[res.best_epoch - 1] == best
    from magtac.fusion import split_loss

    assert split_loss(model, te) == pytest.approx(best, rel=1e-12)
    assert evaluate(model, va).rmse < 0.5


def test_divergence_detected(tiny_splits):
    tr, te, _ = tiny_splits["mag-only"]
    bad = Arrays(None, tr.mags, np.full(len(tr), np.nan))
    with pytest.raises(DivergenceError):
        train(ForceModel("mag-only", 32), bad, te, TrainConfig(mode="mag-only", max_epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="both")


def test_checkpoint_roundtrip(tmp_path, rng):
    model = ForceModel("fusion", 32, seed=2, dtype=np.float32)
    model.train()
    img, mag = _inputs(rng, n=4)
    model.forward(img, mag)  # move the running statistics
    model.set_mag_normalization(mag)
    save_checkpoint(model, tmp_path / "best", steps=11)
    loaded, manifest = load_checkpoint(tmp_path / "best")
    assert manifest["steps"] == 11
    for (name, a), (_, b) in zip(model.state().items(), loaded.state().items()):
        assert np.asarray(a, np.float32).tobytes() == np.asarray(b, np.float32).tobytes(), name
    model.eval()
    np.testing.assert_array_equal(model.forward(img, mag), loaded.forward(img, mag))


@pytest.mark.slow
def test_useless_magnetic_branch_does_not_help(tmp_path_factory):
    """At 100x the default Hall noise the magnetic windows carry almost no force
    information, so fusion should land near image-only rather than clearly below it.
    The margin is the seed-to-seed spread of image-only RMSE (the noise floor of
    this comparison)."""
    from dataclasses import replace

    from magtac.config import preset
    from magtac.dataset import generate_dataset
    from magtac.elastomer import RenderConfig
    from magtac.experiments import run_comparison

    cfg = preset("desk")
    cfg = replace(
        cfg,
        magnet=replace(cfg.magnet, noise_sigma=100 * cfg.magnet.noise_sigma),
        render=RenderConfig.for_size(32),
        dataset=replace(cfg.dataset, grid_size=6),
    )
    ds = generate_dataset(cfg, tmp_path_factory.mktemp("noisy"))
    rep = run_comparison(ds, seeds=(0, 1, 2), modes=("image-only", "fusion"), max_epochs=15)
    image = [m.rmse for m in rep.cells[("image-only", 1e-4)]]
    fused = rep.median("fusion", 1e-4)
    margin = max(image) - min(image)
    assert fused >= rep.median("image-only", 1e-4) - margin, (fused, image)
