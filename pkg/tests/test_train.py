import numpy as np
import pytest

from roundpred import net
from roundpred.diffnum import Parameter
from roundpred.maneuvers import LabelResult
from roundpred.net import VariantError
from roundpred.train import (
    Adam,
    OverfitConfig,
    Sgd,
    TrainConfig,
    evaluate_loss,
    fit,
    loss_tensor,
    overfit,
    split_dataset,
    train,
)

from test_net import _tiny_model, _toy_dataset


def _labels(rng, n, n_location=8, n_acc=3):
    return LabelResult(
        rng.integers(1, n_location + 1, size=n).astype(np.int64),
        rng.integers(1, n_acc + 1, size=n).astype(np.int64),
    )


def test_config_validation():
    with pytest.raises(ValueError, match="optimizer"):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(VariantError):
        TrainConfig(variant="5d")
    with pytest.raises(ValueError, match="fractions"):
        TrainConfig(train_fraction=0.95, val_fraction=0.10)
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(batch_size=0)


def test_split_is_by_track_and_deterministic():
    """Every window of a track shares a bucket; fractions come out near target."""
    rows = []
    for track in range(1500):
        for w in range(4):
            rows.append((track % 3, track, 49 + 25 * w))
    ids = np.array(rows, dtype=np.int64)
    s = split_dataset(ids, seed=11)
    n = len(ids)
    bucket = np.empty(n, dtype=np.int64)
    bucket[s.train], bucket[s.val], bucket[s.test] = 0, 1, 2
    # partition
    merged = np.sort(np.concatenate([s.train, s.val, s.test]))
    assert np.array_equal(merged, np.arange(n))
    # same track, same bucket
    for track in range(0, 1500, 97):
        rows_of = np.flatnonzero(ids[:, 1] == track)
        assert len(set(bucket[rows_of])) == 1
    assert abs(len(s.train) / n - 0.71) < 0.03
    assert abs(len(s.val) / n - 0.10) < 0.02
    assert abs(len(s.test) / n - 0.19) < 0.03
    again = split_dataset(ids, seed=11)
    assert np.array_equal(s.train, again.train) and np.array_equal(s.test, again.test)
    other = split_dataset(ids, seed=12)
    assert not np.array_equal(s.train, other.train)


def test_sgd_step():
    p = Parameter("w", np.array([2.0, 2.0]))
    q = Parameter("frozen", np.array([1.0]))
    p.tensor.grad = np.array([0.5, -1.0])
    Sgd({"w": p, "frozen": q}, lr=0.1).step()
    assert np.allclose(p.value, [1.95, 2.1])
    assert np.array_equal(q.value, [1.0])  # no gradient, no update


def test_adam_matches_hand_calculation():
    """Two steps with a constant unit gradient move by ~lr each (bias corrected)."""
    p = Parameter("w", np.array([0.0]))
    opt = Adam({"w": p}, lr=0.1)
    p.tensor.grad = np.array([1.0])
    opt.step()
    assert np.allclose(p.value, [-0.1], atol=1e-8)
    p.tensor.grad = np.array([1.0])
    opt.step()
    assert np.allclose(p.value, [-0.2], atol=1e-8)


def test_evaluate_loss_matches_single_batch():
    rng = np.random.default_rng(30)
    ds = _toy_dataset(rng, n=6, hist=4, fut=3, max_neigh=2)
    model = _tiny_model("3d-a", seed=1)
    labels = _labels(rng, 6, n_location=2, n_acc=2)
    idx = np.arange(6)
    batch = net.prepare_batch(ds, idx)
    direct = float(loss_tensor(model, batch, labels.location, labels.acceleration, training=False).value)
    assert evaluate_loss(model, ds, labels, idx, batch_size=64) == direct
    assert evaluate_loss(model, ds, labels, idx, batch_size=2) == pytest.approx(direct, rel=1e-12)


def test_fit_reduces_loss_and_restores_best():
    rng = np.random.default_rng(31)
    ds = _toy_dataset(rng, n=12, hist=13, fut=25, max_neigh=2)
    labels = LabelResult(np.ones(12, np.int64), np.ones(12, np.int64))
    cfg = TrainConfig(variant="3d", max_epochs=25, patience=25, batch_size=12, learning_rate=3e-3)
    from roundpred.net import Model, ModelConfig

    model = Model(ModelConfig(variant="3d"), seed=0)
    idx = np.arange(12)
    result = fit(model, ds, labels, cfg, idx, idx)
    assert result.epochs_run >= 1
    assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]
    assert not result.diverged
    # the returned parameters are the best-validation snapshot, exactly
    assert evaluate_loss(model, ds, labels, idx, batch_size=256) == result.best_val_loss


def test_fit_requires_nonempty_partitions():
    rng = np.random.default_rng(32)
    ds = _toy_dataset(rng, n=4, hist=4, fut=3)
    labels = LabelResult(np.ones(4, np.int64), np.ones(4, np.int64))
    model = _tiny_model("3d")
    with pytest.raises(ValueError, match="non-empty"):
        fit(model, ds, labels, TrainConfig(variant="3d"), np.arange(4), np.array([], dtype=np.int64))


def test_early_stopping_counts_stale_epochs():
    """Training halts after exactly `patience` epochs without a new best."""
    rng = np.random.default_rng(33)
    ds = _toy_dataset(rng, n=18, hist=13, fut=25, max_neigh=2)
    labels = LabelResult(np.ones(18, np.int64), np.ones(18, np.int64))
    cfg = TrainConfig(variant="3d", max_epochs=60, patience=2, batch_size=12, learning_rate=5e-2)
    from roundpred.net import Model, ModelConfig

    model = Model(ModelConfig(variant="3d"), seed=1)
    result = fit(model, ds, labels, cfg, np.arange(12), np.arange(12, 18))
    if result.stopped_early:
        assert len(result.history) == result.best_epoch + 1 + cfg.patience
        assert result.epochs_run < cfg.max_epochs
    else:
        assert result.epochs_run == cfg.max_epochs


def test_divergence_sets_flag_and_keeps_finite_params():
    rng = np.random.default_rng(34)
    ds = _toy_dataset(rng, n=8, hist=4, fut=3, max_neigh=1)
    labels = LabelResult(np.ones(8, np.int64), np.ones(8, np.int64))
    cfg = TrainConfig(variant="3d", max_epochs=6, patience=6, batch_size=4,
                      learning_rate=1e12, optimizer="sgd")
    from roundpred.net import Model, ModelConfig

    model = Model(ModelConfig(variant="3d", history_steps=4, future_steps=3), seed=0)
    idx = np.arange(8)
    with np.errstate(all="ignore"):
        result = fit(model, ds, labels, cfg, idx, idx)
    assert result.diverged
    for p in model.params.values():
        assert np.all(np.isfinite(p.value))
    assert np.isfinite(evaluate_loss(model, ds, labels, idx))


def test_train_wrapper_builds_anchors_and_is_deterministic():
    rng = np.random.default_rng(35)
    ds = _toy_dataset(rng, n=80, hist=4, fut=3, max_neigh=2)
    labels = _labels(np.random.default_rng(36), 80, n_location=2, n_acc=2)
    cfg = TrainConfig(variant="3d-a", max_epochs=2, patience=5, batch_size=32,
                      n_location=2, n_acc=2, seed=3)
    run = train(ds, labels, cfg)
    assert run.anchors is not None and run.anchors.n_classes == 4
    assert run.model.cfg.variant == "3d-a"
    assert run.model.cfg.history_steps == 4 and run.model.cfg.future_steps == 3
    assert len(run.result.history) == run.result.epochs_run
    again = train(ds, labels, cfg)
    assert run.result.history == again.result.history
    for name, p in run.model.params.items():
        assert np.array_equal(p.value, again.model.params[name].value)


def test_train_drops_unlabeled_samples():
    rng = np.random.default_rng(37)
    ds = _toy_dataset(rng, n=60, hist=4, fut=3, max_neigh=1)
    labels = _labels(np.random.default_rng(38), 60, n_location=2, n_acc=2)
    labels.location[::5] = -1  # 12 unlabelable samples
    cfg = TrainConfig(variant="3d", max_epochs=1, n_location=2, n_acc=2, seed=4)
    run = train(ds, labels, cfg)
    assert len(run.dataset) == 48
    assert np.all(run.labels.location > 0)
    assert run.anchors is None
    total = len(run.split.train) + len(run.split.val) + len(run.split.test)
    assert total == 48


def test_overfit_config_validation():
    with pytest.raises(ValueError, match="positive"):
        OverfitConfig(epochs=0)
    with pytest.raises(ValueError, match="bn_freeze_epoch"):
        OverfitConfig(bn_freeze_epoch=10, refit_start_epoch=5)
    with pytest.raises(ValueError, match="refit_start_epoch"):
        OverfitConfig(refit_start_epoch=150, release_start_epoch=120)
    # disabling the late phases by pushing them past the end is allowed
    OverfitConfig(epochs=10, refit_start_epoch=10, release_start_epoch=10)


def test_overfit_runs_all_phases_and_shrinks_error():
    """Warm, refit and release phases all execute and the endpoint error drops."""
    rng = np.random.default_rng(39)
    ds = _toy_dataset(rng, n=8, hist=4, fut=3, max_neigh=2)
    labels = _labels(np.random.default_rng(40), 8, n_location=2, n_acc=2)
    model = _tiny_model("3d-a")
    cfg = OverfitConfig(epochs=12, batch_size=4, bn_freeze_epoch=2,
                        refit_start_epoch=6, release_start_epoch=10)
    res = overfit(model, ds, labels, cfg)
    assert res.epochs_run == 12 and len(res.history) == 12
    assert sorted(res.history[0]) == ["epoch", "eval_loss", "loss", "rmse"]
    rmses = [h["rmse"] for h in res.history]
    evals = [h["eval_loss"] for h in res.history]
    assert all(np.isfinite(rmses)) and all(np.isfinite(evals))
    # steady descent through the warm phase, and overall
    assert all(evals[i] > evals[i + 1] for i in range(4))
    assert rmses[-1] < 0.75 * rmses[0]
    assert res.final_rmse == rmses[-1]
    for p in model.params.values():
        assert np.all(np.isfinite(p.value))


def test_overfit_is_deterministic_and_ignores_labels_for_plain_variants():
    rng = np.random.default_rng(41)
    ds = _toy_dataset(rng, n=8, hist=4, fut=3, max_neigh=2)
    cfg = OverfitConfig(epochs=3, batch_size=4, bn_freeze_epoch=1,
                        refit_start_epoch=3, release_start_epoch=3)
    first = overfit(_tiny_model("3d"), ds, None, cfg)
    second = overfit(_tiny_model("3d"), ds, None, cfg)
    assert first.history == second.history
    assert first.final_rmse == second.final_rmse
    planar = overfit(_tiny_model("2d"), ds, None, cfg)
    assert np.isfinite(planar.final_rmse)


def test_overfit_validation_errors():
    rng = np.random.default_rng(42)
    ds = _toy_dataset(rng, n=8, hist=4, fut=3, max_neigh=2)
    cfg = OverfitConfig(epochs=1, batch_size=4, bn_freeze_epoch=0,
                        refit_start_epoch=1, release_start_epoch=1)
    with pytest.raises(ValueError, match="non-empty"):
        overfit(_tiny_model("3d"), ds.subset(np.arange(0)), None, cfg)
    with pytest.raises(ValueError, match="needs labels"):
        overfit(_tiny_model("3d-m"), ds, None, cfg)
