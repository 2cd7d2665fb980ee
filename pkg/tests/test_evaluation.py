import math

import numpy as np
import pytest

from roundpred import net
from roundpred.evaluation import (
    DEFAULT_HORIZONS,
    REFERENCE_RMSE,
    EvaluationError,
    RmseReport,
    RmseRow,
    evaluate_run,
    horizon_indices,
    maneuver_accuracy,
    merge_reports,
    predict_positions,
    reference_rows,
    rmse_at_horizons,
    score_model,
)
from roundpred.maneuvers import LabelResult
from roundpred.net import VariantError
from roundpred.train import TrainConfig, train

from test_net import _tiny_model, _toy_dataset


def test_horizon_indices_grid():
    """The 25-step 0.16 s grid maps 1/2/3/4 s to steps 6, 12, 19, 25."""
    idx = horizon_indices(DEFAULT_HORIZONS, dt=0.16, future_steps=25)
    assert idx.tolist() == [5, 11, 18, 24]
    # 2.0 / 0.16 = 12.5 rounds to the even step count 12
    assert horizon_indices([2.0], 0.16, 25).tolist() == [11]
    assert horizon_indices([0.01], 0.16, 25).tolist() == [0]
    assert horizon_indices([99.0], 0.16, 25).tolist() == [24]
    assert horizon_indices([1.0, 2.0, 3.0, 4.0], 0.04, 100).tolist() == [24, 49, 74, 99]


def test_rmse_hand_oracle():
    target = np.zeros((2, 4, 2))
    pred = np.zeros((2, 4, 2))
    pred[0, 3] = (3.0, 4.0)  # 5 m off at the last step
    vals = rmse_at_horizons(pred, target, [0.16, 0.64], dt=0.16)
    assert vals[0] == 0.0
    assert vals[1] == pytest.approx(np.sqrt(25.0 / 2.0))
    with pytest.raises(ValueError, match="does not match"):
        rmse_at_horizons(np.zeros((2, 5, 2)), target, [0.16], 0.16)


def test_rmse_pythagorean_single_sample():
    target = np.zeros((1, 25, 2))
    pred = np.zeros((1, 25, 2))
    pred[0, 5] = (3.0, 4.0)
    assert rmse_at_horizons(pred, target, [1.0], 0.16)[0] == 5.0


def test_rmse_matches_independent_arithmetic():
    """Plain-python recomputation agrees within 1e-12 on random pairs."""
    rng = np.random.default_rng(40)
    for _ in range(10):
        pred = rng.normal(size=(7, 25, 2))
        target = rng.normal(size=(7, 25, 2))
        got = rmse_at_horizons(pred, target, DEFAULT_HORIZONS, 0.16)
        for h, val in zip(DEFAULT_HORIZONS, got):
            step = round(h / 0.16)
            acc = 0.0
            for s in range(7):
                dx = pred[s, step - 1, 0] - target[s, step - 1, 0]
                dy = pred[s, step - 1, 1] - target[s, step - 1, 1]
                acc += dx * dx + dy * dy
            assert abs(val - math.sqrt(acc / 7)) <= 1e-12


def test_rmse_empty_set_raises():
    with pytest.raises(EvaluationError, match="empty sample set"):
        rmse_at_horizons(np.zeros((0, 25, 2)), np.zeros((0, 25, 2)), [1.0], 0.16)


def test_rmse_ignores_heading_channel():
    rng = np.random.default_rng(0)
    target = rng.normal(size=(3, 4, 3))
    pred = target.copy()
    pred[:, :, 2] += rng.normal(size=(3, 4))  # heading errors must not count
    assert np.allclose(rmse_at_horizons(pred, target, [0.16, 0.64], 0.16), 0.0)


def test_predict_positions_targets_match_batch():
    rng = np.random.default_rng(1)
    ds = _toy_dataset(rng, n=7, hist=4, fut=3, max_neigh=2)
    model = _tiny_model("3d")
    pred, target = predict_positions(model, ds, np.arange(7), "point", batch_size=3)
    assert pred.shape == (7, 3, 3)
    batch = net.prepare_batch(ds, np.arange(7))
    assert np.array_equal(target, batch["future"])
    # batch size must not change predictions beyond BLAS shape-dependent
    # rounding (different matrix shapes may take different kernel paths)
    pred1, _ = predict_positions(model, ds, np.arange(7), "point", batch_size=100)
    assert np.allclose(pred, pred1, rtol=0, atol=1e-12)


def test_rmse_is_rigid_transform_invariant():
    """Scoring in the ego frame equals scoring after mapping back to the world."""
    rng = np.random.default_rng(2)
    ds = _toy_dataset(rng, n=5, hist=4, fut=3, max_neigh=1)
    model = _tiny_model("3d")
    idx = np.arange(5)
    pred, target = predict_positions(model, ds, idx, "point")
    batch = net.prepare_batch(ds, idx)
    o = batch["origins"]
    c, s = np.cos(o[:, 2])[:, None], np.sin(o[:, 2])[:, None]

    def to_world(p):
        out = p.copy()
        out[:, :, 0] = o[:, None, 0] + c * p[:, :, 0] - s * p[:, :, 1]
        out[:, :, 1] = o[:, None, 1] + s * p[:, :, 0] + c * p[:, :, 1]
        return out

    ego = rmse_at_horizons(pred, target, [0.16, 0.48], 0.16)
    world = rmse_at_horizons(to_world(pred), to_world(target), [0.16, 0.48], 0.16)
    assert np.allclose(ego, world, atol=1e-9)


def test_zeroed_anchored_model_scores_anchor_error():
    """With a zeroed output layer, MAP predictions are exactly anchor curves."""
    rng = np.random.default_rng(3)
    ds = _toy_dataset(rng, n=6, hist=4, fut=3, max_neigh=1)
    model = _tiny_model("3d-a")
    model.params["out.w"].value = np.zeros_like(model.params["out.w"].value)
    model.params["out.b"].value = np.zeros_like(model.params["out.b"].value)
    pred, _ = predict_positions(model, ds, np.arange(6), "map")
    anchor_pool = model.anchors.anchors
    for row in pred:
        assert any(np.array_equal(row, a) for a in anchor_pool)


def test_maneuver_accuracy_uniform_heads_oracle():
    rng = np.random.default_rng(4)
    ds = _toy_dataset(rng, n=10, hist=4, fut=3, max_neigh=1)
    labels = LabelResult(
        np.random.default_rng(5).integers(1, 3, size=10).astype(np.int64),
        np.random.default_rng(6).integers(1, 3, size=10).astype(np.int64),
    )
    model = _tiny_model("3d-m")
    for name in ("head_loc.w", "head_loc.b", "head_acc.w", "head_acc.b"):
        model.params[name].value = np.zeros_like(model.params[name].value)
    acc = maneuver_accuracy(model, ds, labels, np.arange(10))
    # uniform probabilities argmax to class 1, so accuracy is the label-1 rate
    assert acc["location"] == np.mean(labels.location == 1)
    assert acc["acceleration"] == np.mean(labels.acceleration == 1)
    with pytest.raises(VariantError, match="no maneuver heads"):
        maneuver_accuracy(_tiny_model("3d"), ds, labels, np.arange(10))


def test_reference_rows_values():
    rows = reference_rows()
    assert len(rows) == 5
    by_label = {r.label: r for r in rows}
    assert by_label["3d-a weighted (published)"].values == (0.38, 0.80, 1.76, 3.08)
    assert by_label["2d (published)"].values == (0.53, 1.62, 3.10, 4.92)
    assert all(r.n == 0 for r in rows)
    assert reference_rows(horizons=(0.5, 1.0)) == ()
    assert set(REFERENCE_RMSE) == {"2d", "3d", "3d-m", "3d-a map", "3d-a weighted"}


def test_report_format_and_csv_roundtrip(tmp_path):
    rows = (
        RmseRow("2d", (0.53, 1.62, 3.10, 4.92), n=120),
        RmseRow("3d-a weighted", (0.38, 0.80, 1.76, 3.08), n=120),
        RmseRow("3d (published)", (0.55, 1.32, 2.50, 4.02)),
    )
    report = RmseReport(horizons=DEFAULT_HORIZONS, rows=rows, config_hash="abc123")
    text = report.format()
    assert text == report.format()  # deterministic
    assert "step 6 (0.96s)" in text and "step 25 (4.00s)" in text
    assert "# config abc123" in text
    assert "2d" in text and "3d-a weighted" in text
    path = tmp_path / "report.csv"
    report.to_csv(path)
    back = RmseReport.from_csv(path)
    assert back.horizons == DEFAULT_HORIZONS
    assert back.row("3d-a weighted").values == rows[1].values
    assert back.row("3d-a weighted").n == 120
    assert back.row("3d (published)").n == 0
    assert report.row("2d").average == pytest.approx(np.mean(rows[0].values))
    with pytest.raises(KeyError):
        report.row("missing")


def test_evaluate_run_and_merge():
    rng = np.random.default_rng(7)
    ds = _toy_dataset(rng, n=70, hist=4, fut=3, max_neigh=2)
    labels = LabelResult(
        np.random.default_rng(8).integers(1, 3, size=70).astype(np.int64),
        np.random.default_rng(9).integers(1, 3, size=70).astype(np.int64),
    )
    horizons = (0.16, 0.32, 0.48)
    reports = []
    for variant in ("3d", "3d-a"):
        cfg = TrainConfig(variant=variant, max_epochs=1, n_location=2, n_acc=2, batch_size=32, seed=5)
        run = train(ds, labels, cfg)
        reports.append(evaluate_run(run, horizons=horizons))
    merged = merge_reports(reports)
    labels_seen = [r.label for r in merged.rows]
    assert labels_seen == ["3d", "3d-a map", "3d-a weighted"]
    for row in merged.rows:
        assert len(row.values) == 3
        assert all(np.isfinite(v) and v >= 0 for v in row.values)
        assert row.n > 0
    assert all(len(r.config_hash) == 64 for r in reports)
    assert reports[0].config_hash != reports[1].config_hash
    with pytest.raises(ValueError, match="different horizon grids"):
        merge_reports([merged, RmseReport(horizons=(1.0,), rows=())])


def test_evaluate_run_reference_rows_toggle():
    rng = np.random.default_rng(10)
    ds = _toy_dataset(rng, n=60, hist=4, fut=3, max_neigh=1)
    labels = LabelResult(
        np.random.default_rng(11).integers(1, 3, size=60).astype(np.int64),
        np.random.default_rng(12).integers(1, 3, size=60).astype(np.int64),
    )
    cfg = TrainConfig(variant="3d", max_epochs=1, n_location=2, n_acc=2, batch_size=32, seed=6)
    run = train(ds, labels, cfg)
    plain = evaluate_run(run)  # default 1-4 s grid on a 3-step horizon clips to step 3
    with_ref = evaluate_run(run, include_reference=True)
    assert len(with_ref.rows) == len(plain.rows) + 5
    assert any(r.label.endswith("(published)") for r in with_ref.rows)
