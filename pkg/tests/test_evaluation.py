"""Evaluation: metrics oracles, radial curve, ablation plumbing, reports."""

import json

import numpy as np
import pytest

from fisheyepose import evaluation as ev
from fisheyepose import training as tr
from fisheyepose.evaluation import (
    AblationVariant,
    EvalRecord,
    RadialBin,
    ablation_pair,
    ablation_run,
    evaluate_model,
    full_variant_grid,
    mae,
    radial_error_curve,
    radial_trend_spearman,
)
from fisheyepose.geometry import PolarLocation
from fisheyepose.network import Model, ModelConfig
from fisheyepose.synthesis import EulerAngles, FisheyeSample
from fisheyepose.training import LossWeights, TrainConfig

TINY_MODEL = ModelConfig(
    input_size=32,
    stages=((8, 4, 4, 0), (16, 2, 2, 0)),
    reduction=4,
    spatial_kernel=3,
)


def rec(gt, pred, rho=0.1, source_id="x"):
    return EvalRecord(
        source_id=source_id,
        gt_pose=tuple(gt),
        pred_pose=tuple(pred),
        gt_theta=0.0,
        gt_rho=rho,
        pred_theta=0.0,
        pred_rho=rho,
    )


def make_samples(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        pose = EulerAngles(*(float(v) for v in rng.uniform(-60, 60, 3)))
        loc = PolarLocation(float(rng.uniform(-180, 180)), float(rng.uniform(0, 0.8)))
        out.append(FisheyeSample(image=img, pose=pose, location=loc, source_id=f"s{i:03d}"))
    return out


def test_mae_perfect_predictions():
    records = [rec((1.0, -2.0, 3.0), (1.0, -2.0, 3.0))]
    m = mae(records)
    assert m == {"pitch": 0.0, "yaw": 0.0, "roll": 0.0, "mae": 0.0}


def test_mae_hand_example():
    records = [rec((0.0, 0.0, 0.0), (3.0, -6.0, 9.0))]
    m = mae(records)
    assert m["pitch"] == 3.0 and m["yaw"] == 6.0 and m["roll"] == 9.0
    assert m["mae"] == 6.0


def test_mae_averages_over_records():
    records = [rec((0, 0, 0), (3, 3, 3)), rec((0, 0, 0), (9, 9, 9))]
    assert mae(records)["mae"] == 6.0


def test_mae_scaling_linearity():
    rng = np.random.default_rng(0)
    gts = rng.uniform(-50, 50, size=(20, 3))
    errs = rng.uniform(-10, 10, size=(20, 3))
    r1 = [rec(g, g + e) for g, e in zip(gts, errs)]
    r2 = [rec(g, g + 2.0 * e) for g, e in zip(gts, errs)]
    assert mae(r2)["mae"] == pytest.approx(2.0 * mae(r1)["mae"], rel=1e-12)


def test_mae_requires_records():
    with pytest.raises(ValueError):
        mae([])


def test_radial_curve_two_bin_oracle():
    records = [
        rec((0, 0, 0), (3, 3, 3), rho=0.05),
        rec((0, 0, 0), (6, 6, 6), rho=0.09),
        rec((0, 0, 0), (12, 12, 12), rho=0.75),
    ]
    curve = radial_error_curve(records, n_bins=8, rho_range=(0.0, 0.8))
    assert len(curve) == 2
    assert curve[0].center == pytest.approx(0.05)
    assert curve[0].mean_mae == pytest.approx(4.5)
    assert curve[0].count == 2
    assert curve[1].center == pytest.approx(0.75)
    assert curve[1].mean_mae == pytest.approx(12.0)
    assert curve[1].count == 1


def test_radial_curve_weighted_mean_matches_global():
    rng = np.random.default_rng(1)
    records = [
        rec(g, g + e, rho=float(r))
        for g, e, r in zip(
            rng.uniform(-50, 50, (200, 3)),
            rng.uniform(-8, 8, (200, 3)),
            rng.uniform(0, 0.8, 200),
        )
    ]
    curve = radial_error_curve(records)
    weighted = sum(b.mean_mae * b.count for b in curve) / sum(b.count for b in curve)
    assert weighted == pytest.approx(mae(records)["mae"], abs=1e-9)


def test_radial_curve_permutation_invariant():
    rng = np.random.default_rng(2)
    records = [
        rec(g, g + e, rho=float(r))
        for g, e, r in zip(
            rng.uniform(-50, 50, (50, 3)), rng.uniform(-8, 8, (50, 3)), rng.uniform(0, 0.8, 50)
        )
    ]
    c1 = radial_error_curve(records)
    c2 = radial_error_curve(list(reversed(records)))
    assert [(b.center, b.count) for b in c1] == [(b.center, b.count) for b in c2]
    for a, b in zip(c1, c2):
        assert a.mean_mae == pytest.approx(b.mean_mae, abs=1e-12)


def test_radial_trend_spearman_monotone_curve():
    curve = [RadialBin(0.05 + 0.1 * k, 2.0 + k, 10) for k in range(8)]
    assert radial_trend_spearman(curve) == 1.0
    anti = [RadialBin(0.05 + 0.1 * k, 9.0 - k, 10) for k in range(8)]
    assert radial_trend_spearman(anti) == -1.0


def test_evaluate_model_contract():
    samples = make_samples(10)
    model = Model(TINY_MODEL, seed=0)
    records = evaluate_model(model, samples, batch_size=4)
    assert len(records) == 10
    for r, s in zip(records, samples):
        assert r.source_id == s.source_id
        assert r.gt_pose == (s.pose.pitch, s.pose.yaw, s.pose.roll)
        assert all(np.isfinite(v) for v in r.pred_pose)
        assert 0.0 < r.pred_rho < 0.99


def test_evaluate_model_batch_size_invariant():
    samples = make_samples(7)
    model = Model(TINY_MODEL, seed=1)
    r1 = evaluate_model(model, samples, batch_size=3)
    r2 = evaluate_model(model, samples, batch_size=7)
    for a, b in zip(r1, r2):
        assert a.pred_pose == pytest.approx(b.pred_pose, abs=1e-12)


def test_ablation_variants():
    pair = ablation_pair()
    assert [v.name for v in pair] == ["full", "baseline"]
    assert pair[1].lambda1 == 0.0 and pair[1].lambda2 == 0.0 and not pair[1].location_module
    grid = full_variant_grid()
    assert len(grid) == 8
    assert len({v.name for v in grid}) == 8


def test_ablation_run_composition():
    samples = make_samples(30)
    cfg = TrainConfig(
        epochs=1,
        batch_size=8,
        lr=1e-3,
        model=TINY_MODEL,
        weights=LossWeights(lambda1=10.0, lambda2=0.001),
    )
    report = ablation_run(samples, cfg, ablation_pair(), seeds=[0, 1])
    assert len(report.rows) == 4
    assert len(report.summary) == 2
    for row in report.rows:
        recs = report.records[(row["variant"], row["seed"])]
        assert row["mae"] == pytest.approx(mae(recs)["mae"], abs=1e-12)
        assert len(recs) == 9  # 30 * 0.3
    full = next(s for s in report.summary if s["variant"] == "full")
    per_seed = [r["mae"] for r in report.rows if r["variant"] == "full"]
    assert full["mae"] == pytest.approx(np.mean(per_seed), abs=1e-12)


def test_ablation_shares_split_across_variants():
    samples = make_samples(20)
    cfg = TrainConfig(epochs=1, batch_size=8, lr=1e-3, model=TINY_MODEL)
    report = ablation_run(samples, cfg, ablation_pair(), seeds=[5])
    ids_full = [r.source_id for r in report.records[("full", 5)]]
    ids_base = [r.source_id for r in report.records[("baseline", 5)]]
    assert ids_full == ids_base


def test_write_csv_round_trip(tmp_path):
    rows = [{"variant": "full", "seed": 0, "mae": 3.14159265}]
    path = tmp_path / "t.csv"
    ev.write_csv(path, rows, ("variant", "seed", "mae"))
    text = path.read_text().splitlines()
    assert text[0] == "variant,seed,mae"
    assert text[1] == "full,0,3.141593"


def test_emit_eval_report_files(tmp_path):
    metrics = {"pitch": 1.0, "yaw": 2.0, "roll": 3.0, "mae": 2.0}
    curve = [RadialBin(0.05, 2.0, 3), RadialBin(0.15, 2.5, 4)]
    preds = [rec((0, 0, 0), (1, 2, 3))]
    ev.emit_eval_report(tmp_path, metrics, curve, preds)
    for name in ("metrics.json", "metrics.csv", "radial_curve.csv", "radial_curve.svg",
                 "predictions.csv"):
        assert (tmp_path / name).exists(), name
    loaded = json.loads((tmp_path / "metrics.json").read_text())
    assert loaded == metrics
    svg = (tmp_path / "radial_curve.svg").read_text()
    assert svg.lstrip().startswith("<?xml")


def test_emit_empty_curve_still_renders(tmp_path):
    ev.plot_radial_curve([], tmp_path / "empty.svg")
    assert (tmp_path / "empty.svg").stat().st_size > 0


def test_figures_byte_deterministic(tmp_path):
    curve = [RadialBin(0.05 + 0.1 * k, 2.0 + 0.3 * k, 5) for k in range(8)]
    ev.plot_radial_curve(curve, tmp_path / "a.svg")
    ev.plot_radial_curve(curve, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_emit_ablation_report_files(tmp_path):
    rows = [
        {"variant": "full", "seed": 0, "pitch": 1.0, "yaw": 2.0, "roll": 3.0, "mae": 2.0,
         "final_train_loss": 4.5},
        {"variant": "baseline", "seed": 0, "pitch": 2.0, "yaw": 3.0, "roll": 4.0, "mae": 3.0,
         "final_train_loss": 4.0},
    ]
    summary = [
        {"variant": "full", "seeds": 1, "pitch": 1.0, "yaw": 2.0, "roll": 3.0, "mae": 2.0},
        {"variant": "baseline", "seeds": 1, "pitch": 2.0, "yaw": 3.0, "roll": 4.0, "mae": 3.0},
    ]
    report = ev.AblationReport(rows=rows, summary=summary, records={})
    ev.emit_ablation_report(tmp_path, report)
    for name in ("ablation.csv", "ablation_summary.csv", "ablation.json", "ablation.svg"):
        assert (tmp_path / name).exists(), name
    header = (tmp_path / "ablation.csv").read_text().splitlines()[0]
    assert header == "variant,seed,pitch,yaw,roll,mae,final_train_loss"
