"""Training stack: binning, normalization, losses, Adam, loop determinism."""

import json
import math

import numpy as np
import pytest

from fisheyepose import autodiff as ad
from fisheyepose import synthesis as syn
from fisheyepose import training as tr
from fisheyepose.autodiff import Tensor
from fisheyepose.geometry import PolarLocation
from fisheyepose.network import Model, ModelConfig, decode_midpoints
from fisheyepose.synthesis import EulerAngles, FisheyeSample
from fisheyepose.training import (
    AdamState,
    BinningSpec,
    LossWeights,
    NonFiniteLossError,
    TrainConfig,
    adam_step,
    epoch_lr,
    normalize_image,
    run_training,
    split_dataset,
    task_loss,
    total_loss,
)

LN_66 = 4.189654742026425

TINY_MODEL = ModelConfig(
    input_size=32,
    stages=((8, 4, 4, 0), (16, 2, 2, 0)),
    reduction=4,
    spatial_kernel=3,
)


def make_samples(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        pose = EulerAngles(*(float(v) for v in rng.uniform(-60, 60, 3)))
        loc = PolarLocation(float(rng.uniform(-180, 180)), float(rng.uniform(0, 0.8)))
        out.append(FisheyeSample(image=img, pose=pose, location=loc, source_id=f"s{i:03d}"))
    return out


# binning --------------------------------------------------------------------


def test_bin_label_examples():
    pose = BinningSpec.pose()
    assert pose.bin_label(0.0) == 33
    assert pose.bin_label(-99.0) == 0
    assert pose.bin_label(98.9) == 65
    assert pose.bin_label(99.0) == 65
    theta = BinningSpec.theta()
    assert theta.bin_label(-180.0) == 0
    assert theta.bin_label(0.0) == 36
    assert theta.bin_label(-0.0001) == 35
    rho = BinningSpec.rho()
    assert rho.bin_label(0.0) == 0
    assert rho.bin_label(0.5) == 33
    assert rho.bin_label(0.989) == 65


def test_bin_label_rejects_out_of_range():
    with pytest.raises(ValueError):
        BinningSpec.pose().bin_label(99.5)
    with pytest.raises(ValueError):
        BinningSpec.pose().bin_label(-100.0)
    with pytest.raises(ValueError):
        BinningSpec.rho().bin_label(float("nan"))


def test_midpoints_match_decode_midpoints():
    # the training-side bin midpoints and the network decode weights must be
    # the same numbers, or classification and regression would disagree
    np.testing.assert_allclose(
        BinningSpec.pose().midpoints(), decode_midpoints(66, 3.0, True), rtol=0, atol=1e-12
    )
    np.testing.assert_allclose(
        BinningSpec.theta().midpoints(), decode_midpoints(72, 5.0, True), rtol=0, atol=1e-12
    )
    np.testing.assert_allclose(
        BinningSpec.rho().midpoints(), decode_midpoints(66, 0.015, False), rtol=0, atol=1e-12
    )


def test_bin_label_inverts_midpoint():
    for spec in (BinningSpec.pose(), BinningSpec.theta(), BinningSpec.rho()):
        for k in range(spec.n_bins):
            assert spec.bin_label(spec.midpoint(k)) == k


# normalization --------------------------------------------------------------


def test_normalize_image_channel_zero_point():
    # channel value 255 * 0.485 = 123.675 is not integral; use exact algebra
    img = np.zeros((4, 4, 3), np.uint8)
    img[:, :, 0] = 124
    out = normalize_image(img)
    want = (124 / 255.0 - 0.485) / 0.229
    np.testing.assert_allclose(out[0], want, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out[1], (0.0 - 0.456) / 0.224, rtol=0, atol=1e-12)
    assert out.shape == (3, 4, 4)


def test_normalize_round_trip():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    back = tr.denormalize_image(normalize_image(img))
    np.testing.assert_array_equal(back, img)


def test_normalize_rejects_bad_shape():
    with pytest.raises(ValueError):
        normalize_image(np.zeros((3, 8, 8), np.uint8))


# losses ---------------------------------------------------------------------


def head_from_logits(logits, spec_kind):
    t = Tensor(np.asarray(logits, dtype=np.float64), requires_grad=True)
    probs = ad.softmax(t, axis=-1)
    if spec_kind == "pose":
        mids = decode_midpoints(66, 3.0, True)
    elif spec_kind == "theta":
        mids = decode_midpoints(72, 5.0, True)
    else:
        mids = decode_midpoints(66, 0.015, False)
    decoded = ad.reduce_sum(ad.mul(probs, Tensor(mids)), axis=-1)
    from fisheyepose.network import HeadOutput

    return HeadOutput(t, probs, decoded)


def test_task_loss_uniform_logits_is_ln_bins_plus_mse():
    head = head_from_logits(np.zeros((2, 66)), "pose")
    # uniform softmax decodes to 0, so MSE = mean(target^2)
    targets = np.array([0.0, 30.0])
    loss = task_loss(head, targets, BinningSpec.pose(), alpha=1.0)
    want = LN_66 + (0.0 + 900.0) / 2.0
    assert abs(float(loss.values) - want) < 1e-9


def test_task_loss_alpha_zero_is_pure_cross_entropy():
    head = head_from_logits(np.zeros((3, 66)), "pose")
    loss = task_loss(head, np.array([-99.0, 0.0, 98.0]), BinningSpec.pose(), alpha=0.0)
    assert abs(float(loss.values) - LN_66) < 1e-12


def test_task_loss_sharp_correct_head_vanishes():
    spec = BinningSpec.pose()
    logits = np.zeros((1, 66))
    logits[0, 40] = 500.0
    head = head_from_logits(logits, "pose")
    target = np.array([spec.midpoint(40)])
    loss = task_loss(head, target, spec, alpha=1.0)
    assert float(loss.values) < 1e-9


def test_total_loss_composition():
    rng = np.random.default_rng(2)
    model = Model(TINY_MODEL, seed=0)
    x = rng.normal(size=(4, 3, 32, 32))
    bundle = model.forward(x)
    poses = rng.uniform(-60, 60, size=(4, 3))
    thetas = rng.uniform(-180, 179.99, size=4)
    rhos = rng.uniform(0, 0.98, size=4)

    w = LossWeights(lambda1=10.0, lambda2=0.001)
    total, comps = total_loss(bundle, poses, thetas, rhos, w)
    want = (
        comps["loss_pitch"]
        + comps["loss_yaw"]
        + comps["loss_roll"]
        + 10.0 * comps["loss_rho"]
        + 0.001 * comps["loss_theta"]
    )
    assert abs(float(total.values) - want) < 1e-9
    assert comps["loss"] == pytest.approx(want, abs=1e-9)


def test_total_loss_zero_lambdas_skip_location_terms():
    rng = np.random.default_rng(3)
    model = Model(TINY_MODEL, seed=1)
    bundle = model.forward(rng.normal(size=(2, 3, 32, 32)))
    poses = rng.uniform(-60, 60, size=(2, 3))
    total, comps = total_loss(
        bundle, poses, np.zeros(2), np.zeros(2), LossWeights(lambda1=0.0, lambda2=0.0)
    )
    assert comps["loss_rho"] == 0.0 and comps["loss_theta"] == 0.0
    model.zero_grad()
    total.backward()
    for name in ("head.theta.w", "head.theta.b", "head.rho.w", "head.rho.b"):
        g = model.params[name].grad
        assert g is None or not np.any(g)
    assert model.params["head.yaw.w"].grad is not None
    assert np.any(model.params["head.yaw.w"].grad)


# adam -----------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_unchanged():
    params = {"w": Tensor(np.ones((3, 3)), requires_grad=True)}
    state = AdamState(params)
    cfg = TrainConfig()
    before = params["w"].values.copy()
    adam_step(params, state, lr=0.1, cfg=cfg)
    np.testing.assert_array_equal(params["w"].values, before)


def test_adam_descends_a_quadratic():
    target = np.array([2.0, -1.0, 0.5])
    w = Tensor(np.zeros(3), requires_grad=True)
    params = {"w": w}
    state = AdamState(params)
    cfg = TrainConfig(lr=0.05)
    losses = []
    for _ in range(200):
        w.grad = None
        loss = ad.mse(w, Tensor(target))
        loss.backward()
        losses.append(float(loss.values))
        adam_step(params, state, lr=cfg.lr, cfg=cfg)
    assert losses[-1] < 1e-3
    assert losses[-1] < losses[0]
    np.testing.assert_allclose(w.values, target, atol=0.05)


def test_epoch_lr_schedule():
    cfg = TrainConfig(lr=1e-4, lr_decay_epochs=(10, 20), lr_decay=0.5)
    assert epoch_lr(cfg, 1) == 1e-4
    assert epoch_lr(cfg, 9) == 1e-4
    assert epoch_lr(cfg, 10) == 5e-5
    assert epoch_lr(cfg, 19) == 5e-5
    assert epoch_lr(cfg, 20) == 2.5e-5
    assert epoch_lr(cfg, 25) == 2.5e-5


# split ----------------------------------------------------------------------


def test_split_dataset_deterministic_and_disjoint():
    samples = make_samples(20)
    a1, b1 = split_dataset(samples, 0.7, seed=3)
    a2, b2 = split_dataset(samples, 0.7, seed=3)
    assert [s.source_id for s in a1] == [s.source_id for s in a2]
    assert [s.source_id for s in b1] == [s.source_id for s in b2]
    assert len(a1) == 14 and len(b1) == 6
    assert {s.source_id for s in a1}.isdisjoint({s.source_id for s in b1})
    a3, _ = split_dataset(samples, 0.7, seed=4)
    assert [s.source_id for s in a3] != [s.source_id for s in a1]


def test_filter_by_pose_range():
    good = make_samples(3)
    bad = FisheyeSample(
        image=np.zeros((32, 32, 3), np.uint8),
        pose=EulerAngles(150.0, 0.0, 0.0),
        location=PolarLocation(0.0, 0.1),
        source_id="bad",
    )
    kept = tr.filter_by_pose_range(good + [bad])
    assert [s.source_id for s in kept] == [s.source_id for s in good]


# training loop ---------------------------------------------------------------


def tiny_cfg(**kw):
    base = dict(
        epochs=2,
        batch_size=8,
        lr=1e-3,
        seed=0,
        model=TINY_MODEL,
        weights=LossWeights(lambda1=10.0, lambda2=0.001),
    )
    base.update(kw)
    return TrainConfig(**base)


def test_run_training_produces_log_and_learns_something(tmp_path):
    samples = make_samples(24)
    log_path = tmp_path / "train_log.jsonl"
    result = run_training(samples, tiny_cfg(epochs=3), log_path=log_path)
    assert len(result.records) == 3
    for rec in result.records:
        assert math.isfinite(rec["loss"])
        assert rec["train_mae"] >= 0.0
    lines = log_path.read_text().splitlines()
    assert len(lines) == 3
    parsed = [json.loads(l) for l in lines]
    assert [r["epoch"] for r in parsed] == [1, 2, 3]
    assert parsed[-1]["loss"] < parsed[0]["loss"]


def test_run_training_is_deterministic(tmp_path):
    samples = make_samples(16)
    r1 = run_training(samples, tiny_cfg(), log_path=tmp_path / "a.jsonl")
    r2 = run_training(samples, tiny_cfg(), log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for k in r1.model.params:
        np.testing.assert_array_equal(r1.model.params[k].values, r2.model.params[k].values)
    r3 = run_training(samples, tiny_cfg(seed=9))
    assert any(
        not np.array_equal(r1.model.params[k].values, r3.model.params[k].values)
        for k in r1.model.params
    )


def test_run_training_raises_non_finite(monkeypatch):
    samples = make_samples(8)
    cfg = tiny_cfg()

    real_init = Model._init_params

    def poisoned(self, rng):
        real_init(self, rng)
        self.params["head.yaw.w"].values[0, 0] = np.nan

    monkeypatch.setattr(Model, "_init_params", poisoned)
    with pytest.raises(NonFiniteLossError) as ei:
        run_training(samples, cfg)
    assert "epoch 1" in str(ei.value)


def test_train_config_round_trip():
    cfg = tiny_cfg(epochs=7)
    d = cfg.to_dict()
    back = TrainConfig.from_dict(json.loads(json.dumps(d)))
    assert back == cfg
