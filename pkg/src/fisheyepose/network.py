"""Location-guided multi-task pose network.

A small strided-conv backbone produces a shared feature map F.  A location
branch refines F with channel attention (shared two-layer MLP over average-
and max-pooled descriptors) followed by spatial attention (7x7 conv over
stacked channel mean/max maps); the refined map is added back onto F and
the sum feeds the three pose heads, while the refined map alone feeds the
two location heads.  Every head classifies into uniform bins and also
reports the expectation of the bin midpoints under its softmax, which is
the continuous estimate used downstream.

With the location branch disabled the pose heads see the raw backbone
features and the location heads attach there too, so the graph degrades to
a plain classifier.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; the default matches the 224px pipeline."""

    input_size: int = 224
    # (out_channels, kernel, stride, padding) per backbone stage
    stages: tuple = ((16, 8, 8, 0), (32, 3, 2, 1), (64, 3, 2, 1))
    reduction: int = 16
    spatial_kernel: int = 7
    location_module: bool = True
    pose_bins: int = 66
    pose_bin_width: float = 3.0
    theta_bins: int = 72
    theta_bin_width: float = 5.0
    rho_bins: int = 66
    rho_bin_width: float = 0.015

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = tuple(tuple(int(v) for v in s) for s in d["stages"])
        return cls(**d)

    def feature_shape(self):
        """(C, H, W) of the backbone output for the configured input size."""
        side = self.input_size
        for _, k, s, p in self.stages:
            side = (side + 2 * p - k) // s + 1
        if side <= 0:
            raise ValueError(f"stages {self.stages} collapse a {self.input_size}px input")
        return self.stages[-1][0], side, side


def decode_midpoints(n_bins: int, bin_width: float, centered: bool) -> np.ndarray:
    """Bin midpoints indexed 1..n.

    Centered heads span a symmetric range, midpoint_i = w * (i - (n+1)/2);
    the radial head starts at zero, midpoint_i = w * (i - 1/2).
    """
    i = np.arange(1, n_bins + 1, dtype=np.float64)
    shift = (n_bins + 1) / 2.0 if centered else 0.5
    return bin_width * (i - shift)


@dataclass
class HeadOutput:
    """One head's raw logits, softmax probabilities, and expectation decode."""

    logits: Tensor
    probs: Tensor
    decoded: Tensor


@dataclass
class PredictionBundle:
    pitch: HeadOutput
    yaw: HeadOutput
    roll: HeadOutput
    theta: HeadOutput
    rho: HeadOutput
    f_basic: Tensor
    f_location: Tensor
    f_fused: Tensor
    channel_map: Tensor | None = None
    spatial_map: Tensor | None = None

    def pose_degrees(self) -> np.ndarray:
        """Decoded (pitch, yaw, roll) stacked as an (N, 3) array."""
        return np.stack(
            [self.pitch.decoded.values, self.yaw.decoded.values, self.roll.decoded.values],
            axis=-1,
        )


_HEADS = ("pitch", "yaw", "roll", "theta", "rho")


class Model:
    """Parameter container plus the forward graph builders."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        if params is None:
            self._init_params(np.random.default_rng(seed))
        else:
            expected = set(self._param_shapes())
            got = set(params)
            if expected != got:
                missing = sorted(expected - got)
                extra = sorted(got - expected)
                raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
            for name, arr in params.items():
                want = self._param_shapes()[name]
                arr = np.asarray(arr, dtype=np.float64)
                if arr.shape != want:
                    raise ValueError(f"parameter {name}: shape {arr.shape}, expected {want}")
                self.params[name] = Tensor(arr, requires_grad=True)

    def _param_shapes(self) -> dict:
        cfg = self.config
        shapes = {}
        in_ch = 3
        for idx, (out_ch, k, _, _) in enumerate(cfg.stages):
            shapes[f"stage{idx}.w"] = (out_ch, in_ch, k, k)
            shapes[f"stage{idx}.b"] = (out_ch,)
            in_ch = out_ch
        c, h, w = cfg.feature_shape()
        if cfg.location_module:
            hidden = max(c // cfg.reduction, 1)
            shapes["att.mlp1.w"] = (hidden, c)
            shapes["att.mlp2.w"] = (c, hidden)
            sk = cfg.spatial_kernel
            shapes["att.spatial.w"] = (1, 2, sk, sk)
            shapes["att.spatial.b"] = (1,)
        flat = c * h * w
        for name, bins in self._head_bins().items():
            shapes[f"head.{name}.w"] = (bins, flat)
            shapes[f"head.{name}.b"] = (bins,)
        return shapes

    def _head_bins(self) -> dict:
        cfg = self.config
        return {
            "pitch": cfg.pose_bins,
            "yaw": cfg.pose_bins,
            "roll": cfg.pose_bins,
            "theta": cfg.theta_bins,
            "rho": cfg.rho_bins,
        }

    def _init_params(self, rng):
        # Centered uniform scaled by fan-in; biases start at zero.
        for name, shape in self._param_shapes().items():
            if name.endswith(".b"):
                self.params[name] = Tensor(np.zeros(shape), requires_grad=True)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                self.params[name] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    def num_params(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # graph builders ----------------------------------------------------

    def backbone_forward(self, images) -> Tensor:
        x = ad.as_tensor(images)
        if x.values.ndim not in (3, 4):
            raise ad.ShapeError(f"expected (3, H, W) or (N, 3, H, W), got {x.values.shape}")
        for idx, (_, k, s, p) in enumerate(self.config.stages):
            x = ad.conv2d(x, self.params[f"stage{idx}.w"], self.params[f"stage{idx}.b"], s, p)
            x = ad.relu(x)
        return x

    def channel_attention(self, f: Tensor) -> Tensor:
        """Per-channel gate in (0, 1), shared MLP over avg and max descriptors."""
        w1 = self.params["att.mlp1.w"]
        w2 = self.params["att.mlp2.w"]
        avg = ad.linear(ad.relu(ad.linear(ad.global_avg_pool(f), w1)), w2)
        mx = ad.linear(ad.relu(ad.linear(ad.global_max_pool(f), w1)), w2)
        return ad.sigmoid(ad.add(avg, mx))

    def spatial_attention(self, f: Tensor) -> Tensor:
        """Single-channel spatial gate from stacked channel mean/max maps."""
        axis = 0 if f.values.ndim == 3 else 1
        stacked = ad.concat([ad.channel_mean_map(f), ad.channel_max_map(f)], axis=axis)
        pad = self.config.spatial_kernel // 2
        conv = ad.conv2d(stacked, self.params["att.spatial.w"], self.params["att.spatial.b"],
                         stride=1, padding=pad)
        return ad.sigmoid(conv)

    def fuse(self, f_basic: Tensor, f_location: Tensor) -> Tensor:
        return ad.add(f_basic, f_location)

    def _decode_head(self, name: str, feat: Tensor) -> HeadOutput:
        flat_dim = int(np.prod(feat.values.shape[-3:]))
        single = feat.values.ndim == 3
        flat = ad.reshape(feat, (flat_dim,) if single else (feat.values.shape[0], flat_dim))
        logits = ad.linear(flat, self.params[f"head.{name}.w"], self.params[f"head.{name}.b"])
        probs = ad.softmax(logits, axis=-1)
        cfg = self.config
        if name == "theta":
            mids = decode_midpoints(cfg.theta_bins, cfg.theta_bin_width, centered=True)
        elif name == "rho":
            mids = decode_midpoints(cfg.rho_bins, cfg.rho_bin_width, centered=False)
        else:
            mids = decode_midpoints(cfg.pose_bins, cfg.pose_bin_width, centered=True)
        decoded = ad.reduce_sum(ad.mul(probs, Tensor(mids)), axis=-1)
        return HeadOutput(logits, probs, decoded)

    def location_head(self, f_location: Tensor):
        return self._decode_head("theta", f_location), self._decode_head("rho", f_location)

    def pose_head(self, f_fused: Tensor):
        return (
            self._decode_head("pitch", f_fused),
            self._decode_head("yaw", f_fused),
            self._decode_head("roll", f_fused),
        )

    def forward(self, images) -> PredictionBundle:
        f_basic = self.backbone_forward(images)
        channel_map = None
        spatial_map = None
        if self.config.location_module:
            channel_map = self.channel_attention(f_basic)
            f_prime = ad.scale_by_channel(f_basic, channel_map)
            spatial_map = self.spatial_attention(f_prime)
            f_location = ad.scale_by_map(f_prime, spatial_map)
            f_fused = self.fuse(f_basic, f_location)
        else:
            f_location = f_basic
            f_fused = f_basic
        theta, rho = self.location_head(f_location)
        pitch, yaw, roll = self.pose_head(f_fused)
        return PredictionBundle(
            pitch=pitch, yaw=yaw, roll=roll, theta=theta, rho=rho,
            f_basic=f_basic, f_location=f_location, f_fused=f_fused,
            channel_map=channel_map, spatial_map=spatial_map,
        )

    # persistence --------------------------------------------------------

    def save(self, ckpt_path, config_path=None) -> None:
        ad.save_params(ckpt_path, self.params)
        if config_path is not None:
            with open(config_path, "w") as f:
                json.dump(self.config.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")

    @classmethod
    def load(cls, ckpt_path, config: "ModelConfig | str | dict") -> "Model":
        if isinstance(config, (str, bytes)) or hasattr(config, "read_text"):
            with open(config) as f:
                config = ModelConfig.from_dict(json.load(f))
        elif isinstance(config, dict):
            config = ModelConfig.from_dict(config)
        return cls(config, params=ad.load_params(ckpt_path))


# gradient verification -------------------------------------------------------

REDUCED_CONFIG = ModelConfig(
    input_size=16,
    stages=((8, 4, 4, 0),),
    reduction=4,
)


def gradient_suite(eps: float = 1e-5, seed: int = 0, include_network: bool = True) -> dict:
    """Central-difference checks for every differentiable op, plus a reduced
    copy of the full multi-task model under its real loss shape.

    Returns name -> max guarded relative error.  Weighted readouts (rather
    than plain sums) make position-scrambling bugs visible.
    """
    rng = np.random.default_rng(seed)

    readouts = {}

    def wsum(name, t):
        # fixed per-check weights: fn must be deterministic across the
        # repeated evaluations grad_check performs
        if name not in readouts:
            readouts[name] = Tensor(rng.normal(size=t.values.shape))
        return ad.reduce_sum(ad.mul(t, readouts[name]))

    results = {}
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=4) * 0.5, requires_grad=True)
    a2 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(4, 5)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.normal(size=4) * 0.5, requires_grad=True)
    m2 = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    cm = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    sm = Tensor(rng.normal(size=(2, 1, 8, 8)), requires_grad=True)
    labels = np.array([0, 2, 3])
    target = Tensor(rng.normal(size=(3, 4)))

    row = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
    wp = Tensor(rng.normal(size=(4, 3, 2, 2)) * 0.5, requires_grad=True)
    checks = {
        "add": (lambda: wsum("add", ad.add(a2, row)), [a2, row]),
        "mul": (lambda: wsum("mul", ad.mul(a2, a2)), [a2]),
        "matmul": (lambda: wsum("matmul", ad.matmul(a2, m2)), [a2, m2]),
        "linear": (lambda: wsum("linear", ad.linear(a2, w2, b2)), [a2, w2, b2]),
        "conv2d_s1": (lambda: wsum("conv2d_s1", ad.conv2d(x, w, b, 1, 1)), [x, w, b]),
        "conv2d_s2": (lambda: wsum("conv2d_s2", ad.conv2d(x, w, b, 2, 1)), [x, w, b]),
        "conv2d_patch": (lambda: wsum("conv2d_patch", ad.conv2d(x, wp, b, 2, 0)), [x, wp, b]),
        "relu": (lambda: wsum("relu", ad.relu(x)), [x]),
        "sigmoid": (lambda: wsum("sigmoid", ad.sigmoid(x)), [x]),
        "softmax": (lambda: wsum("softmax", ad.softmax(a2, axis=-1)), [a2]),
        "reshape": (lambda: wsum("reshape", ad.reshape(a2, (5, 3))), [a2]),
        "concat": (lambda: wsum("concat", ad.concat([a2, a2], axis=1)), [a2]),
        "reduce_sum": (lambda: ad.reduce_sum(ad.mul(a2, a2)), [a2]),
        "mean": (lambda: ad.mean(ad.mul(a2, a2)), [a2]),
        "global_avg_pool": (lambda: wsum("global_avg_pool", ad.global_avg_pool(x)), [x]),
        "global_max_pool": (lambda: wsum("global_max_pool", ad.global_max_pool(x)), [x]),
        "channel_mean_map": (lambda: wsum("channel_mean_map", ad.channel_mean_map(x)), [x]),
        "channel_max_map": (lambda: wsum("channel_max_map", ad.channel_max_map(x)), [x]),
        "scale_by_channel": (lambda: wsum("scale_by_channel", ad.scale_by_channel(x, ad.sigmoid(cm))), [x, cm]),
        "scale_by_map": (lambda: wsum("scale_by_map", ad.scale_by_map(x, ad.sigmoid(sm))), [x, sm]),
        "cross_entropy": (lambda: ad.cross_entropy(ad.linear(a2, w2, b2), labels), [a2, w2, b2]),
        "mse": (lambda: ad.mse(ad.linear(a2, w2, b2), target), [a2, w2, b2]),
    }
    for name, (fn, params) in checks.items():
        results[name] = ad.grad_check(fn, params, eps=eps)

    if include_network:
        model = Model(REDUCED_CONFIG, seed=seed)
        imgs = Tensor(rng.normal(size=(2, 3, 16, 16)), requires_grad=True)
        pose_labels = {h: np.array([11, 40]) for h in ("pitch", "yaw", "roll")}
        theta_labels = np.array([3, 70])
        rho_labels = np.array([5, 60])
        pose_targets = {h: Tensor(np.array([-64.5, 22.5])) for h in ("pitch", "yaw", "roll")}
        theta_target = Tensor(np.array([-162.5, 172.5]))
        rho_target = Tensor(np.array([0.0825, 0.9075]))

        def net_loss():
            bundle = model.forward(imgs)
            total = None
            heads = {
                "pitch": bundle.pitch, "yaw": bundle.yaw, "roll": bundle.roll,
            }
            for h, head in heads.items():
                term = ad.add(
                    ad.cross_entropy(head.logits, pose_labels[h]),
                    ad.mse(head.decoded, pose_targets[h]),
                )
                total = term if total is None else ad.add(total, term)
            l_rho = ad.add(
                ad.cross_entropy(bundle.rho.logits, rho_labels),
                ad.mul(ad.mse(bundle.rho.decoded, rho_target), 100.0),
            )
            l_theta = ad.add(
                ad.cross_entropy(bundle.theta.logits, theta_labels),
                ad.mse(bundle.theta.decoded, theta_target),
            )
            total = ad.add(total, ad.mul(l_rho, 10.0))
            total = ad.add(total, ad.mul(l_theta, 0.001))
            return total

        params = [imgs] + [model.params[k] for k in sorted(model.params)]
        results["network"] = ad.grad_check(net_loss, params, eps=eps)
    return results
