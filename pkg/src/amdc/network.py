"""Multi-stage MLP reconstruction network for the dual-camera system.

One stage refines the running estimate x_n by reprojecting it into CASSI
measurement space, forming the residual against the actual measurement
(minus the estimated sensor noise field), shifting that residual back to
cube space and pushing it, fused with RGB-derived features, through a
stack of channel-mixing and windowed position-mixing MLP blocks:

    x_{n+1} = x_n + f(shift_back(y_c - reproject(x_n)) - N,  rgb_features)

Stage 1 has its own weights; stages 2..n share one weight set, so the
parameter count does not grow with the stage count while the compute cost
grows linearly. The noise field N comes from a tied-weight two-branch
estimator applied once per forward pass; the zeroth estimate is the plain
shift-back of the measurement.

All blocks are residual: zeroing a block's inner weights reduces it to the
identity, and zeroing the stage's fusion head makes the stage a no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .optics import SensingOperator, cassi_forward_t, shift_back_t
from .tensor import Tensor

STAGE_PREFIXES = ("init", "shared")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; spatial extents are taken from the data at runtime."""

    n_stages: int = 3
    channels: int = 8
    window: int = 8
    mlp_ratio: float = 2.0
    epsilon: float = 1e-3        # additive floor of the noise estimator
    d: int = 1                   # dispersion step in pixels per channel
    rgb_lift_dim: int = 64

    def __post_init__(self):
        if self.n_stages < 1:
            raise ContractError("n_stages must be >= 1")
        if self.channels < 1 or self.window < 1 or self.rgb_lift_dim < 1:
            raise ContractError("channels, window and rgb_lift_dim must be >= 1")
        if self.mlp_ratio <= 0:
            raise ContractError("mlp_ratio must be positive")
        if self.d < 0:
            raise ContractError("dispersion step must be >= 0")

    @property
    def stream_width(self) -> int:
        """Channel width of the fused residual + RGB feature stream."""
        return 2 * self.channels

    @property
    def spectral_hidden(self) -> int:
        return math.ceil(self.mlp_ratio * self.stream_width)

    @property
    def spatial_hidden(self) -> int:
        return math.ceil(self.mlp_ratio * self.window * self.window)

    def stage_prefixes(self) -> list[str]:
        return ["init"] if self.n_stages == 1 else ["init", "shared"]

    def to_dict(self) -> dict:
        return {
            "n_stages": self.n_stages, "channels": self.channels,
            "window": self.window, "mlp_ratio": self.mlp_ratio,
            "epsilon": self.epsilon, "d": self.d,
            "rgb_lift_dim": self.rgb_lift_dim,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


# ======================================================================
# Weight construction
# ======================================================================

def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _linear(rng, weights: dict, name: str, d_in: int, d_out: int) -> None:
    weights[f"{name}.w"] = _uniform_init(rng, (d_in, d_out), d_in)
    weights[f"{name}.b"] = T.zeros((d_out,), requires_grad=True)


def _conv(rng, weights: dict, name: str, c_out: int, c_in: int, k: int) -> None:
    weights[f"{name}.w"] = _uniform_init(rng, (c_out, c_in, k, k), c_in * k * k)
    weights[f"{name}.b"] = T.zeros((c_out,), requires_grad=True)


def _stage_weights(rng, weights: dict, prefix: str, cfg: ModelConfig) -> None:
    s, h = cfg.stream_width, cfg.spectral_hidden
    ww, m = cfg.window * cfg.window, cfg.spatial_hidden
    for blk in ("sp1", "sp2"):
        weights[f"{prefix}.{blk}.gamma"] = T.full((s,), 1.0, requires_grad=True)
        weights[f"{prefix}.{blk}.beta"] = T.zeros((s,), requires_grad=True)
        _linear(rng, weights, f"{prefix}.{blk}.fc1", s, h)
        _linear(rng, weights, f"{prefix}.{blk}.fc2", h, s)
    for blk in ("sw1", "sw2"):
        _linear(rng, weights, f"{prefix}.{blk}.fc1", ww, m)
        _linear(rng, weights, f"{prefix}.{blk}.fc2", m, ww)
    _conv(rng, weights, f"{prefix}.fuse", cfg.channels, s, 1)


def init_model_weights(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fresh model parameters, deterministic per seed.

    Keys are prefixed ``rgb.*`` (RGB lift), ``ne.*`` (noise estimator, tied
    across branches), ``init.*`` (first stage) and, for n_stages >= 2,
    ``shared.*`` (every later stage).
    """
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    _conv(rng, weights, "rgb.lift", cfg.rgb_lift_dim, 3, 1)
    _conv(rng, weights, "rgb.proj", cfg.channels, cfg.rgb_lift_dim, 1)
    _conv(rng, weights, "ne.conv", cfg.channels, cfg.channels, 3)
    for prefix in cfg.stage_prefixes():
        _stage_weights(rng, weights, prefix, cfg)
    return weights


def zero_stage_weights(weights: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Copy of the weights with one stage's fusion head zeroed (stage no-op)."""
    out = dict(weights)
    for suffix in ("fuse.w", "fuse.b"):
        key = f"{prefix}.{suffix}"
        out[key] = T.zeros(weights[key].shape, requires_grad=True)
    return out


# ======================================================================
# Blocks
# ======================================================================

def _affine(x2d: Tensor, weights: dict, name: str) -> Tensor:
    return T.add_vec(T.matmul(x2d, weights[f"{name}.w"]), weights[f"{name}.b"], axis=1)


def rgb_init(y_r, weights: dict, cfg: ModelConfig) -> Tensor:
    """Lift an (H, W, 3) RGB measurement to (H, W, C) features via 1x1 convs."""
    y = y_r if isinstance(y_r, Tensor) else Tensor(np.asarray(y_r, dtype=np.float64))
    if y.data.ndim != 3 or y.shape[2] != 3:
        raise ShapeError(f"rgb_init expects (H, W, 3), got {y.shape}")
    x = T.permute(y, (2, 0, 1))
    x = T.add_vec(T.conv2d(x, weights["rgb.lift.w"]), weights["rgb.lift.b"], axis=0)
    x = T.gelu(x)
    x = T.add_vec(T.conv2d(x, weights["rgb.proj.w"]), weights["rgb.proj.b"], axis=0)
    return T.permute(x, (1, 2, 0))


def _ne_branch(feat: Tensor, weights: dict) -> Tensor:
    x = T.permute(feat, (2, 0, 1))
    x = T.upsample(x, 2)
    x = T.add_vec(T.conv2d(x, weights["ne.conv.w"], pad=1), weights["ne.conv.b"], axis=0)
    x = T.downsample(x, 2)
    x = T.softmax(x, axis=0)
    return T.permute(x, (1, 2, 0))


def noise_estimate(y_c_feat: Tensor, y_r_feat: Tensor, weights: dict,
                   epsilon: float) -> Tensor:
    """Noise field from the imbalance between the two tied-weight branches.

    Identical branch inputs cancel exactly, leaving the constant floor.
    """
    if y_c_feat.shape != y_r_feat.shape:
        raise ShapeError(f"branch features disagree: {y_c_feat.shape} vs "
                         f"{y_r_feat.shape}")
    return T.add(T.sub(_ne_branch(y_c_feat, weights), _ne_branch(y_r_feat, weights)),
                 float(epsilon))


def spectral_mlp(x: Tensor, weights: dict, name: str) -> Tensor:
    """Per-pixel channel mixing with pre-normalization and a residual add."""
    h, w, s = x.shape
    flat = T.reshape(x, (h * w, s))
    z = T.layer_norm(flat, 1, weights[f"{name}.gamma"], weights[f"{name}.beta"])
    z = T.gelu(_affine(z, weights, f"{name}.fc1"))
    z = _affine(z, weights, f"{name}.fc2")
    return T.add(x, T.reshape(z, (h, w, s)))


def swin_spatial_mlp(x: Tensor, weights: dict, name: str, window: int,
                     shifted: bool) -> Tensor:
    """Windowed position mixing; shifted blocks roll by half a window first."""
    h, w, s = x.shape
    if h % window or w % window:
        raise ShapeError(f"window {window} does not divide {h}x{w}")
    off = window // 2
    z = T.permute(x, (2, 0, 1))
    if shifted:
        z = T.roll(T.roll(z, axis=1, offset=-off), axis=2, offset=-off)
    tiles = T.window_partition(z, window)          # (S, nT, window^2)
    nt = tiles.shape[1]
    flat = T.reshape(tiles, (s * nt, window * window))
    flat = T.gelu(_affine(flat, weights, f"{name}.fc1"))
    flat = _affine(flat, weights, f"{name}.fc2")
    z = T.window_merge(T.reshape(flat, (s, nt, window * window)), window, h, w)
    if shifted:
        z = T.roll(T.roll(z, axis=1, offset=off), axis=2, offset=off)
    return T.add(x, T.permute(z, (1, 2, 0)))


def stage_forward(x_n: Tensor, y_c: Tensor, rgb_feat: Tensor, noise_field: Tensor,
                  mask, cfg: ModelConfig, weights: dict, prefix: str) -> Tensor:
    """One refinement stage; ``prefix`` selects init or shared weights."""
    mask_t = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float64))
    r2d = T.sub(y_c, cassi_forward_t(x_n, mask_t, cfg.d))
    r = T.sub(shift_back_t(r2d, cfg.d, cfg.channels), noise_field)
    u = T.concat([r, rgb_feat], axis=2)
    u = spectral_mlp(u, weights, f"{prefix}.sp1")
    u = swin_spatial_mlp(u, weights, f"{prefix}.sw1", cfg.window, shifted=False)
    u = spectral_mlp(u, weights, f"{prefix}.sp2")
    u = swin_spatial_mlp(u, weights, f"{prefix}.sw2", cfg.window, shifted=True)
    z = T.permute(u, (2, 0, 1))
    z = T.add_vec(T.conv2d(z, weights[f"{prefix}.fuse.w"]),
                  weights[f"{prefix}.fuse.b"], axis=0)
    return T.add(x_n, T.permute(z, (1, 2, 0)))


def model_forward(y_c, y_r, op, weights: dict, cfg: ModelConfig) -> Tensor:
    """Full reconstruction: shift-back start, then n refinement stages.

    ``op`` may be a :class:`SensingOperator` or a bare mask (array or
    Tensor); passing the mask as a Tensor keeps measurement formation and
    reconstruction in one differentiation graph during mask co-training.
    The output is left unclamped so it can sit inside a loss graph; clamp
    at evaluation time (see :func:`reconstruct`).
    """
    mask = op.mask if isinstance(op, SensingOperator) else op
    y_c_t = y_c if isinstance(y_c, Tensor) else Tensor(np.asarray(y_c, dtype=np.float64))
    h = y_c_t.shape[0]
    w = y_c_t.shape[1] - cfg.d * (cfg.channels - 1)
    if h % cfg.window or w % cfg.window:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by window "
                         f"{cfg.window}")
    x = shift_back_t(y_c_t, cfg.d, cfg.channels)
    rgb_feat = rgb_init(y_r, weights, cfg)
    noise_field = noise_estimate(x, rgb_feat, weights, cfg.epsilon)
    for stage in range(cfg.n_stages):
        prefix = "init" if stage == 0 else "shared"
        x = stage_forward(x, y_c_t, rgb_feat, noise_field, mask, cfg,
                          weights, prefix)
    return x


def reconstruct(y_c, y_r, op: SensingOperator, weights: dict,
                cfg: ModelConfig) -> np.ndarray:
    """Inference wrapper: run outside any tape and clamp into [0, 1]."""
    with T.no_tape():
        out = model_forward(y_c, y_r, op, weights, cfg)
    return np.clip(out.data, 0.0, 1.0)


# ======================================================================
# Cost accounting
# ======================================================================

def param_count(weights_or_cfg) -> int:
    """Number of stored reals; independent of n_stages for n >= 2."""
    if isinstance(weights_or_cfg, ModelConfig):
        weights = init_model_weights(weights_or_cfg, seed=0)
    else:
        weights = weights_or_cfg
    return int(sum(t.size for t in weights.values()))


def flop_count(cfg: ModelConfig, spatial_shape) -> int:
    """Analytic multiply-add count (x2) per reconstruction; affine in n_stages."""
    h, w = spatial_shape
    hw = h * w
    s, hid = cfg.stream_width, cfg.spectral_hidden
    ww, m = cfg.window * cfg.window, cfg.spatial_hidden
    c, lift = cfg.channels, cfg.rgb_lift_dim

    rgb = 2 * hw * (3 * lift + lift * c)
    ne = 2 * (2 * (4 * hw) * c * c * 9)           # two branches, conv3x3 at 2H x 2W
    nt = hw // ww
    spectral_block = 2 * (hw * s * hid + hw * hid * s)
    spatial_block = 2 * (s * nt) * (ww * m + m * ww)
    fuse = 2 * hw * s * c
    reproject_cost = 2 * hw * c
    per_stage = reproject_cost + 2 * spectral_block + 2 * spatial_block + fuse
    return int(rgb + ne + cfg.n_stages * per_stage)
