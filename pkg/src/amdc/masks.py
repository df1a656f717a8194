"""Coded-aperture masks: fixed templates and the learned adaptive mask.

Three fixed baselines (a deterministic checkerboard lattice, per-pixel
Bernoulli(0.5), and a clipped Gaussian around 0.5) plus a small conv net
that turns an RGB measurement and a template into a scene-adapted mask:
template added to every RGB channel, a two-level encoder/decoder with skip
concatenation, a 3x3 head conv to one channel, and a terminal sigmoid so
the output transmittance stays in (0, 1).

During co-training the net's weights update together with the
reconstruction network; afterwards the mask is frozen to the mean over a
calibration set, written to disk, and the net plays no further role.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .serialization import load_tensor, save_tensor
from .tensor import Tensor

MASK_KINDS = ("manual", "random", "normal", "adaptive")

# Encoder/decoder channel widths (two 2x downsamplings, base width 16).
_W0, _W1, _W2 = 16, 32, 64


@dataclass
class MaskTemplate:
    data: np.ndarray
    kind: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"mask template must be rank 2, got {self.data.shape}")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ContractError("template values must lie in [0, 1]")


def template_init(kind: str, shape, seed: int = 0) -> MaskTemplate:
    """Fixed mask baselines: ``manual`` | ``random`` | ``normal``."""
    h, w = shape
    if kind == "manual":
        yy, xx = np.mgrid[0:h, 0:w]
        data = ((yy + xx) % 2 == 0).astype(np.float64)
    elif kind == "random":
        data = np.random.default_rng(seed).integers(0, 2, (h, w)).astype(np.float64)
    elif kind == "normal":
        data = np.clip(np.random.default_rng(seed).normal(0.5, 0.2, (h, w)), 0.0, 1.0)
    else:
        raise ContractError(f"unknown mask template kind {kind!r}; "
                            f"expected one of {MASK_KINDS[:3]}")
    return MaskTemplate(data, kind)


def init_mask_weights(rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh mask-net parameters (uniform +-sqrt(1/fan_in), zero biases)."""

    def conv(c_out, c_in, k):
        bound = np.sqrt(1.0 / (c_in * k * k))
        w = rng.uniform(-bound, bound, (c_out, c_in, k, k))
        return Tensor(w, requires_grad=True), T.zeros((c_out,), requires_grad=True)

    weights: dict[str, Tensor] = {}
    for name, (c_out, c_in) in {
        "enc0": (_W0, 3),
        "enc1": (_W1, _W0),
        "mid": (_W2, _W1),
        "dec1": (_W1, _W2 + _W1),
        "dec0": (_W0, _W1 + _W0),
        "head": (1, _W0),
    }.items():
        weights[f"{name}.w"], weights[f"{name}.b"] = conv(c_out, c_in, 3)
    return weights


def _conv_block(x: Tensor, w: dict, name: str, activate: bool = True) -> Tensor:
    out = T.add_vec(T.conv2d(x, w[f"{name}.w"], stride=1, pad=1),
                    w[f"{name}.b"], axis=0)
    return T.relu(out) if activate else out


def mask_net_forward(y_rgb, mt: MaskTemplate, weights: dict[str, Tensor]) -> Tensor:
    """Scene-adapted mask in (0, 1) from an RGB measurement and a template.

    Differentiable with respect to the weights and the RGB input. Spatial
    extents must be divisible by 4 (two 2x poolings).
    """
    y = y_rgb if isinstance(y_rgb, Tensor) else Tensor(np.asarray(y_rgb, dtype=np.float64))
    if y.data.ndim != 3 or y.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) RGB measurement, got {y.shape}")
    if mt.data.shape != y.shape[:2]:
        raise ShapeError(f"template {mt.data.shape} does not match measurement "
                         f"spatial extents {y.shape[:2]}")
    h, w = y.shape[:2]
    if h % 4 or w % 4:
        raise ShapeError(f"mask net needs spatial extents divisible by 4, got {h}x{w}")

    # Template added to each RGB channel identically, channels-first layout.
    x = T.permute(y, (2, 0, 1))
    tmpl = T.repeat_axis(Tensor(mt.data), 3, axis=0)
    x = T.add(x, tmpl)

    e0 = _conv_block(x, weights, "enc0")
    e1 = _conv_block(T.downsample(e0, 2), weights, "enc1")
    mid = _conv_block(T.downsample(e1, 2), weights, "mid")
    d1 = _conv_block(T.concat([T.upsample(mid, 2), e1], axis=0), weights, "dec1")
    d0 = _conv_block(T.concat([T.upsample(d1, 2), e0], axis=0), weights, "dec0")
    head = _conv_block(d0, weights, "head", activate=False)
    return T.reshape(T.sigmoid(head), (h, w))


def freeze_mask(weights: dict[str, Tensor], calibration, mt: MaskTemplate) -> np.ndarray:
    """Static mask for deployment: mean of the net output over a calibration set."""
    calibration = list(calibration)
    if not calibration:
        raise ContractError("freeze_mask needs at least one calibration image")
    with T.no_tape():
        acc = np.zeros(mt.data.shape)
        for y_rgb in calibration:
            acc += mask_net_forward(y_rgb, mt, weights).data
    return acc / len(calibration)


def threshold_mask(mask: np.ndarray, level: float = 0.5) -> np.ndarray:
    """Binary export for hardware that cannot realize grayscale transmittance."""
    return (np.asarray(mask) >= level).astype(np.float64)


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be rank 2, got shape {mask.shape}")
    save_tensor(path, mask)


def load_mask(path) -> np.ndarray:
    mask = load_tensor(path)
    if mask.ndim != 2:
        raise ShapeError(f"{path}: mask file has rank {mask.ndim}, expected 2")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ContractError(f"{path}: mask values outside [0, 1]")
    return mask


def mask_io(mode: str, path, mask: np.ndarray | None = None) -> np.ndarray:
    """Dispatcher: ``mask_io("save", p, m)`` / ``mask_io("load", p)``."""
    if mode == "save":
        if mask is None:
            raise ContractError("mask_io save requires a mask")
        save_mask(path, mask)
        return mask
    if mode == "load":
        return load_mask(path)
    raise ContractError(f"unknown mask_io mode {mode!r}")
