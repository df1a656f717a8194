"""Dual-camera coded-aperture snapshot spectral imaging forward model.

A scene cube X (H, W, C) is split by a beamsplitter. One arm is projected
onto an RGB detector through a spectral response; the other is modulated by
a coded mask, sheared by a dispersive element (an integer pixel shift per
channel along the width axis) and summed over channels onto a 2-D detector:

    y_r(x, y, ch) = 1/2 * sum_l omega(l, ch) * X(x, y, l)         (+ noise)
    y_c(x, y)     = sum_l  [1/2 * M .* X](x, y - d*l, l)          (+ noise)

Both maps are linear in X; the CASSI arm carries an exact adjoint and a
dense-matrix oracle used by the operator tests. Differentiable versions of
the CASSI arm (``*_t`` functions and :func:`reproject`) run on
:class:`~amdc.tensor.Tensor` values so the reconstruction loss can
backpropagate through the measurement formation, including through a
learnable mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

_DENSE_ORACLE_MAX_VOXELS = 100_000

# Both beamsplitter halves keep their 1/2 explicitly so energy bookkeeping
# is testable; the CASSI arm applies its single 1/2 inside the modulation.
_SPLIT = 0.5


# ======================================================================
# Domain types
# ======================================================================

@dataclass(frozen=True)
class DispersionSpec:
    """Integer per-channel shift in pixels along the width axis."""

    step_px: int = 1

    def __post_init__(self):
        if self.step_px < 0:
            raise ContractError(f"dispersion step must be >= 0, got {self.step_px}")

    def wide_width(self, width: int, channels: int) -> int:
        return width + self.step_px * (channels - 1)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive i.i.d. Gaussian detector noise; sigma = 0 means noiseless."""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError(f"noise sigma must be >= 0, got {self.sigma}")

    def sample(self, shape) -> np.ndarray | None:
        if self.sigma == 0.0:
            return None
        rng = np.random.default_rng(self.seed)
        return rng.normal(0.0, self.sigma, shape)


@dataclass
class HsiCube:
    """Nonnegative radiance cube (H, W, C) with its wavelength grid in nm."""

    data: np.ndarray
    wavelengths_nm: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"cube must be rank 3 (H, W, C), got {self.data.shape}")
        if self.wavelengths_nm.ndim != 1 or len(self.wavelengths_nm) != self.data.shape[2]:
            raise ShapeError(
                f"wavelength list length {self.wavelengths_nm.shape} does not match "
                f"{self.data.shape[2]} channels")
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise ContractError("wavelengths must be strictly increasing")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ContractError(
                f"cube values must lie in [0, 1], got "
                f"[{self.data.min():.4g}, {self.data.max():.4g}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SpectralResponse:
    """Column-normalized C x 3 response matrix (columns R, G, B)."""

    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.ndim != 2 or self.omega.shape[1] != 3:
            raise ShapeError(f"response must be (C, 3), got {self.omega.shape}")
        if self.omega.min() < 0:
            raise ContractError("response entries must be nonnegative")
        sums = self.omega.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ContractError(f"response columns must sum to 1, got {sums}")


@dataclass
class MeasurementPair:
    """One CASSI measurement (H, W + d*(C-1)) plus one RGB measurement (H, W, 3)."""

    y_c: np.ndarray
    y_r: np.ndarray

    def __post_init__(self):
        self.y_c = np.asarray(self.y_c, dtype=np.float64)
        self.y_r = np.asarray(self.y_r, dtype=np.float64)
        if self.y_c.ndim != 2:
            raise ShapeError(f"y_c must be rank 2, got {self.y_c.shape}")
        if self.y_r.ndim != 3 or self.y_r.shape[2] != 3:
            raise ShapeError(f"y_r must be (H, W, 3), got {self.y_r.shape}")
        if self.y_c.shape[0] != self.y_r.shape[0]:
            raise ShapeError("y_c and y_r height disagree")


@dataclass
class SensingOperator:
    """Static sensing pair: coded mask + dispersion (CASSI) and response (RGB)."""

    mask: np.ndarray
    dispersion: DispersionSpec = field(default_factory=DispersionSpec)
    response: SpectralResponse | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.ndim != 2:
            raise ShapeError(f"mask must be rank 2, got {self.mask.shape}")


# ======================================================================
# Differentiable core (Tensor in, Tensor out; always noiseless)
# ======================================================================

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def modulate_t(x: Tensor, mask: Tensor) -> Tensor:
    """1/2 * M(x, y) * X(x, y, l) with the mask replicated across channels."""
    if x.data.ndim != 3:
        raise ShapeError(f"modulate expects a rank-3 cube, got {x.shape}")
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match cube spatial "
                         f"extents {x.shape[:2]}")
    m3 = T.repeat_axis(mask, x.shape[2], axis=2)
    return T.scale(T.mul(m3, x), _SPLIT)


def disperse_t(x: Tensor, step: int) -> Tensor:
    """Place channel c at width offset step*c in a zero-initialized widened buffer."""
    if x.data.ndim != 3:
        raise ShapeError(f"disperse expects a rank-3 cube, got {x.shape}")
    h, w, c = x.shape
    wide = w + step * (c - 1)
    out = np.zeros((h, wide, c))
    for ch in range(c):
        out[:, step * ch:step * ch + w, ch] = x.data[:, :, ch]

    def vjp(g):
        gx = np.empty((h, w, c))
        for ch in range(c):
            gx[:, :, ch] = g[:, step * ch:step * ch + w, ch]
        return gx

    return T.custom_op("disperse", out, [(x, vjp)])


def integrate_t(xs: Tensor) -> Tensor:
    """Sum the (shifted) cube over its channel axis onto the 2-D detector."""
    return T.sum_axis(xs, axis=2)


def cassi_forward_t(x: Tensor, mask: Tensor, step: int) -> Tensor:
    """Noiseless CASSI measurement of a cube; differentiable in x and mask."""
    return integrate_t(disperse_t(modulate_t(x, mask), step))


def shift_back_t(y: Tensor, step: int, channels: int) -> Tensor:
    """Crop channel c from width offset step*c of a measurement-wide image."""
    if y.data.ndim != 2:
        raise ShapeError(f"shift_back expects a rank-2 measurement, got {y.shape}")
    h, wide = y.shape
    w = wide - step * (channels - 1)
    if w < 1:
        raise ShapeError(f"measurement width {wide} too small for {channels} "
                         f"channels at step {step}")
    out = np.empty((h, w, channels))
    for ch in range(channels):
        out[:, :, ch] = y.data[:, step * ch:step * ch + w]

    def vjp(g):
        gy = np.zeros((h, wide))
        for ch in range(channels):
            gy[:, step * ch:step * ch + w] += g[:, :, ch]
        return gy

    return T.custom_op("shift_back", out, [(y, vjp)])


def reproject(x_hat, op: SensingOperator) -> Tensor:
    """Map a reconstruction back to CASSI measurement space (noiseless).

    Accepts a Tensor (stays in the differentiation graph) or a plain cube.
    """
    xt = _as_tensor(x_hat.data if isinstance(x_hat, HsiCube) else x_hat)
    mt = _as_tensor(op.mask)
    return cassi_forward_t(xt, mt, op.dispersion.step_px)


# ======================================================================
# Simulation operators (ndarray in, ndarray out; optional noise)
# ======================================================================

def rgb_project(x: HsiCube, r: SpectralResponse, n: NoiseSpec = NoiseSpec()) -> np.ndarray:
    """RGB arm: half the energy through the spectral response, plus noise."""
    h, w, c = x.shape
    if r.omega.shape[0] != c:
        raise ShapeError(f"response rows {r.omega.shape[0]} != cube channels {c}")
    y = _SPLIT * (x.data.reshape(h * w, c) @ r.omega).reshape(h, w, 3)
    noise = n.sample(y.shape)
    return y if noise is None else y + noise


def mask_modulate(x: HsiCube, mask: np.ndarray) -> HsiCube:
    """Coded-aperture arm: 1/2 * M * X, channel by channel."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match cube spatial "
                         f"extents {x.shape[:2]}")
    return HsiCube(_SPLIT * mask[:, :, None] * x.data, x.wavelengths_nm)


def disperse(xp: HsiCube | np.ndarray, d: DispersionSpec) -> np.ndarray:
    """Shear the modulated cube: channel c moves d*c pixels along width."""
    data = xp.data if isinstance(xp, HsiCube) else np.asarray(xp, dtype=np.float64)
    return disperse_t(Tensor(data), d.step_px).data


def integrate_measure(xs: np.ndarray, n: NoiseSpec = NoiseSpec()) -> np.ndarray:
    """Collapse the sheared cube onto the detector; add detector noise."""
    y = np.asarray(xs, dtype=np.float64).sum(axis=2)
    noise = n.sample(y.shape)
    return y if noise is None else y + noise


def cassi_forward(x: HsiCube, op: SensingOperator, n: NoiseSpec = NoiseSpec()) -> np.ndarray:
    """Full CASSI arm: modulate, disperse, integrate (exactly that composition)."""
    return integrate_measure(disperse(mask_modulate(x, op.mask), op.dispersion), n)


def cassi_adjoint(y: np.ndarray, op: SensingOperator, channels: int) -> np.ndarray:
    """Exact adjoint of the noiseless CASSI arm.

    Un-shifts each channel window out of the wide measurement and multiplies
    by 1/2 * M; satisfies <F x, y> = <x, F^T y> to float64 accuracy.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError(f"adjoint expects a rank-2 measurement, got {y.shape}")
    h, w = op.mask.shape
    step = op.dispersion.step_px
    if y.shape != (h, w + step * (channels - 1)):
        raise ShapeError(f"measurement {y.shape} inconsistent with mask {op.mask.shape}, "
                         f"step {step}, {channels} channels")
    out = np.empty((h, w, channels))
    for ch in range(channels):
        out[:, :, ch] = y[:, step * ch:step * ch + w]
    return _SPLIT * op.mask[:, :, None] * out


def shift_back_init(y: np.ndarray, d: DispersionSpec, channels: int) -> np.ndarray:
    """Zeroth reconstruction guess: per-channel crop, no mask division."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ShapeError(f"shift_back_init expects rank 2, got {y.shape}")
    w = y.shape[1] - d.step_px * (channels - 1)
    if w < 1:
        raise ShapeError(f"measurement width {y.shape[1]} too small for {channels} "
                         f"channels at step {d.step_px}")
    return shift_back_t(Tensor(y), d.step_px, channels).data


def sensing_matrix_dense(op: SensingOperator, cube_shape) -> np.ndarray:
    """Explicit CASSI sensing matrix; oracle only, guarded to small cubes.

    Row-major vec layout: cube index (i, j, c) maps to column (i*W + j)*C + c;
    output index (i, u) maps to row i*W_ext + u. Each column holds a single
    nonzero 1/2*M(i, j).
    """
    h, w, c = cube_shape
    if h * w * c > _DENSE_ORACLE_MAX_VOXELS:
        raise ContractError(f"dense sensing matrix limited to {_DENSE_ORACLE_MAX_VOXELS} "
                            f"voxels, requested {h * w * c}")
    if op.mask.shape != (h, w):
        raise ShapeError(f"mask {op.mask.shape} does not match cube {cube_shape}")
    step = op.dispersion.step_px
    wide = w + step * (c - 1)
    mat = np.zeros((h * wide, h * w * c))
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                row = i * wide + (j + step * ch)
                col = (i * w + j) * c + ch
                mat[row, col] = _SPLIT * op.mask[i, j]
    return mat


def simulate_pair(x: HsiCube, op: SensingOperator,
                  n_cassi: NoiseSpec = NoiseSpec(),
                  n_rgb: NoiseSpec = NoiseSpec()) -> MeasurementPair:
    """Simulate both detectors for one scene."""
    if op.response is None:
        raise ContractError("sensing operator has no spectral response for the RGB arm")
    return MeasurementPair(
        y_c=cassi_forward(x, op, n_cassi),
        y_r=rgb_project(x, op.response, n_rgb),
    )
