"""Dataset handling: cube files, synthetic scenes, response curves, splits.

Real hyperspectral corpora are imported externally (see ``import_adapter``);
day-to-day work runs on generated desk-scale scenes: sums of random Gaussian
spatial blobs, each carrying a smooth random spectral curve, normalized to
[0, 1]. Everything here is deterministic per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .optics import HsiCube, SpectralResponse
from .serialization import (load_sidecar, load_tensor, save_sidecar,
                            save_tensor, sidecar_path)

# Gaussian response curves standing in for an RGB camera: center nm per
# column (R, G, B) and a shared spectral stddev.
_RESPONSE_CENTERS_NM = (610.0, 540.0, 470.0)
_RESPONSE_SIGMA_NM = 40.0

DEFAULT_WAVELENGTH_RANGE_NM = (450.0, 650.0)


def default_wavelengths(channels: int) -> np.ndarray:
    lo, hi = DEFAULT_WAVELENGTH_RANGE_NM
    return np.linspace(lo, hi, channels)


def default_response(wavelengths_nm) -> SpectralResponse:
    """Three Gaussian response curves sampled at the cube's wavelengths."""
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    if wl.ndim != 1 or len(wl) < 2:
        raise ShapeError("need at least two wavelengths for a response")
    omega = np.stack(
        [np.exp(-0.5 * ((wl - c) / _RESPONSE_SIGMA_NM) ** 2)
         for c in _RESPONSE_CENTERS_NM], axis=1)
    return SpectralResponse(omega / omega.sum(axis=0, keepdims=True))


# ======================================================================
# Cube files: TNSR tensor + JSON sidecar
# ======================================================================

def save_cube(path, cube: HsiCube, extra: dict | None = None) -> None:
    save_tensor(path, cube.data)
    meta = {"wavelengths_nm": [float(v) for v in cube.wavelengths_nm]}
    if extra:
        meta.update(extra)
    save_sidecar(sidecar_path(path), meta)


def load_cube(path) -> HsiCube:
    data = load_tensor(path)
    if data.ndim != 3:
        raise ShapeError(f"{path}: cube file has rank {data.ndim}, expected 3")
    meta = load_sidecar(sidecar_path(path))
    wl = meta.get("wavelengths_nm")
    if wl is None:
        raise FormatError(f"{path}: sidecar lacks wavelengths_nm")
    if len(wl) != data.shape[2]:
        raise ShapeError(f"{path}: sidecar lists {len(wl)} wavelengths for "
                         f"{data.shape[2]} channels")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ContractError(f"{path}: cube values outside [0, 1]")
    return HsiCube(data, np.asarray(wl))


def cube_io(mode: str, path, cube: HsiCube | None = None) -> HsiCube | None:
    """Convenience dispatcher: ``cube_io("save", p, cube)`` / ``cube_io("load", p)``."""
    if mode == "save":
        if cube is None:
            raise ContractError("cube_io save requires a cube")
        save_cube(path, cube)
        return cube
    if mode == "load":
        return load_cube(path)
    raise ContractError(f"unknown cube_io mode {mode!r}")


# ======================================================================
# Synthetic scene generation
# ======================================================================

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic desk-scale dataset."""

    n_scenes: int = 16
    height: int = 32
    width: int = 32
    channels: int = 8
    seed: int = 0
    blob_count: tuple[int, int] = (3, 6)
    # Harmonic amplitude decay of the per-blob spectral curves; closer to 0
    # means smoother spectra (higher adjacent-channel correlation).
    spectral_smoothness: float = 0.35

    def __post_init__(self):
        if self.channels < 2:
            raise ContractError("need at least 2 spectral channels")
        if self.n_scenes < 1:
            raise ContractError("need at least one scene")
        if not 0.0 < self.spectral_smoothness < 1.0:
            raise ContractError("spectral_smoothness must be in (0, 1)")


def _blob_spectrum(rng: np.random.Generator, channels: int, decay: float) -> np.ndarray:
    """Smooth nonnegative curve: low-order cosine mixture with decaying amps."""
    t = np.linspace(0.0, 1.0, channels)
    curve = np.full(channels, 1.0)
    for j in range(1, 4):
        amp = rng.normal(0.0, decay ** j)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        curve = curve + amp * np.cos(np.pi * j * t + phase)
    curve = np.abs(curve)
    return curve / max(curve.max(), 1e-9)


def generate_scene(height: int, width: int, channels: int, seed: int,
                   blob_count: tuple[int, int] = (3, 6),
                   spectral_smoothness: float = 0.35) -> HsiCube:
    """One synthetic scene: Gaussian blobs x smooth spectra, scaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    cube = np.zeros((height, width, channels))
    n_blobs = int(rng.integers(blob_count[0], blob_count[1] + 1))
    for _ in range(n_blobs):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        sy = rng.uniform(height / 12, height / 4)
        sx = rng.uniform(width / 12, width / 4)
        amp = rng.uniform(0.4, 1.0)
        spatial = amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        spectrum = _blob_spectrum(rng, channels, spectral_smoothness)
        cube += spatial[:, :, None] * spectrum[None, None, :]
    peak = cube.max()
    if peak > 0:
        cube /= peak
    return HsiCube(cube, default_wavelengths(channels))


# ======================================================================
# Manifests and splits
# ======================================================================

@dataclass
class SceneEntry:
    scene_id: str
    path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    scenes: list[SceneEntry]
    wavelengths_nm: list[float]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ContractError("scene ids must be unique")

    def by_split(self, tag: str) -> list[SceneEntry]:
        return [s for s in self.scenes if s.split == tag]

    def save(self, path) -> None:
        doc = {
            "seed": self.seed,
            "wavelengths_nm": self.wavelengths_nm,
            "meta": self.meta,
            "scenes": [{"id": s.scene_id, "path": s.path, "split": s.split}
                       for s in self.scenes],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"cannot read manifest {path}: {e}") from e
        scenes = [SceneEntry(s["id"], s["path"], s.get("split", "train"))
                  for s in doc["scenes"]]
        return cls(scenes, doc["wavelengths_nm"], doc.get("seed", 0),
                   doc.get("meta", {}))


def synth_scenes(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Generate a dataset on disk and return its manifest (also written)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    scene_seeds = rng.integers(0, 2**63 - 1, size=spec.n_scenes)
    scenes = []
    for i, s in enumerate(scene_seeds):
        cube = generate_scene(spec.height, spec.width, spec.channels, int(s),
                              spec.blob_count, spec.spectral_smoothness)
        sid = f"scene{i:04d}"
        path = out / f"{sid}.tnsr"
        save_cube(path, cube, extra={"scene_seed": int(s)})
        scenes.append(SceneEntry(sid, str(path)))
    manifest = DatasetManifest(
        scenes, [float(v) for v in default_wavelengths(spec.channels)],
        seed=spec.seed,
        meta={"height": spec.height, "width": spec.width,
              "channels": spec.channels, "n_scenes": spec.n_scenes})
    manifest.save(out / "manifest.json")
    return manifest


def split(manifest: DatasetManifest, fractions, seed: int) -> DatasetManifest:
    """Deterministic shuffled split; tags are train/val/test in fraction order."""
    fractions = [float(f) for f in fractions]
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"split fractions must sum to 1, got {sum(fractions)}")
    tags = ["train", "val", "test"][: len(fractions)]
    n = len(manifest.scenes)
    order = np.random.default_rng(seed).permutation(n)
    # Cumulative rounding keeps the split exhaustive and disjoint.
    bounds = [0] + [int(round(sum(fractions[: i + 1]) * n))
                    for i in range(len(fractions))]
    bounds[-1] = n
    scenes = [SceneEntry(s.scene_id, s.path, s.split) for s in manifest.scenes]
    for k, tag in enumerate(tags):
        for idx in order[bounds[k]:bounds[k + 1]]:
            scenes[idx].split = tag
    return DatasetManifest(scenes, manifest.wavelengths_nm, manifest.seed,
                           dict(manifest.meta))


def load_split(manifest: DatasetManifest, tag: str) -> list[HsiCube]:
    return [load_cube(s.path) for s in manifest.by_split(tag)]


def import_adapter(root) -> None:
    """Adapter stub for external corpora (CAVE / KAIST / ARAD-style layouts).

    Expected directory layout after external conversion:

        <root>/manifest.json      one entry per scene
        <root>/<scene_id>.tnsr    rank-3 cube in the TNSR format
        <root>/<scene_id>.tnsr.json   sidecar with wavelengths_nm

    Convert source files (.mat / .hdf5) to this layout with your own
    tooling, then point the training CLI at the manifest.
    """
    raise NotImplementedError(
        "external corpus conversion is out of scope; see docstring for the "
        "expected on-disk layout")
