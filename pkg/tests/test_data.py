import numpy as np
import pytest

from amdc import data as D
from amdc.errors import ContractError, FormatError, ShapeError
from amdc.optics import HsiCube
from amdc.serialization import save_sidecar, save_tensor, sidecar_path


def test_generation_deterministic_and_in_range():
    a = D.generate_scene(32, 32, 8, seed=5)
    b = D.generate_scene(32, 32, 8, seed=5)
    assert np.array_equal(a.data, b.data)
    assert a.data.min() >= 0.0 and a.data.max() <= 1.0
    assert not np.array_equal(a.data, D.generate_scene(32, 32, 8, seed=6).data)


def test_generated_spectra_are_smooth():
    # adjacent-channel correlation averaged over scenes; the 0.9 floor
    # matches the default spectral_smoothness
    corrs = []
    for seed in range(10):
        cube = D.generate_scene(32, 32, 8, seed=2000 + seed)
        for ch in range(7):
            x = cube.data[:, :, ch].ravel()
            y = cube.data[:, :, ch + 1].ravel()
            if x.std() > 0 and y.std() > 0:
                corrs.append(np.corrcoef(x, y)[0, 1])
    assert np.mean(corrs) > 0.9


def test_default_response_properties():
    wl = D.default_wavelengths(8)
    resp = D.default_response(wl)
    assert np.all(np.abs(resp.omega.sum(axis=0) - 1.0) < 1e-12)
    assert resp.omega.min() >= 0.0
    # R column peaks at the wavelength nearest 610 nm
    nearest = int(np.argmin(np.abs(wl - 610.0)))
    assert int(resp.omega[:, 0].argmax()) == nearest


def test_cube_round_trip(tmp_path):
    cube = D.generate_scene(8, 8, 4, seed=1)
    p = tmp_path / "c.tnsr"
    D.save_cube(p, cube)
    back = D.load_cube(p)
    assert np.array_equal(back.data, cube.data)
    assert np.array_equal(back.wavelengths_nm, cube.wavelengths_nm)


def test_cube_load_validation(tmp_path):
    cube = D.generate_scene(8, 8, 4, seed=1)
    p = tmp_path / "c.tnsr"
    D.save_cube(p, cube)
    # wavelength count mismatch
    save_sidecar(sidecar_path(p), {"wavelengths_nm": [450.0, 650.0]})
    with pytest.raises(ShapeError):
        D.load_cube(p)
    # out-of-range values
    p2 = tmp_path / "bad.tnsr"
    save_tensor(p2, np.full((4, 4, 2), 1.5))
    save_sidecar(sidecar_path(p2), {"wavelengths_nm": [450.0, 650.0]})
    with pytest.raises(ContractError):
        D.load_cube(p2)
    # missing sidecar
    p3 = tmp_path / "nosidecar.tnsr"
    save_tensor(p3, np.zeros((4, 4, 2)))
    with pytest.raises(FormatError):
        D.load_cube(p3)


def test_synth_scenes_manifest(tmp_path):
    man = D.synth_scenes(D.SynthSpec(n_scenes=5, height=16, width=16,
                                     channels=4, seed=3), tmp_path)
    assert len(man.scenes) == 5
    ids = [s.scene_id for s in man.scenes]
    assert len(set(ids)) == 5
    loaded = D.load_cube(man.scenes[0].path)
    assert loaded.shape == (16, 16, 4)
    again = D.synth_scenes(D.SynthSpec(n_scenes=5, height=16, width=16,
                                       channels=4, seed=3), tmp_path)
    assert np.array_equal(D.load_cube(again.scenes[0].path).data, loaded.data)


def test_split_counts_disjoint_exhaustive(tmp_path):
    man = D.synth_scenes(D.SynthSpec(n_scenes=10, height=8, width=8,
                                     channels=4, seed=0), tmp_path)
    out = D.split(man, (0.8, 0.1, 0.1), seed=1)
    assert len(out.by_split("train")) == 8
    assert len(out.by_split("val")) == 1
    assert len(out.by_split("test")) == 1
    tags = {s.scene_id: s.split for s in out.scenes}
    assert len(tags) == 10
    out2 = D.split(man, (0.8, 0.1, 0.1), seed=1)
    assert [s.split for s in out.scenes] == [s.split for s in out2.scenes]


def test_split_fraction_validation(tmp_path):
    man = D.synth_scenes(D.SynthSpec(n_scenes=4, height=8, width=8,
                                     channels=4, seed=0), tmp_path)
    with pytest.raises(ContractError):
        D.split(man, (0.5, 0.1), seed=0)


def test_manifest_round_trip(tmp_path):
    man = D.synth_scenes(D.SynthSpec(n_scenes=3, height=8, width=8,
                                     channels=4, seed=0), tmp_path)
    man = D.split(man, (0.7, 0.3), seed=2)
    man.save(tmp_path / "m.json")
    back = D.DatasetManifest.load(tmp_path / "m.json")
    assert [s.scene_id for s in back.scenes] == [s.scene_id for s in man.scenes]
    assert [s.split for s in back.scenes] == [s.split for s in man.scenes]


def test_import_adapter_documents_layout():
    with pytest.raises(NotImplementedError):
        D.import_adapter("/nowhere")
