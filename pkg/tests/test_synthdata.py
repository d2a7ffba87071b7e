"""Synthetic scenes, domain shift, patches and the binary file formats."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bida.errors import ConfigError, ContractError, FormatError
from bida.formats import read_checkpoint, read_cube, write_checkpoint, write_cube
from bida.synthdata import (
    MIN_CLASS_PIXELS,
    DomainShiftSpec,
    Scene,
    apply_domain_shift,
    extract_patches,
    generate_scene,
    label_path,
    make_domain_pair,
    make_signatures,
    normalize_bands,
    read_scene,
    write_scene,
)


@pytest.fixture(scope="module")
def pair():
    return make_domain_pair(classes=5, size=128, bands=32, seed=7, targets=2)


def test_default_scene_class_counts_and_balance(pair):
    source, targets = pair
    for scene in [source, *targets]:
        counts = scene.class_counts(5)
        assert counts.min() >= MIN_CLASS_PIXELS
        assert counts.min() / counts.max() >= 0.2
        assert scene.cube.shape == (128, 128, 32)
        assert np.all(np.isfinite(scene.cube)) and scene.cube.min() >= 0 and scene.cube.max() <= 1
        assert scene.labels.min() >= -1 and scene.labels.max() < 5


def test_generation_is_deterministic():
    a = generate_scene(3, 40, 40, 16, seed=3)
    b = generate_scene(3, 40, 40, 16, seed=3)
    assert a.cube.tobytes() == b.cube.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_signatures_distinct():
    sigs = make_signatures(5, 32, 7)
    corr = np.corrcoef(np.stack([s.mean for s in sigs]))
    assert corr[np.triu_indices(5, 1)].max() < 0.995


def test_impossible_layout_is_config_error():
    with pytest.raises(ConfigError):
        generate_scene(5, 20, 20, 8, seed=0)
    with pytest.raises(ConfigError):
        generate_scene(1, 40, 40, 8, seed=0)
    with pytest.raises(ConfigError):
        generate_scene(2, 12, 40, 8, seed=0)


def test_identity_shift_is_noop_and_gain_scales():
    scene = generate_scene(2, 30, 30, 8, seed=1)
    same = apply_domain_shift(scene, DomainShiftSpec.identity(8))
    np.testing.assert_array_equal(same.cube, scene.cube)
    dim = Scene(scene.cube * 0.5, scene.labels)
    up = apply_domain_shift(dim, DomainShiftSpec(np.full(8, 1.1), np.zeros(8)))
    np.testing.assert_allclose(up.cube.mean(axis=(0, 1)), 1.1 * dim.cube.mean(axis=(0, 1)), rtol=1e-5)
    np.testing.assert_array_equal(up.labels, scene.labels)
    with pytest.raises(ConfigError):
        DomainShiftSpec(np.zeros(8), np.zeros(8))


def test_standard_preset_ranges():
    s = DomainShiftSpec.standard(32, 5)
    assert np.all((s.gain >= 0.85) & (s.gain <= 1.15))
    assert np.all(np.abs(s.offset) <= 0.05)
    assert s.warp_amplitude == 1.0 and s.noise_sigma == 0.02


def test_patches_interior_corner_and_count(pair):
    source, _ = pair
    interior = extract_patches(source, [[40, 50]])
    np.testing.assert_array_equal(interior.data[0], source.cube[34:47, 44:57])
    corner = extract_patches(source, [[0, 0]])
    assert corner.data.shape == (1, 13, 13, 32)
    np.testing.assert_array_equal(corner.data[0, 6, 6], source.cube[0, 0])
    np.testing.assert_array_equal(corner.data[0, 5, 6], source.cube[1, 0])  # mirrored
    everything = extract_patches(source)
    assert len(everything) == int((source.labels >= 0).sum())
    with pytest.raises(ConfigError):
        extract_patches(source, [[5, 5]], patch=12)


@settings(max_examples=20, deadline=None)
@given(st.integers(7, 30), st.integers(7, 30))
def test_patch_extraction_translation_consistent(r, c):
    scene = generate_scene(2, 40, 40, 4, seed=2)
    shifted = Scene(scene.cube[1:], scene.labels[1:])
    np.testing.assert_array_equal(extract_patches(scene, [[r + 1, c]]).data, extract_patches(shifted, [[r, c]]).data)


def test_normalize_bands_range_and_constant_band():
    cube = np.random.default_rng(0).uniform(0.2, 0.6, size=(10, 10, 3))
    cube[..., 1] = 0.4
    out = normalize_bands(Scene(cube, np.zeros((10, 10))))
    assert np.allclose(out.cube[..., 0].min(), 0) and np.allclose(out.cube[..., 0].max(), 1)
    assert np.all(out.cube[..., 1] == 0)


def test_scene_round_trip_byte_identical(tmp_path, pair):
    source, _ = pair
    path = tmp_path / "s.hsi"
    write_scene(source, path)
    back = read_scene(path)
    assert back.cube.tobytes() == source.cube.tobytes() and back.labels.tobytes() == source.labels.tobytes()
    second = tmp_path / "t.hsi"
    write_scene(back, second)
    assert path.read_bytes() == second.read_bytes()
    assert label_path(path).read_bytes() == label_path(second).read_bytes()


def test_cube_layout_is_band_innermost(tmp_path):
    cube = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    write_cube(tmp_path / "c.hsi", cube)
    raw = (tmp_path / "c.hsi").read_bytes()
    assert raw[:4] == b"HSI1" and struct.unpack("<3I", raw[4:16]) == (2, 3, 4)
    assert struct.unpack("<2f", raw[16:24]) == (0.0, 1.0)


def test_format_errors_carry_path_and_offset(tmp_path):
    bad = tmp_path / "bad.hsi"
    bad.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FormatError, match="byte 0") as info:
        read_cube(bad)
    assert info.value.offset == 0 and str(bad) in str(info.value)
    empty = tmp_path / "empty.hsi"
    empty.write_bytes(b"")
    with pytest.raises(FormatError):
        read_cube(empty)
    trunc = tmp_path / "trunc.hsi"
    write_cube(trunc, np.zeros((2, 2, 2), dtype=np.float32))
    trunc.write_bytes(trunc.read_bytes()[:-3])
    with pytest.raises(FormatError) as info:
        read_cube(trunc)
    assert info.value.offset is not None
    huge = tmp_path / "huge.hsi"
    huge.write_bytes(b"HSI1" + struct.pack("<3I", 1 << 20, 1 << 20, 1 << 10))
    with pytest.raises(FormatError, match="overflow"):
        read_cube(huge)
    with pytest.raises(FormatError):
        read_cube(tmp_path / "missing.hsi")


def test_label_mismatch_is_contract_error(tmp_path):
    scene = generate_scene(2, 30, 30, 4, seed=0)
    path = tmp_path / "s.hsi"
    write_scene(scene, path)
    write_cube(path, np.zeros((31, 30, 4), dtype=np.float32))
    with pytest.raises(ContractError):
        read_scene(path)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5), "ü": np.zeros(0)}
    path = tmp_path / "c.bida"
    write_checkpoint(path, arrays)
    back = read_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        read_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_checkpoint(path)
    path.write_bytes(b"BIDA" + struct.pack("<2I", 9, 0))
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(path)
