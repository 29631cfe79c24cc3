import math

import numpy as np
import pytest

from vegcat.raster import (
    BinaryMask,
    FormatError,
    LabelMask,
    Raster,
    generate_blob_scene,
    load_mask,
    load_raster,
    read_vcat,
    sample_ellipses,
    save_mask,
    save_raster,
    write_vcat,
)


def test_load_p5_normalizes_by_255(tmp_path):
    path = tmp_path / "tiny.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    r = load_raster(str(path))
    assert (r.width, r.height, r.channels) == (2, 2, 1)
    expected = (np.array([[0, 255], [128, 64]], dtype=np.float32) / np.float32(255.0)).astype(np.float32)
    np.testing.assert_array_equal(r.data[0], expected)


def test_load_p6_three_channels(tmp_path):
    path = tmp_path / "tiny.ppm"
    path.write_bytes(b"P6\n3 1\n255\n" + bytes(range(9)))
    r = load_raster(str(path))
    assert r.channels == 3
    assert (r.width, r.height) == (3, 1)


def test_load_pnm_with_comment_header(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# a comment\n2 1\n255\n" + bytes([10, 20]))
    r = load_raster(str(path))
    assert r.width == 2


def test_truncated_p5_body_raises(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes([1, 2, 3]))
    with pytest.raises(FormatError):
        load_raster(str(path))


def test_unknown_magic_raises(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XY notanimage")
    with pytest.raises(FormatError):
        load_raster(str(path))


def test_vcat_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    r = Raster.from_array(rng.random((1, 8, 8), dtype=np.float32))
    path = tmp_path / "r.vcat"
    save_raster(r, str(path))
    r2 = load_raster(str(path))
    assert r2.channels == 1
    np.testing.assert_array_equal(r.data, r2.data)


def test_vcat_any_channel_count(tmp_path):
    rng = np.random.default_rng(1)
    r = Raster.from_array(rng.random((5, 3, 4), dtype=np.float32))
    path = tmp_path / "r5.vcat"
    save_raster(r, str(path))
    np.testing.assert_array_equal(load_raster(str(path)).data, r.data)


def test_vcat_layout_bytes(tmp_path):
    # magic, version=1, ndim, dims, float32 LE payload
    arr = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    path = tmp_path / "x.vcat"
    write_vcat(str(path), arr)
    raw = path.read_bytes()
    assert raw[:4] == b"VCAT"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (3).to_bytes(4, "little")
    dims = [int.from_bytes(raw[12 + 4 * i : 16 + 4 * i], "little") for i in range(3)]
    assert dims == [1, 2, 3]
    np.testing.assert_array_equal(np.frombuffer(raw[24:], dtype="<f4"), arr.ravel())
    np.testing.assert_array_equal(read_vcat(str(path)), arr)


def test_save_5_channel_as_pgm_raises(tmp_path):
    r = Raster.from_array(np.zeros((5, 4, 4), dtype=np.float32))
    with pytest.raises(FormatError):
        save_raster(r, str(tmp_path / "x.pgm"))


def test_ppm_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(2)
    r = Raster.from_array(rng.random((3, 6, 7), dtype=np.float32))
    path = tmp_path / "q.ppm"
    save_raster(r, str(path))
    r2 = load_raster(str(path))
    assert np.abs(r2.data - r.data).max() <= 1 / 255 + 1e-7


def test_mask_round_trip_p5(tmp_path):
    bits = (np.random.default_rng(3).random((5, 9)) > 0.5).astype(np.uint8)
    m = BinaryMask.from_array(bits)
    path = tmp_path / "m.pgm"
    save_mask(m, str(path))
    m2 = load_mask(str(path))
    np.testing.assert_array_equal(m.bits, m2.bits)


def test_raster_invariants():
    with pytest.raises(ValueError):
        Raster(width=2, height=2, channels=1, data=np.zeros((1, 3, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        Raster.from_array(np.array([[np.nan]], dtype=np.float32))
    with pytest.raises(ValueError):
        Raster.from_array(np.zeros((2, 2)), pixel_size_m=-1.0)


def test_label_mask_invariants():
    with pytest.raises(ValueError):
        LabelMask.from_array(np.array([[0, 2]]), n_classes=2)
    with pytest.raises(ValueError):
        BinaryMask(width=1, height=1, bits=np.array([[7]], dtype=np.uint8))


def test_blob_scene_deterministic():
    a_img, a_lab = generate_blob_scene(7, 48, 40, 3)
    b_img, b_lab = generate_blob_scene(7, 48, 40, 3)
    np.testing.assert_array_equal(a_img.data, b_img.data)
    np.testing.assert_array_equal(a_lab.labels, b_lab.labels)


def test_blob_scene_no_blobs_all_zero_labels():
    _, lab = generate_blob_scene(11, 32, 32, 0)
    assert lab.labels.sum() == 0


def test_blob_scene_matches_point_in_ellipse_oracle():
    # Re-rasterize the sampled ellipses with a scalar point-in-ellipse test.
    seed, w, h, n = 7, 96, 96, 5
    _, lab = generate_blob_scene(seed, w, h, n)
    ellipses = sample_ellipses(seed, w, h, n)
    oracle = np.zeros((h, w), dtype=np.int32)
    for y in range(h):
        for x in range(w):
            for e in ellipses:
                dx = float(x) - e.cx
                dy = float(y) - e.cy
                c = math.cos(e.theta)
                s = math.sin(e.theta)
                u = dx * c + dy * s
                v = dy * c - dx * s
                if (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0:
                    oracle[y, x] = 1
                    break
    np.testing.assert_array_equal(lab.labels, oracle)
    assert oracle.sum() > 0


def test_blob_scene_texture_separation():
    img, lab = generate_blob_scene(5, 64, 64, 4)
    fg = lab.labels.astype(bool)
    assert fg.any() and (~fg).any()
    green = img.data[1]
    assert green[fg].mean() > green[~fg].mean() + 0.15
