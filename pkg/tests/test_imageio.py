"""PNG codec round-trips, Pillow cross-compat, deterministic bytes."""

import numpy as np
import pytest

from tsic.imageio import ImageDecodeError, load_image, read_png, write_png


def test_rgb_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, (3, 40, 56), dtype=np.uint8)
    p = write_png(tmp_path / "x.png", arr)
    np.testing.assert_array_equal(read_png(p), arr)


def test_grayscale_roundtrip_replicates_channels(tmp_path):
    rng = np.random.default_rng(1)
    g = rng.integers(0, 256, (17, 23), dtype=np.uint8)
    p = write_png(tmp_path / "g.png", g)
    out = read_png(p)
    assert out.shape == (3, 17, 23)
    for c in range(3):
        np.testing.assert_array_equal(out[c], g)


def test_write_is_byte_deterministic(tmp_path):
    arr = np.random.default_rng(2).integers(0, 256, (3, 32, 32), dtype=np.uint8)
    a = write_png(tmp_path / "a.png", arr).read_bytes()
    b = write_png(tmp_path / "b.png", arr).read_bytes()
    assert a == b


def test_reads_pillow_written_png(tmp_path):
    PIL = pytest.importorskip("PIL.Image")
    rng = np.random.default_rng(3)
    arr = rng.integers(0, 256, (48, 31, 3), dtype=np.uint8)
    p = tmp_path / "pil.png"
    PIL.fromarray(arr).save(p)  # Pillow uses varied row filters
    out = read_png(p)
    np.testing.assert_array_equal(out, arr.transpose(2, 0, 1))


def test_jpeg_path_via_pillow(tmp_path):
    PIL = pytest.importorskip("PIL.Image")
    arr = np.full((20, 20, 3), 128, dtype=np.uint8)
    p = tmp_path / "x.jpg"
    PIL.fromarray(arr).save(p, quality=95)
    out = load_image(p)
    assert out.shape == (3, 20, 20)
    assert abs(int(out.mean()) - 128) <= 2


def test_rejects_non_png():
    with pytest.raises(ImageDecodeError, match="not a PNG"):
        read_png(__file__)


def test_rejects_unknown_extension(tmp_path):
    p = tmp_path / "x.bmp"
    p.write_bytes(b"")
    with pytest.raises(ImageDecodeError, match="unsupported image format"):
        load_image(p)


def test_rejects_non_uint8():
    with pytest.raises(ValueError, match="uint8"):
        write_png("/tmp/never.png", np.zeros((3, 8, 8), dtype=np.float32))
