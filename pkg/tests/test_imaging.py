import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image

from catintell import imaging
from catintell.errors import DecodeError, IoError, NotFoundError, RangeError, ShapeError


def _bilinear_oracle(img, out_h, out_w):
    """Direct per-pixel bilinear evaluation at half-pixel sample positions."""
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (
                img[y0, x0] * (1 - dy) * (1 - dx)
                + img[y0, x1] * (1 - dy) * dx
                + img[y1, x0] * dy * (1 - dx)
                + img[y1, x1] * dy * dx
            )
    return out


def test_load_black_png(tmp_path):
    p = tmp_path / "black.png"
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(p)
    img = imaging.load_image(p)
    assert img.shape == (2, 2, 3) and img.dtype == np.float32
    assert not img.any()


def test_load_white_pixel(tmp_path):
    p = tmp_path / "white.png"
    Image.fromarray(np.full((1, 1, 3), 255, np.uint8)).save(p)
    np.testing.assert_array_equal(imaging.load_image(p), [[[1.0, 1.0, 1.0]]])


def test_load_grayscale_becomes_rgb(tmp_path):
    p = tmp_path / "gray.png"
    Image.fromarray(np.full((3, 4), 128, np.uint8), mode="L").save(p)
    img = imaging.load_image(p)
    assert img.shape == (3, 4, 3)


def test_truncated_jpeg_raises_decode_error(tmp_path):
    p = tmp_path / "full.jpg"
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (64, 64, 3), dtype=np.uint8)).save(p)
    bad = tmp_path / "cut.jpg"
    bad.write_bytes(p.read_bytes()[:200])
    with pytest.raises(DecodeError):
        imaging.load_image(bad)


def test_missing_file_raises_not_found(tmp_path):
    with pytest.raises(NotFoundError):
        imaging.load_image(tmp_path / "nope.png")


def test_save_zeros_round_trip(tmp_path):
    p = tmp_path / "z.png"
    imaging.save_image(np.zeros((4, 4, 3), np.float32), p)
    assert not imaging.load_image(p).any()


def test_save_half_within_quantization(tmp_path):
    p = tmp_path / "h.png"
    imaging.save_image(np.full((4, 4, 3), 0.5, np.float32), p)
    assert np.abs(imaging.load_image(p) - 0.5).max() <= 1 / 510 + 1e-7


def test_save_into_missing_dir_raises(tmp_path):
    with pytest.raises(IoError):
        imaging.save_image(np.zeros((2, 2, 3)), tmp_path / "missing" / "x.png")


def test_save_rejects_bad_shape(tmp_path):
    with pytest.raises(ShapeError):
        imaging.save_image(np.zeros((2, 2)), tmp_path / "x.png")


@pytest.mark.parametrize("size", [(1, 1), (5, 9), (40, 13)])
def test_resize_constant(size):
    out = imaging.resize(np.full((7, 11, 3), 0.3, np.float32), *size)
    assert out.shape == (*size, 3)
    np.testing.assert_allclose(out, 0.3, atol=1e-7)


def test_resize_same_size_is_identity(rng):
    img = rng.random((768, 768, 3)).astype(np.float32)
    np.testing.assert_array_equal(imaging.resize(img, 768, 768), img)


def test_resize_checkerboard_matches_hand_bilinear():
    board = np.zeros((2, 2, 3))
    board[0, 0] = board[1, 1] = 1.0
    out = imaging.resize(board, 4, 4)
    np.testing.assert_allclose(out, _bilinear_oracle(board, 4, 4), atol=1e-6)
    # spot values: corners clamp to the source pixel, inner pixels blend 3:1
    assert out[0, 0, 0] == pytest.approx(1.0)
    assert out[1, 1, 0] == pytest.approx(0.625)
    assert out[1, 2, 0] == pytest.approx(0.375)


@pytest.mark.parametrize("shape,out", [((9, 7), (4, 13)), ((16, 16), (5, 5)), ((3, 20), (8, 8))])
def test_resize_random_matches_oracle_and_torch(rng, shape, out):
    img = rng.random((*shape, 3))
    ours = imaging.resize(img, *out)
    np.testing.assert_allclose(ours, _bilinear_oracle(img, *out), atol=1e-6)
    t = torch.from_numpy(img).permute(2, 0, 1)[None]
    ref = F.interpolate(t, size=out, mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
    np.testing.assert_allclose(ours, ref, atol=1e-6)


def test_paired_crop_is_deterministic(rng):
    a = np.zeros((768, 768, 3), np.float32)
    s1 = imaging.paired_random_crop(a, a, 256, np.random.default_rng(5))[2]
    s2 = imaging.paired_random_crop(a, a, 256, np.random.default_rng(5))[2]
    assert s1 == s2


def test_paired_crop_equal_inputs_give_equal_patches(rng):
    a = rng.random((50, 60, 3)).astype(np.float32)
    pa, pb, spec = imaging.paired_random_crop(a, a.copy(), 17, rng)
    np.testing.assert_array_equal(pa, pb)
    np.testing.assert_array_equal(pa, a[spec.top : spec.top + 17, spec.left : spec.left + 17])


def test_paired_crop_too_large_raises():
    a = np.zeros((768, 768, 3), np.float32)
    with pytest.raises(RangeError):
        imaging.paired_random_crop(a, a, 769, np.random.default_rng(0))


def test_paired_crop_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        imaging.paired_random_crop(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)), 4, np.random.default_rng(0))


def test_flip_identity_and_involution(rng):
    img = rng.random((5, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(imaging.flip(img, False, False), img)
    for h in (False, True):
        for v in (False, True):
            np.testing.assert_array_equal(imaging.flip(imaging.flip(img, h, v), h, v), img)


def test_flip_horizontal_swaps_columns():
    p, q = [0.1, 0.2, 0.3], [0.7, 0.8, 0.9]
    img = np.array([[p, q]], np.float32)
    np.testing.assert_array_equal(imaging.flip(img, True, False), np.array([[q, p]], np.float32))
