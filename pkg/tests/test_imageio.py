import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import synthetic_image
from modelbreak.errors import ImageFormatError
from modelbreak.imageio import (from_model_input, load_image, quantize_8bit, resize_bilinear, save_png,
                                to_model_input, to_uint8)


def scalar_resize(img, height, width):
    h, w, c = img.shape
    out = np.zeros((height, width, c))
    for i in range(height):
        sy = min(max((i + 0.5) * h / height - 0.5, 0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        for j in range(width):
            sx = min(max((j + 0.5) * w / width - 0.5, 0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            for k in range(c):
                top = img[y0, x0, k] * (1 - fx) + img[y0, x1, k] * fx
                bot = img[y1, x0, k] * (1 - fx) + img[y1, x1, k] * fx
                out[i, j, k] = top * (1 - fy) + bot * fy
    return out


def test_half_maps_to_128(tmp_path):
    assert to_uint8(0.5) == 128
    assert to_uint8([0.0, 1.0, -0.2, 1.3]).tolist() == [0, 255, 0, 255]
    save_png(tmp_path / "a.png", np.full((2, 2, 3), 0.5, np.float32))
    assert np.asarray(Image.open(tmp_path / "a.png")).ravel().tolist() == [128] * 12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=48).filter(lambda v: len(v) % 3 == 0))
def test_reload_within_half_step(tmp_path_factory, values):
    x = np.array(values, np.float32).reshape(1, -1, 3)
    path = tmp_path_factory.mktemp("png") / "x.png"
    save_png(path, x)
    back, warnings = load_image(path)
    assert warnings == []
    assert np.max(np.abs(back.astype(np.float64) - x)) <= 1 / 510 + 1e-7
    assert np.array_equal(back, quantize_8bit(x))


def test_save_reload_is_idempotent(tmp_path):
    img = synthetic_image(3)
    save_png(tmp_path / "a.png", img)
    assert np.array_equal(load_image(tmp_path / "a.png")[0], img)


def test_jpeg_output_refused(tmp_path):
    for ext in (".jpg", ".JPEG", ".jfif"):
        with pytest.raises(ImageFormatError, match="JPEG"):
            save_png(tmp_path / f"a{ext}", np.zeros((2, 2, 3)))
        assert not (tmp_path / f"a{ext}").exists()


def test_jpeg_input_warns(tmp_path):
    Image.new("RGB", (4, 4), (10, 20, 30)).save(tmp_path / "a.jpg")
    pixels, warnings = load_image(tmp_path / "a.jpg")
    assert pixels.shape == (4, 4, 3)
    assert any("JPEG" in w for w in warnings)


def test_alpha_dropped_with_warning(tmp_path):
    Image.new("RGBA", (3, 2), (255, 0, 0, 7)).save(tmp_path / "a.png")
    pixels, warnings = load_image(tmp_path / "a.png")
    assert pixels.shape == (2, 3, 3)
    assert np.array_equal(pixels[0, 0], [1, 0, 0])
    assert any("alpha" in w for w in warnings)


def test_grayscale_and_palette(tmp_path):
    Image.new("L", (3, 3), 51).save(tmp_path / "g.png")
    g, _ = load_image(tmp_path / "g.png")
    assert g.shape == (3, 3, 1) and g[0, 0, 0] == np.float32(0.2)
    Image.new("RGB", (3, 3), (0, 51, 255)).convert("P").save(tmp_path / "p.png")
    p, _ = load_image(tmp_path / "p.png")
    assert p.shape == (3, 3, 3)


def test_sixteen_bit_rejected(tmp_path):
    Image.fromarray(np.full((2, 2), 40000, np.uint16)).save(tmp_path / "a.png")
    with pytest.raises(ImageFormatError, match="8-bit"):
        load_image(tmp_path / "a.png")


def test_unreadable_and_missing(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(ImageFormatError, match="cannot decode"):
        load_image(tmp_path / "junk.png")
    with pytest.raises(ImageFormatError, match="no such file"):
        load_image(tmp_path / "nope.png")
    Image.new("RGB", (2, 2)).save(tmp_path / "a.bmp")
    with pytest.raises(ImageFormatError, match="BMP"):
        load_image(tmp_path / "a.bmp")


def test_save_shapes(tmp_path):
    save_png(tmp_path / "a.png", np.zeros((1, 2, 2, 1)))
    assert load_image(tmp_path / "a.png")[0].shape == (2, 2, 1)
    for bad in (np.zeros((2, 2, 2, 3)), np.zeros((2, 2, 4)), np.zeros((2, 2))):
        with pytest.raises(ImageFormatError):
            save_png(tmp_path / "b.png", bad)


@pytest.mark.parametrize("src,dst", [((4, 4), (8, 8)), ((8, 8), (4, 4)), ((5, 7), (3, 11)),
                                     ((1, 1), (3, 3)), ((6, 6), (6, 6))])
def test_resize_matches_scalar(src, dst):
    img = np.random.default_rng(0).random((*src, 3)).astype(np.float32)
    got = resize_bilinear(img, *dst)
    assert got.shape == (*dst, 3) and got.dtype == np.float32
    assert np.max(np.abs(got - scalar_resize(img.astype(np.float64), *dst))) <= 1e-6


def test_resize_half_pixel_centres():
    img = np.array([[0.0, 1.0]], np.float32)[:, :, None]
    row = resize_bilinear(img, 1, 4)[0, :, 0]
    assert np.allclose(row, [0, 0.25, 0.75, 1])


def test_model_input_round_trip():
    img = synthetic_image(0)
    for rng, order in [((0, 1), "RGB"), ((-1, 1), "BGR"), ((0, 255), "rgb")]:
        x = to_model_input(img, (1, *img.shape), rng, order)
        assert x.shape == (1, *img.shape) and x.dtype == np.float32
        assert x.min() >= rng[0] and x.max() <= rng[1]
        assert np.allclose(from_model_input(x, rng, order), img, atol=1e-6)
    bgr = to_model_input(img, (1, *img.shape), (0, 1), "BGR")
    assert np.array_equal(bgr[0, :, :, 0], img[:, :, 2])


def test_model_input_shapes():
    img = synthetic_image(0)
    assert to_model_input(img, (1, 16, 16, 3)).shape == (1, 16, 16, 3)
    assert to_model_input(img[:, :, :1], (1, 8, 8, 3)).shape == (1, 8, 8, 3)
    with pytest.raises(ImageFormatError, match="channels"):
        to_model_input(img, (1, 8, 8, 1))
    with pytest.raises(ImageFormatError, match="NHWC"):
        to_model_input(img, (1, 64))
