"""PNG loading and saving, bilinear resize, and model-input conversion.

Pixels are float32 in [0, 1].  Saving maps x to floor(255 * x + 0.5), so a
reloaded value is within 1/510 of what was saved.
"""

import os

import numpy as np
from PIL import Image

from .errors import ImageFormatError

JPEG_EXTENSIONS = (".jpg", ".jpeg", ".jpe", ".jfif")


def load_image(path):
    """Returns (pixels HxWxC float32 in [0, 1], warnings).  C is 1 or 3."""
    warnings = []
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise ImageFormatError(f"{path}: no such file") from None
    except (OSError, SyntaxError, ValueError) as e:
        raise ImageFormatError(f"{path}: cannot decode image ({e})") from None
    if img.format == "JPEG":
        warnings.append(f"{path}: JPEG input; compression has already altered pixel values")
    elif img.format != "PNG":
        raise ImageFormatError(f"{path}: unsupported image format {img.format}")
    mode = img.mode
    if mode in ("RGBA", "LA") or (mode == "P" and "transparency" in img.info):
        warnings.append(f"{path}: alpha channel dropped")
        mode = "RGB" if mode in ("RGBA", "P") else "L"
        img = img.convert(mode)
    elif mode == "P":
        img = img.convert("RGB")
    elif mode == "1":
        img = img.convert("L")
    elif mode not in ("RGB", "L"):
        raise ImageFormatError(f"{path}: unsupported pixel mode {img.mode} (8-bit RGB or grayscale only)")
    arr = np.asarray(img, dtype=np.float32) / np.float32(255)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr, warnings


def to_uint8(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255 + 0.5).astype(np.uint8)


def quantize_8bit(x):
    """What an 8-bit save/reload cycle does to ``x``."""
    return (to_uint8(x).astype(np.float32) / np.float32(255)).astype(np.float32)


def save_png(path, pixels):
    """Write HxWxC (C in 1, 3) or NxHxWxC with N == 1 pixels as an 8-bit PNG."""
    if os.path.splitext(str(path))[1].lower() in JPEG_EXTENSIONS:
        raise ImageFormatError(
            f"{path}: refusing to write JPEG; lossy compression would discard the perturbation, use .png")
    x = np.asarray(pixels)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ImageFormatError(f"can only save a single image, got batch {x.shape[0]}")
        x = x[0]
    if x.ndim != 3 or x.shape[-1] not in (1, 3):
        raise ImageFormatError(f"cannot save pixel array of shape {x.shape}")
    data = to_uint8(x)
    img = Image.fromarray(data[:, :, 0], "L") if data.shape[-1] == 1 else Image.fromarray(data, "RGB")
    img.save(path, format="PNG")


def resize_bilinear(img, height, width):
    """Bilinear resize with half-pixel centers (align_corners=False), edges clamped."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(out, size):
        c = (np.arange(out, dtype=np.float64) + 0.5) * (size / out) - 0.5
        c = np.clip(c, 0, size - 1)
        i0 = np.floor(c).astype(np.int64)
        i1 = np.minimum(i0 + 1, size - 1)
        return i0, i1, (c - i0).astype(np.float32)

    y0, y1, fy = axis(height, h)
    x0, x1, fx = axis(width, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(np.float32)


def to_model_input(pixels, input_shape, input_range=(0.0, 1.0), channel_order="RGB"):
    """Resize and rescale an HxWxC [0, 1] image into a 1xHxWxC model tensor."""
    if len(input_shape) != 4 or input_shape[0] != 1:
        raise ImageFormatError(f"model input {list(input_shape)} is not a single NHWC image")
    _, h, w, c = input_shape
    x = np.asarray(pixels, dtype=np.float32)
    if x.shape[-1] != c:
        if x.shape[-1] == 1 and c == 3:
            x = np.repeat(x, 3, axis=-1)
        else:
            raise ImageFormatError(f"image has {x.shape[-1]} channels, model expects {c}")
    x = resize_bilinear(x, h, w)
    if channel_order.upper() == "BGR" and c == 3:
        x = x[:, :, ::-1]
    lo, hi = input_range
    x = np.float32(lo) + x * np.float32(hi - lo)
    return np.ascontiguousarray(x[None], dtype=np.float32)


def from_model_input(x, input_range=(0.0, 1.0), channel_order="RGB"):
    """Inverse of :func:`to_model_input` minus the resize: back to HxWxC [0, 1]."""
    x = np.asarray(x, dtype=np.float32)[0]
    lo, hi = input_range
    x = (x - np.float32(lo)) / np.float32(hi - lo)
    if channel_order.upper() == "BGR" and x.shape[-1] == 3:
        x = x[:, :, ::-1]
    return np.clip(x, 0, 1).astype(np.float32)
