"""Pixel-level primitives: composition, gradients, resizing, domain maps and file I/O.

Images at public interfaces are numpy arrays laid out ``H x W x C`` with values
in [0, 1]. The tensor helpers (``*_t`` functions and ``to_tensor``) work on
torch tensors laid out ``N x C x H x W``, which is what the networks consume.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class ImageIOError(OSError):
    pass


def _channel_dim(x, channel_axis):
    return x.shape[channel_axis]


def hadamard(r, s, channel_axis: int = -1):
    """Elementwise product ``r * s``.

    ``s`` may carry a single channel, in which case it is broadcast across
    the channels of ``r``. Works for numpy arrays and torch tensors alike;
    pass ``channel_axis=1`` for NCHW tensors.
    """
    if r.ndim != s.ndim:
        raise ValueError(f"rank mismatch: r{tuple(r.shape)} vs s{tuple(s.shape)}")
    r_shape = list(r.shape)
    s_shape = list(s.shape)
    if _channel_dim(s, channel_axis) == 1:
        r_shape.pop(channel_axis)
        s_shape.pop(channel_axis)
    if r_shape != s_shape:
        raise ValueError(f"cannot compose r{tuple(r.shape)} with s{tuple(s.shape)}")
    return r * s


class GradientPair(tuple):
    """``(dx, dy)`` forward differences, each shaped like the source image."""

    __slots__ = ()

    def __new__(cls, dx, dy):
        return super().__new__(cls, (dx, dy))

    @property
    def dx(self):
        return self[0]

    @property
    def dy(self):
        return self[1]


def spatial_gradient(img: np.ndarray) -> GradientPair:
    """Per-channel forward differences of an ``H x W [x C]`` image.

    The last column of ``dx`` and the last row of ``dy`` are zero
    (replicate padding).
    """
    img = np.asarray(img)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected H x W [x C] image, got shape {img.shape}")
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1] = img[1:] - img[:-1]
    return GradientPair(dx, dy)


def spatial_gradient_t(x: torch.Tensor) -> GradientPair:
    """Tensor version of :func:`spatial_gradient` for ``... x H x W`` layouts."""
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return GradientPair(dx, dy)


def resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` image to ``h x w``.

    Sample positions follow the half-pixel-centre convention, so resizing to
    the same shape returns the input unchanged.
    """
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    img = np.asarray(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    if img.shape[:2] == (h, w):
        out = img.copy()
    else:
        t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
        out = F.interpolate(t.double(), size=(h, w), mode="bilinear", align_corners=False)
        out = out[0].numpy().transpose(1, 2, 0).astype(img.dtype, copy=False)
    return out[..., 0] if squeeze else out


def to_network(x):
    """[0, 1] -> [-1, 1]."""
    return x * 2 - 1


def from_network(x):
    """[-1, 1] -> [0, 1]."""
    return (x + 1) / 2


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """``H x W x C`` (or a stack ``N x H x W x C``) -> float32 ``N x C x H x W``."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(t: torch.Tensor) -> np.ndarray:
    """Single-item ``1 x C x H x W`` (or ``C x H x W``) tensor -> ``H x W x C`` array."""
    t = t.detach().cpu()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    return t.numpy().transpose(1, 2, 0).astype(np.float32)


def check_network_size(h: int, w: int, multiple: int = 8) -> None:
    if h < multiple or w < multiple or h % multiple or w % multiple:
        raise ValueError(
            f"image size {h}x{w} must be at least {multiple} and divisible by {multiple}"
        )


def pad_to_multiple(x: torch.Tensor, multiple: int = 8):
    """Reflect-pad an NCHW tensor so both spatial dims divide ``multiple``.

    Returns the padded tensor and the original ``(h, w)`` for cropping back.
    """
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        # reflect padding needs pad < dim; fall back to replicate for tiny inputs
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"no such image file: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode not in ("RGB", "L"):
                bands = len(im.getbands())
                raise ImageIOError(f"expected RGB image, got mode {im.mode!r} ({bands} channels): {path}")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except ImageIOError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.shape[2] != 3:
        raise ImageIOError(f"expected 3 channels, got {arr.shape[2]}: {path}")
    return arr


def save_image(img: np.ndarray, path) -> Path:
    """Write an ``H x W x {1,3}`` [0, 1] image as 8-bit PNG/JPEG.

    Single-channel maps are written as RGB so every dumped file loads back
    through :func:`load_image`.
    """
    path = Path(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageIOError(f"cannot save array of shape {arr.shape} as an image: {path}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ImageIOError(f"unsupported image suffix {path.suffix!r}: {path}")
    data = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(data).save(path)
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc
    return path
