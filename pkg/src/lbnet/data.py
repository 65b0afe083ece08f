"""Image I/O, bicubic degradation, luma conversion and training patch sampling.

Images move through the package as float arrays shaped ``(..., 3, H, W)`` in
[0, 1].  :class:`ImageRGB` is the 8-bit file-boundary form.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from lbnet.engine import Tensor
from lbnet.errors import DatasetError, ImageIOError, UsageError

log = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Tensor]

# Pillow modes that hold 8-bit samples and convert losslessly to RGB.
_EIGHT_BIT_MODES = {"1", "L", "P", "RGB", "RGBA", "LA", "PA", "RGBX"}


@dataclass(frozen=True)
class ImageRGB:
    """8-bit RGB samples, row-major ``(height, width, 3)``."""

    samples: np.ndarray

    def __post_init__(self):
        s = self.samples
        if s.dtype != np.uint8 or s.ndim != 3 or s.shape[2] != 3 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValueError(f"ImageRGB needs a uint8 (H, W, 3) array, got {s.dtype} {s.shape}")

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def to_array(self) -> np.ndarray:
        """``(3, H, W)`` float64 in [0, 1]."""
        return self.samples.transpose(2, 0, 1).astype(np.float64) / 255.0

    @classmethod
    def from_array(cls, arr: ArrayLike) -> "ImageRGB":
        """Quantise a ``(3, H, W)`` (or ``(1, 3, H, W)``) float image, clamping to [0, 1]."""
        a = _raw(arr)
        if a.ndim == 4 and a.shape[0] == 1:
            a = a[0]
        if a.ndim != 3 or a.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) image, got {a.shape}")
        q = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
        return cls(np.ascontiguousarray(q.transpose(1, 2, 0)))


def _raw(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _like(template: ArrayLike, values: np.ndarray) -> ArrayLike:
    return Tensor(values) if isinstance(template, Tensor) else values


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def load_png(path) -> ImageRGB:
    """Decode an 8-bit PNG; gray and palette images expand to RGB, alpha is dropped."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageIOError(path, f"not a PNG file (format {im.format})")
            if im.mode not in _EIGHT_BIT_MODES:
                raise ImageIOError(path, f"unsupported sample format {im.mode!r} (8-bit only)")
            im.load()
            rgb = im.convert("RGB")
    except ImageIOError:
        raise
    except FileNotFoundError:
        raise ImageIOError(path, "no such file") from None
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(path, f"cannot decode: {exc}") from None
    return ImageRGB(np.array(rgb, dtype=np.uint8))


def save_png(img: Union[ImageRGB, ArrayLike], path) -> None:
    """Write an 8-bit RGB PNG.  Float images are clamped and rounded first."""
    path = Path(path)
    if not isinstance(img, ImageRGB):
        img = ImageRGB.from_array(img)
    if not path.parent.is_dir():
        raise ImageIOError(path, "parent directory does not exist")
    try:
        Image.fromarray(img.samples, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(path, f"cannot write: {exc}") from None


# ---------------------------------------------------------------------------
# Resampling and colour
# ---------------------------------------------------------------------------

def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel, support [-2, 2]."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(in_size: int, out_size: int, a: float = -0.5) -> np.ndarray:
    """``(out_size, in_size)`` interpolation matrix along one axis.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) / scale - 0.5``.
    When shrinking, the kernel is stretched by ``1 / scale`` so it also acts
    as the anti-aliasing filter.  Taps beyond the border are clamped to the
    edge sample and each row is normalised to sum to one.
    """
    scale = out_size / in_size
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    first = np.floor(centers - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) * stretch, a)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size))
    np.add.at(mat, (np.repeat(np.arange(out_size), taps), np.clip(idx, 0, in_size - 1).ravel()), w.ravel())
    return mat


@lru_cache(maxsize=64)
def _cached_weights(in_size: int, out_size: int) -> np.ndarray:
    m = resize_weights(in_size, out_size)
    m.setflags(write=False)
    return m


def bicubic_resize(img: ArrayLike, out_h: int, out_w: int) -> ArrayLike:
    """Separable anti-aliased bicubic resize of ``(..., H, W)`` data, clamped to [0, 1].

    Tensors in give tensors out (no gradient); arrays give arrays.
    """
    if out_h < 1 or out_w < 1:
        raise UsageError(f"output extents must be >= 1, got {out_h}x{out_w}")
    x = _raw(img)
    h, w = x.shape[-2:]
    rows = _cached_weights(h, out_h)
    cols = _cached_weights(w, out_w)
    # Plane by plane so results do not depend on how images are batched.
    planes = [rows @ np.ascontiguousarray(plane) @ cols.T for plane in x.reshape(-1, h, w)]
    out = np.stack(planes).reshape(x.shape[:-2] + (out_h, out_w))
    return _like(img, np.clip(out, 0.0, 1.0))


def modcrop(img: ArrayLike, s: int) -> ArrayLike:
    """Crop the bottom/right so both spatial extents are multiples of ``s``."""
    if s < 1:
        raise UsageError(f"scale must be >= 1, got {s}")
    x = _raw(img)
    h, w = x.shape[-2:]
    nh, nw = h - h % s, w - w % s
    if nh == 0 or nw == 0:
        raise UsageError(f"{w}x{h} image is smaller than scale {s}")
    return _like(img, x[..., :nh, :nw])


_Y_WEIGHTS = np.array([65.481, 128.553, 24.966])


def rgb_to_y(img: ArrayLike) -> ArrayLike:
    """BT.601 studio-swing luma of ``(..., 3, H, W)`` RGB in [0, 1]; result in [16, 235]."""
    x = _raw(img)
    if x.ndim < 3 or x.shape[-3] != 3:
        raise UsageError(f"rgb_to_y expects (..., 3, H, W), got {x.shape}")
    y = 16.0 + np.tensordot(_Y_WEIGHTS, np.moveaxis(x, -3, 0), axes=1)
    return _like(img, np.expand_dims(y, -3))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

AUGMENT_CODES = tuple(range(8))


def augment(x: np.ndarray, code: int) -> np.ndarray:
    """Dihedral transform: rotate by ``90 * (code % 4)`` degrees, then mirror if ``code >= 4``."""
    if code not in AUGMENT_CODES:
        raise UsageError(f"augmentation code must be 0..7, got {code}")
    y = np.rot90(x, code % 4, axes=(-2, -1))
    if code >= 4:
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


def inverse_augment(x: np.ndarray, code: int) -> np.ndarray:
    """Undo :func:`augment` with the same code."""
    if code not in AUGMENT_CODES:
        raise UsageError(f"augmentation code must be 0..7, got {code}")
    y = x[..., ::-1] if code >= 4 else x
    return np.ascontiguousarray(np.rot90(y, -(code % 4), axes=(-2, -1)))


# ---------------------------------------------------------------------------
# Dataset index and patch sampling
# ---------------------------------------------------------------------------

class DatasetIndex:
    """Sorted PNG paths of a flat HR directory with their cached ``(height, width)``.

    Decoded images are kept in a small LRU cache so repeated sampling from a
    handful of images does not re-read the files.
    """

    def __init__(self, paths, cache_size: int = 16):
        self.paths: Tuple[Path, ...] = tuple(sorted(Path(p) for p in paths))
        sizes = []
        for p in self.paths:
            try:
                with Image.open(p) as im:
                    sizes.append((im.height, im.width))
            except (OSError, UnidentifiedImageError) as exc:
                raise ImageIOError(p, f"cannot read header: {exc}") from None
        self.sizes: Tuple[Tuple[int, int], ...] = tuple(sizes)
        self._load = lru_cache(maxsize=cache_size)(self._load_uncached)
        self._warned = set()

    @classmethod
    def from_dir(cls, directory, cache_size: int = 16) -> "DatasetIndex":
        d = Path(directory)
        if not d.is_dir():
            raise DatasetError(f"{d} is not a directory")
        return cls((p for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".png"), cache_size)

    def __len__(self) -> int:
        return len(self.paths)

    def _load_uncached(self, i: int) -> np.ndarray:
        arr = load_png(self.paths[i]).to_array()
        arr.setflags(write=False)
        return arr

    def image(self, i: int) -> np.ndarray:
        """``(3, H, W)`` float image ``i`` (read-only, shared)."""
        return self._load(i)

    def eligible(self, min_side: int) -> List[int]:
        return [i for i, (h, w) in enumerate(self.sizes) if h >= min_side and w >= min_side]


@dataclass(frozen=True)
class PatchPair:
    """Aligned training patches plus where they came from."""

    lr_patch: Tensor
    hr_patch: Tensor
    path: Path
    offset: Tuple[int, int]
    code: int


def _eligible_or_raise(index: DatasetIndex, side: int) -> List[int]:
    ok = index.eligible(side)
    skipped = len(index) - len(ok)
    if not ok:
        raise DatasetError(f"no image in the dataset is at least {side}x{side} pixels")
    if skipped and side not in index._warned:
        index._warned.add(side)
        log.warning("skipping %d image(s) smaller than %dx%d", skipped, side, side)
    return ok


def sample_patch_pair(index: DatasetIndex, s: int, p: int, rng: np.random.Generator,
                      _eligible: Optional[List[int]] = None) -> PatchPair:
    """Draw one augmented ``(p x p, sp x sp)`` LR/HR pair.

    The HR crop offset is a multiple of ``s``; the dihedral augmentation is
    applied to the HR crop and the LR patch is the bicubic downscale of the
    augmented crop, so ``bicubic_resize(hr, p, p) == lr`` holds exactly.
    """
    side = s * p
    ok = _eligible if _eligible is not None else _eligible_or_raise(index, side)
    i = ok[int(rng.integers(len(ok)))]
    h, w = index.sizes[i]
    top = s * int(rng.integers((h - side) // s + 1))
    left = s * int(rng.integers((w - side) // s + 1))
    code = int(rng.integers(8))
    hr = augment(index.image(i)[:, top:top + side, left:left + side], code)[None]
    lr = bicubic_resize(hr, p, p)
    return PatchPair(Tensor(lr), Tensor(hr), index.paths[i], (top, left), code)


def sample_batch(index: DatasetIndex, s: int, p: int, batch: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Stack ``batch`` patch pairs into ``(B, 3, p, p)`` LR and ``(B, 3, sp, sp)`` HR arrays."""
    ok = _eligible_or_raise(index, s * p)
    pairs = [sample_patch_pair(index, s, p, rng, ok) for _ in range(batch)]
    return (np.concatenate([q.lr_patch.data for q in pairs]),
            np.concatenate([q.hr_patch.data for q in pairs]))
