"""Y-channel PSNR / SSIM, the dataset evaluation runner and the bicubic baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np
from scipy.signal import correlate

from lbnet.arch import LBNetModel
from lbnet.data import ArrayLike, DatasetIndex, bicubic_resize, load_png, modcrop, rgb_to_y
from lbnet.engine import Tensor, no_grad
from lbnet.errors import DatasetError, DimensionError, UsageError

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = (0.01 * PEAK) ** 2
C2 = (0.03 * PEAK) ** 2


def _plane(x: ArrayLike) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise DimensionError(f"expected a single-channel image, got shape {a.shape}")
    return a


def _crop(a: np.ndarray, border: int) -> np.ndarray:
    if border < 0 or 2 * border >= min(a.shape):
        raise UsageError(f"border {border} leaves nothing of a {a.shape[1]}x{a.shape[0]} image")
    return a[border:a.shape[0] - border, border:a.shape[1] - border] if border else a


def _pair(pred_y, gt_y, border):
    p, g = _plane(pred_y), _plane(gt_y)
    if p.shape != g.shape:
        raise DimensionError(f"image shapes differ: {p.shape} vs {g.shape}")
    return _crop(p, border), _crop(g, border)


def psnr(pred_y: ArrayLike, gt_y: ArrayLike, border: int = 0) -> float:
    """``10 log10(255^2 / MSE)`` after cropping ``border`` pixels per side; ``inf`` if equal."""
    p, g = _pair(pred_y, gt_y, border)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred_y: ArrayLike, gt_y: ArrayLike, border: int = 0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian (sigma 1.5), averaged over valid windows.

    Raises:
        DimensionError: the cropped image is smaller than the window.
    """
    p, g = _pair(pred_y, gt_y, border)
    if min(p.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {p.shape}")
    w = gaussian_window()

    def filt(a):
        return correlate(a, w, mode="valid", method="direct")

    mu1, mu2 = filt(p), filt(g)
    s11 = filt(p * p) - mu1 * mu1
    s22 = filt(g * g) - mu2 * mu2
    s12 = filt(p * g) - mu1 * mu2
    num = (2 * mu1 * mu2 + C1) * (2 * s12 + C2)
    den = (mu1 * mu1 + mu2 * mu2 + C1) * (s11 + s22 + C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    name: str
    psnr: float
    ssim: float

    @property
    def degenerate(self) -> bool:
        return math.isinf(self.psnr)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


@dataclass
class MetricReport:
    """Per-image metrics plus their means.

    Rows with an infinite PSNR (e.g. a constant image reproduced exactly) are
    kept and flagged but left out of both means.
    """

    rows: List[MetricRow] = field(default_factory=list)
    scale: int = 4
    border: int = 4
    model_id: str = "model"

    @property
    def counted(self) -> List[MetricRow]:
        return [r for r in self.rows if not r.degenerate]

    @property
    def mean_psnr(self) -> float:
        c = self.counted
        return float(np.mean([r.psnr for r in c])) if c else math.inf

    @property
    def mean_ssim(self) -> float:
        c = self.counted
        return float(np.mean([r.ssim for r in c])) if c else 1.0

    def summary(self) -> str:
        return f"{self.mean_psnr:.2f}/{self.mean_ssim:.4f}"

    def to_tsv(self) -> str:
        lines = ["name\tpsnr\tssim\tflag"]
        for r in self.rows:
            lines.append(f"{r.name}\t{_fmt(r.psnr)}\t{_fmt(r.ssim)}\t{'excluded' if r.degenerate else ''}")
        lines.append(f"MEAN\t{_fmt(self.mean_psnr)}\t{_fmt(self.mean_ssim)}\t{len(self.counted)}/{len(self.rows)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """One ``key = value`` line per field: ``meta.*``, ``<image>.psnr``, ``<image>.ssim``, ``mean.*``."""
        lines = [f"meta.model = {self.model_id}", f"meta.scale = {self.scale}", f"meta.border = {self.border}",
                 f"meta.images = {len(self.rows)}"]
        for r in self.rows:
            lines += [f"{r.name}.psnr = {_fmt(r.psnr)}", f"{r.name}.ssim = {_fmt(r.ssim)}",
                      f"{r.name}.excluded = {str(r.degenerate).lower()}"]
        lines += [f"mean.psnr = {_fmt(self.mean_psnr)}", f"mean.ssim = {_fmt(self.mean_ssim)}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition(" = ")
                values[key] = value
        report = cls(scale=int(values["meta.scale"]), border=int(values["meta.border"]),
                     model_id=values["meta.model"])
        names = [k[:-len(".psnr")] for k in values if k.endswith(".psnr") and k != "mean.psnr"]
        report.rows = [MetricRow(n, float(values[f"{n}.psnr"]), float(values[f"{n}.ssim"])) for n in names]
        return report


# ---------------------------------------------------------------------------
# Runners
# ---------------------------------------------------------------------------

Upscaler = Callable[[np.ndarray], np.ndarray]


def bicubic_upscaler(s: int) -> Upscaler:
    """The reference "model": bicubic upscaling by ``s``."""
    def up(lr: np.ndarray) -> np.ndarray:
        return bicubic_resize(lr, lr.shape[-2] * s, lr.shape[-1] * s)
    return up


def _as_upscaler(model: Union[LBNetModel, Upscaler], s: int) -> Upscaler:
    if isinstance(model, LBNetModel):
        if model.config.scale != s:
            raise UsageError(f"model upscales x{model.config.scale} but evaluation asked for x{s}")

        def run(lr: np.ndarray) -> np.ndarray:
            with no_grad():
                return model(Tensor(lr)).data
        return run
    return model


def evaluate_model(model: Union[LBNetModel, Upscaler], hr_dir, s: int,
                   model_id: Optional[str] = None) -> MetricReport:
    """Score ``model`` on every PNG of ``hr_dir``.

    Each HR image is modcropped to ``s``, bicubic-downscaled, super-resolved,
    clamped to [0, 1] and compared with the HR image on the Y channel with an
    ``s``-pixel border crop.  Rows are ordered by file name.

    Args:
        model: an :class:`LBNetModel` or any callable mapping ``(1, 3, h, w)``
            arrays to ``(1, 3, s*h, s*w)`` arrays.

    Raises:
        DatasetError: the directory holds no PNG images.
    """
    upscale = _as_upscaler(model, s)
    index = DatasetIndex.from_dir(hr_dir, cache_size=0)
    if len(index) == 0:
        raise DatasetError(f"no PNG images in {hr_dir}")
    report = MetricReport(scale=s, border=s,
                          model_id=model_id or ("lbnet" if isinstance(model, LBNetModel) else "callable"))
    for path in index.paths:
        hr = modcrop(load_png(path).to_array()[None], s)
        lr = bicubic_resize(hr, hr.shape[-2] // s, hr.shape[-1] // s)
        sr = np.clip(upscale(lr), 0.0, 1.0)
        if sr.shape != hr.shape:
            raise DimensionError(f"{path.name}: model produced {sr.shape}, expected {hr.shape}")
        y_sr, y_hr = rgb_to_y(sr), rgb_to_y(hr)
        report.rows.append(MetricRow(path.name, psnr(y_sr, y_hr, s), ssim(y_sr, y_hr, s)))
    return report


def bicubic_baseline(hr_dir, s: int) -> MetricReport:
    return evaluate_model(bicubic_upscaler(s), hr_dir, s, model_id="bicubic")
