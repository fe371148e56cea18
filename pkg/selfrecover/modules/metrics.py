"""Image-quality and localization metrics, and the evaluation report model."""

import logging
import math
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, computed_field
from skimage.metrics import structural_similarity
from sklearn.metrics import roc_auc_score

from modules.errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

ArrayLike = torch.Tensor | np.ndarray


def _as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _squeeze_batch(x: np.ndarray) -> np.ndarray:
    while x.ndim > 3 and x.shape[0] == 1:
        x = x[0]
    return x


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Metric inputs differ in shape: {a.shape} vs {b.shape}")


def psnr(a: ArrayLike, b: ArrayLike, mask: ArrayLike | None = None) -> float | None:
    """``10 log10(1 / MSE)`` for images in [0, 1].

    With ``mask`` the MSE only counts pixels where the mask is 1, over all channels
    (M-PSNR). Zero MSE is reported as ``PSNR_CAP_DB``. An empty mask gives ``None``.
    """
    x, y = _squeeze_batch(_as_array(a)), _squeeze_batch(_as_array(b))
    _check_same_shape(x, y)
    sq = (x - y) ** 2
    if mask is None:
        mse = float(sq.mean())
    else:
        m = _squeeze_batch(_as_array(mask)) > 0.5
        while m.ndim < sq.ndim:
            m = m[None]
        if m.ndim > sq.ndim:
            raise ShapeError(f"Mask {m.shape} does not fit images {sq.shape}")
        m = np.broadcast_to(m, sq.shape)
        if not m.any():
            return None
        mse = float(sq[m].mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gray(x: np.ndarray) -> np.ndarray:
    x = _squeeze_batch(x)
    if x.ndim == 3:
        x = x.mean(axis=0)
    if x.ndim != 2:
        raise ShapeError(f"Cannot read {x.shape} as an image")
    return x


def ssim(a: ArrayLike, b: ArrayLike) -> float:
    """Mean SSIM of the channel-mean grayscale images.

    11x11 Gaussian window with sigma 1.5, K1=0.01, K2=0.03, unit dynamic range,
    population covariances.
    """
    x, y = _gray(_as_array(a)), _gray(_as_array(b))
    _check_same_shape(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise ConfigurationError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    return float(structural_similarity(
        x, y, data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def _binary_pair(pred: ArrayLike, truth: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    p, t = _as_array(pred) > 0.5, _as_array(truth) > 0.5
    _check_same_shape(p, t)
    return p, t


def iou(pred: ArrayLike, truth: ArrayLike) -> float:
    """Intersection over union. Two empty masks count as a perfect match."""
    p, t = _binary_pair(pred, truth)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def f1(pred: ArrayLike, truth: ArrayLike) -> float:
    p, t = _binary_pair(pred, truth)
    tp = np.logical_and(p, t).sum()
    fp = np.logical_and(p, ~t).sum()
    fn = np.logical_and(~p, t).sum()
    if tp + fp + fn == 0:
        return 1.0
    return float(2 * tp / (2 * tp + fp + fn))


def auc(scores: ArrayLike, truth: ArrayLike) -> float | None:
    """Pixel ROC AUC over every pixel; tied scores count half. ``None`` for single-class truth."""
    s = _as_array(scores)
    t = _as_array(truth) > 0.5
    _check_same_shape(s, t)
    if t.all() or not t.any():
        return None
    return float(roc_auc_score(t.ravel(), s.ravel()))


METRIC_COLUMNS = (
    "container_psnr", "container_ssim", "attacked_psnr", "recovered_psnr",
    "recovered_ssim", "m_psnr", "iou", "f1", "auc",
)


class ImageMetrics(BaseModel):
    """Metrics of one evaluated image. ``None`` marks a value that is undefined for this image."""
    model_config = ConfigDict(extra="forbid")

    image: str
    container_psnr: float | None = None
    container_ssim: float | None = None
    attacked_psnr: float | None = None
    recovered_psnr: float | None = None
    recovered_ssim: float | None = None
    m_psnr: float | None = None
    iou: float | None = None
    f1: float | None = None
    auc: float | None = None
    attacks: list[dict] = Field(default_factory=list)


class MetricReport(BaseModel):
    """Per-image metrics of one evaluation run plus corpus means.
    name: Label of the run (degradation preset, fixed degradation or masking ratio).
    threshold: Binarization threshold of the predicted mask.
    composite_mask: Mask used for compositing (binary, soft or truth).
    lpips: Always "unavailable"; no pretrained perceptual network is shipped.
    """
    model_config = ConfigDict(extra="forbid")

    name: str
    threshold: float
    composite_mask: Literal["binary", "soft", "truth"] = "binary"
    lpips: Literal["unavailable"] = "unavailable"
    images: list[ImageMetrics] = Field(default_factory=list)

    @computed_field
    @property
    def means(self) -> dict[str, float | None]:
        """Arithmetic mean over the images that define each metric."""
        result = {}
        for column in METRIC_COLUMNS:
            values = [getattr(row, column) for row in self.images if getattr(row, column) is not None]
            result[column] = float(np.mean(values)) if values else None
        return result

    def to_tsv(self) -> str:
        def cell(value: float | None) -> str:
            return "NA" if value is None else f"{value:.4f}"

        lines = ["\t".join(("image",) + METRIC_COLUMNS)]
        for row in self.images:
            lines.append("\t".join([row.image] + [cell(getattr(row, c)) for c in METRIC_COLUMNS]))
        means = self.means
        lines.append("\t".join(["mean"] + [cell(means[c]) for c in METRIC_COLUMNS]))
        return "\n".join(lines) + "\n"
