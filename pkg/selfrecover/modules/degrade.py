"""Attack and degradation simulation: common degradations, random tamper masks and splicing.

Degradation parameters are sampled from preset tables kept in
``presets/degradation_presets.json``. Noise levels are given on the 0-255 scale,
as in the tables they reproduce.
"""

import json
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal

import cv2
import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from pydantic import BaseModel, ConfigDict, Field, model_validator

from modules.errors import ConfigurationError, ShapeError
from modules.localize import composite

logger = logging.getLogger(__name__)

DEFAULT_PRESET_FILE = Path(__file__).resolve().parent.parent / "presets" / "degradation_presets.json"

DegradationKind = Literal[
    "gaussian_noise", "jpeg", "gaussian_filter", "median_filter",
    "poisson_noise", "hue", "brightness", "contrast", "none",
]
MaskStrategy = Literal["irregular", "box", "mixed", "shapes"]


class ParameterRange(BaseModel):
    """Closed sampling interval for one degradation parameter.
    integer: Sample integers from [low, high] instead of reals.
    """
    model_config = ConfigDict(extra="forbid")

    low: float
    high: float
    integer: bool = False

    @model_validator(mode="after")
    def _ordered(self):
        if self.low > self.high:
            raise ValueError(f"range low {self.low} exceeds high {self.high}")
        return self


class DegradationSpec(BaseModel):
    """One concrete degradation.
    kind: Degradation type.
    params: Parameter values (sigma, quality, kernel, alpha, delta, factor).
    differentiable: Use gradient-friendly surrogates (soft rounding, straight-through sampling).
    """
    model_config = ConfigDict(extra="forbid")

    kind: DegradationKind
    params: dict[str, float] = Field(default_factory=dict)
    differentiable: bool = False


class Preset(BaseModel):
    """mode: ``one`` applies a single kind drawn uniformly from the menu, ``chain`` applies every kind in order."""
    model_config = ConfigDict(extra="forbid")

    mode: Literal["one", "chain"] = "one"
    menu: dict[DegradationKind, dict[str, ParameterRange]]

    @model_validator(mode="after")
    def _nonempty(self):
        if not self.menu:
            raise ValueError("preset menu is empty")
        return self


class PresetTable(BaseModel):
    model_config = ConfigDict(extra="forbid")

    presets: dict[str, Preset]


@lru_cache(maxsize=8)
def load_presets(path: Path | None = None) -> PresetTable:
    preset_file = Path(path) if path is not None else DEFAULT_PRESET_FILE
    try:
        return PresetTable.model_validate(json.loads(preset_file.read_text(encoding="utf-8")))
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"Cannot load degradation presets from {preset_file}: {e}") from e


def _sample_range(r: ParameterRange, rng: torch.Generator | None) -> float:
    if r.low == r.high:
        return float(r.low)
    if r.integer:
        return float(torch.randint(int(r.low), int(r.high) + 1, (1,), generator=rng).item())
    return float(r.low + (r.high - r.low) * torch.rand(1, generator=rng, dtype=torch.float64).item())


def sample_degradation(preset: str, rng: torch.Generator | None = None, presets: PresetTable | None = None,
                       differentiable: bool = False) -> list[DegradationSpec]:
    """Draw the degradations of ``preset``. ``one`` mode gives a single spec, ``chain`` one per menu entry."""
    table = presets or load_presets()
    if preset not in table.presets:
        raise ConfigurationError(f"Unknown degradation preset '{preset}'. Available: {sorted(table.presets)}")
    chosen = table.presets[preset]
    kinds = list(chosen.menu)
    if chosen.mode == "one":
        kinds = [kinds[int(torch.randint(len(kinds), (1,), generator=rng).item())]]
    return [
        DegradationSpec(
            kind=kind,
            params={name: _sample_range(r, rng) for name, r in chosen.menu[kind].items()},
            differentiable=differentiable,
        )
        for kind in kinds
    ]


def _gaussian_like(img: torch.Tensor, rng: torch.Generator | None) -> torch.Tensor:
    return torch.randn(img.shape, generator=rng, dtype=img.dtype).to(img.device)


# Annex K base tables.
_LUMA_TABLE = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
]
_CHROMA_TABLE = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
] + [99] * 32

_RGB_TO_YCBCR = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
]
_YCBCR_TO_RGB = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
]


def quantization_tables(quality: float, dtype=torch.float32, device=None) -> torch.Tensor:
    """``(3, 8, 8)`` tables for Y, Cb, Cr scaled by the libjpeg quality rule, clamped to [1, 255]."""
    q = min(max(float(quality), 1.0), 100.0)
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    base = torch.tensor([_LUMA_TABLE, _CHROMA_TABLE, _CHROMA_TABLE], dtype=torch.float64).reshape(3, 8, 8)
    tables = torch.clamp(torch.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)
    return tables.to(dtype=dtype, device=device)


def _dct_matrix(dtype, device) -> torch.Tensor:
    k = torch.arange(8, dtype=torch.float64)[:, None]
    i = torch.arange(8, dtype=torch.float64)[None, :]
    m = torch.cos((2 * i + 1) * k * math.pi / 16) * math.sqrt(2.0 / 8.0)
    m[0, :] = math.sqrt(1.0 / 8.0)
    return m.to(dtype=dtype, device=device)


def soft_round(x: torch.Tensor) -> torch.Tensor:
    """Cubic rounding surrogate ``round(x) + (x - round(x))**3``."""
    r = torch.round(x)
    return r + (x - r) ** 3


def jpeg_compress(img: torch.Tensor, quality: float, differentiable: bool = False) -> torch.Tensor:
    """JPEG round trip with 8x8 DCT blocks and 4:4:4 chroma.

    Coefficients are rounded with ``soft_round`` when ``differentiable`` and with true
    rounding otherwise, in which case output pixels are also quantized to 8 bits.
    """
    b, c, h, w = img.shape
    if c != 3:
        raise ShapeError(f"JPEG needs RGB input, got {c} channels")
    pad_h, pad_w = (-h) % 8, (-w) % 8
    x = F.pad(img, (0, pad_w, 0, pad_h), mode="replicate") if pad_h or pad_w else img
    hh, ww = x.shape[-2:]
    to_ycc = torch.tensor(_RGB_TO_YCBCR, dtype=img.dtype, device=img.device)
    to_rgb = torch.tensor(_YCBCR_TO_RGB, dtype=img.dtype, device=img.device)
    offset = torch.tensor([0.0, 128.0, 128.0], dtype=img.dtype, device=img.device).view(1, 3, 1, 1)

    ycc = torch.einsum("ij,bjhw->bihw", to_ycc, x * 255.0) + offset - 128.0
    blocks = ycc.reshape(b, 3, hh // 8, 8, ww // 8, 8).permute(0, 1, 2, 4, 3, 5)
    dct = _dct_matrix(img.dtype, img.device)
    tables = quantization_tables(quality, img.dtype, img.device).view(1, 3, 1, 1, 8, 8)
    coeffs = dct @ blocks @ dct.T / tables
    coeffs = soft_round(coeffs) if differentiable else torch.round(coeffs)
    blocks = dct.T @ (coeffs * tables) @ dct
    ycc = blocks.permute(0, 1, 2, 4, 3, 5).reshape(b, 3, hh, ww) + 128.0 - offset
    rgb = torch.einsum("ij,bjhw->bihw", to_rgb, ycc)
    if not differentiable:
        rgb = torch.round(torch.clamp(rgb, 0.0, 255.0))
    return (rgb / 255.0)[..., :h, :w]


def median_filter(img: torch.Tensor, kernel: int = 3) -> torch.Tensor:
    pad = kernel // 2
    x = F.pad(img, (pad, pad, pad, pad), mode="reflect")
    windows = x.unfold(2, kernel, 1).unfold(3, kernel, 1)
    return windows.reshape(*windows.shape[:4], kernel * kernel).median(dim=-1).values


def _straight_through(img: torch.Tensor, target: torch.Tensor, differentiable: bool) -> torch.Tensor:
    return img + (target - img).detach() if differentiable else target.detach()


def apply_degradation(img: torch.Tensor, spec: DegradationSpec, rng: torch.Generator | None = None) -> torch.Tensor:
    """Apply one degradation to a ``(B, 3, H, W)`` batch in [0, 1]; the result is clipped to [0, 1].

    Median filtering and Poisson sampling pass gradients straight through when
    ``spec.differentiable`` is set.
    """
    p = spec.params
    kind = spec.kind
    if kind == "none":
        out = img
    elif kind == "gaussian_noise":
        out = img + (p.get("sigma", 0.0) / 255.0) * _gaussian_like(img, rng)
    elif kind == "jpeg":
        out = jpeg_compress(img, p.get("quality", 90.0), differentiable=spec.differentiable)
    elif kind == "gaussian_filter":
        k = int(p.get("kernel", 3))
        s = float(p.get("sigma", 1.0))
        out = TF.gaussian_blur(img, kernel_size=[k, k], sigma=[s, s])
    elif kind == "median_filter":
        out = _straight_through(img, median_filter(img, int(p.get("kernel", 3))), spec.differentiable)
    elif kind == "poisson_noise":
        scale = 255.0 * p.get("alpha", 4.0)
        rate = (img.detach().clamp(0.0, 1.0) * scale).cpu()
        sample = torch.poisson(rate, generator=rng).to(device=img.device, dtype=img.dtype) / scale
        out = _straight_through(img, sample, spec.differentiable)
    elif kind == "hue":
        out = TF.adjust_hue(img.clamp(0.0, 1.0), p.get("delta", 0.0))
    elif kind == "brightness":
        out = TF.adjust_brightness(img, p.get("factor", 1.0))
    elif kind == "contrast":
        out = TF.adjust_contrast(img, p.get("factor", 1.0))
    else:
        raise ConfigurationError(f"Unknown degradation kind: {kind}")
    return out.clamp(0.0, 1.0)


def random_degradation(img: torch.Tensor, preset: str, rng: torch.Generator | None = None,
                       presets: PresetTable | None = None,
                       differentiable: bool = False) -> tuple[torch.Tensor, list[DegradationSpec]]:
    """Sample from ``preset`` and apply. Returns the image and the applied specs, in order."""
    specs = sample_degradation(preset, rng, presets, differentiable)
    out = img
    for spec in specs:
        out = apply_degradation(out, spec, rng)
    return out, specs


class MaskSpec(BaseModel):
    """Random tamper-mask geometry. Pairs are inclusive ``[low, high]`` ranges in pixels unless noted.
    strategy: ``irregular`` brush strokes, ``box`` rectangles, ``mixed`` picks one of the two with
        equal probability, ``shapes`` places rectangles and circles sized for ``target_ratio``.
    max_turns: Direction changes per stroke are drawn from [0, max_turns].
    coverage: Accepted tampered-area fraction; masks are redrawn up to ``max_attempts`` times.
    """
    model_config = ConfigDict(extra="forbid")

    strategy: MaskStrategy = "mixed"
    strokes: tuple[int, int] = (1, 5)
    stroke_width: tuple[int, int] = (20, 50)
    stroke_length: tuple[int, int] = (40, 120)
    max_turns: int = Field(default=4, ge=0)
    boxes: tuple[int, int] = (1, 3)
    box_edge: tuple[int, int] = (50, 150)
    margin: int = Field(default=10, ge=0)
    shapes: tuple[int, int] = (1, 3)
    target_ratio: float = Field(default=0.3, gt=0.0, lt=1.0)
    coverage: tuple[float, float] = (0.1, 0.5)
    max_attempts: int = Field(default=20, ge=1)

    @model_validator(mode="after")
    def _ordered_ranges(self):
        for name in ("strokes", "stroke_width", "stroke_length", "boxes", "box_edge", "shapes", "coverage"):
            low, high = getattr(self, name)
            if low > high or low < 0:
                raise ValueError(f"{name} must be an increasing non-negative range, got {(low, high)}")
        return self


@dataclass(frozen=True)
class Stroke:
    width: int
    points: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class Box:
    top: int
    left: int
    height: int
    width: int


def _integer(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def sample_strokes(spec: MaskSpec, height: int, width: int, rng: np.random.Generator) -> list[Stroke]:
    strokes = []
    for _ in range(_integer(rng, spec.strokes)):
        brush = _integer(rng, spec.stroke_width)
        x, y = int(rng.integers(width)), int(rng.integers(height))
        points = [(x, y)]
        for _ in range(int(rng.integers(0, spec.max_turns + 1)) + 1):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            length = _integer(rng, spec.stroke_length)
            x = int(np.clip(x + length * math.cos(angle), 0, width - 1))
            y = int(np.clip(y + length * math.sin(angle), 0, height - 1))
            points.append((x, y))
        strokes.append(Stroke(width=brush, points=tuple(points)))
    return strokes


def sample_boxes(spec: MaskSpec, height: int, width: int, rng: np.random.Generator) -> list[Box]:
    needed = spec.box_edge[1] + 2 * spec.margin
    if height < needed or width < needed:
        raise ConfigurationError(
            f"Box masks with edges up to {spec.box_edge[1]} and margin {spec.margin} need at least "
            f"{needed}x{needed} pixels, got {height}x{width}"
        )
    boxes = []
    for _ in range(_integer(rng, spec.boxes)):
        bh = _integer(rng, spec.box_edge)
        bw = _integer(rng, spec.box_edge)
        top = int(rng.integers(spec.margin, height - spec.margin - bh + 1))
        left = int(rng.integers(spec.margin, width - spec.margin - bw + 1))
        boxes.append(Box(top=top, left=left, height=bh, width=bw))
    return boxes


def _draw_strokes(strokes: list[Stroke], height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    for stroke in strokes:
        for start, end in zip(stroke.points[:-1], stroke.points[1:]):
            cv2.line(mask, start, end, 1, stroke.width)
        for point in stroke.points:
            cv2.circle(mask, point, stroke.width // 2, 1, -1)
    return mask


def _draw_boxes(boxes: list[Box], height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    for box in boxes:
        mask[box.top:box.top + box.height, box.left:box.left + box.width] = 1
    return mask


def _draw_shapes(spec: MaskSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    count = _integer(rng, spec.shapes)
    area = spec.target_ratio * height * width / count
    for _ in range(count):
        if rng.random() < 0.5:
            aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
            bh = int(min(height, max(1, round(math.sqrt(area / aspect)))))
            bw = int(min(width, max(1, round(area / bh))))
            top = int(rng.integers(0, height - bh + 1))
            left = int(rng.integers(0, width - bw + 1))
            mask[top:top + bh, left:left + bw] = 1
        else:
            radius = max(1, int(round(math.sqrt(area / math.pi))))
            center = (int(rng.integers(width)), int(rng.integers(height)))
            cv2.circle(mask, center, radius, 1, -1)
    return mask


def _coverage_gap(mask: np.ndarray, bounds: tuple[float, float]) -> float:
    ratio = float(mask.mean())
    return max(bounds[0] - ratio, ratio - bounds[1], 0.0)


def generate_mask(spec: MaskSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Binary ``(height, width)`` float32 mask, 1 = tampered.

    Draws are repeated until the coverage falls inside ``spec.coverage`` (for ``shapes``,
    within 0.05 of ``target_ratio``). After ``max_attempts`` the closest draw is kept.
    """
    if spec.strategy in ("box", "mixed"):
        needed = spec.box_edge[1] + 2 * spec.margin
        if height < needed or width < needed:
            raise ConfigurationError(f"Image {height}x{width} is too small for box masks (needs {needed}x{needed})")
    bounds = spec.coverage
    if spec.strategy == "shapes":
        bounds = (max(0.0, spec.target_ratio - 0.05), min(1.0, spec.target_ratio + 0.05))
    best, best_gap = None, math.inf
    for _ in range(spec.max_attempts):
        strategy = spec.strategy
        if strategy == "mixed":
            strategy = "irregular" if rng.random() < 0.5 else "box"
        if strategy == "irregular":
            mask = _draw_strokes(sample_strokes(spec, height, width, rng), height, width)
        elif strategy == "box":
            mask = _draw_boxes(sample_boxes(spec, height, width, rng), height, width)
        else:
            mask = _draw_shapes(spec, height, width, rng)
        gap = _coverage_gap(mask, bounds)
        if gap < best_gap:
            best, best_gap = mask, gap
        if gap == 0.0:
            break
    if best_gap > 0.0:
        logger.debug(f"Mask coverage {best.mean():.3f} outside {bounds} after {spec.max_attempts} attempts")
    return best.astype(np.float32)


def generate_mask_batch(spec: MaskSpec, batch: int, height: int, width: int, rng: np.random.Generator) -> torch.Tensor:
    return torch.from_numpy(np.stack([generate_mask(spec, height, width, rng) for _ in range(batch)]))[:, None]


def splice(img: torch.Tensor, donor: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Replace the masked region of ``img`` with ``donor``."""
    if img.shape != donor.shape:
        raise ShapeError(f"Image {tuple(img.shape)} and donor {tuple(donor.shape)} differ in shape")
    return composite(donor, img, mask)
