"""Keyed patch shuffling and the frequency analysis of shuffled images.

The permutation comes from a SplitMix64 generator driving a Fisher-Yates
shuffle, so a ``ShuffleKey`` gives the same permutation on every platform and
can be stored with a checkpoint.
"""

import logging
from functools import lru_cache
from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, Field

from modules.errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1

ScrambleMode = Literal["shuffle", "shift", "none"]


class ShuffleKey(BaseModel):
    """Key of the patch permutation.
    seed: Unsigned 64-bit seed of the permutation generator.
    patch: Edge length in pixels of the square patches that move together.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(default=0, ge=0, le=MASK64)
    patch: int = Field(default=1, gt=0)


class SplitMix64:
    """SplitMix64 generator (Steele, Lea and Flood), 64-bit unsigned outputs."""

    GAMMA = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def __call__(self) -> int:
        self.state = (self.state + self.GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def fisher_yates(n: int, seed: int) -> list[int]:
    """Permutation of ``range(n)``, walking i from n-1 down to 1 and swapping with ``rng() % (i + 1)``."""
    rng = SplitMix64(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng() % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@lru_cache(maxsize=64)
def _cached_permutation(seed: int, patch: int, height: int, width: int) -> tuple[int, ...]:
    return tuple(fisher_yates((height // patch) * (width // patch), seed))


def build_permutation(key: ShuffleKey, height: int, width: int) -> torch.Tensor:
    """Permutation over the ``(height / patch) * (width / patch)`` patches, row-major patch order."""
    if height % key.patch or width % key.patch:
        raise ConfigurationError(f"Patch size {key.patch} does not divide image size {height}x{width}")
    return torch.tensor(_cached_permutation(key.seed, key.patch, height, width), dtype=torch.long)


def inverse_permutation(perm: torch.Tensor) -> torch.Tensor:
    inv = torch.empty_like(perm)
    inv[perm] = torch.arange(perm.numel(), dtype=perm.dtype, device=perm.device)
    return inv


def _to_patches(img: torch.Tensor, patch: int) -> torch.Tensor:
    b, c, h, w = img.shape
    x = img.reshape(b, c, h // patch, patch, w // patch, patch).permute(0, 1, 2, 4, 3, 5)
    return x.reshape(b, c, (h // patch) * (w // patch), patch, patch)


def _from_patches(patches: torch.Tensor, height: int, width: int) -> torch.Tensor:
    b, c, _, patch, _ = patches.shape
    x = patches.reshape(b, c, height // patch, width // patch, patch, patch).permute(0, 1, 2, 4, 3, 5)
    return x.reshape(b, c, height, width)


def _check_key(img: torch.Tensor, key: ShuffleKey) -> None:
    if img.dim() != 4:
        raise ShapeError(f"Expected (B, C, H, W) image, got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h % key.patch or w % key.patch:
        raise ShapeError(f"Shuffle key with patch {key.patch} does not fit a {h}x{w} image")


def shuffle(img: torch.Tensor, key: ShuffleKey) -> torch.Tensor:
    """Move patch ``perm[k]`` to slot k. All channels move together."""
    _check_key(img, key)
    h, w = img.shape[-2:]
    perm = build_permutation(key, h, w).to(img.device)
    return _from_patches(_to_patches(img, key.patch).index_select(2, perm), h, w)


def unshuffle(img: torch.Tensor, key: ShuffleKey) -> torch.Tensor:
    _check_key(img, key)
    h, w = img.shape[-2:]
    inv = inverse_permutation(build_permutation(key, h, w)).to(img.device)
    return _from_patches(_to_patches(img, key.patch).index_select(2, inv), h, w)


def shift(img: torch.Tensor) -> torch.Tensor:
    """Cyclic roll by half the image in both directions."""
    h, w = img.shape[-2:]
    return torch.roll(img, shifts=(h // 2, w // 2), dims=(-2, -1))


def unshift(img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[-2:]
    return torch.roll(img, shifts=(-(h // 2), -(w // 2)), dims=(-2, -1))


class Scrambler:
    """Spatial scrambling of the secret before embedding, chosen by ``mode``.

    ``shuffle`` uses the keyed patch permutation, ``shift`` a half-image roll
    and ``none`` leaves the secret in place.
    """

    def __init__(self, mode: ScrambleMode, key: ShuffleKey):
        if mode not in ("shuffle", "shift", "none"):
            raise ConfigurationError(f"Unknown scramble mode: {mode}")
        self.mode = mode
        self.key = key

    def scramble(self, img: torch.Tensor) -> torch.Tensor:
        if self.mode == "shuffle":
            return shuffle(img, self.key)
        if self.mode == "shift":
            return shift(img)
        return img

    def unscramble(self, img: torch.Tensor) -> torch.Tensor:
        if self.mode == "shuffle":
            return unshuffle(img, self.key)
        if self.mode == "shift":
            return unshift(img)
        return img


def _grayscale(img: torch.Tensor) -> torch.Tensor:
    """Channel mean as a float64 ``(H, W)`` plane. Accepts (H, W), (C, H, W) or (1, C, H, W)."""
    x = img.detach().to(torch.float64)
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ShapeError(f"Spectrum analysis takes one image at a time, got batch of {x.shape[0]}")
        x = x[0]
    if x.dim() == 3:
        x = x.mean(dim=0)
    if x.dim() != 2:
        raise ShapeError(f"Cannot read {tuple(img.shape)} as an image")
    return x


def fft_magnitude_spectrum(img: torch.Tensor, log: bool = False) -> torch.Tensor:
    """Zero-frequency-centred magnitude of the 2D FFT of the grayscale image.

    With ``log=True`` returns ``log(1 + magnitude)`` for display.
    """
    magnitude = torch.fft.fftshift(torch.fft.fft2(_grayscale(img))).abs()
    return torch.log1p(magnitude) if log else magnitude


def high_frequency_ratio(img: torch.Tensor, cutoff: float = 0.5) -> float:
    """Share of non-DC spectral energy outside the disk of radius ``cutoff`` times Nyquist.

    Frequencies are normalized per axis so that Nyquist is 1. An image with no
    energy outside DC gives 0.
    """
    if not 0.0 < cutoff < 1.0:
        raise ConfigurationError(f"cutoff must lie in (0, 1), got {cutoff}")
    gray = _grayscale(img)
    h, w = gray.shape
    power = torch.fft.fft2(gray).abs() ** 2
    fy = torch.fft.fftfreq(h, dtype=torch.float64) / 0.5
    fx = torch.fft.fftfreq(w, dtype=torch.float64) / 0.5
    radius = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    total = power.sum()
    ac_energy = total - power[0, 0]
    if ac_energy <= 1e-20 * total or ac_energy <= 0:
        return 0.0
    return float(power[radius > cutoff].sum() / ac_energy)
