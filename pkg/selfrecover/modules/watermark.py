"""Invertible watermarking: embeds the scrambled secret into the cover in the Haar domain.

The first output branch becomes the container image. The second branch, the
noise tensor, is dropped after embedding. Extraction replaces it with an estimate
computed from the attacked image.
"""

import logging
from typing import Literal

import torch
import torch.nn as nn

from modules.core_inn import DEFAULT_HIDDEN_WIDTH, InvertibleNetwork, dense_subnet_factory, dwt_haar, iwt_haar
from modules.errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

NoiseMode = Literal["zero", "learned"]


class NoiseEstimator(nn.Module):
    """Predicts the discarded noise tensor from the subbands of the attacked image.

    ``zero`` mode always answers with zeros. ``learned`` mode is a four-layer 3x3
    convolutional net with Leaky ReLU and a zero-initialized last layer, so it
    starts out equal to ``zero`` mode.
    """

    def __init__(self, mode: NoiseMode = "learned", image_channels: int = 3, width: int = DEFAULT_HIDDEN_WIDTH):
        super().__init__()
        if mode not in ("zero", "learned"):
            raise ConfigurationError(f"Unknown noise estimator mode: {mode}")
        self.mode = mode
        self.net = None
        if mode == "learned":
            channels = 4 * image_channels
            self.net = nn.Sequential(
                nn.Conv2d(channels, width, 3, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(width, width, 3, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(width, width, 3, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(width, channels, 3, padding=1),
            )
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, attacked: torch.Tensor) -> torch.Tensor:
        subbands = dwt_haar(attacked)
        if self.net is None:
            return torch.zeros_like(subbands)
        return self.net(subbands)


def estimate_noise(attacked: torch.Tensor, estimator: NoiseEstimator) -> torch.Tensor:
    return estimator(attacked)


class InvertibleWatermarker(nn.Module):
    """Coupling-block network over the 12-channel subbands of cover and secret."""

    def __init__(self, num_blocks: int = 12, width: int = DEFAULT_HIDDEN_WIDTH, image_channels: int = 3):
        super().__init__()
        self.image_channels = image_channels
        self.inn = InvertibleNetwork(4 * image_channels, num_blocks, dense_subnet_factory(width))

    def _check_image(self, img: torch.Tensor, name: str) -> None:
        if img.dim() != 4 or img.shape[1] != self.image_channels:
            raise ShapeError(f"{name} must be (B, {self.image_channels}, H, W), got {tuple(img.shape)}")

    def embed(self, cover: torch.Tensor, shuffled_secret: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the unclipped container image and the noise tensor."""
        self._check_image(cover, "cover")
        if cover.shape != shuffled_secret.shape:
            raise ShapeError(f"Cover {tuple(cover.shape)} and secret {tuple(shuffled_secret.shape)} differ in shape")
        branch1, noise = self.inn(dwt_haar(cover), dwt_haar(shuffled_secret))
        return iwt_haar(branch1), noise

    def extract(self, attacked: torch.Tensor, noise_estimate: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the estimated cover and the estimated scrambled secret."""
        self._check_image(attacked, "attacked image")
        subbands = dwt_haar(attacked)
        if noise_estimate.shape != subbands.shape:
            raise ShapeError(f"Noise estimate {tuple(noise_estimate.shape)} does not match subbands {tuple(subbands.shape)}")
        cover_sb, secret_sb = self.inn.inverse(subbands, noise_estimate)
        return iwt_haar(cover_sb), iwt_haar(secret_sb)

    def forward(self, cover: torch.Tensor, shuffled_secret: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.embed(cover, shuffled_secret)
