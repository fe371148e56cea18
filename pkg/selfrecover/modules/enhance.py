"""Image enhancement of the coarsely recovered original, at unchanged resolution."""

import logging
from typing import Callable, Literal

import torch
import torch.nn as nn

from modules.errors import ConfigurationError

logger = logging.getLogger(__name__)

EnhancerArchitecture = Literal["residual", "identity"]


class ResidualBlock(nn.Module):
    def __init__(self, width: int, res_scale: float = 1.0):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, 1, 1),
        )
        self.scale = res_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x) * self.scale


class ResidualRefiner(nn.Module):
    """Head conv, ``blocks`` residual blocks with a global feature skip, zero-initialized tail.

    The output is ``x + tail(...)``, so an untrained refiner returns its input unchanged.
    """

    def __init__(self, blocks: int = 8, width: int = 32, image_channels: int = 3):
        super().__init__()
        self.head = nn.Conv2d(image_channels, width, 3, 1, 1)
        self.body = nn.Sequential(*[ResidualBlock(width) for _ in range(blocks)])
        self.tail = nn.Conv2d(width, image_channels, 3, 1, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.tail.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = self.head(x)
        return x + self.tail(self.body(features) + features)


class IdentityEnhancer(nn.Module):
    """Stand-in used when enhancement is switched off."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


ENHANCERS: dict[str, Callable[..., nn.Module]] = {
    "residual": ResidualRefiner,
    "identity": lambda **_: IdentityEnhancer(),
}


def build_enhancer(architecture: EnhancerArchitecture = "residual", **kwargs) -> nn.Module:
    if architecture not in ENHANCERS:
        raise ConfigurationError(f"Unknown enhancer architecture: {architecture}. Choose from {sorted(ENHANCERS)}")
    return ENHANCERS[architecture](**kwargs)


def enhance(original_estimate: torch.Tensor, refiner: nn.Module) -> torch.Tensor:
    return refiner(original_estimate)
