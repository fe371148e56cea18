"""Invertible coupling blocks and the Haar wavelet pair around the watermarking network.

All tensors are batched ``(B, C, H, W)``. A coupling block maps a pair of
equally shaped tensors ``(x1, x2)`` to ``(y1, y2)``::

    y1 = x1 + phi(x2)
    y2 = x2 * exp(sigmoid(rho(y1))) + eta(y1)

and is inverted without inverting ``phi``, ``rho`` or ``eta``::

    x2 = (y2 - eta(y1)) * exp(-sigmoid(rho(y1)))
    x1 = y1 - phi(x2)
"""

import logging
from typing import Callable, Sequence

import torch
import torch.nn as nn

from modules.errors import ConfigurationError, NumericError, ShapeError

logger = logging.getLogger(__name__)

SubnetFactory = Callable[[int, int], nn.Module]

DEFAULT_HIDDEN_WIDTH = 32


class DenseSubnet(nn.Module):
    """Five 3x3 convolutions with dense connections and Leaky ReLU between them.

    Each hidden layer sees the input concatenated with every earlier hidden output.
    The last layer is zero-initialized, so a freshly built subnet is the zero map.
    """

    def __init__(self, channels_in: int, channels_out: int, width: int = DEFAULT_HIDDEN_WIDTH, negative_slope: float = 0.2):
        super().__init__()
        self.channels_in = channels_in
        self.channels_out = channels_out
        self.negative_slope = negative_slope
        self.hidden = nn.ModuleList(
            nn.Conv2d(channels_in + k * width, width, kernel_size=3, padding=1) for k in range(4)
        )
        self.out = nn.Conv2d(channels_in + 4 * width, channels_out, kernel_size=3, padding=1)
        self.lrelu = nn.LeakyReLU(negative_slope)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for conv in self.hidden:
            nn.init.kaiming_normal_(conv.weight, a=self.negative_slope, nonlinearity="leaky_relu")
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels_in:
            raise ConfigurationError(
                f"Subnet expects (B, {self.channels_in}, H, W) input, got {tuple(x.shape)}"
            )
        features = [x]
        for conv in self.hidden:
            features.append(self.lrelu(conv(torch.cat(features, dim=1))))
        return self.out(torch.cat(features, dim=1))


def dense_subnet_factory(width: int = DEFAULT_HIDDEN_WIDTH) -> SubnetFactory:
    def build(channels_in: int, channels_out: int) -> nn.Module:
        return DenseSubnet(channels_in, channels_out, width=width)
    return build


class CouplingBlock(nn.Module):
    """One invertible block with subnets phi, rho and eta over ``channels`` channels."""

    def __init__(self, channels: int, subnet_factory: SubnetFactory | None = None, index: int = 0):
        super().__init__()
        factory = subnet_factory or dense_subnet_factory()
        self.channels = channels
        self.index = index
        self.phi = factory(channels, channels)
        self.rho = factory(channels, channels)
        self.eta = factory(channels, channels)

    def _log_scale(self, y1: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.rho(y1))

    def _check_pair(self, a: torch.Tensor, b: torch.Tensor) -> None:
        if a.shape != b.shape:
            raise ShapeError(f"Coupling block {self.index} needs equally shaped inputs, got {tuple(a.shape)} and {tuple(b.shape)}")

    def _check_finite(self, *tensors: torch.Tensor) -> None:
        for t in tensors:
            if not torch.isfinite(t).all():
                raise NumericError("Non-finite value in coupling block output", block_index=self.index)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_pair(x1, x2)
        y1 = x1 + self.phi(x2)
        y2 = x2 * torch.exp(self._log_scale(y1)) + self.eta(y1)
        self._check_finite(y1, y2)
        return y1, y2

    def inverse(self, y1: torch.Tensor, y2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check_pair(y1, y2)
        x2 = (y2 - self.eta(y1)) * torch.exp(-self._log_scale(y1))
        x1 = y1 - self.phi(x2)
        self._check_finite(x1, x2)
        return x1, x2


def coupling_forward(x1: torch.Tensor, x2: torch.Tensor, block: CouplingBlock) -> tuple[torch.Tensor, torch.Tensor]:
    return block(x1, x2)


def coupling_inverse(y1: torch.Tensor, y2: torch.Tensor, block: CouplingBlock) -> tuple[torch.Tensor, torch.Tensor]:
    return block.inverse(y1, y2)


def _require_blocks(blocks: Sequence[CouplingBlock]) -> None:
    if len(blocks) == 0:
        raise ConfigurationError("An invertible network needs at least one coupling block")


def inn_forward(x1: torch.Tensor, x2: torch.Tensor, blocks: Sequence[CouplingBlock]) -> tuple[torch.Tensor, torch.Tensor]:
    """Run ``blocks`` in order. Errors are re-raised with the layer index attached."""
    _require_blocks(blocks)
    for layer, block in enumerate(blocks):
        try:
            x1, x2 = block(x1, x2)
        except NumericError as e:
            raise NumericError("Non-finite value in invertible network", block_index=e.block_index, layer_index=layer) from e
    return x1, x2


def inn_inverse(y1: torch.Tensor, y2: torch.Tensor, blocks: Sequence[CouplingBlock]) -> tuple[torch.Tensor, torch.Tensor]:
    """Exact inverse of ``inn_forward``: blocks are inverted in reverse order."""
    _require_blocks(blocks)
    for layer in range(len(blocks) - 1, -1, -1):
        try:
            y1, y2 = blocks[layer].inverse(y1, y2)
        except NumericError as e:
            raise NumericError("Non-finite value in inverse invertible network", block_index=e.block_index, layer_index=layer) from e
    return y1, y2


class InvertibleNetwork(nn.Module):
    """A stack of ``num_blocks`` coupling blocks sharing one channel count."""

    def __init__(self, channels: int, num_blocks: int, subnet_factory: SubnetFactory | None = None):
        super().__init__()
        if num_blocks < 1:
            raise ConfigurationError(f"num_blocks must be positive, got {num_blocks}")
        self.blocks = nn.ModuleList(
            CouplingBlock(channels, subnet_factory, index=i) for i in range(num_blocks)
        )

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return inn_forward(x1, x2, self.blocks)

    def inverse(self, y1: torch.Tensor, y2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return inn_inverse(y1, y2, self.blocks)


def dwt_haar(img: torch.Tensor) -> torch.Tensor:
    """Single-level orthonormal 2D Haar transform.

    ``(B, C, H, W)`` becomes ``(B, 4C, H/2, W/2)``. Channel ``4c + k`` holds band k of
    colour channel c, bands ordered LL, LH, HL, HH. For a 2x2 block [[a, b], [c, d]]::

        LL = (a + b + c + d) / 2    LH = (a + b - c - d) / 2
        HL = (a - b + c - d) / 2    HH = (a - b - c + d) / 2
    """
    if img.dim() != 4:
        raise ShapeError(f"dwt_haar expects (B, C, H, W), got {tuple(img.shape)}")
    b, c, h, w = img.shape
    if h % 2 or w % 2:
        raise ShapeError(f"dwt_haar needs even height and width, got {h}x{w}")
    p00 = img[..., 0::2, 0::2]
    p01 = img[..., 0::2, 1::2]
    p10 = img[..., 1::2, 0::2]
    p11 = img[..., 1::2, 1::2]
    ll = (p00 + p01 + p10 + p11) * 0.5
    lh = (p00 + p01 - p10 - p11) * 0.5
    hl = (p00 - p01 + p10 - p11) * 0.5
    hh = (p00 - p01 - p10 + p11) * 0.5
    return torch.stack((ll, lh, hl, hh), dim=2).reshape(b, 4 * c, h // 2, w // 2)


def iwt_haar(sb: torch.Tensor) -> torch.Tensor:
    """Inverse of ``dwt_haar``."""
    if sb.dim() != 4 or sb.shape[1] % 4:
        raise ShapeError(f"iwt_haar expects (B, 4C, H/2, W/2), got {tuple(sb.shape)}")
    b, cc, h, w = sb.shape
    ll, lh, hl, hh = sb.reshape(b, cc // 4, 4, h, w).unbind(dim=2)
    out = torch.empty((b, cc // 4, 2 * h, 2 * w), dtype=sb.dtype, device=sb.device)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) * 0.5
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) * 0.5
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out
