"""Tamper localization and compositing of the final recovered image."""

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from modules.errors import ShapeError

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-6
DEFAULT_THRESHOLD = 0.5


class DoubleConv(nn.Module):
    """(Conv2d -> BN -> ReLU) x 2"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.double_conv = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.double_conv(x)


class Down(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.maxpool_conv = nn.Sequential(nn.MaxPool2d(2), DoubleConv(in_channels, out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.maxpool_conv(x)


class Up(nn.Module):
    """Transposed-conv upscaling, skip concatenation, double conv."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, in_channels // 2, kernel_size=2, stride=2)
        self.conv = DoubleConv(in_channels // 2 + out_channels, out_channels)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        x1 = self.up(x1)
        diff_y = x2.size(2) - x1.size(2)
        diff_x = x2.size(3) - x1.size(3)
        x1 = F.pad(x1, [diff_x // 2, diff_x - diff_x // 2, diff_y // 2, diff_y - diff_y // 2])
        return self.conv(torch.cat([x2, x1], dim=1))


class TamperLocalizer(nn.Module):
    """U-Net over the attacked image concatenated with the extracted scrambled secret.

    ``levels`` down/up steps starting at ``base`` channels, doubling per level,
    with a sigmoid head producing a ``(B, 1, H, W)`` soft mask.
    """

    def __init__(self, levels: int = 3, base: int = 16, in_channels: int = 6):
        super().__init__()
        widths = [base * 2 ** k for k in range(levels + 1)]
        self.inc = DoubleConv(in_channels, widths[0])
        self.downs = nn.ModuleList(Down(widths[k], widths[k + 1]) for k in range(levels))
        self.ups = nn.ModuleList(Up(widths[k + 1], widths[k]) for k in reversed(range(levels)))
        self.outc = nn.Conv2d(widths[0], 1, kernel_size=1)

    def forward(self, attacked: torch.Tensor, shuffled_secret_estimate: torch.Tensor) -> torch.Tensor:
        if attacked.shape != shuffled_secret_estimate.shape:
            raise ShapeError(
                f"Attacked image {tuple(attacked.shape)} and extracted secret "
                f"{tuple(shuffled_secret_estimate.shape)} differ in shape"
            )
        x = self.inc(torch.cat([attacked, shuffled_secret_estimate], dim=1))
        skips = [x]
        for down in self.downs:
            x = down(x)
            skips.append(x)
        skips.pop()
        for up in self.ups:
            x = up(x, skips.pop())
        return torch.sigmoid(self.outc(x))


def predict_mask(attacked: torch.Tensor, shuffled_secret_estimate: torch.Tensor, localizer: TamperLocalizer) -> torch.Tensor:
    return localizer(attacked, shuffled_secret_estimate)


def binarize(mask: torch.Tensor, threshold: float = DEFAULT_THRESHOLD) -> torch.Tensor:
    """Indicator ``mask >= threshold`` in the mask's dtype."""
    return (mask >= threshold).to(mask.dtype)


def composite(enhanced: torch.Tensor, attacked: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``mask * enhanced + (1 - mask) * attacked``, mask broadcast over channels.

    Evaluated with ``torch.lerp`` so that a 0/1 mask copies source pixels bit-exactly
    and identical sources come back unchanged for any mask.
    """
    if enhanced.shape != attacked.shape:
        raise ShapeError(f"Cannot composite {tuple(enhanced.shape)} with {tuple(attacked.shape)}")
    if mask.dim() == 2:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask.unsqueeze(1)
    if mask.shape[-2:] != attacked.shape[-2:] or mask.shape[1] not in (1, attacked.shape[1]):
        raise ShapeError(f"Mask {tuple(mask.shape)} does not fit images {tuple(attacked.shape)}")
    return torch.lerp(attacked, enhanced, mask.to(attacked.dtype).expand_as(attacked))


def bce_loss(soft: torch.Tensor, truth: torch.Tensor, eps: float = BCE_EPSILON) -> torch.Tensor:
    """Mean pixel-wise binary cross-entropy with predictions clamped to ``[eps, 1 - eps]``."""
    if soft.shape != truth.shape:
        raise ShapeError(f"Mask shapes differ: {tuple(soft.shape)} vs {tuple(truth.shape)}")
    p = soft.clamp(eps, 1.0 - eps)
    return -(truth * torch.log(p) + (1.0 - truth) * torch.log1p(-p)).mean()
