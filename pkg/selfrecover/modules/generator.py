"""Watermark generator: a small invertible network in pixel space whose subnets are transformer encoders.

The generator maps the original image to the secret image, and training pushes
the scrambled secret towards low total variation. Its approximate inverse maps
an extracted secret back to an estimate of the original image.
"""

import logging
from typing import Literal

import torch
import torch.nn as nn

from modules.core_inn import InvertibleNetwork, SubnetFactory
from modules.errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)


def sinusoidal_position_encoding(height: int, width: int, dim: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sine/cosine encoding, ``(height * width, dim)``; half the channels encode rows, half columns."""
    if dim % 4:
        raise ConfigurationError(f"Position encoding dimension must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    rows = torch.arange(height, dtype=torch.float64)[:, None] * omega[None, :]
    cols = torch.arange(width, dtype=torch.float64)[:, None] * omega[None, :]
    pe_rows = torch.cat((rows.sin(), rows.cos()), dim=1)
    pe_cols = torch.cat((cols.sin(), cols.cos()), dim=1)
    pe = torch.cat((
        pe_rows[:, None, :].expand(height, width, 2 * quarter),
        pe_cols[None, :, :].expand(height, width, 2 * quarter),
    ), dim=-1)
    return pe.reshape(height * width, dim).to(device=device, dtype=dtype)


class TransformerSubnet(nn.Module):
    """Patch embedding, transformer encoder, then two transposed convolutions back to full resolution.

    Tokens are non-overlapping ``patch x patch`` patches embedded to ``embed_dim``.
    The upsamplers have strides 2 and ``patch / 2``. The last one is
    zero-initialized, so a new subnet is the zero map.
    """

    def __init__(self, channels_in: int, channels_out: int, patch: int = 4, embed_dim: int = 192,
                 heads: int = 6, depth: int = 1, mlp_ratio: int = 4, hidden: int = 64):
        super().__init__()
        if patch < 2 or patch % 2:
            raise ConfigurationError(f"Transformer patch size must be an even number >= 2, got {patch}")
        if embed_dim % heads:
            raise ConfigurationError(f"Embedding dimension {embed_dim} is not divisible by {heads} heads")
        self.patch = patch
        self.embed_dim = embed_dim
        self.patch_embed = nn.Conv2d(channels_in, embed_dim, kernel_size=patch, stride=patch)
        layer = nn.TransformerEncoderLayer(
            d_model=embed_dim, nhead=heads, dim_feedforward=embed_dim * mlp_ratio,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)
        self.up1 = nn.ConvTranspose2d(embed_dim, hidden, kernel_size=2, stride=2)
        self.act = nn.GELU()
        self.up2 = nn.ConvTranspose2d(hidden, channels_out, kernel_size=patch // 2, stride=patch // 2)
        nn.init.zeros_(self.up2.weight)
        nn.init.zeros_(self.up2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        if h % self.patch or w % self.patch:
            raise ShapeError(f"Image size {h}x{w} is not divisible by transformer patch {self.patch}")
        tokens = self.patch_embed(x)
        gh, gw = tokens.shape[-2:]
        tokens = tokens.flatten(2).transpose(1, 2)
        tokens = tokens + sinusoidal_position_encoding(gh, gw, self.embed_dim, tokens.device, tokens.dtype)
        tokens = self.encoder(tokens)
        grid = tokens.transpose(1, 2).reshape(b, self.embed_dim, gh, gw)
        return self.up2(self.act(self.up1(grid)))


def transformer_subnet_factory(patch: int = 4, embed_dim: int = 192, heads: int = 6, depth: int = 1) -> SubnetFactory:
    def build(channels_in: int, channels_out: int) -> nn.Module:
        return TransformerSubnet(channels_in, channels_out, patch=patch, embed_dim=embed_dim, heads=heads, depth=depth)
    return build


class WatermarkGenerator(nn.Module):
    """Three coupling blocks over RGB images, both branches fed with the same image."""

    def __init__(self, num_blocks: int = 3, patch: int = 4, embed_dim: int = 192, heads: int = 6,
                 depth: int = 1, image_channels: int = 3):
        super().__init__()
        factory = transformer_subnet_factory(patch=patch, embed_dim=embed_dim, heads=heads, depth=depth)
        self.inn = InvertibleNetwork(image_channels, num_blocks, factory)

    def forward(self, original: torch.Tensor) -> torch.Tensor:
        secret, _ = self.inn(original, original)
        return secret

    def inverse(self, secret_estimate: torch.Tensor) -> torch.Tensor:
        """Approximate inverse: the true second branch is unknown, so the estimate fills both."""
        original_estimate, _ = self.inn.inverse(secret_estimate, secret_estimate)
        return original_estimate


def wg_forward(original: torch.Tensor, generator: WatermarkGenerator) -> torch.Tensor:
    return generator(original)


def wg_inverse(secret_estimate: torch.Tensor, generator: WatermarkGenerator) -> torch.Tensor:
    return generator.inverse(secret_estimate)


def tv_loss(img: torch.Tensor, reduction: Literal["sum", "mean"] = "sum") -> torch.Tensor:
    """Total variation over the ``(H-1) x (W-1)`` stencil.

    Each stencil pixel contributes its squared difference to the right-hand and
    to the lower neighbour, summed over channels. ``sum`` returns that sum per image,
    averaged over the batch. ``mean`` divides by the number of stencil terms instead.
    Images with fewer than two rows or columns have zero variation.
    """
    while img.dim() < 4:
        img = img.unsqueeze(0)
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        logger.warning(f"TV loss of a {h}x{w} image is defined as 0")
        return img.sum() * 0.0
    core = img[..., : h - 1, : w - 1]
    horizontal = (core - img[..., : h - 1, 1:]) ** 2
    vertical = (core - img[..., 1:, : w - 1]) ** 2
    terms = horizontal + vertical
    if reduction == "sum":
        return terms.flatten(1).sum(dim=1).mean()
    if reduction == "mean":
        return terms.mean()
    raise ConfigurationError(f"Unknown TV reduction: {reduction}")
