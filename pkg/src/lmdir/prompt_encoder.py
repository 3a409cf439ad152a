"""Query-based degradation prompt encoder.

A small residual CNN summarizes the degraded image into one global feature
vector; a set of learnable query tokens self-attends, then cross-attends to
the degradation text tokens and to that image feature, and a feed-forward
stage merges both into the refined degradation tokens that condition the
restoration network.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ImageTooSmall, ShapeMismatch
from .blocks import expect_tokens

MIN_IMAGE_SIZE = 16


class ResidualConvBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, kernel_size=3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(dim, dim, kernel_size=3, padding=1, padding_mode="reflect")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.relu(self.conv1(x)))


class DegradedImageEncoder(nn.Module):
    """Four residual blocks with stride-2 downsampling between them, global
    average pooling, and a linear head to the prompt width."""

    def __init__(self, out_dim: int, channels: tuple[int, ...] = (32, 64, 128, 256)):
        super().__init__()
        if len(channels) != 4:
            raise ShapeMismatch(f"image encoder needs 4 channel counts, got {channels}")
        self.out_dim = out_dim
        self.channels = tuple(channels)
        self.stem = nn.Conv2d(3, channels[0], kernel_size=3, padding=1, padding_mode="reflect")
        self.blocks = nn.ModuleList(ResidualConvBlock(c) for c in channels)
        self.downs = nn.ModuleList(
            nn.Conv2d(
                channels[i], channels[i + 1], kernel_size=3, stride=2, padding=1,
                padding_mode="reflect",
            )
            for i in range(3)
        )
        self.head = nn.Linear(channels[-1], out_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeMismatch(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        if min(image.shape[-2:]) < MIN_IMAGE_SIZE:
            raise ImageTooSmall(
                f"image {tuple(image.shape[-2:])} below minimum {MIN_IMAGE_SIZE}"
            )
        x = self.stem(image)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < 3:
                x = self.downs[i](x)
        pooled = x.mean(dim=(2, 3))
        return self.head(pooled)


class QuerySelfAttention(nn.Module):
    """Multi-head self-attention over the query tokens, no residual."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        d = self.dim // self.heads

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(b, n, self.heads, d).transpose(1, 2)

        q, k, v = split(self.to_q(x)), split(self.to_k(x)), split(self.to_v(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, self.dim)
        return self.to_out(out)


def _cross_attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Single-head softmax(QK^T / sqrt(d)) V over (B, N, d) tensors."""
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
    return attn @ v


class DegradationRefiner(nn.Module):
    """Learnable query tokens cross-attend to text tokens and the pooled
    image feature; the two attention outputs are summed and refined."""

    def __init__(
        self,
        dim: int,
        tokens: int = 8,
        text_dim: int = 768,
        heads: int = 4,
        ffn_ratio: int = 4,
    ):
        super().__init__()
        self.dim = dim
        self.tokens = tokens
        self.text_dim = text_dim
        self.queries = nn.Parameter(torch.randn(tokens, dim) * dim**-0.5)
        self.self_attn = QuerySelfAttention(dim, heads)
        self.to_query = nn.Linear(dim, dim, bias=False)
        self.project_text = nn.Linear(text_dim, dim, bias=False)
        self.text_key = nn.Linear(dim, dim, bias=False)
        self.text_value = nn.Linear(dim, dim, bias=False)
        self.image_key = nn.Linear(dim, dim, bias=False)
        self.image_value = nn.Linear(dim, dim, bias=False)
        self.norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_ratio * dim), nn.GELU(), nn.Linear(ffn_ratio * dim, dim)
        )

    def forward(self, text: torch.Tensor, image_feature: torch.Tensor) -> torch.Tensor:
        expect_tokens(text, self.text_dim, "degradation embedding")
        if image_feature.dim() != 2 or image_feature.shape[1] != self.dim:
            raise ShapeMismatch(
                f"image feature must be (B, {self.dim}), got {tuple(image_feature.shape)}"
            )
        b = text.shape[0]
        queries = self.self_attn(self.queries.unsqueeze(0).expand(b, -1, -1))
        q = self.to_query(queries)

        text = self.project_text(text)
        z_text = _cross_attend(q, self.text_key(text), self.text_value(text))

        image_token = image_feature.unsqueeze(1)
        z_image = _cross_attend(q, self.image_key(image_token), self.image_value(image_token))

        z = z_text + z_image
        return z + self.ffn(self.norm(z))


class PromptEncoder(nn.Module):
    """Full path from (degraded image, degradation text embedding) to the
    refined degradation tokens."""

    def __init__(
        self,
        dim: int,
        tokens: int = 8,
        text_dim: int = 768,
        heads: int = 4,
        image_channels: tuple[int, ...] = (32, 64, 128, 256),
    ):
        super().__init__()
        self.image_encoder = DegradedImageEncoder(dim, image_channels)
        self.refiner = DegradationRefiner(dim, tokens=tokens, text_dim=text_dim, heads=heads)

    def forward(self, image: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        return self.refiner(text, self.image_encoder(image))
