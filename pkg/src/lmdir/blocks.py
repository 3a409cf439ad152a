"""Conditioned transformer primitives for the restoration network.

All modules operate on (B, C, H, W) feature maps. Three conditioned blocks are
built from the shared primitives:

- ``DegradationAwareBlock``: channel self-attention + gated feed-forward,
  modulated per channel (scale/shift/gate) by a degradation-token adapter.
- ``ContentAwareBlock``: channel self-attention, then cross-attention from
  spatial positions onto projected content-text tokens, then a gated
  feed-forward stage without a residual (deliberate asymmetry).
- ``ReferenceAwareBlock``: channel self-attention, then a channel split where
  one half is fused with reference features convolutionally and the other
  half cross-attends to them, then a gated feed-forward stage with residual.

Every module is a pure function of (inputs, parameters): no buffers, no
global state, safe for concurrent forward passes over shared parameters.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import OddChannelCount, ShapeMismatch


def expect_features(x: torch.Tensor, channels: int, name: str = "features") -> None:
    if x.dim() != 4:
        raise ShapeMismatch(f"{name} must be 4-d (B, C, H, W), got {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeMismatch(
            f"{name} has {x.shape[1]} channels, module expects {channels}"
        )


def expect_tokens(t: torch.Tensor, dim: int, name: str = "tokens") -> None:
    if t.dim() != 3:
        raise ShapeMismatch(f"{name} must be 3-d (B, N, C), got {tuple(t.shape)}")
    if t.shape[2] != dim:
        raise ShapeMismatch(f"{name} has width {t.shape[2]}, module expects {dim}")


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis at each spatial position."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        xn = (x - mu) / torch.sqrt(var + self.eps)
        return xn * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class TransposedSelfAttention(nn.Module):
    """Multi-head attention across channels; spatial positions are the
    feature axis, so cost grows linearly with resolution."""

    def __init__(self, dim: int, heads: int, bias: bool = False):
        super().__init__()
        if dim % heads != 0:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, kernel_size=1, bias=bias)
        self.qkv_dwconv = nn.Conv2d(
            dim * 3, dim * 3, kernel_size=3, padding=1, groups=dim * 3, bias=bias
        )
        self.project_out = nn.Conv2d(dim, dim, kernel_size=1, bias=bias)

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, heads, C/heads, C/heads) attention matrix."""
        q, k, _ = self._qkv(x)
        return self._attn(q, k)

    def _qkv(self, x: torch.Tensor):
        q, k, v = self.qkv_dwconv(self.qkv(x)).chunk(3, dim=1)
        q = rearrange(q, "b (head c) h w -> b head c (h w)", head=self.heads)
        k = rearrange(k, "b (head c) h w -> b head c (h w)", head=self.heads)
        v = rearrange(v, "b (head c) h w -> b head c (h w)", head=self.heads)
        return q, k, v

    def _attn(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        return ((q @ k.transpose(-2, -1)) * self.temperature).softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expect_features(x, self.dim)
        b, c, h, w = x.shape
        q, k, v = self._qkv(x)
        out = self._attn(q, k) @ v
        out = rearrange(out, "b head c (h w) -> b (head c) h w", h=h, w=w)
        return self.project_out(out)


class GatedFeedForward(nn.Module):
    """Feed-forward with a depthwise 3x3 and an elementwise gelu gate."""

    def __init__(self, dim: int, expansion: float = 2.66, bias: bool = False):
        super().__init__()
        self.dim = dim
        hidden = int(dim * expansion)
        self.project_in = nn.Conv2d(dim, hidden * 2, kernel_size=1, bias=bias)
        self.dwconv = nn.Conv2d(
            hidden * 2, hidden * 2, kernel_size=3, padding=1, groups=hidden * 2, bias=bias
        )
        self.project_out = nn.Conv2d(hidden, dim, kernel_size=1, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expect_features(x, self.dim)
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class ModulationParams(NamedTuple):
    """Per-channel conditioning vectors, each of shape (B, C)."""

    gate_attn: torch.Tensor
    gate_ffn: torch.Tensor
    scale_attn: torch.Tensor
    shift_attn: torch.Tensor
    scale_ffn: torch.Tensor
    shift_ffn: torch.Tensor


class DegradationAdapter(nn.Module):
    """Maps degradation tokens to per-channel scale/shift/gate vectors.

    The final projection is zero-initialized (weight and bias) and gates and
    scales are re-parameterized as ``1 + raw``, so a freshly initialized
    adapter conditions the host block to exactly its unconditioned form.
    """

    def __init__(self, token_dim: int, dim: int):
        super().__init__()
        self.token_dim = token_dim
        self.dim = dim
        self.adapt = nn.Linear(token_dim, token_dim)
        self.to_modulation = nn.Linear(token_dim, 6 * dim)
        nn.init.zeros_(self.to_modulation.weight)
        nn.init.zeros_(self.to_modulation.bias)

    def forward(self, tokens: torch.Tensor) -> ModulationParams:
        expect_tokens(tokens, self.token_dim, "degradation tokens")
        pooled = tokens.mean(dim=1)
        hidden = F.silu(self.adapt(pooled))
        raw = self.to_modulation(hidden)
        g_attn, g_ffn, c_attn, b_attn, c_ffn, b_ffn = raw.chunk(6, dim=-1)
        return ModulationParams(
            gate_attn=1.0 + g_attn,
            gate_ffn=1.0 + g_ffn,
            scale_attn=1.0 + c_attn,
            shift_attn=b_attn,
            scale_ffn=1.0 + c_ffn,
            shift_ffn=b_ffn,
        )


def _per_channel(v: torch.Tensor) -> torch.Tensor:
    return v[:, :, None, None]


class DegradationAwareBlock(nn.Module):
    """Transformer block whose attention and feed-forward stages are scaled,
    shifted, and gated per channel by the degradation tokens."""

    def __init__(
        self,
        dim: int,
        heads: int,
        token_dim: int,
        expansion: float = 2.66,
        bias: bool = False,
    ):
        super().__init__()
        self.dim = dim
        self.adapter = DegradationAdapter(token_dim, dim)
        self.norm_attn = ChannelLayerNorm(dim)
        self.attn = TransposedSelfAttention(dim, heads, bias=bias)
        self.norm_ffn = ChannelLayerNorm(dim)
        self.ffn = GatedFeedForward(dim, expansion, bias=bias)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        expect_features(x, self.dim)
        m = self.adapter(tokens)
        h = self.attn(_per_channel(m.scale_attn) * self.norm_attn(x) + _per_channel(m.shift_attn))
        x = _per_channel(m.gate_attn) * h + x
        h = self.ffn(_per_channel(m.scale_ffn) * self.norm_ffn(x) + _per_channel(m.shift_ffn))
        return _per_channel(m.gate_ffn) * h + x


class TokenCrossAttention(nn.Module):
    """Each spatial position attends over a fixed set of token rows."""

    def __init__(self, dim: int, bias: bool = False):
        super().__init__()
        self.dim = dim
        self.to_q = nn.Linear(dim, dim, bias=bias)
        self.to_k = nn.Linear(dim, dim, bias=bias)
        self.to_v = nn.Linear(dim, dim, bias=bias)

    def attention_map(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, H*W, N) attention matrix."""
        q = self.to_q(rearrange(x, "b c h w -> b (h w) c"))
        k = self.to_k(tokens)
        return torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.dim), dim=-1)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        expect_features(x, self.dim)
        expect_tokens(tokens, self.dim, "token matrix")
        sim = self.attention_map(x, tokens)
        out = sim @ self.to_v(tokens)
        return rearrange(out, "b (h w) c -> b c h w", h=x.shape[2], w=x.shape[3])


class ContentAwareBlock(nn.Module):
    """Transformer block that injects content-text tokens by cross-attention.

    The final feed-forward stage carries no residual: at zero weights the
    block output collapses to zero rather than passing the input through.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        text_dim: int,
        expansion: float = 2.66,
        bias: bool = False,
    ):
        super().__init__()
        self.dim = dim
        self.text_dim = text_dim
        self.norm_attn = ChannelLayerNorm(dim)
        self.attn = TransposedSelfAttention(dim, heads, bias=bias)
        self.project_text = nn.Sequential(
            nn.Linear(text_dim, dim), nn.GELU(), nn.Linear(dim, dim)
        )
        self.cross = TokenCrossAttention(dim, bias=bias)
        self.norm_ffn = ChannelLayerNorm(dim)
        self.ffn = GatedFeedForward(dim, expansion, bias=bias)

    def forward(self, x: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        expect_features(x, self.dim)
        expect_tokens(text, self.text_dim, "content embedding")
        x = x + self.attn(self.norm_attn(x))
        x = x + self.cross(x, self.project_text(text))
        return self.ffn(self.norm_ffn(x))


class ReferenceProjector(nn.Module):
    """Resize a reference image to a feature resolution and lift it to C
    channels with a 3x3 convolution (reflect padding, so constant images
    stay constant through the conv)."""

    def __init__(self, dim: int, bias: bool = True):
        super().__init__()
        self.dim = dim
        self.proj = nn.Conv2d(3, dim, kernel_size=3, padding=1, padding_mode="reflect", bias=bias)

    def forward(self, ref: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        expect_features(ref, 3, "reference image")
        r = resize_bilinear(ref, size)
        return self.proj(r)


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class LocalReferenceAttention(nn.Module):
    """Convolutional fusion of features with reference features: both pass
    through shared conv-relu-conv branches, a similarity map gates how much
    of the reference branch is added back."""

    def __init__(self, dim: int, softmax_axis: str = "channel", bias: bool = False):
        super().__init__()
        if softmax_axis not in ("channel", "spatial"):
            raise ShapeMismatch(f"unknown softmax axis {softmax_axis!r}")
        self.dim = dim
        self.softmax_axis = softmax_axis
        self.mix_in = nn.Conv2d(dim, dim, kernel_size=3, padding=1, bias=bias)
        self.mix_out = nn.Conv2d(dim, dim, kernel_size=3, padding=1, bias=bias)
        self.to_logits = nn.Conv2d(dim, dim, kernel_size=1, bias=bias)

    def _branch(self, x: torch.Tensor) -> torch.Tensor:
        return self.mix_out(F.relu(self.mix_in(x)))

    def _similarity(self, fj: torch.Tensor, fk: torch.Tensor) -> torch.Tensor:
        logits = self.to_logits(fj + fk)
        if self.softmax_axis == "channel":
            return torch.softmax(logits, dim=1)
        b, c, h, w = logits.shape
        return torch.softmax(logits.reshape(b, c, h * w), dim=-1).reshape(b, c, h, w)

    def similarity(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        return self._similarity(self._branch(x), self._branch(ref))

    def forward(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        expect_features(x, self.dim)
        expect_features(ref, self.dim, "reference features")
        if x.shape[-2:] != ref.shape[-2:]:
            raise ShapeMismatch(
                f"reference spatial size {tuple(ref.shape[-2:])} "
                f"does not match features {tuple(x.shape[-2:])}"
            )
        fj = self._branch(x)
        fk = self._branch(ref)
        return fj + self._similarity(fj, fk) * fk


class GlobalReferenceAttention(nn.Module):
    """Channel cross-attention: queries from the features, keys and values
    from the reference features. With identical inputs and matching weights
    it degenerates to plain channel self-attention."""

    def __init__(self, dim: int, heads: int, bias: bool = False):
        super().__init__()
        if dim % heads != 0:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.q = nn.Conv2d(dim, dim, kernel_size=1, bias=bias)
        self.q_dwconv = nn.Conv2d(dim, dim, kernel_size=3, padding=1, groups=dim, bias=bias)
        self.kv = nn.Conv2d(dim, dim * 2, kernel_size=1, bias=bias)
        self.kv_dwconv = nn.Conv2d(
            dim * 2, dim * 2, kernel_size=3, padding=1, groups=dim * 2, bias=bias
        )
        self.project_out = nn.Conv2d(dim, dim, kernel_size=1, bias=bias)

    def attention_map(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, heads, C/heads, C/heads) attention matrix."""
        q = self.q_dwconv(self.q(x))
        k, _ = self.kv_dwconv(self.kv(ref)).chunk(2, dim=1)
        q = rearrange(q, "b (head c) h w -> b head c (h w)", head=self.heads)
        k = rearrange(k, "b (head c) h w -> b head c (h w)", head=self.heads)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        return ((q @ k.transpose(-2, -1)) * self.temperature).softmax(dim=-1)

    def forward(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        expect_features(x, self.dim)
        expect_features(ref, self.dim, "reference features")
        if x.shape[-2:] != ref.shape[-2:]:
            raise ShapeMismatch(
                f"reference spatial size {tuple(ref.shape[-2:])} "
                f"does not match features {tuple(x.shape[-2:])}"
            )
        b, c, h, w = x.shape
        q = self.q_dwconv(self.q(x))
        k, v = self.kv_dwconv(self.kv(ref)).chunk(2, dim=1)
        q = rearrange(q, "b (head c) h w -> b head c (h w)", head=self.heads)
        k = rearrange(k, "b (head c) h w -> b head c (h w)", head=self.heads)
        v = rearrange(v, "b (head c) h w -> b head c (h w)", head=self.heads)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = ((q @ k.transpose(-2, -1)) * self.temperature).softmax(dim=-1)
        out = rearrange(attn @ v, "b head c (h w) -> b (head c) h w", h=h, w=w)
        return self.project_out(out)


class ReferenceAwareBlock(nn.Module):
    """Transformer block that fuses a synthesized reference image into the
    features: half the channels through local convolutional aggregation,
    half through global channel cross-attention."""

    def __init__(
        self,
        dim: int,
        heads: int,
        expansion: float = 2.66,
        softmax_axis: str = "channel",
        bias: bool = False,
    ):
        super().__init__()
        if dim % 2 != 0:
            raise OddChannelCount(f"channel split needs an even dim, got {dim}")
        half = dim // 2
        if half % heads != 0:
            raise ShapeMismatch(f"half dim {half} not divisible by heads {heads}")
        self.dim = dim
        self.project_ref = ReferenceProjector(dim)
        self.norm_attn = ChannelLayerNorm(dim)
        self.attn = TransposedSelfAttention(dim, heads, bias=bias)
        self.local = LocalReferenceAttention(half, softmax_axis, bias=bias)
        self.glob = GlobalReferenceAttention(half, heads, bias=bias)
        self.fuse = nn.Conv2d(dim, dim, kernel_size=1, bias=bias)
        self.norm_ffn = ChannelLayerNorm(dim)
        self.ffn = GatedFeedForward(dim, expansion, bias=bias)

    def forward(self, x: torch.Tensor, ref_image: torch.Tensor) -> torch.Tensor:
        expect_features(x, self.dim)
        ref = self.project_ref(ref_image, x.shape[-2:])
        x = x + self.attn(self.norm_attn(x))
        x_local, x_glob = x.chunk(2, dim=1)
        ref_local, ref_glob = ref.chunk(2, dim=1)
        fused = self.fuse(
            torch.cat([self.local(x_local, ref_local), self.glob(x_glob, ref_glob)], dim=1)
        )
        x = fused + x
        return self.ffn(self.norm_ffn(x)) + x
