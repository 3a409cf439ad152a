"""U-shaped conditioned restoration network and its checkpoint format.

Encoder levels stack degradation-aware blocks, the bottleneck stacks
content-aware blocks, decoder levels stack reference-aware blocks. Inputs of
arbitrary size are reflect-padded to a multiple of 2^(levels-1) and cropped
back after the forward pass. Checkpoints are a single zip archive holding
canonical-JSON config, named raw float32 tensors with per-tensor hashes, and
a format version.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    ChannelLayerNorm,
    ContentAwareBlock,
    DegradationAdapter,
    DegradationAwareBlock,
    ReferenceAwareBlock,
    TransposedSelfAttention,
    GlobalReferenceAttention,
)
from .errors import (
    CheckpointCorrupt,
    CheckpointMismatch,
    InvalidConfig,
    NonFiniteActivation,
    ShapeMismatch,
)
from .prompt_encoder import PromptEncoder

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters; decoder block counts are listed deepest
    level first."""

    levels: int = 4
    channels: tuple[int, ...] = (48, 96, 192, 384)
    encoder_blocks: tuple[int, ...] = (4, 6, 6, 8)
    bottleneck_blocks: int = 8
    decoder_blocks: tuple[int, ...] = (6, 6, 4)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    prompt_dim: int = 256
    prompt_tokens: int = 8
    prompt_heads: int = 4
    text_dim: int = 768
    gfn_ratio: float = 2.66
    global_residual: bool = True
    lra_softmax_axis: str = "channel"
    image_encoder_channels: tuple[int, ...] = (32, 64, 128, 256)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "encoder_blocks", tuple(self.encoder_blocks))
        object.__setattr__(self, "decoder_blocks", tuple(self.decoder_blocks))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(
            self, "image_encoder_channels", tuple(self.image_encoder_channels)
        )

    @classmethod
    def tiny(cls) -> "NetworkConfig":
        """Desk-scale profile: small enough to train on a CPU in minutes."""
        return cls(
            levels=4,
            channels=(16, 32, 64, 128),
            encoder_blocks=(1, 1, 1, 1),
            bottleneck_blocks=2,
            decoder_blocks=(1, 1, 1),
            heads=(1, 2, 4, 8),
            prompt_dim=64,
            prompt_tokens=4,
            prompt_heads=4,
            image_encoder_channels=(8, 16, 24, 32),
        )

    def validate(self) -> "NetworkConfig":
        if self.levels < 2:
            raise InvalidConfig(f"levels must be >= 2, got {self.levels}")
        for name, want in (
            ("channels", self.levels),
            ("encoder_blocks", self.levels),
            ("heads", self.levels),
            ("decoder_blocks", self.levels - 1),
        ):
            got = len(getattr(self, name))
            if got != want:
                raise InvalidConfig(f"{name} must have {want} entries, got {got}")
        if any(c2 <= c1 for c1, c2 in zip(self.channels, self.channels[1:])):
            raise InvalidConfig(f"channels must be strictly increasing: {self.channels}")
        for level in range(self.levels - 1):
            c, h = self.channels[level], self.heads[level]
            if c % 2 != 0:
                raise InvalidConfig(f"decoder level {level} has odd channel count {c}")
            if (c // 2) % h != 0:
                raise InvalidConfig(
                    f"decoder level {level}: half of {c} channels not divisible by {h} heads"
                )
        for level in range(self.levels):
            if self.channels[level] % self.heads[level] != 0:
                raise InvalidConfig(
                    f"level {level}: {self.channels[level]} channels not divisible "
                    f"by {self.heads[level]} heads"
                )
        if any(b < 1 for b in self.encoder_blocks) or any(
            b < 1 for b in self.decoder_blocks
        ):
            raise InvalidConfig("block counts must be >= 1")
        if self.bottleneck_blocks < 1:
            raise InvalidConfig("bottleneck_blocks must be >= 1")
        if self.prompt_dim % self.prompt_heads != 0:
            raise InvalidConfig(
                f"prompt_dim {self.prompt_dim} not divisible by {self.prompt_heads} heads"
            )
        if self.gfn_ratio <= 0:
            raise InvalidConfig("gfn_ratio must be positive")
        if self.lra_softmax_axis not in ("channel", "spatial"):
            raise InvalidConfig(f"unknown lra_softmax_axis {self.lra_softmax_axis!r}")
        if len(self.image_encoder_channels) != 4:
            raise InvalidConfig("image_encoder_channels must have 4 entries")
        return self

    def canonical_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkConfig":
        return cls(**d)


def to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) float array in [0,1] -> (1, 3, H, W) tensor."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"expected (H, W, 3) image, got {img.shape}")
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))
    return torch.from_numpy(chw).to(dtype).unsqueeze(0)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) tensor -> (H, W, 3) float32 array clipped to [0,1]."""
    if t.dim() == 4:
        t = t.squeeze(0)
    arr = t.detach().cpu().float().numpy().transpose(1, 2, 0)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def _check_finite(x: torch.Tensor, stage: str, level: int | None = None) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteActivation(stage, level)


class Downsample(nn.Module):
    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.conv = nn.Conv2d(dim_in, dim_out, kernel_size=3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.conv = nn.Conv2d(dim_in, 4 * dim_out, kernel_size=3, padding=1)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.shuffle(self.conv(x))


class RestorationNetwork(nn.Module):
    """Assembled conditioned U-net; `forward` consumes already-refined
    degradation tokens, `restore` runs the full pipeline from a prior
    bundle."""

    def __init__(self, config: NetworkConfig, seed: int | None = None):
        super().__init__()
        config.validate()
        self.config = config
        ch = config.channels
        self.prompt = PromptEncoder(
            config.prompt_dim,
            tokens=config.prompt_tokens,
            text_dim=config.text_dim,
            heads=config.prompt_heads,
            image_channels=config.image_encoder_channels,
        )
        self.shallow = nn.Conv2d(3, ch[0], kernel_size=3, padding=1)
        self.encoder = nn.ModuleList(
            nn.ModuleList(
                DegradationAwareBlock(
                    ch[level],
                    config.heads[level],
                    token_dim=config.prompt_dim,
                    expansion=config.gfn_ratio,
                )
                for _ in range(config.encoder_blocks[level])
            )
            for level in range(config.levels)
        )
        self.downs = nn.ModuleList(
            Downsample(ch[level], ch[level + 1]) for level in range(config.levels - 1)
        )
        self.bottleneck = nn.ModuleList(
            ContentAwareBlock(
                ch[-1], config.heads[-1], text_dim=config.text_dim, expansion=config.gfn_ratio
            )
            for _ in range(config.bottleneck_blocks)
        )
        decoder_levels = list(range(config.levels - 2, -1, -1))
        self.ups = nn.ModuleList(
            Upsample(ch[level + 1], ch[level]) for level in decoder_levels
        )
        self.skip_fuse = nn.ModuleList(
            nn.Conv2d(2 * ch[level], ch[level], kernel_size=1) for level in decoder_levels
        )
        self.decoder = nn.ModuleList(
            nn.ModuleList(
                ReferenceAwareBlock(
                    ch[level],
                    config.heads[level],
                    expansion=config.gfn_ratio,
                    softmax_axis=config.lra_softmax_axis,
                )
                for _ in range(config.decoder_blocks[i])
            )
            for i, level in enumerate(decoder_levels)
        )
        self.output = nn.Conv2d(ch[0], 3, kernel_size=3, padding=1)
        if seed is not None:
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Deterministic init: fan-in-scaled uniform weights, zero biases,
        unit norms and temperatures, zeroed adapter output projections."""
        gen = torch.Generator().manual_seed(seed)
        for _, module in sorted(self.named_modules(), key=lambda kv: kv[0]):
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight.shape[1] * (
                    module.weight[0, 0].numel() if module.weight.dim() == 4 else 1
                )
                bound = 1.0 / math.sqrt(fan_in)
                nn.init.uniform_(module.weight, -bound, bound, generator=gen)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, (ChannelLayerNorm, nn.LayerNorm)):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
            elif isinstance(module, (TransposedSelfAttention, GlobalReferenceAttention)):
                nn.init.ones_(module.temperature)
        nn.init.normal_(
            self.prompt.refiner.queries, std=self.config.prompt_dim**-0.5, generator=gen
        )
        for module in self.modules():
            if isinstance(module, DegradationAdapter):
                nn.init.zeros_(module.to_modulation.weight)
                nn.init.zeros_(module.to_modulation.bias)

    def _pad(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        mult = 2 ** (self.config.levels - 1)
        h, w = x.shape[-2:]
        pad_h = (mult - h % mult) % mult
        pad_w = (mult - w % mult) % mult
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        return x, h, w

    def forward(
        self,
        image: torch.Tensor,
        degradation_tokens: torch.Tensor,
        content_text: torch.Tensor,
        reference: torch.Tensor,
    ) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeMismatch(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        padded, h, w = self._pad(image)
        x = self.shallow(padded)
        skips = []
        for level in range(self.config.levels):
            for block in self.encoder[level]:
                x = block(x, degradation_tokens)
            _check_finite(x, "encoder", level)
            if level < self.config.levels - 1:
                skips.append(x)
                x = self.downs[level](x)
        for block in self.bottleneck:
            x = block(x, content_text)
        _check_finite(x, "bottleneck")
        for i, level in enumerate(range(self.config.levels - 2, -1, -1)):
            x = self.ups[i](x)
            x = self.skip_fuse[i](torch.cat([x, skips[level]], dim=1))
            for block in self.decoder[i]:
                x = block(x, reference)
            _check_finite(x, "decoder", level)
        delta = self.output(x)
        _check_finite(delta, "output")
        y = padded + delta if self.config.global_residual else delta
        return torch.clamp(y, 0.0, 1.0)[..., :h, :w]

    def restore_tensors(
        self,
        image: torch.Tensor,
        degradation_text: torch.Tensor,
        content_text: torch.Tensor,
        reference: torch.Tensor,
    ) -> torch.Tensor:
        """Differentiable full pipeline on batched tensors."""
        tokens = self.prompt(image, degradation_text)
        return self.forward(image, tokens, content_text, reference)

    @torch.no_grad()
    def restore(self, image: np.ndarray, bundle, degradation_text=None) -> np.ndarray:
        """Restore one image from its prior bundle. ``degradation_text``
        overrides the bundle's degradation embedding (guided mode)."""
        was_training = self.training
        self.eval()
        try:
            img_t = to_tensor(image)
            e_d = degradation_text if degradation_text is not None else bundle.e_d.tokens
            e_d_t = torch.from_numpy(np.ascontiguousarray(e_d)).float().unsqueeze(0)
            e_c_t = torch.from_numpy(np.ascontiguousarray(bundle.e_c.tokens)).float().unsqueeze(0)
            ref_t = to_tensor(bundle.reference)
            out = self.restore_tensors(img_t, e_d_t, e_c_t, ref_t)
            return from_tensor(out)
        finally:
            self.train(was_training)


def _tensor_entry(name_index: int, array: np.ndarray) -> tuple[str, dict, bytes]:
    payload = np.ascontiguousarray(array.astype(np.float32)).tobytes()
    file = f"tensors/{name_index:05d}.f32"
    entry = {
        "file": file,
        "dtype": "f32le",
        "shape": list(array.shape),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    return file, entry, payload


def write_archive(
    path: str | Path,
    config: NetworkConfig,
    tensors: dict[str, np.ndarray],
    meta: dict[str, Any],
) -> Path:
    """Atomically write a checkpoint archive (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    manifest: dict[str, dict] = {}
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for i, (name, array) in enumerate(sorted(tensors.items())):
                file, entry, payload = _tensor_entry(i, array)
                manifest[name] = entry
                zf.writestr(file, payload)
            zf.writestr("tensors.json", json.dumps(manifest, sort_keys=True, indent=1))
            zf.writestr("config.json", config.canonical_json())
            zf.writestr(
                "meta.json",
                json.dumps(
                    {"format_version": CHECKPOINT_FORMAT_VERSION, **meta}, sort_keys=True
                ),
            )
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def read_archive(path: str | Path) -> tuple[NetworkConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointCorrupt(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            config = NetworkConfig.from_dict(json.loads(zf.read("config.json")))
            manifest = json.loads(zf.read("tensors.json"))
            tensors: dict[str, np.ndarray] = {}
            for name, entry in manifest.items():
                payload = zf.read(entry["file"])
                if hashlib.sha256(payload).hexdigest() != entry["sha256"]:
                    raise CheckpointCorrupt(f"tensor {name!r} failed hash verification")
                arr = np.frombuffer(payload, dtype="<f4").reshape(entry["shape"])
                tensors[name] = arr.copy()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"unreadable checkpoint {path}: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatch(
            f"checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return config, tensors, meta


def save_model(
    path: str | Path,
    network: RestorationNetwork,
    meta: dict[str, Any] | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> Path:
    tensors = {
        f"model/{name}": p.detach().cpu().numpy()
        for name, p in network.state_dict().items()
    }
    if extra_tensors:
        tensors.update(extra_tensors)
    return write_archive(path, network.config, tensors, dict(meta or {}))


def load_model(
    path: str | Path, expect_config: NetworkConfig | None = None
) -> tuple[RestorationNetwork, dict[str, np.ndarray], dict]:
    """Returns (network, non-model tensors, meta). Raises on config mismatch
    rather than adapting silently."""
    config, tensors, meta = read_archive(path)
    if expect_config is not None and expect_config.canonical_json() != config.canonical_json():
        raise CheckpointMismatch(
            "checkpoint config does not match the requested network config"
        )
    network = RestorationNetwork(config)
    state = {
        name[len("model/"):]: torch.from_numpy(arr.copy())
        for name, arr in tensors.items()
        if name.startswith("model/")
    }
    missing = set(network.state_dict()) - set(state)
    if missing:
        raise CheckpointCorrupt(f"checkpoint missing tensors: {sorted(missing)[:4]}...")
    network.load_state_dict(state)
    rest = {k: v for k, v in tensors.items() if not k.startswith("model/")}
    return network, rest, meta


def model_id(path: str | Path) -> str:
    """Identity of a checkpoint file: sha256 of its bytes (first 16 hex)."""
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return digest[:16]
