"""Shared test utilities."""

from __future__ import annotations

import numpy as np
import torch


def randomize_parameters(module: torch.nn.Module, seed: int, std: float = 0.5) -> None:
    """Overwrite every parameter (biases and temperatures included) with
    seeded gaussian values so initialization special-cases are not exercised
    by accident."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            values = torch.randn(p.shape, generator=gen, dtype=torch.float64) * std
            p.copy_(values.to(p.dtype))


def activate_conditioning(module: torch.nn.Module, seed: int, std: float = 0.05) -> None:
    """Give the zero-initialized adapter projections small random values so
    conditioning paths carry signal while the rest keeps its proper init."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if "to_modulation" in name:
                p.copy_(torch.randn(p.shape, generator=gen) * std)


def params_to_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: p.detach().double().numpy().copy()
        for name, p in module.named_parameters()
    }


def rand_features(seed: int, shape: tuple[int, ...], dtype=torch.float64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=dtype)


def rand_image(seed: int, h: int, w: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((h, w, 3), dtype=np.float32)


def clean_image(seed: int, h: int = 96, w: int = 96) -> np.ndarray:
    """Smooth low-frequency field: mid-toned, no high-pass energy, so the
    fixture degradation detectors read it as pristine."""
    rng = np.random.default_rng(seed)
    ys = np.linspace(0.0, 1.0, h)[:, None]
    xs = np.linspace(0.0, 1.0, w)[None, :]
    img = np.empty((h, w, 3), dtype=np.float32)
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(3):
            fx, fy = rng.uniform(0.3, 2.5, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            acc += rng.uniform(0.4, 1.0) * np.cos(2 * np.pi * (fx * xs + fy * ys) + phase)
        span = acc.max() - acc.min()
        img[..., c] = (0.2 + 0.7 * (acc - acc.min()) / span).astype(np.float32)
    return img


def assert_rel_close(actual, expected, rtol=1e-10, atol=1e-12):
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=atol)
