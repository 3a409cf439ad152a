"""Single-stage multi-task training.

Tasks are sampled uniformly, batches are aligned random crops of
degraded/clean pairs, the objective is plain L1. Degradations for tasks
without captured pairs are synthesized once and materialized to disk so
every degraded image has a stable content hash for its prior bundle lookup.
Checkpoints carry optimizer moments and the sampler RNG state, making an
interrupted run bit-resumable.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .bundles import BundleStore, PriorBundle
from .errors import (
    DatasetEmpty,
    InvalidConfig,
    MissingBundle,
    NonFiniteLoss,
    ShapeMismatch,
    UnknownTask,
)
from .images import image_id, load_image, save_image
from .network import (
    NetworkConfig,
    RestorationNetwork,
    load_model,
    save_model,
    to_tensor,
)

TASK_IDS = ("denoise", "derain", "lowlight")

DEFAULT_PARAMS = {
    "denoise": {"sigma": [15, 25, 50]},
    "derain": {"count": 40, "length": 24, "angle_deg": 20.0, "opacity": 0.35, "width": 1.0},
    "lowlight": {"gamma": [1.5, 2.5], "scale": [0.15, 0.35]},
}


@dataclass(frozen=True)
class TaskSpec:
    """One degradation task rooted at a directory holding degraded/ and
    clean/ subfolders (degraded/ is materialized for synthesized tasks)."""

    task_id: str
    dataset_root: Path
    degradation_params: dict = field(default_factory=dict)
    paired: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dataset_root", Path(self.dataset_root))

    def validate(self) -> "TaskSpec":
        if self.task_id not in TASK_IDS:
            raise UnknownTask(
                f"task {self.task_id!r} not one of {', '.join(TASK_IDS)}"
            )
        if not self.dataset_root.exists():
            raise InvalidConfig(f"dataset root does not exist: {self.dataset_root}")
        for sigma in self.params().get("sigma", []):
            if not 0.0 < sigma <= 255.0:
                raise InvalidConfig(f"sigma {sigma} outside (0, 255]")
        return self

    def params(self) -> dict:
        merged = dict(DEFAULT_PARAMS[self.task_id])
        merged.update(self.degradation_params)
        return merged


def tasks_from_root(
    root: str | Path, task_ids: Sequence[str] = TASK_IDS, paired: bool = False
) -> list[TaskSpec]:
    return [TaskSpec(task_id, Path(root) / task_id, paired=paired) for task_id in task_ids]


# --- synthetic degradations ---------------------------------------------------

def add_gaussian_noise(clean: np.ndarray, sigma_255: float, rng) -> np.ndarray:
    """I = clamp(G + n), n iid gaussian with std sigma_255/255."""
    if sigma_255 < 0:
        raise InvalidConfig(f"sigma must be >= 0, got {sigma_255}")
    if sigma_255 == 0:
        return clean.astype(np.float32).copy()
    noise = rng.normal(0.0, sigma_255 / 255.0, size=clean.shape)
    return np.clip(clean + noise, 0.0, 1.0).astype(np.float32)


def synthesize_lowlight(clean: np.ndarray, gamma: float, scale: float) -> np.ndarray:
    """I = scale * G^gamma per channel."""
    if gamma <= 0:
        raise InvalidConfig(f"gamma must be > 0, got {gamma}")
    if not 0.0 < scale <= 1.0:
        raise InvalidConfig(f"scale must be in (0, 1], got {scale}")
    return (scale * np.power(clean, gamma)).astype(np.float32)


def synthesize_rain(clean: np.ndarray, params: dict, rng) -> np.ndarray:
    """Additive bright streaks with a gaussian cross-section, oriented within
    angle_deg of vertical, clamped. count=0 leaves the image untouched."""
    count = int(params.get("count", 40))
    if count == 0:
        return clean.astype(np.float32).copy()
    length = float(params.get("length", 24))
    angle_deg = float(params.get("angle_deg", 20.0))
    opacity = float(params.get("opacity", 0.35))
    width = float(params.get("width", 1.0))
    h, w = clean.shape[:2]
    layer = np.zeros((h, w), dtype=np.float32)
    for _ in range(count):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        theta = math.radians(rng.uniform(-angle_deg, angle_deg))
        streak_len = length * rng.uniform(0.6, 1.0)
        sigma_w = width * rng.uniform(0.7, 1.3)
        alpha = opacity * rng.uniform(0.5, 1.0)
        radius = int(math.ceil(3.0 * sigma_w))
        for t in np.arange(-streak_len / 2.0, streak_len / 2.0, 0.5):
            px = cx + t * math.sin(theta)
            py = cy + t * math.cos(theta)
            x0, x1 = int(px) - radius, int(px) + radius + 1
            y0, y1 = int(py) - radius, int(py) + radius + 1
            if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
                continue
            xs = np.arange(max(x0, 0), min(x1, w))
            ys = np.arange(max(y0, 0), min(y1, h))
            dist2 = (ys[:, None] - py) ** 2 + (xs[None, :] - px) ** 2
            splat = alpha * np.exp(-dist2 / (2.0 * sigma_w**2))
            window = layer[ys[0] : ys[-1] + 1, xs[0] : xs[-1] + 1]
            np.maximum(window, splat, out=window)
    return np.clip(clean + layer[..., None], 0.0, 1.0).astype(np.float32)


def degrade(task_id: str, clean: np.ndarray, params: dict, rng) -> np.ndarray:
    if task_id == "denoise":
        sigma = float(rng.choice(np.asarray(params["sigma"], dtype=np.float64)))
        return add_gaussian_noise(clean, sigma, rng)
    if task_id == "derain":
        return synthesize_rain(clean, params, rng)
    if task_id == "lowlight":
        gamma = rng.uniform(*params["gamma"])
        scale = rng.uniform(*params["scale"])
        return synthesize_lowlight(clean, gamma, scale)
    raise UnknownTask(f"task {task_id!r} not one of {', '.join(TASK_IDS)}")


def materialize_degraded(task: TaskSpec, seed: int = 0, overwrite: bool = False) -> int:
    """Write degraded/ counterparts for a synthesized task's clean images.
    Each image gets its own rng keyed by (task, name, seed) so the dataset is
    reproducible file by file."""
    task.validate()
    clean_dir = task.dataset_root / "clean"
    degraded_dir = task.dataset_root / "degraded"
    names = sorted(p.name for p in clean_dir.glob("*.png"))
    if not names:
        raise DatasetEmpty(f"no clean images under {clean_dir}")
    written = 0
    params = task.params()
    for name in names:
        out_path = degraded_dir / name
        if out_path.exists() and not overwrite:
            continue
        key = hashlib.sha256(f"{task.task_id}:{name}:{seed}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(key[:8], "big"))
        clean = load_image(clean_dir / name)
        save_image(degrade(task.task_id, clean, params, rng), out_path)
        written += 1
    return written


# --- dataset access ------------------------------------------------------------

@dataclass
class SamplePair:
    name: str
    degraded: np.ndarray
    clean: np.ndarray
    image_id: str


class TaskDataset:
    def __init__(self, spec: TaskSpec, pairs: list[SamplePair]):
        self.spec = spec
        self.pairs = pairs

    @classmethod
    def load(cls, spec: TaskSpec) -> "TaskDataset":
        spec.validate()
        clean_dir = spec.dataset_root / "clean"
        degraded_dir = spec.dataset_root / "degraded"
        clean_names = {p.name for p in clean_dir.glob("*.png")}
        degraded_names = {p.name for p in degraded_dir.glob("*.png")}
        names = sorted(clean_names & degraded_names)
        if not names:
            raise DatasetEmpty(
                f"task {spec.task_id}: no degraded/clean pairs under "
                f"{spec.dataset_root} (synthesized tasks need materialize_degraded first)"
            )
        pairs = []
        for name in names:
            degraded = load_image(degraded_dir / name)
            pairs.append(
                SamplePair(
                    name=name,
                    degraded=degraded,
                    clean=load_image(clean_dir / name),
                    image_id=image_id(degraded),
                )
            )
        return cls(spec, pairs)


def _reflect_to(img: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    # np reflect padding cannot exceed the current size, so grow in rounds.
    out = img
    while out.shape[0] < min_h or out.shape[1] < min_w:
        pad_h = min(out.shape[0] - 1, max(0, min_h - out.shape[0]))
        pad_w = min(out.shape[1] - 1, max(0, min_w - out.shape[1]))
        out = np.pad(out, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    return out


def aligned_crop(
    degraded: np.ndarray, clean: np.ndarray, crop: int, rng
) -> tuple[np.ndarray, np.ndarray]:
    """Same source window from both images; reflect-pads first when the
    image is smaller than the crop."""
    if degraded.shape != clean.shape:
        raise ShapeMismatch(
            f"pair shapes differ: {degraded.shape} vs {clean.shape}"
        )
    degraded = _reflect_to(degraded, crop, crop)
    clean = _reflect_to(clean, crop, crop)
    h, w = degraded.shape[:2]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return (
        degraded[top : top + crop, left : left + crop].copy(),
        clean[top : top + crop, left : left + crop].copy(),
    )


@dataclass(frozen=True)
class TrainConfig:
    crop: int = 128
    batch: int = 2
    iters: int = 300000
    lr: float = 2e-4
    seed: int = 0
    tasks: tuple[TaskSpec, ...] = ()
    bundle_root: Path = Path("bundles")

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "bundle_root", Path(self.bundle_root))

    def validate(self, levels: int = 4) -> "TrainConfig":
        mult = 2 ** (levels - 1)
        if self.crop % mult != 0:
            raise InvalidConfig(f"crop {self.crop} not divisible by {mult}")
        if self.batch < 1:
            raise InvalidConfig("batch must be >= 1")
        if self.iters < 1:
            raise InvalidConfig("iters must be >= 1")
        if self.lr <= 0:
            raise InvalidConfig("lr must be > 0")
        if not self.tasks:
            raise InvalidConfig("at least one task is required")
        return self


def desk_profile(
    tasks: Iterable[TaskSpec], bundle_root: str | Path, seed: int = 0
) -> tuple[TrainConfig, NetworkConfig]:
    """Runs on a CPU in minutes; the higher lr compensates for the short
    schedule."""
    config = TrainConfig(
        crop=64, batch=2, iters=500, lr=2e-3, seed=seed,
        tasks=tuple(tasks), bundle_root=Path(bundle_root),
    )
    return config, NetworkConfig.tiny()


def paper_profile(
    tasks: Iterable[TaskSpec], bundle_root: str | Path, seed: int = 0
) -> tuple[TrainConfig, NetworkConfig]:
    config = TrainConfig(
        crop=128, batch=2, iters=300000, lr=2e-4, seed=seed,
        tasks=tuple(tasks), bundle_root=Path(bundle_root),
    )
    return config, NetworkConfig()


class Sampler:
    """Uniform-over-tasks batch sampler with eager bundle verification."""

    def __init__(self, datasets: list[TaskDataset], store: BundleStore):
        if not datasets:
            raise DatasetEmpty("no task datasets given")
        self.datasets = datasets
        self.bundles: dict[str, PriorBundle] = {}
        for ds in datasets:
            for pair in ds.pairs:
                if pair.image_id in self.bundles:
                    continue
                if not store.has(pair.image_id):
                    raise MissingBundle(pair.image_id)
                self.bundles[pair.image_id] = store.load(pair.image_id)

    def sample_batch(
        self, config: TrainConfig, rng
    ) -> list[tuple[np.ndarray, np.ndarray, PriorBundle, str]]:
        batch = []
        for _ in range(config.batch):
            ds = self.datasets[int(rng.integers(0, len(self.datasets)))]
            pair = ds.pairs[int(rng.integers(0, len(ds.pairs)))]
            degraded, clean = aligned_crop(pair.degraded, pair.clean, config.crop, rng)
            if rng.random() < 0.5:
                degraded = degraded[:, ::-1].copy()
                clean = clean[:, ::-1].copy()
            batch.append((degraded, clean, self.bundles[pair.image_id], ds.spec.task_id))
        return batch


def sample_batch(
    sampler: Sampler, config: TrainConfig, rng
) -> list[tuple[np.ndarray, np.ndarray, PriorBundle, str]]:
    return sampler.sample_batch(config, rng)


def l1_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if output.shape != target.shape:
        raise ShapeMismatch(
            f"loss inputs differ in shape: {tuple(output.shape)} vs {tuple(target.shape)}"
        )
    return (output - target).abs().mean()


# --- the loop -------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    network: RestorationNetwork
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    loss_history: deque

    @property
    def running_loss(self) -> float:
        return float(np.mean(self.loss_history)) if self.loss_history else math.inf


def _batch_tensors(batch) -> tuple[torch.Tensor, ...]:
    degraded = torch.stack([to_tensor(item[0])[0] for item in batch])
    clean = torch.stack([to_tensor(item[1])[0] for item in batch])
    e_d = torch.from_numpy(np.stack([item[2].e_d.tokens for item in batch]))
    e_c = torch.from_numpy(np.stack([item[2].e_c.tokens for item in batch]))
    reference = torch.stack([to_tensor(item[2].reference)[0] for item in batch])
    return degraded, clean, e_d, e_c, reference


def train_step(state: TrainState, batch, config: TrainConfig) -> float:
    degraded, clean, e_d, e_c, reference = _batch_tensors(batch)
    state.optimizer.zero_grad(set_to_none=True)
    output = state.network.restore_tensors(degraded, e_d, e_c, reference)
    loss = l1_loss(output, clean)
    value = float(loss.item())
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss became {value} at step {state.step + 1}")
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.loss_history.append(value)
    return value


def save_state(path: str | Path, state: TrainState, config: TrainConfig) -> Path:
    extra = {}
    for i, p in enumerate(state.network.parameters()):
        opt_state = state.optimizer.state.get(p)
        if opt_state:
            extra[f"opt/{i}/exp_avg"] = opt_state["exp_avg"].numpy()
            extra[f"opt/{i}/exp_avg_sq"] = opt_state["exp_avg_sq"].numpy()
            extra[f"opt/{i}/step"] = np.asarray([float(opt_state["step"])], np.float32)
    meta = {
        "step": state.step,
        "lr": config.lr,
        "seed": config.seed,
        "rng_state": state.rng.bit_generator.state,
        "loss_history": list(state.loss_history),
    }
    return save_model(path, state.network, meta=meta, extra_tensors=extra)


def load_state(path: str | Path, config: TrainConfig) -> TrainState:
    network, extra, meta = load_model(path)
    optimizer = torch.optim.Adam(
        network.parameters(), lr=meta.get("lr", config.lr),
        betas=(0.9, 0.999), eps=1e-8,
    )
    template = optimizer.state_dict()
    opt_state = {}
    for i, _ in enumerate(network.parameters()):
        if f"opt/{i}/exp_avg" in extra:
            opt_state[i] = {
                "step": torch.tensor(float(extra[f"opt/{i}/step"][0])),
                "exp_avg": torch.from_numpy(extra[f"opt/{i}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(extra[f"opt/{i}/exp_avg_sq"].copy()),
            }
    if opt_state:
        optimizer.load_state_dict(
            {"state": opt_state, "param_groups": template["param_groups"]}
        )
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(
        step=int(meta["step"]),
        network=network,
        optimizer=optimizer,
        rng=rng,
        loss_history=deque(meta["loss_history"], maxlen=100),
    )


def init_state(config: TrainConfig, network_config: NetworkConfig) -> TrainState:
    network = RestorationNetwork(network_config, seed=config.seed)
    optimizer = torch.optim.Adam(
        network.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8
    )
    return TrainState(
        step=0,
        network=network,
        optimizer=optimizer,
        rng=np.random.default_rng(config.seed),
        loss_history=deque(maxlen=100),
    )


def train(
    config: TrainConfig,
    network_config: NetworkConfig,
    *,
    resume_from: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 100,
    log_path: str | Path | None = None,
    log_every: int = 50,
) -> TrainState:
    """Run (or continue) training to config.iters steps. Checkpoints are
    written atomically, so a NonFiniteLoss abort leaves the last good one on
    disk. The log is JSON lines of {step, loss, lr, task_mix}."""
    config.validate(levels=network_config.levels)
    datasets = [TaskDataset.load(task) for task in config.tasks]
    sampler = Sampler(datasets, BundleStore(config.bundle_root))
    state = load_state(resume_from, config) if resume_from else init_state(
        config, network_config
    )
    log_handle = open(log_path, "a") if log_path else None
    window_tasks: list[str] = []
    try:
        while state.step < config.iters:
            batch = sampler.sample_batch(config, state.rng)
            value = train_step(state, batch, config)
            window_tasks.extend(item[3] for item in batch)
            if log_handle and state.step % log_every == 0:
                mix = {
                    task: window_tasks.count(task) / len(window_tasks)
                    for task in sorted(set(window_tasks))
                }
                record = {
                    "step": state.step,
                    "loss": value,
                    "lr": config.lr,
                    "task_mix": mix,
                }
                log_handle.write(json.dumps(record) + "\n")
                log_handle.flush()
                window_tasks.clear()
            if checkpoint_path and state.step % checkpoint_every == 0:
                save_state(checkpoint_path, state, config)
        if checkpoint_path:
            save_state(checkpoint_path, state, config)
    finally:
        if log_handle:
            log_handle.close()
    return state
