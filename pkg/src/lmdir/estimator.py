"""Scikit-learn style facade over the restoration pipeline.

The estimator consumes lists of (H, W, 3) float images in [0, 1] rather than
tabular 2-D arrays, so it follows the BaseEstimator parameter contract
(constructor stores params verbatim, fitted state carries a trailing
underscore) without claiming full check_estimator compatibility.
"""

from __future__ import annotations

import dataclasses
import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .bundles import BundleStore, PriorBuilder
from .errors import InvalidConfig
from .evaluation import psnr
from .images import load_image, save_image
from .network import RestorationNetwork, load_model
from .providers import ProviderConfig, providers_for
from .training import TASK_IDS, TaskSpec, desk_profile, paper_profile, train
from .validation import check_image_list, check_is_fitted, check_paired_lists

PROFILES = ("desk", "paper")


class RestorationEstimator(BaseEstimator):
    """Train on aligned degraded/clean image pairs, restore new images.

    fit(X, y) writes the pairs into a workspace, builds a prior bundle per
    degraded image, and runs the training loop at the chosen profile.
    predict(X) restores each image using its (cached or freshly built)
    bundle. With ``checkpoint`` set, predict works without fitting.

    Parameters
    ----------
    profile : "desk" (minutes on CPU) or "paper" (full-scale schedule).
    task_id : degradation task label used for the fitted pairs.
    provider_config : ProviderConfig, or None for the offline fixture set.
    checkpoint : optional path to a trained model archive to predict from.
    bundle_root : optional directory for prior bundles (defaults to the
        workspace so repeated calls reuse cached priors).
    work_dir : optional workspace directory; a temporary one is created
        per fit when unset.
    seed : controls init, sampling, and degradation synthesis.
    iters, lr, crop, batch : overrides applied on top of the profile.
    """

    def __init__(
        self,
        profile: str = "desk",
        task_id: str = "denoise",
        provider_config: ProviderConfig | None = None,
        checkpoint: str | Path | None = None,
        bundle_root: str | Path | None = None,
        work_dir: str | Path | None = None,
        seed: int = 0,
        iters: int | None = None,
        lr: float | None = None,
        crop: int | None = None,
        batch: int | None = None,
    ):
        self.profile = profile
        self.task_id = task_id
        self.provider_config = provider_config
        self.checkpoint = checkpoint
        self.bundle_root = bundle_root
        self.work_dir = work_dir
        self.seed = seed
        self.iters = iters
        self.lr = lr
        self.crop = crop
        self.batch = batch

    # --- internals -----------------------------------------------------------

    def _providers(self):
        config = self.provider_config or ProviderConfig.fixture()
        return providers_for(config)

    def _workspace(self) -> Path:
        if self.work_dir is not None:
            path = Path(self.work_dir)
            path.mkdir(parents=True, exist_ok=True)
            return path
        if getattr(self, "_tmp_workspace", None) is None:
            self._tmp_workspace = tempfile.TemporaryDirectory(prefix="lmdir-")
        return Path(self._tmp_workspace.name)

    def _store(self) -> BundleStore:
        root = self.bundle_root or self._workspace() / "bundles"
        return BundleStore(root)

    def _builder(self) -> PriorBuilder:
        return PriorBuilder(self._store(), self._providers())

    def _ensure_model(self) -> RestorationNetwork:
        if getattr(self, "network_", None) is None and self.checkpoint is not None:
            self.network_, _, _ = load_model(self.checkpoint)
        check_is_fitted(self)
        return self.network_

    # --- sklearn surface -------------------------------------------------------

    def fit(self, X, y):
        if self.profile not in PROFILES:
            raise InvalidConfig(f"profile must be one of {PROFILES}")
        if self.task_id not in TASK_IDS:
            raise InvalidConfig(f"task_id must be one of {TASK_IDS}")
        degraded, clean = check_paired_lists(X, y)
        workspace = self._workspace()
        data_root = workspace / "data" / self.task_id
        for i, (d, c) in enumerate(zip(degraded, clean)):
            save_image(d, data_root / "degraded" / f"pair{i:04d}.png")
            save_image(c, data_root / "clean" / f"pair{i:04d}.png")
        builder = self._builder()
        for path in sorted((data_root / "degraded").glob("*.png")):
            builder.build(load_image(path), seed=self.seed)
        task = TaskSpec(self.task_id, data_root, paired=True)
        make_profile = desk_profile if self.profile == "desk" else paper_profile
        config, network_config = make_profile(
            [task], builder.store.root, seed=self.seed
        )
        overrides = {
            name: value
            for name, value in (
                ("iters", self.iters),
                ("lr", self.lr),
                ("crop", self.crop),
                ("batch", self.batch),
            )
            if value is not None
        }
        if overrides:
            config = dataclasses.replace(config, **overrides)
        state = train(
            config,
            network_config,
            checkpoint_path=workspace / "model.ckpt",
        )
        self.network_ = state.network
        self.train_config_ = config
        self.loss_history_ = list(state.loss_history)
        self.checkpoint_path_ = workspace / "model.ckpt"
        return self

    def predict(self, X, instruction: str | None = None) -> list[np.ndarray]:
        """Restore each image. ``instruction`` switches every restoration to
        guided mode with that degradation description."""
        images = check_image_list(X)
        network = self._ensure_model()
        builder = self._builder()
        override = (
            self._providers().encode_text(instruction).tokens
            if instruction is not None
            else None
        )
        return [
            network.restore(img, builder.build(img, seed=self.seed), degradation_text=override)
            for img in images
        ]

    def transform(self, X) -> list[np.ndarray]:
        return self.predict(X)

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of the restored X against y."""
        degraded, clean = check_paired_lists(X, y)
        outputs = self.predict(degraded)
        return float(np.mean([psnr(out, ref) for out, ref in zip(outputs, clean)]))
