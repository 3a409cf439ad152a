"""Degradation synthesis, dataset plumbing, sampling statistics, the L1
objective, and checkpoint/resume determinism of the training loop."""

import json
import math

import numpy as np
import pytest
import torch

from helpers import clean_image

from lmdir.bundles import BundleStore, PriorBuilder
from lmdir.errors import (
    DatasetEmpty,
    InvalidConfig,
    MissingBundle,
    NonFiniteLoss,
    ShapeMismatch,
    UnknownTask,
)
from lmdir.images import image_id, load_image, save_image
from lmdir.network import NetworkConfig
from lmdir.providers import (
    FixtureDiffusion,
    FixtureImageEmbedder,
    FixtureMllm,
    FixtureTextEncoder,
    ProviderSet,
)
from lmdir.training import (
    Sampler,
    TaskDataset,
    TaskSpec,
    TrainConfig,
    add_gaussian_noise,
    aligned_crop,
    degrade,
    init_state,
    l1_loss,
    load_state,
    materialize_degraded,
    sample_batch,
    save_state,
    synthesize_lowlight,
    synthesize_rain,
    tasks_from_root,
    train,
    train_step,
)


class TestNoise:
    def test_sigma_zero_is_identity(self):
        g = clean_image(0)
        out = add_gaussian_noise(g, 0, np.random.default_rng(0))
        assert np.array_equal(out, g)

    def test_noise_std_matches_sigma(self):
        g = np.full((256, 256, 3), 0.5, dtype=np.float32)
        out = add_gaussian_noise(g, 25, np.random.default_rng(1))
        measured = float((out.astype(np.float64) - 0.5).std())
        want = 25 / 255
        assert abs(measured - want) < 0.05 * want

    def test_huge_sigma_stays_in_range(self):
        out = add_gaussian_noise(clean_image(2), 500, np.random.default_rng(3))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_negative_sigma_rejected(self):
        with pytest.raises(InvalidConfig):
            add_gaussian_noise(clean_image(4), -1, np.random.default_rng(0))


class TestLowlight:
    def test_gamma_one_scale_one_is_identity(self):
        g = clean_image(5)
        assert np.allclose(synthesize_lowlight(g, 1.0, 1.0), g, atol=1e-7)

    def test_analytic_constant_case(self):
        g = np.full((8, 8, 3), 0.8, dtype=np.float32)
        out = synthesize_lowlight(g, gamma=1.0, scale=0.25)
        assert np.allclose(out, 0.2, atol=1e-7)

    def test_parameter_validation(self):
        g = clean_image(6)
        with pytest.raises(InvalidConfig):
            synthesize_lowlight(g, 0.0, 0.5)
        with pytest.raises(InvalidConfig):
            synthesize_lowlight(g, 1.0, 1.5)


class TestRain:
    def test_zero_count_is_identity(self):
        g = clean_image(7)
        out = synthesize_rain(g, {"count": 0}, np.random.default_rng(8))
        assert np.array_equal(out, g)

    def test_streaks_only_brighten(self):
        g = clean_image(9)
        out = synthesize_rain(g, {"count": 20}, np.random.default_rng(10))
        assert (out >= g - 1e-7).all()
        assert (out > g + 0.05).any()
        assert out.max() <= 1.0

    def test_unknown_task_rejected(self):
        with pytest.raises(UnknownTask):
            degrade("dehaze", clean_image(11), {}, np.random.default_rng(0))


class TestL1:
    def test_zero_at_equality(self):
        y = torch.rand(2, 3, 8, 8)
        assert l1_loss(y, y).item() == 0.0

    def test_constant_offset(self):
        y = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(0)) * 0.5
        assert abs(l1_loss(y + 0.1, y).item() - 0.1) < 1e-6

    def test_matches_brute_force(self):
        gen = torch.Generator().manual_seed(1)
        y = torch.rand(2, 3, 5, 4, generator=gen, dtype=torch.float64)
        g = torch.rand(2, 3, 5, 4, generator=gen, dtype=torch.float64)
        total = 0.0
        for value in (y - g).reshape(-1).tolist():
            total += abs(value)
        assert abs(l1_loss(y, g).item() - total / y.numel()) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            l1_loss(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 5))

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(2)
        y = torch.rand(6, generator=gen, dtype=torch.float64)
        g = torch.rand(6, generator=gen, dtype=torch.float64)
        # keep residuals away from the kink at zero
        y = torch.where((y - g).abs() < 1e-3, y + 0.01, y).requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda t: l1_loss(t, g), (y,), eps=1e-6, atol=1e-8
        )


class TestCrop:
    def test_alignment_preserved(self):
        base = clean_image(12, 50, 70)
        degraded, clean = base, (1.0 - base).astype(np.float32)
        rng = np.random.default_rng(13)
        for _ in range(20):
            d, c = aligned_crop(degraded, clean, 32, rng)
            assert d.shape == (32, 32, 3)
            assert np.allclose(d + c, 1.0, atol=1e-6)

    def test_crop_larger_than_image_pads(self):
        small = clean_image(14, 10, 12)
        d, c = aligned_crop(small, small, 64, np.random.default_rng(15))
        assert d.shape == (64, 64, 3)
        assert np.array_equal(d, c)

    def test_pair_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            aligned_crop(
                clean_image(0, 16, 16), clean_image(0, 16, 17), 8,
                np.random.default_rng(0),
            )


def make_corpus(root, per_task=2, size=72, materialize_seed=0):
    """Clean images + materialized degradations for all three tasks."""
    tasks = tasks_from_root(root)
    for t, task in enumerate(tasks):
        clean_dir = task.dataset_root / "clean"
        clean_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_task):
            save_image(clean_image(100 * t + i, size, size), clean_dir / f"im{i:02d}.png")
        materialize_degraded(task, seed=materialize_seed)
    return tasks


def build_all_bundles(tasks, bundle_root):
    providers = ProviderSet(
        FixtureMllm(), FixtureTextEncoder(), FixtureDiffusion(), FixtureImageEmbedder()
    )
    builder = PriorBuilder(BundleStore(bundle_root), providers)
    for task in tasks:
        for path in sorted((task.dataset_root / "degraded").glob("*.png")):
            builder.build(load_image(path), seed=0)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    bundle_root = tmp_path_factory.mktemp("bundles")
    tasks = make_corpus(root)
    build_all_bundles(tasks, bundle_root)
    return tasks, bundle_root


class TestMaterialize:
    def test_writes_once_then_skips(self, tmp_path):
        task = TaskSpec("denoise", tmp_path / "denoise")
        clean_dir = task.dataset_root / "clean"
        clean_dir.mkdir(parents=True)
        save_image(clean_image(50, 48, 48), clean_dir / "a.png")
        assert materialize_degraded(task, seed=1) == 1
        assert materialize_degraded(task, seed=1) == 0

    def test_reproducible_files(self, tmp_path):
        for name in ("one", "two"):
            task = TaskSpec("derain", tmp_path / name / "derain")
            clean_dir = task.dataset_root / "clean"
            clean_dir.mkdir(parents=True)
            save_image(clean_image(51, 48, 48), clean_dir / "a.png")
            materialize_degraded(task, seed=3)
        a = (tmp_path / "one" / "derain" / "degraded" / "a.png").read_bytes()
        b = (tmp_path / "two" / "derain" / "degraded" / "a.png").read_bytes()
        assert a == b

    def test_empty_clean_dir_rejected(self, tmp_path):
        task = TaskSpec("lowlight", tmp_path / "lowlight")
        (task.dataset_root / "clean").mkdir(parents=True)
        with pytest.raises(DatasetEmpty):
            materialize_degraded(task)


class TestSampler:
    def test_missing_bundle_names_the_image(self, corpus, tmp_path):
        tasks, _ = corpus
        datasets = [TaskDataset.load(t) for t in tasks]
        empty_store = BundleStore(tmp_path / "empty")
        with pytest.raises(MissingBundle) as err:
            Sampler(datasets, empty_store)
        assert datasets[0].pairs[0].image_id in str(err.value)

    def test_task_sampling_is_uniform(self, corpus):
        tasks, bundle_root = corpus
        datasets = [TaskDataset.load(t) for t in tasks]
        sampler = Sampler(datasets, BundleStore(bundle_root))
        config = TrainConfig(crop=32, batch=1, tasks=tuple(tasks), bundle_root=bundle_root)
        rng = np.random.default_rng(42)
        counts = {t.task_id: 0 for t in tasks}
        for _ in range(30000):
            batch = sample_batch(sampler, config, rng)
            counts[batch[0][3]] += 1
        assert sum(counts.values()) == 30000
        for task_id, count in counts.items():
            assert 9600 <= count <= 10400, (task_id, count)

    def test_same_seed_same_sequence(self, corpus):
        tasks, bundle_root = corpus
        datasets = [TaskDataset.load(t) for t in tasks]
        sampler = Sampler(datasets, BundleStore(bundle_root))
        config = TrainConfig(crop=32, batch=2, tasks=tuple(tasks), bundle_root=bundle_root)
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(7)
            runs.append([sample_batch(sampler, config, rng) for _ in range(5)])
        for batch_a, batch_b in zip(*runs):
            for (da, ca, ba, ta), (db, cb, bb, tb) in zip(batch_a, batch_b):
                assert np.array_equal(da, db) and np.array_equal(ca, cb)
                assert ba.image_id == bb.image_id and ta == tb

    def test_batch_shape_and_bundle_linkage(self, corpus):
        tasks, bundle_root = corpus
        datasets = [TaskDataset.load(t) for t in tasks]
        store = BundleStore(bundle_root)
        sampler = Sampler(datasets, store)
        config = TrainConfig(crop=32, batch=3, tasks=tuple(tasks), bundle_root=bundle_root)
        batch = sample_batch(sampler, config, np.random.default_rng(0))
        assert len(batch) == 3
        for degraded, clean, bundle, task_id in batch:
            assert degraded.shape == (32, 32, 3) and clean.shape == (32, 32, 3)
            assert store.has(bundle.image_id)
            assert task_id in {"denoise", "derain", "lowlight"}

    def test_empty_dataset_rejected(self, tmp_path):
        task = TaskSpec("denoise", tmp_path / "denoise")
        (task.dataset_root / "clean").mkdir(parents=True)
        (task.dataset_root / "degraded").mkdir(parents=True)
        with pytest.raises(DatasetEmpty):
            TaskDataset.load(task)


class TestConfigValidation:
    def test_crop_must_match_downsampling(self, corpus):
        tasks, bundle_root = corpus
        config = TrainConfig(crop=60, tasks=tuple(tasks), bundle_root=bundle_root)
        with pytest.raises(InvalidConfig):
            config.validate(levels=4)

    def test_defaults_validate(self, corpus):
        tasks, bundle_root = corpus
        TrainConfig(tasks=tuple(tasks), bundle_root=bundle_root).validate()


class TestLoop:
    def _config(self, corpus, iters, seed=11):
        tasks, bundle_root = corpus
        return TrainConfig(
            crop=32, batch=1, iters=iters, lr=1e-3, seed=seed,
            tasks=tuple(tasks), bundle_root=bundle_root,
        )

    def test_short_run_logs_and_checkpoints(self, corpus, tmp_path):
        config = self._config(corpus, iters=4)
        log_path = tmp_path / "train.log"
        ckpt = tmp_path / "model.ckpt"
        state = train(
            config, NetworkConfig.tiny(),
            checkpoint_path=ckpt, checkpoint_every=2,
            log_path=log_path, log_every=2,
        )
        assert state.step == 4
        assert ckpt.exists()
        records = [json.loads(line) for line in log_path.read_text().splitlines()]
        assert [r["step"] for r in records] == [2, 4]
        for record in records:
            assert sorted(record) == ["loss", "lr", "step", "task_mix"]
            assert record["lr"] == config.lr
            assert math.isfinite(record["loss"])
            assert abs(sum(record["task_mix"].values()) - 1.0) < 1e-9

    def test_resume_matches_straight_run(self, corpus, tmp_path):
        config = self._config(corpus, iters=6, seed=21)
        straight = train(config, NetworkConfig.tiny())

        half_config = self._config(corpus, iters=3, seed=21)
        ckpt = tmp_path / "half.ckpt"
        train(half_config, NetworkConfig.tiny(), checkpoint_path=ckpt, checkpoint_every=3)
        resumed = train(config, NetworkConfig.tiny(), resume_from=ckpt)

        assert resumed.step == straight.step == 6
        assert list(resumed.loss_history) == list(straight.loss_history)
        for (name, pa), (_, pb) in zip(
            sorted(straight.network.state_dict().items()),
            sorted(resumed.network.state_dict().items()),
        ):
            assert torch.equal(pa, pb), name

    def test_non_finite_loss_aborts_and_keeps_checkpoint(
        self, corpus, tmp_path, monkeypatch
    ):
        import lmdir.training as training_module

        config = self._config(corpus, iters=5, seed=5)
        ckpt = tmp_path / "model.ckpt"
        real = training_module.l1_loss
        calls = {"n": 0}

        def flaky(output, target):
            calls["n"] += 1
            if calls["n"] >= 3:
                return torch.tensor(float("nan"), requires_grad=True)
            return real(output, target)

        monkeypatch.setattr(training_module, "l1_loss", flaky)
        with pytest.raises(NonFiniteLoss):
            train(config, NetworkConfig.tiny(), checkpoint_path=ckpt, checkpoint_every=1)
        state = load_state(ckpt, config)
        assert state.step == 2
        for p in state.network.parameters():
            assert torch.isfinite(p).all()

    def test_state_round_trip_preserves_optimizer_and_rng(self, corpus, tmp_path):
        config = self._config(corpus, iters=2, seed=9)
        tasks, bundle_root = corpus
        datasets = [TaskDataset.load(t) for t in tasks]
        sampler = Sampler(datasets, BundleStore(bundle_root))
        state = init_state(config, NetworkConfig.tiny())
        for _ in range(2):
            train_step(state, sampler.sample_batch(config, state.rng), config)
        ckpt = tmp_path / "state.ckpt"
        save_state(ckpt, state, config)
        loaded = load_state(ckpt, config)
        assert loaded.step == state.step
        assert list(loaded.loss_history) == list(state.loss_history)
        assert loaded.rng.bit_generator.state == state.rng.bit_generator.state
        fresh = [p for p in state.optimizer.state.values()]
        restored = [p for p in loaded.optimizer.state.values()]
        assert len(fresh) == len(restored) > 0
        for a, b in zip(fresh, restored):
            assert torch.equal(a["exp_avg"], b["exp_avg"])
            assert torch.equal(a["exp_avg_sq"], b["exp_avg_sq"])
            assert float(a["step"]) == float(b["step"])
