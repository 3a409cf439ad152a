"""Metrics against straight-loop reference implementations, suite reports,
and the embedding export."""

import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from lmdir.bundles import build_bundle
from lmdir.errors import DatasetEmpty, ImageTooSmall, MissingBundle, ShapeMismatch
from lmdir.evaluation import (
    EvalSetting,
    SuiteSpec,
    export_embeddings,
    noise_suite,
    parameter_id,
    psnr,
    run_suite,
    ssim,
)
from lmdir.images import save_image
from lmdir.network import NetworkConfig, RestorationNetwork
from lmdir.providers import FixtureTextEncoder, ProviderConfig, providers_for

from helpers import clean_image, rand_image


# --- reference implementations (straight loops, float64) -------------------------

def psnr_reference(output, target, data_range=1.0):
    diff = output.astype(np.float64).ravel() - target.astype(np.float64).ravel()
    total = 0.0
    for value in diff:
        total += value * value
    mse = total / diff.size
    if mse == 0.0:
        return 100.0
    return min(10.0 * math.log10(data_range**2 / mse), 100.0)


def _window_weights():
    weights = np.empty((11, 11), dtype=np.float64)
    for i in range(11):
        for j in range(11):
            weights[i, j] = math.exp(-((i - 5) ** 2 + (j - 5) ** 2) / (2 * 1.5**2))
    return weights / weights.sum()


def ssim_reference(output, target, data_range=1.0):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    weights = _window_weights()
    x_all = output.astype(np.float64)
    y_all = target.astype(np.float64)
    channel_means = []
    for channel in range(x_all.shape[2]):
        x, y = x_all[..., channel], y_all[..., channel]
        h, w = x.shape
        values = []
        for top in range(h - 10):
            for left in range(w - 10):
                wx = x[top : top + 11, left : left + 11]
                wy = y[top : top + 11, left : left + 11]
                mu_x = float((weights * wx).sum())
                mu_y = float((weights * wy).sum())
                var_x = float((weights * wx * wx).sum()) - mu_x * mu_x
                var_y = float((weights * wy * wy).sum()) - mu_y * mu_y
                cov = float((weights * wx * wy).sum()) - mu_x * mu_y
                values.append(
                    ((2 * mu_x * mu_y + c1) * (2 * cov + c2))
                    / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
                )
            # row done
        channel_means.append(float(np.mean(values)))
    return float(np.mean(channel_means))


def silhouette_reference(matrix, labels):
    points = np.asarray(matrix, dtype=np.float64)
    n = len(labels)
    dist = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    scores = []
    for i in range(n):
        same = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not same:
            scores.append(0.0)
            continue
        a = dist[i, same].mean()
        b = min(
            dist[i, [j for j in range(n) if labels[j] == other]].mean()
            for other in set(labels)
            if other != labels[i]
        )
        top = max(a, b)
        scores.append((b - a) / top if top > 0 else 0.0)
    return float(np.mean(scores))


# --- psnr -------------------------------------------------------------------------

class TestPsnr:
    def test_identical_capped(self):
        img = rand_image(0, 24, 24)
        assert psnr(img, img) == 100.0

    def test_constant_offset_is_twenty_db(self):
        target = np.full((16, 16, 3), 0.5, dtype=np.float64)
        output = target + 0.1
        assert abs(psnr(output, target) - 20.0) < 1e-9

    def test_matches_reference_on_random_pairs(self):
        for seed in range(10):
            a = rand_image(seed, 13, 17)
            b = rand_image(seed + 100, 13, 17)
            assert abs(psnr(a, b) - psnr_reference(a, b)) < 1e-10

    def test_scale_consistency(self):
        a = rand_image(3, 20, 15)
        b = rand_image(4, 20, 15)
        assert abs(psnr(a * 255.0, b * 255.0, data_range=255.0) - psnr(a, b)) < 1e-6

    def test_monotone_in_noise_level(self):
        base = clean_image(7, 32, 32)
        for trial in range(20):
            rng = np.random.default_rng(1000 + trial)
            mild = np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1)
            harsh = np.clip(base + rng.normal(0, 0.15, base.shape), 0, 1)
            assert psnr(mild, base) > psnr(harsh, base)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(rand_image(0, 8, 8), rand_image(0, 9, 8))


# --- ssim -------------------------------------------------------------------------

class TestSsim:
    def test_identical_is_one(self):
        img = rand_image(1, 18, 23)
        assert ssim(img, img) == 1.0

    def test_zero_variance_constants(self):
        zeros = np.zeros((16, 16, 3), dtype=np.float64)
        ones = np.ones((16, 16, 3), dtype=np.float64)
        c1 = 0.01**2
        assert abs(ssim(zeros, ones) - c1 / (1 + c1)) < 1e-9

    def test_matches_reference_on_random_pairs(self):
        rng = np.random.default_rng(99)
        for pair in range(50):
            h = int(rng.integers(11, 22))
            w = int(rng.integers(11, 22))
            a = rand_image(2 * pair, h, w)
            b = rand_image(2 * pair + 1, h, w)
            assert abs(ssim(a, b) - ssim_reference(a, b)) < 1e-6

    def test_symmetry(self):
        for seed in range(5):
            a = rand_image(seed, 14, 19)
            b = clean_image(seed + 50, 14, 19)
            assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9

    def test_scale_consistency(self):
        a = rand_image(11, 16, 16)
        b = rand_image(12, 16, 16)
        assert abs(ssim(a * 255.0, b * 255.0, data_range=255.0) - ssim(a, b)) < 1e-6

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            ssim(rand_image(0, 10, 40), rand_image(1, 10, 40))

    def test_bounded_above_by_one(self):
        a = clean_image(20, 16, 16)
        b = np.clip(a + 0.02, 0, 1)
        assert ssim(a, b) < 1.0


# --- suites -----------------------------------------------------------------------

def write_clean_set(root, count=2, size=48):
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        save_image(clean_image(300 + i, size, size), root / f"img{i}.png")


class TestRunSuite:
    def test_identity_setting_baseline(self, tmp_path):
        write_clean_set(tmp_path / "clean", count=1)
        spec = SuiteSpec(
            suite="noop",
            clean_root=tmp_path / "clean",
            settings=(EvalSetting("sigma=0", "denoise", {"sigma": [0]}),),
        )
        report = run_suite(None, spec, tmp_path / "bundles")
        noop_row = report.rows[0]
        assert noop_row.psnr == 100.0
        assert noop_row.ssim == 1.0
        assert noop_row.n_images == 1
        assert report.model_id == "baseline-identity"

    def test_average_row_is_exact_mean(self, tmp_path):
        write_clean_set(tmp_path / "clean", count=2)
        spec = noise_suite(tmp_path / "clean", (15, 25, 50))
        report = run_suite(None, spec, tmp_path / "bundles")
        settings = report.rows[:-1]
        average = report.rows[-1]
        assert average.setting == "Average"
        assert average.psnr == sum(r.psnr for r in settings) / len(settings)
        assert average.ssim == sum(r.ssim for r in settings) / len(settings)
        assert average.n_images == sum(r.n_images for r in settings)

    def test_degraded_baseline_orders_by_severity(self, tmp_path):
        write_clean_set(tmp_path / "clean", count=2)
        spec = noise_suite(tmp_path / "clean", (15, 50))
        report = run_suite(None, spec, tmp_path / "bundles")
        assert report.rows[0].psnr > report.rows[1].psnr

    def test_model_path_builds_bundles(self, tmp_path):
        write_clean_set(tmp_path / "clean", count=1)
        spec = noise_suite(tmp_path / "clean", (25,), suite="smoke")
        net = RestorationNetwork(NetworkConfig.tiny(), seed=0)
        with torch.no_grad():
            net.output.weight.zero_()  # exact passthrough: output == degraded
        providers = providers_for(ProviderConfig.fixture())
        report = run_suite(net, spec, tmp_path / "bundles", providers=providers)
        assert [row.setting for row in report.rows] == ["sigma=25", "Average"]
        assert report.model_id == parameter_id(net)
        assert report.config_hash == net.config.hash()
        baseline = run_suite(None, spec, tmp_path / "bundles")
        assert report.rows[0].psnr == baseline.rows[0].psnr
        assert report.rows[0].ssim == baseline.rows[0].ssim

    def test_missing_bundle_without_providers(self, tmp_path):
        write_clean_set(tmp_path / "clean", count=1)
        spec = noise_suite(tmp_path / "clean", (25,))
        net = RestorationNetwork(NetworkConfig.tiny(), seed=0)
        with pytest.raises(MissingBundle):
            run_suite(net, spec, tmp_path / "bundles")

    def test_empty_clean_root(self, tmp_path):
        (tmp_path / "clean").mkdir()
        spec = noise_suite(tmp_path / "clean", (25,))
        with pytest.raises(DatasetEmpty):
            run_suite(None, spec, tmp_path / "bundles")

    def test_report_serialization(self, tmp_path):
        write_clean_set(tmp_path / "clean", count=1)
        spec = noise_suite(tmp_path / "clean", (15, 25))
        report = run_suite(None, spec, tmp_path / "bundles")
        out = report.save(tmp_path / "out")
        payload = json.loads((out / "report.json").read_text())
        assert payload["format_version"] == 1
        assert sorted(payload.keys()) == [
            "config_hash",
            "format_version",
            "metric_convention",
            "model_id",
            "rows",
        ]
        assert sorted(payload["rows"][0].keys()) == [
            "n_images",
            "psnr",
            "setting",
            "ssim",
            "suite",
        ]
        table = (out / "report.txt").read_text()
        assert "Average" in table and "PSNR" in table
        # deterministic rerun
        second = run_suite(None, spec, tmp_path / "bundles2")
        assert second.to_json() == report.to_json()


# --- embedding export -------------------------------------------------------------

def fake_prior(text):
    tokens = FixtureTextEncoder().encode(text).tokens
    return SimpleNamespace(e_d=SimpleNamespace(tokens=tokens))


class TestExportEmbeddings:
    def make_items(self):
        items = []
        for index, (label, text) in enumerate(
            [
                ("noise", "heavy gaussian noise"),
                ("noise", "heavy gaussian noise"),
                ("rain", "dense rain streaks"),
                ("rain", "dense rain streaks"),
            ]
        ):
            items.append((clean_image(600 + index, 64, 64), fake_prior(text), label))
        return items

    def test_export_files_and_manifest(self, tmp_path):
        net = RestorationNetwork(NetworkConfig.tiny(), seed=1)
        items = self.make_items()
        rows = export_embeddings(net, items, tmp_path)
        assert len(rows) == 4
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["fields"]["e_d"]["shape"] == [4, 768]
        assert manifest["fields"]["I_d"]["shape"] == [4, 64]
        assert manifest["fields"]["Z_d_pooled"]["shape"] == [4, 64]
        for field in manifest["fields"].values():
            data = (tmp_path / field["file"]).read_bytes()
            assert len(data) == 4 * field["shape"][1] * 4
            assert field["dtype"] == "f32le"
        assert [row["class_label"] for row in manifest["rows"]] == [
            "noise",
            "noise",
            "rain",
            "rain",
        ]
        assert [row["index"] for row in manifest["rows"]] == [0, 1, 2, 3]

    def test_silhouette_matches_reference(self, tmp_path):
        net = RestorationNetwork(NetworkConfig.tiny(), seed=1)
        items = self.make_items()
        export_embeddings(net, items, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        scores = manifest["metadata"]["silhouette"]
        labels = [label for _, _, label in items]
        for name in ("e_d", "I_d", "Z_d_pooled"):
            field = manifest["fields"][name]
            matrix = np.frombuffer(
                (tmp_path / field["file"]).read_bytes(), dtype="<f4"
            ).reshape(field["shape"])
            assert scores[name] == pytest.approx(
                silhouette_reference(matrix, labels), abs=1e-9
            )
        # identical texts within a class collapse e_d clusters to points
        assert scores["e_d"] == pytest.approx(1.0)

    def test_deterministic_rerun(self, tmp_path):
        net = RestorationNetwork(NetworkConfig.tiny(), seed=1)
        items = self.make_items()
        export_embeddings(net, items, tmp_path / "a")
        export_embeddings(net, items, tmp_path / "b")
        for name in ("manifest.json", "e_d.f32", "I_d.f32", "Z_d_pooled.f32"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes()

    def test_single_class_skips_silhouette(self, tmp_path):
        net = RestorationNetwork(NetworkConfig.tiny(), seed=1)
        items = self.make_items()[:2]
        export_embeddings(net, items, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert "silhouette" not in manifest["metadata"]


class TestParameterId:
    def test_stable_and_sensitive(self):
        a = RestorationNetwork(NetworkConfig.tiny(), seed=0)
        b = RestorationNetwork(NetworkConfig.tiny(), seed=0)
        c = RestorationNetwork(NetworkConfig.tiny(), seed=1)
        assert parameter_id(a) == parameter_id(b)
        assert len(parameter_id(a)) == 16
        assert parameter_id(a) != parameter_id(c)


def test_build_bundle_roundtrip_for_eval(tmp_path):
    # run_suite relies on bundle ids matching the quantized degraded image
    img = clean_image(900, 48, 48)
    rng = np.random.default_rng(0)
    noisy = np.clip(img + rng.normal(0, 25 / 255, img.shape), 0, 1).astype(np.float32)
    bundle = build_bundle(noisy, ProviderConfig.fixture(), seed=0, root=tmp_path)
    assert bundle.e_d.tokens.shape == (77, 768)
