"""Metrics, benchmark suites, and the embedding-separation export.

PSNR and SSIM run on RGB in [0, 1] (the convention is recorded in reports).
Suites evaluate full images, never crops; each setting row is the mean over
its images and the Average row is the unweighted mean over setting rows.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bundles import BundleStore, PriorBuilder, PriorBundle
from .errors import DatasetEmpty, ImageTooSmall, MissingBundle, ShapeMismatch
from .images import image_id, load_image, quantized
from .network import RestorationNetwork, to_tensor
from .providers import ProviderSet
from .training import DEFAULT_PARAMS, degrade

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_FORMAT_VERSION = 1


def _check_pair(output: np.ndarray, target: np.ndarray) -> None:
    if output.shape != target.shape:
        raise ShapeMismatch(
            f"metric inputs differ in shape: {output.shape} vs {target.shape}"
        )


def psnr(output: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE) over all elements, capped at 100 dB."""
    _check_pair(output, target)
    diff = output.astype(np.float64) - target.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(data_range * data_range / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _filter_valid(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # shifted accumulation instead of a windowed matmul: the summation order
    # is then fixed by tap index, so results do not depend on buffer layout
    size = len(kernel)
    h, w = plane.shape
    rows = np.zeros((h - size + 1, w), dtype=np.float64)
    for tap, weight in enumerate(kernel):
        rows += weight * plane[tap : tap + h - size + 1]
    out = np.zeros((h - size + 1, w - size + 1), dtype=np.float64)
    for tap, weight in enumerate(kernel):
        out += weight * rows[:, tap : tap + w - size + 1]
    return out


def ssim(output: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM over fully interior 11x11 gaussian windows, per
    channel, averaged across channels."""
    _check_pair(output, target)
    h, w = output.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ImageTooSmall(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    kernel = _gaussian_kernel()
    x = output.astype(np.float64)
    y = target.astype(np.float64)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    scores = []
    for channel in range(x.shape[2]):
        xc, yc = x[..., channel], y[..., channel]
        mu_x = _filter_valid(xc, kernel)
        mu_y = _filter_valid(yc, kernel)
        var_x = _filter_valid(xc * xc, kernel) - mu_x * mu_x
        var_y = _filter_valid(yc * yc, kernel) - mu_y * mu_y
        cov = _filter_valid(xc * yc, kernel) - mu_x * mu_y
        score_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        )
        scores.append(float(score_map.mean()))
    return float(np.mean(scores))


# --- suites ---------------------------------------------------------------------

@dataclass(frozen=True)
class EvalSetting:
    """One degradation configuration, e.g. label "sigma=60" with params
    {"sigma": [60]} on the denoise task."""

    label: str
    task_id: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SuiteSpec:
    suite: str
    clean_root: Path
    settings: tuple[EvalSetting, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clean_root", Path(self.clean_root))
        object.__setattr__(self, "settings", tuple(self.settings))


def noise_suite(
    clean_root: str | Path, sigmas: tuple[float, ...], suite: str = "denoise"
) -> SuiteSpec:
    return SuiteSpec(
        suite=suite,
        clean_root=Path(clean_root),
        settings=tuple(
            EvalSetting(f"sigma={sigma:g}", "denoise", {"sigma": [sigma]})
            for sigma in sigmas
        ),
    )


@dataclass(frozen=True)
class EvalRow:
    suite: str
    setting: str
    psnr: float
    ssim: float
    n_images: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalReport:
    rows: list[EvalRow]
    model_id: str
    config_hash: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": REPORT_FORMAT_VERSION,
                "model_id": self.model_id,
                "config_hash": self.config_hash,
                "metric_convention": "RGB, data range [0,1]",
                "rows": [row.to_dict() for row in self.rows],
            },
            indent=1,
            sort_keys=True,
        )

    def text_table(self) -> str:
        header = f"{'suite':<16} {'setting':<14} {'PSNR':>8} {'SSIM':>8} {'n':>4}"
        rule = "-" * len(header)
        lines = [header, rule]
        for row in self.rows:
            lines.append(
                f"{row.suite:<16} {row.setting:<14} "
                f"{row.psnr:>8.2f} {row.ssim:>8.4f} {row.n_images:>4d}"
            )
        lines.append(rule)
        lines.append(f"model {self.model_id}  config {self.config_hash}")
        return "\n".join(lines)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.txt").write_text(self.text_table() + "\n")
        return out


def parameter_id(network: RestorationNetwork) -> str:
    """Identity of the in-memory weights (independent of any file)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(network.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(
            np.ascontiguousarray(tensor.detach().cpu().numpy().astype(np.float32)).tobytes()
        )
    return digest.hexdigest()[:16]


def _setting_rng(spec: SuiteSpec, setting: EvalSetting, name: str):
    key = hashlib.sha256(
        f"{spec.suite}:{setting.label}:{name}:{spec.seed}".encode()
    ).digest()
    return np.random.default_rng(int.from_bytes(key[:8], "big"))


def run_suite(
    model: RestorationNetwork | None,
    spec: SuiteSpec,
    bundle_root: str | Path,
    providers: ProviderSet | None = None,
) -> EvalReport:
    """Evaluate full images per setting. model=None scores the degraded
    input itself (the no-op baseline row). Bundles are looked up by degraded
    image id; with a provider set they are built on demand, otherwise a
    missing bundle is an error."""
    names = sorted(p.name for p in spec.clean_root.glob("*.png"))
    if not names:
        raise DatasetEmpty(f"no clean images under {spec.clean_root}")
    store = BundleStore(bundle_root)
    builder = PriorBuilder(store, providers) if providers is not None else None
    rows = []
    for setting in spec.settings:
        psnr_values = []
        ssim_values = []
        for name in names:
            clean = load_image(spec.clean_root / name)
            rng = _setting_rng(spec, setting, name)
            params = dict(DEFAULT_PARAMS.get(setting.task_id, {}))
            params.update(setting.params)
            # quantize like dataset materialization so bundle ids line up
            degraded = quantized(degrade(setting.task_id, clean, params, rng))
            if model is None:
                output = degraded
            else:
                iid = image_id(degraded)
                if builder is not None:
                    bundle = builder.build(degraded, seed=spec.seed)
                elif store.has(iid):
                    bundle = store.load(iid)
                else:
                    raise MissingBundle(iid)
                output = model.restore(degraded, bundle)
            psnr_values.append(psnr(output, clean))
            ssim_values.append(ssim(output, clean))
        rows.append(
            EvalRow(
                suite=spec.suite,
                setting=setting.label,
                psnr=float(np.mean(psnr_values)),
                ssim=float(np.mean(ssim_values)),
                n_images=len(names),
            )
        )
    rows.append(
        EvalRow(
            suite=spec.suite,
            setting="Average",
            psnr=sum(row.psnr for row in rows) / len(rows),
            ssim=sum(row.ssim for row in rows) / len(rows),
            n_images=sum(row.n_images for row in rows),
        )
    )
    return EvalReport(
        rows=rows,
        model_id="baseline-identity" if model is None else parameter_id(model),
        config_hash="none" if model is None else model.config.hash(),
    )


# --- embedding export -------------------------------------------------------------

def export_embeddings(
    model: RestorationNetwork,
    items: list[tuple[np.ndarray, PriorBundle, str]],
    out_dir: str | Path,
) -> list[dict]:
    """Write per-image embedding vectors for external projection: the pooled
    text embedding e_d, the image degradation feature I_d, and the pooled
    refined tokens Z_d. Files are raw float32 plus a JSON manifest; the
    silhouette of each field against the class labels is recorded as a
    diagnostic when there are at least two classes."""
    from sklearn.metrics import silhouette_score

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    e_d_vectors = []
    i_d_vectors = []
    z_d_vectors = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for image, bundle, class_label in items:
                image_t = to_tensor(image)
                e_d_t = torch.from_numpy(bundle.e_d.tokens).float().unsqueeze(0)
                i_d = model.prompt.image_encoder(image_t)[0]
                z_d = model.prompt(image_t, e_d_t)[0]
                e_d_vectors.append(bundle.e_d.tokens.mean(axis=0))
                i_d_vectors.append(i_d.numpy())
                z_d_vectors.append(z_d.mean(dim=0).numpy())
                rows.append(
                    {
                        "image_id": image_id(image),
                        "class_label": class_label,
                        "index": len(rows),
                    }
                )
    finally:
        model.train(was_training)
    fields = {
        "e_d": np.stack(e_d_vectors).astype(np.float32),
        "I_d": np.stack(i_d_vectors).astype(np.float32),
        "Z_d_pooled": np.stack(z_d_vectors).astype(np.float32),
    }
    manifest_fields = {}
    for name, matrix in fields.items():
        file = f"{name}.f32"
        (out / file).write_bytes(np.ascontiguousarray(matrix).tobytes())
        manifest_fields[name] = {
            "file": file,
            "dtype": "f32le",
            "shape": list(matrix.shape),
        }
    labels = [row["class_label"] for row in rows]
    metadata = {}
    if len(set(labels)) >= 2 and all(labels.count(l) >= 2 for l in set(labels)):
        metadata["silhouette"] = {
            name: float(silhouette_score(matrix.astype(np.float64), labels))
            for name, matrix in fields.items()
        }
    manifest = {
        "format_version": REPORT_FORMAT_VERSION,
        "fields": manifest_fields,
        "rows": rows,
        "metadata": metadata,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return rows
