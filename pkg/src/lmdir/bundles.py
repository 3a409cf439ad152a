"""Prior bundles: the cached artifact tying one degraded image to its texts,
text embeddings, and synthesized reference.

On-disk layout is one directory per image id holding a manifest plus raw
tensor files and the reference PNG. Every payload is hash-verified on load.
Builds are cached by content hash and guarded by per-id advisory file locks
so parallel builders never interleave writes.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import shutil
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import CacheCorrupt, DegenerateReference, NotFound
from .images import (
    check_image,
    encode_png,
    decode_png,
    image_id,
    quantized,
    text_hash,
)
from .providers import (
    PriorTexts,
    ProviderConfig,
    ProviderSet,
    TextEmbedding,
    encoder_id_for,
    providers_for,
    validate_prior_texts,
)

# Fixture builds must be byte-reproducible across runs, so they pin the
# timestamp; live builds record wall-clock time.
FIXTURE_CREATED_AT = "2000-01-01T00:00:00Z"

_MANIFEST = "manifest.json"
_REFERENCE_FILE = "reference.png"


@dataclass(frozen=True, eq=False)
class PriorBundle:
    image_id: str
    texts: PriorTexts
    e_d: TextEmbedding
    e_c: TextEmbedding
    reference: np.ndarray
    diffusion_meta: dict
    created_at: str

    @property
    def degenerate_reference(self) -> bool:
        return float(np.ptp(self.reference)) == 0.0


def bundle_equal(a: PriorBundle, b: PriorBundle) -> bool:
    """Field-by-field equality including tensor bytes."""
    return (
        a.image_id == b.image_id
        and a.texts == b.texts
        and a.created_at == b.created_at
        and a.diffusion_meta == b.diffusion_meta
        and a.e_d.source_text_hash == b.e_d.source_text_hash
        and a.e_d.encoder_id == b.e_d.encoder_id
        and np.array_equal(a.e_d.tokens, b.e_d.tokens)
        and a.e_c.source_text_hash == b.e_c.source_text_hash
        and a.e_c.encoder_id == b.e_c.encoder_id
        and np.array_equal(a.e_c.tokens, b.e_c.tokens)
        and np.array_equal(a.reference, b.reference)
    )


def _tensor_bytes(tokens: np.ndarray) -> bytes:
    return np.ascontiguousarray(tokens.astype(np.float32)).tobytes()


class BundleStore:
    """Directory of bundles keyed by image id."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, image_id_: str) -> Path:
        return self.root / image_id_

    def has(self, image_id_: str) -> bool:
        return (self.path_for(image_id_) / _MANIFEST).exists()

    def list_ids(self) -> list[str]:
        return sorted(
            p.name for p in self.root.iterdir() if (p / _MANIFEST).exists()
        )

    @contextmanager
    def lock(self, image_id_: str):
        """Per-id exclusive advisory lock for the build critical section."""
        lock_dir = self.root / ".locks"
        lock_dir.mkdir(exist_ok=True)
        lock_path = lock_dir / image_id_
        with open(lock_path, "w") as handle:
            fcntl.flock(handle, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(handle, fcntl.LOCK_UN)

    def save(self, bundle: PriorBundle) -> Path:
        final = self.path_for(bundle.image_id)
        tmp = self.root / f".tmp-{bundle.image_id}-{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        try:
            tensors = {}
            for name, embedding in (("e_d", bundle.e_d), ("e_c", bundle.e_c)):
                payload = _tensor_bytes(embedding.tokens)
                file = f"{name}.f32"
                (tmp / file).write_bytes(payload)
                tensors[name] = {
                    "file": file,
                    "dtype": "f32le",
                    "shape": list(embedding.tokens.shape),
                    "sha256": hashlib.sha256(payload).hexdigest(),
                }
            png = encode_png(bundle.reference)
            (tmp / _REFERENCE_FILE).write_bytes(png)
            manifest = {
                "image_id": bundle.image_id,
                "degradation_text": bundle.texts.degradation_text,
                "content_text": bundle.texts.content_text,
                "provider_id": bundle.texts.provider_id,
                "prompt_template_id": bundle.texts.prompt_template_id,
                "diffusion_meta": dict(bundle.diffusion_meta),
                "tensors": tensors,
                "reference": {
                    "file": _REFERENCE_FILE,
                    "format": "png",
                    "sha256": hashlib.sha256(png).hexdigest(),
                },
                "created_at": bundle.created_at,
            }
            (tmp / _MANIFEST).write_text(
                json.dumps(manifest, indent=1, sort_keys=True)
            )
            if final.exists():
                shutil.rmtree(final)
            os.replace(tmp, final)
        finally:
            if tmp.exists():
                shutil.rmtree(tmp)
        return final

    def load(self, image_id_: str) -> PriorBundle:
        folder = self.path_for(image_id_)
        manifest_path = folder / _MANIFEST
        if not manifest_path.exists():
            raise NotFound(f"no bundle stored for image_id {image_id_}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise CacheCorrupt(f"manifest for {image_id_} is not valid JSON") from exc
        texts = PriorTexts(
            degradation_text=manifest["degradation_text"],
            content_text=manifest["content_text"],
            provider_id=manifest["provider_id"],
            prompt_template_id=manifest["prompt_template_id"],
        )
        embeddings = {}
        for name in ("e_d", "e_c"):
            entry = manifest["tensors"][name]
            payload = (folder / entry["file"]).read_bytes()
            if hashlib.sha256(payload).hexdigest() != entry["sha256"]:
                raise CacheCorrupt(
                    f"tensor {name!r} of bundle {image_id_} failed hash verification"
                )
            tokens = np.frombuffer(payload, dtype="<f4").reshape(entry["shape"]).copy()
            source = (
                texts.degradation_text if name == "e_d" else texts.content_text
            )
            embeddings[name] = TextEmbedding(
                tokens=tokens,
                source_text_hash=text_hash(source),
                encoder_id=encoder_id_for(
                    texts.provider_id, tokens.shape[0], tokens.shape[1]
                ),
            )
        ref_entry = manifest["reference"]
        png = (folder / ref_entry["file"]).read_bytes()
        if hashlib.sha256(png).hexdigest() != ref_entry["sha256"]:
            raise CacheCorrupt(
                f"reference image of bundle {image_id_} failed hash verification"
            )
        return PriorBundle(
            image_id=manifest["image_id"],
            texts=texts,
            e_d=embeddings["e_d"],
            e_c=embeddings["e_c"],
            reference=decode_png(png),
            diffusion_meta=manifest["diffusion_meta"],
            created_at=manifest["created_at"],
        )


class PriorBuilder:
    """Build-or-load: one provider round trip per unseen image, zero provider
    calls on a cache hit."""

    def __init__(
        self, store: BundleStore, providers: ProviderSet, diffusion_steps: int = 30
    ):
        self.store = store
        self.providers = providers
        self.diffusion_steps = diffusion_steps

    def build(self, image: np.ndarray, seed: int = 0) -> PriorBundle:
        img = quantized(check_image(image))
        iid = image_id(img)
        if self.store.has(iid):
            return self.store.load(iid)
        with self.store.lock(iid):
            if self.store.has(iid):
                return self.store.load(iid)
            texts = validate_prior_texts(self.providers.describe(img))
            e_d = self.providers.encode_text(texts.degradation_text)
            e_c = self.providers.encode_text(texts.content_text)
            reference = self.providers.generate(
                prompt=texts.content_text,
                negative_prompt=texts.degradation_text,
                steps=self.diffusion_steps,
                seed=seed,
            )
            reference = quantized(check_image(reference, "reference"))
            if float(np.ptp(reference)) == 0.0:
                warnings.warn(
                    DegenerateReference(
                        f"reference for image {iid[:12]} is constant-valued"
                    )
                )
            created_at = (
                FIXTURE_CREATED_AT
                if texts.provider_id == "fixture"
                else datetime.now(timezone.utc).isoformat()
            )
            bundle = PriorBundle(
                image_id=iid,
                texts=texts,
                e_d=e_d,
                e_c=e_c,
                reference=reference,
                diffusion_meta={
                    "steps": self.diffusion_steps,
                    "seed": seed,
                    "negative_prompt": texts.degradation_text,
                },
                created_at=created_at,
            )
            self.store.save(bundle)
        return bundle


def build_bundle(
    image: np.ndarray, config: ProviderConfig, seed: int, root: str | Path
) -> PriorBundle:
    builder = PriorBuilder(
        BundleStore(root), providers_for(config), diffusion_steps=config.diffusion_steps
    )
    return builder.build(image, seed=seed)


def save_bundle(bundle: PriorBundle, root: str | Path) -> Path:
    return BundleStore(root).save(bundle)


def load_bundle(root: str | Path, image_id_: str) -> PriorBundle:
    return BundleStore(root).load(image_id_)


def reference_similarity_report(
    bundles: list[PriorBundle],
    ground_truth: list[np.ndarray],
    providers: ProviderSet,
) -> np.ndarray:
    """K x K cosine similarities between reference embeddings (rows) and
    ground-truth embeddings (columns). Diagnostic only."""
    if len(bundles) != len(ground_truth):
        raise ValueError(
            f"need aligned lists, got {len(bundles)} bundles "
            f"and {len(ground_truth)} ground-truth images"
        )
    refs = np.stack([providers.embed_image(b.reference) for b in bundles])
    truths = np.stack([providers.embed_image(g) for g in ground_truth])

    def _rows_normed(m: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        return m / np.maximum(norms, 1e-12)

    return _rows_normed(refs) @ _rows_normed(truths).T
