"""Clients for the three prior providers: scene describer, text encoder,
and reference synthesizer.

Each provider has a fixture backend (deterministic, offline, used by all
tests) and a live HTTP backend. Fixture texts come from a content-addressed
analyzer: cheap degradation detectors pick the class keywords, an image-id
keyed phrase bank picks the wording, so the same image bytes always yield
the same strings. All request traffic flows through a shared semaphore so
in-flight calls never exceed ``max_parallel_requests``.
"""

from __future__ import annotations

import base64
import functools
import hashlib
import json
import math
import threading
import time
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import httpx
import numpy as np
from PIL import Image

from .errors import (
    DegenerateReference,
    EmbeddingShapeMismatch,
    InvalidConfig,
    InvalidText,
    MalformedResponse,
    ProviderUnavailable,
)
from .images import check_image, encode_png, decode_png, image_id, text_hash, to_uint8

PROMPT_TEMPLATE_ID = "lmdir-prompts-v1"
DEGRADATION_PROMPT = (
    "List only the degradations visible in this image (e.g., noise, rain "
    "streaks, low light, haze, blur). Do not describe the scene."
)
CONTENT_PROMPT = (
    "Describe the scene content of this image in one or two sentences. "
    "Ignore any degradation."
)

TEXT_TOKENS = 77
TEXT_DIM = 768
IMAGE_EMBED_DIM = 768
REFERENCE_SIZE = 1024
LIVE_MAX_SIDE = 512

# Content texts open with this marker and degradation texts never contain it;
# the degradation keywords below play the reverse role for content texts.
CONTENT_SENTINEL = "a scene of"
DEGRADATION_KEYWORDS = ("noise", "rain", "low light", "haze", "blur")

_NOISE_PHRASES = (
    "gaussian noise over the whole frame",
    "heavy gaussian noise",
    "fine sensor noise",
)
_RAIN_PHRASES = (
    "rain streaks across the image",
    "dense rain streaks",
    "slanted rain streaks",
)
_LOWLIGHT_PHRASES = (
    "low light",
    "severe low light",
    "dim low light exposure",
)
_CLEAN_PHRASE = "no visible degradation"

_SUBJECTS = (
    "a stone bridge over a river",
    "rolling hills under an open sky",
    "a fishing boat tied to a wooden pier",
    "a row of terraced houses",
    "an old lighthouse on a rocky coast",
    "a market square with striped awnings",
    "a forest path in early autumn",
    "a snow-capped mountain ridge",
)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_ms: int = 50


@dataclass(frozen=True)
class ProviderConfig:
    """Endpoints are URLs or the literal string "fixture"."""

    mllm_endpoint: str = "fixture"
    text_encoder_endpoint: str = "fixture"
    diffusion_endpoint: str = "fixture"
    max_parallel_requests: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    diffusion_steps: int = 30

    def validate(self) -> "ProviderConfig":
        if self.max_parallel_requests < 1:
            raise InvalidConfig("max_parallel_requests must be >= 1")
        if self.diffusion_steps < 1:
            raise InvalidConfig("diffusion_steps must be >= 1")
        if self.retry.max_attempts < 1:
            raise InvalidConfig("retry.max_attempts must be >= 1")
        if self.retry.backoff_base_ms < 0:
            raise InvalidConfig("retry.backoff_base_ms must be >= 0")
        return self

    @classmethod
    def fixture(cls, **overrides) -> "ProviderConfig":
        return cls(**overrides)


@dataclass(frozen=True)
class PriorTexts:
    degradation_text: str
    content_text: str
    provider_id: str
    prompt_template_id: str


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    tokens: np.ndarray
    source_text_hash: str
    encoder_id: str


def encoder_id_for(provider_id: str, tokens: int = TEXT_TOKENS, dim: int = TEXT_DIM) -> str:
    """Encoder identity is derived, not stored: provider plus output shape."""
    return f"{provider_id}/clip-{tokens}x{dim}"


def validate_prior_texts(texts: PriorTexts) -> PriorTexts:
    if not texts.degradation_text:
        raise MalformedResponse("provider returned empty degradation text")
    if not texts.content_text:
        raise MalformedResponse("provider returned empty content text")
    if texts.provider_id == "fixture":
        if CONTENT_SENTINEL in texts.degradation_text.lower():
            raise InvalidText(
                f"degradation text contains the content marker: {texts.degradation_text!r}"
            )
        lowered = texts.content_text.lower()
        for word in DEGRADATION_KEYWORDS:
            if word in lowered:
                raise InvalidText(
                    f"content text contains degradation keyword {word!r}: "
                    f"{texts.content_text!r}"
                )
    return texts


# --- fixture degradation detectors ------------------------------------------

def _luminance(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def _estimate_noise_sigma(gray: np.ndarray) -> float:
    """Mean absolute response to the difference-of-Laplacians mask, scaled to
    estimate the gaussian noise level of a mostly smooth image."""
    g = gray
    core = (
        4.0 * g[1:-1, 1:-1]
        - 2.0 * (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:])
        + g[:-2, :-2] + g[:-2, 2:] + g[2:, :-2] + g[2:, 2:]
    )
    return math.sqrt(math.pi / 2.0) * float(np.abs(core).mean()) / 6.0


def _box_blur(gray: np.ndarray, radius: int) -> np.ndarray:
    pad = np.pad(gray, radius, mode="reflect")
    cum = np.cumsum(np.cumsum(pad, axis=0), axis=1)
    cum = np.pad(cum, ((1, 0), (1, 0)))
    k = 2 * radius + 1
    h, w = gray.shape
    total = (
        cum[k : k + h, k : k + w]
        - cum[:h, k : k + w]
        - cum[k : k + h, :w]
        + cum[:h, :w]
    )
    return total / float(k * k)


def _streak_scores(gray: np.ndarray) -> tuple[float, float]:
    """High-pass residual energy and its horizontal/vertical gradient
    anisotropy. Near-vertical streaks have strong cross-streak gradients and
    weak along-streak ones, so their anisotropy sits far above 1; isotropic
    noise and smooth content sit near 1."""
    residual = gray - _box_blur(gray, 3)
    energy = float(np.abs(residual).mean())
    gx = float(np.abs(residual[:, 1:] - residual[:, :-1]).mean())
    gy = float(np.abs(residual[1:] - residual[:-1]).mean())
    return energy, gx / (gy + 1e-12)


def detect_degradations(img: np.ndarray) -> list[str]:
    """Order-stable list drawn from {"noise", "rain", "low light"}."""
    gray = _luminance(img)
    found = []
    if _estimate_noise_sigma(gray) > 0.02:
        found.append("noise")
    energy, anisotropy = _streak_scores(gray)
    if energy > 0.01 and anisotropy > 2.0:
        found.append("rain")
    if float(gray.mean()) < 0.22:
        found.append("low light")
    return found


def _bank_pick(bank: tuple[str, ...], key_hex: str) -> str:
    return bank[int(key_hex, 16) % len(bank)]


class FixtureMllm:
    """Deterministic describer: detector classes + image-id keyed phrasing.

    An optional table maps specific image ids to exact (degradation, content)
    pairs and takes precedence over the analyzer.
    """

    provider_id = "fixture"

    def __init__(self, table: Mapping[str, tuple[str, str]] | None = None):
        self.table = dict(table or {})

    def describe(self, image: np.ndarray) -> PriorTexts:
        check_image(image)
        canonical = to_uint8(image).astype(np.float32) / 255.0
        iid = image_id(canonical)
        if iid in self.table:
            degradation_text, content_text = self.table[iid]
        else:
            found = detect_degradations(canonical)
            parts = []
            if "noise" in found:
                parts.append(_bank_pick(_NOISE_PHRASES, iid[0:8]))
            if "rain" in found:
                parts.append(_bank_pick(_RAIN_PHRASES, iid[8:16]))
            if "low light" in found:
                parts.append(_bank_pick(_LOWLIGHT_PHRASES, iid[16:24]))
            degradation_text = ", ".join(parts) if parts else _CLEAN_PHRASE
            subject = _bank_pick(_SUBJECTS, iid[24:32])
            content_text = f"{CONTENT_SENTINEL} {subject}"
        return validate_prior_texts(
            PriorTexts(
                degradation_text=degradation_text,
                content_text=content_text,
                provider_id=self.provider_id,
                prompt_template_id=PROMPT_TEMPLATE_ID,
            )
        )


class FixtureTextEncoder:
    """Hash-seeded token embeddings: row i is a pure function of (i, word),
    rows past the word count stay zero. Same text, same bytes, every time."""

    provider_id = "fixture"

    def encode(self, text: str) -> TextEmbedding:
        if not text:
            raise InvalidText("cannot encode empty text")
        tokens = np.zeros((TEXT_TOKENS, TEXT_DIM), dtype=np.float32)
        for i, word in enumerate(text.lower().split()[:TEXT_TOKENS]):
            seed = int.from_bytes(
                hashlib.sha256(f"{i}:{word}".encode("utf-8")).digest()[:8], "big"
            )
            rng = np.random.default_rng(seed)
            tokens[i] = rng.standard_normal(TEXT_DIM).astype(np.float32) / math.sqrt(
                TEXT_DIM
            )
        return TextEmbedding(
            tokens=tokens,
            source_text_hash=text_hash(text),
            encoder_id=encoder_id_for(self.provider_id),
        )


class FixtureDiffusion:
    """Procedural reference generator: a few cosine gratings per channel,
    keyed by (hash of the prompt, seed), normalized to [0, 1]."""

    provider_id = "fixture"

    def generate(
        self, prompt: str, negative_prompt: str, steps: int, seed: int
    ) -> np.ndarray:
        if not prompt:
            raise InvalidText("cannot generate from empty prompt")
        key = int.from_bytes(
            hashlib.sha256(f"{text_hash(prompt)}:{seed}".encode("utf-8")).digest()[:8],
            "big",
        )
        rng = np.random.default_rng(key)
        n = REFERENCE_SIZE
        yy = np.linspace(0.0, 1.0, n)[:, None]
        xx = np.linspace(0.0, 1.0, n)[None, :]
        img = np.empty((n, n, 3), dtype=np.float32)
        for c in range(3):
            acc = np.zeros((n, n), dtype=np.float64)
            for _ in range(4):
                fx, fy = rng.uniform(0.5, 6.0, size=2)
                phase = rng.uniform(0.0, 2.0 * math.pi)
                amp = rng.uniform(0.5, 1.0)
                acc += amp * np.cos(2.0 * math.pi * (fx * xx + fy * yy) + phase)
            span = float(acc.max() - acc.min())
            img[..., c] = ((acc - acc.min()) / span if span > 0 else acc * 0.0).astype(
                np.float32
            )
        return img


class FixtureImageEmbedder:
    """Image embedding for the similarity diagnostic: 16x16 bilinear
    thumbnail, flattened."""

    provider_id = "fixture"

    def embed(self, image: np.ndarray) -> np.ndarray:
        check_image(image)
        thumb = Image.fromarray(to_uint8(image), mode="RGB").resize(
            (16, 16), Image.BILINEAR
        )
        return (np.asarray(thumb).astype(np.float32) / 255.0).reshape(-1)


# --- live backends -----------------------------------------------------------

class _HttpTransport:
    """POST with bounded retries; transport failures and 5xx responses back
    off exponentially, other failures surface immediately."""

    def __init__(self, base_url: str, retry: RetryPolicy):
        self.base_url = base_url.rstrip("/")
        self.retry = retry
        self._client = httpx.Client(timeout=30.0)

    def post(self, path: str, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retry.max_attempts):
            if attempt > 0:
                time.sleep(self.retry.backoff_base_ms * (2 ** (attempt - 1)) / 1000.0)
            try:
                response = self._client.post(self.base_url + path, json=payload)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if response.status_code >= 500:
                last_error = ProviderUnavailable(
                    f"{self.base_url}{path} returned {response.status_code}"
                )
                continue
            if response.status_code >= 400:
                raise MalformedResponse(
                    f"{self.base_url}{path} rejected the request "
                    f"({response.status_code}): {response.text[:200]}"
                )
            try:
                return response.json()
            except json.JSONDecodeError as exc:
                raise MalformedResponse(
                    f"{self.base_url}{path} returned invalid JSON"
                ) from exc
        raise ProviderUnavailable(
            f"{self.base_url}{path} unreachable after "
            f"{self.retry.max_attempts} attempts: {last_error}"
        )


def _image_payload(image: np.ndarray, max_side: int | None = None) -> str:
    if max_side is not None:
        h, w = image.shape[:2]
        longest = max(h, w)
        if longest > max_side:
            scale = max_side / float(longest)
            size = (max(1, round(w * scale)), max(1, round(h * scale)))
            resized = Image.fromarray(to_uint8(image), mode="RGB").resize(
                size, Image.BILINEAR
            )
            return base64.b64encode(encode_png(np.asarray(resized) / 255.0)).decode()
    return base64.b64encode(encode_png(image)).decode()


class LiveMllm:
    def __init__(self, endpoint: str, retry: RetryPolicy):
        self._http = _HttpTransport(endpoint, retry)
        self.provider_id = httpx.URL(endpoint).host or endpoint

    def describe(self, image: np.ndarray) -> PriorTexts:
        check_image(image)
        body = self._http.post(
            "/v1/describe",
            {
                "image_png_base64": _image_payload(image, max_side=LIVE_MAX_SIDE),
                "degradation_prompt": DEGRADATION_PROMPT,
                "content_prompt": CONTENT_PROMPT,
                "prompt_template_id": PROMPT_TEMPLATE_ID,
            },
        )
        degradation = body.get("degradation_text", "")
        content = body.get("content_text", "")
        if not degradation or not content:
            raise MalformedResponse(
                "describe response missing degradation_text or content_text"
            )
        return PriorTexts(
            degradation_text=degradation,
            content_text=content,
            provider_id=self.provider_id,
            prompt_template_id=PROMPT_TEMPLATE_ID,
        )


class LiveTextEncoder:
    def __init__(self, endpoint: str, retry: RetryPolicy):
        self._http = _HttpTransport(endpoint, retry)
        self.provider_id = httpx.URL(endpoint).host or endpoint

    def encode(self, text: str) -> TextEmbedding:
        if not text:
            raise InvalidText("cannot encode empty text")
        body = self._http.post("/v1/embed", {"text": text})
        tokens = np.asarray(body.get("tokens", []), dtype=np.float32)
        if tokens.shape != (TEXT_TOKENS, TEXT_DIM):
            raise EmbeddingShapeMismatch(
                f"expected ({TEXT_TOKENS}, {TEXT_DIM}) tokens, got {tokens.shape}"
            )
        return TextEmbedding(
            tokens=tokens,
            source_text_hash=text_hash(text),
            encoder_id=encoder_id_for(self.provider_id),
        )


class LiveDiffusion:
    def __init__(self, endpoint: str, retry: RetryPolicy):
        self._http = _HttpTransport(endpoint, retry)
        self.provider_id = httpx.URL(endpoint).host or endpoint

    def generate(
        self, prompt: str, negative_prompt: str, steps: int, seed: int
    ) -> np.ndarray:
        if not prompt:
            raise InvalidText("cannot generate from empty prompt")
        body = self._http.post(
            "/v1/generate",
            {
                "prompt": prompt,
                "negative_prompt": negative_prompt,
                "steps": steps,
                "seed": seed,
            },
        )
        encoded = body.get("image_png_base64")
        if not encoded:
            raise MalformedResponse("generate response missing image_png_base64")
        try:
            return decode_png(base64.b64decode(encoded))
        except Exception as exc:
            raise MalformedResponse("generate response image is not a PNG") from exc


class LiveImageEmbedder:
    def __init__(self, endpoint: str, retry: RetryPolicy):
        self._http = _HttpTransport(endpoint, retry)
        self.provider_id = httpx.URL(endpoint).host or endpoint

    def embed(self, image: np.ndarray) -> np.ndarray:
        check_image(image)
        body = self._http.post(
            "/v1/embed", {"image_png_base64": _image_payload(image)}
        )
        vector = np.asarray(body.get("vector", []), dtype=np.float32)
        if vector.ndim != 1 or vector.size == 0:
            raise EmbeddingShapeMismatch(
                f"expected a flat image embedding, got shape {vector.shape}"
            )
        return vector


# --- assembled provider set ---------------------------------------------------

class ProviderSet:
    """One gate for all outbound provider traffic. Every public method holds
    the semaphore for the duration of the underlying call, so concurrent
    bundle builds stay within the configured request budget."""

    def __init__(
        self,
        mllm,
        text_encoder,
        diffusion,
        image_embedder,
        max_parallel_requests: int = 4,
    ):
        if max_parallel_requests < 1:
            raise InvalidConfig("max_parallel_requests must be >= 1")
        self.mllm = mllm
        self.text_encoder = text_encoder
        self.diffusion = diffusion
        self.image_embedder = image_embedder
        self._gate = threading.BoundedSemaphore(max_parallel_requests)

    def describe(self, image: np.ndarray) -> PriorTexts:
        with self._gate:
            return self.mllm.describe(image)

    def encode_text(self, text: str) -> TextEmbedding:
        with self._gate:
            return self.text_encoder.encode(text)

    def generate(
        self, prompt: str, negative_prompt: str, steps: int, seed: int
    ) -> np.ndarray:
        with self._gate:
            return self.diffusion.generate(prompt, negative_prompt, steps, seed)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        with self._gate:
            return self.image_embedder.embed(image)


@functools.lru_cache(maxsize=8)
def providers_for(config: ProviderConfig) -> ProviderSet:
    """Build (and reuse) the provider set for a config; live clients keep
    their HTTP connections across calls."""
    config.validate()
    retry = config.retry
    mllm = (
        FixtureMllm()
        if config.mllm_endpoint == "fixture"
        else LiveMllm(config.mllm_endpoint, retry)
    )
    if config.text_encoder_endpoint == "fixture":
        text_encoder = FixtureTextEncoder()
        image_embedder = FixtureImageEmbedder()
    else:
        text_encoder = LiveTextEncoder(config.text_encoder_endpoint, retry)
        image_embedder = LiveImageEmbedder(config.text_encoder_endpoint, retry)
    diffusion = (
        FixtureDiffusion()
        if config.diffusion_endpoint == "fixture"
        else LiveDiffusion(config.diffusion_endpoint, retry)
    )
    return ProviderSet(
        mllm,
        text_encoder,
        diffusion,
        image_embedder,
        max_parallel_requests=config.max_parallel_requests,
    )


def query_mllm(image: np.ndarray, config: ProviderConfig) -> PriorTexts:
    return validate_prior_texts(providers_for(config).describe(image))


def encode_text(text: str, config: ProviderConfig) -> TextEmbedding:
    return providers_for(config).encode_text(text)


def synthesize_reference(
    texts: PriorTexts, seed: int, config: ProviderConfig
) -> np.ndarray:
    """Content text drives the prompt; degradation text rides along as the
    negative prompt so the reference comes out clean."""
    reference = providers_for(config).generate(
        prompt=texts.content_text,
        negative_prompt=texts.degradation_text,
        steps=config.diffusion_steps,
        seed=seed,
    )
    reference = check_image(reference, "reference")
    if float(np.ptp(reference)) == 0.0:
        warnings.warn(DegenerateReference("synthesized reference is constant-valued"))
    return reference
