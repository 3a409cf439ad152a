"""Sequential instruction-guided removal of stacked degradations: a model
trained on single degradations, driven with one instruction at a time,
improves the image at every step. The fixture text encoder keys on exact
strings, so the instructions use the describer's own vocabulary; the
training bundles are pinned to the same two phrases through the fixture
table so both are certainly in the model's conditioning history."""

import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from helpers import clean_image

from lmdir.bundles import BundleStore, PriorBuilder
from lmdir.evaluation import psnr
from lmdir.images import image_id, load_image, save_image
from lmdir.providers import (
    FixtureDiffusion,
    FixtureImageEmbedder,
    FixtureMllm,
    FixtureTextEncoder,
    ProviderSet,
)
from lmdir.training import (
    TaskSpec,
    add_gaussian_noise,
    desk_profile,
    materialize_degraded,
    synthesize_lowlight,
    train,
)

NOISE_TEXT = "heavy gaussian noise"
LOWLIGHT_TEXT = "severe low light"
PAIRS_PER_TASK = 6
STEPS = 500


@pytest.fixture(scope="module")
def mixed_smoke(tmp_path_factory):
    """Train on denoise + lowlight with pinned degradation phrases, then
    stack both degradations on a held-out image."""
    root = tmp_path_factory.mktemp("mixed")
    specs = []
    for task_id in ("denoise", "lowlight"):
        data_root = root / "data" / task_id
        for i in range(PAIRS_PER_TASK):
            seed = 2000 + i if task_id == "denoise" else 3000 + i
            save_image(clean_image(seed, 96, 96), data_root / "clean" / f"im{i}.png")
        spec = TaskSpec(task_id, data_root)
        materialize_degraded(spec, seed=0)
        specs.append(spec)

    describer = FixtureMllm()
    table = {}
    for spec in specs:
        text = NOISE_TEXT if spec.task_id == "denoise" else LOWLIGHT_TEXT
        for path in sorted((spec.dataset_root / "degraded").glob("*.png")):
            degraded = load_image(path)
            table[image_id(degraded)] = (text, describer.describe(degraded).content_text)
    providers = ProviderSet(
        FixtureMllm(table), FixtureTextEncoder(), FixtureDiffusion(), FixtureImageEmbedder()
    )
    builder = PriorBuilder(BundleStore(root / "bundles"), providers)
    for spec in specs:
        for path in sorted((spec.dataset_root / "degraded").glob("*.png")):
            builder.build(load_image(path))

    config, network_config = desk_profile(specs, root / "bundles", seed=0)
    config = dataclasses.replace(config, iters=STEPS)
    state = train(config, network_config)

    clean = clean_image(4000, 96, 96)
    dark = synthesize_lowlight(clean, gamma=2.2, scale=0.2)
    mixed = add_gaussian_noise(dark, 25, np.random.default_rng(7))
    bundle = builder.build(mixed)
    return SimpleNamespace(
        network=state.network,
        providers=providers,
        clean=clean,
        mixed=mixed,
        bundle=bundle,
    )


def test_stepwise_instructions_improve_monotonically(mixed_smoke):
    network = mixed_smoke.network
    encode = mixed_smoke.providers.encode_text
    clean = mixed_smoke.clean

    step1 = network.restore(
        mixed_smoke.mixed, mixed_smoke.bundle, degradation_text=encode(NOISE_TEXT).tokens
    )
    step2 = network.restore(
        step1, mixed_smoke.bundle, degradation_text=encode(LOWLIGHT_TEXT).tokens
    )

    start = psnr(mixed_smoke.mixed, clean)
    after_first = psnr(step1, clean)
    after_second = psnr(step2, clean)
    print(f"chain PSNR: {start:.2f} -> {after_first:.2f} -> {after_second:.2f} dB")
    assert after_second >= after_first, (
        f"second instruction regressed: {start:.2f} -> {after_first:.2f} -> {after_second:.2f} dB"
    )


def test_instruction_order_matters_on_stacked_degradations(mixed_smoke):
    network = mixed_smoke.network
    encode = mixed_smoke.providers.encode_text

    noise_first = network.restore(
        mixed_smoke.mixed, mixed_smoke.bundle, degradation_text=encode(NOISE_TEXT).tokens
    )
    light_first = network.restore(
        mixed_smoke.mixed, mixed_smoke.bundle, degradation_text=encode(LOWLIGHT_TEXT).tokens
    )
    assert np.max(np.abs(noise_first.astype(np.float64) - light_first.astype(np.float64))) > 0
