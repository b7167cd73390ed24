import copy

import numpy as np
import pytest

from minidiff.data import load_image, synth_corpus
from minidiff.nets import GeneratorModel, ModelConfig, pretrain_generator
from minidiff.schedule import make_schedule

SMALL_CLASSES = ["scratch", "pit", "patch", "scale"]

SMALL_CFG = ModelConfig(image_size=16, latent_mode="identity", spatial_factor=1,
                        latent_channels=1, denoiser_width=16, denoiser_blocks=2,
                        embed_dim=12, timesteps=60)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small-corpus")
    manifest = synth_corpus(SMALL_CLASSES, 16, 16, seed=7, root=root)
    images = np.stack([load_image(e.path) for e in manifest.entries])
    labels = np.array([manifest.classes.index(e.label) for e in manifest.entries])
    return manifest, images, labels


@pytest.fixture(scope="session")
def pretrained_small(small_corpus):
    """Factory: a generator pretrained on the small corpus, deep-copied per
    call so tests can mutate it freely. Returns (model, sched, scratch set)."""
    manifest, images, labels = small_corpus
    sched = make_schedule(SMALL_CFG.timesteps)
    cache: dict[int, GeneratorModel] = {}

    def build(seed: int = 0):
        if seed not in cache:
            model = GeneratorModel(SMALL_CFG, seed=seed)
            prompts = [f"a photo of {c}" for c in manifest.classes]
            pretrain_generator(model, images, labels, prompts, sched,
                               iterations=800, batch_size=8, lr=2e-3, seed=seed)
            cache[seed] = model
        scratch = images[labels == manifest.classes.index("scratch")]
        return copy.deepcopy(cache[seed]), sched, scratch

    return build
