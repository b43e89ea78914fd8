import numpy as np
import pytest
import torch

from adnmar.curation import ImageRef, split_unsupervised
from adnmar.networks import NetworkConfig, build_model
from adnmar.synthesis import (
    MetalMask,
    ProjectionGeometry,
    Spectrum,
    make_metal_mask,
    make_phantom,
    synthesize_pair,
)
from adnmar.training import TrainConfig, init_train_state, train_step


TINY_NET = NetworkConfig(base_channels=4, n_res_blocks=1, disc_layers=3)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY_NET


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture(scope="session")
def default_model():
    return build_model(NetworkConfig(), seed=0)


def synth_pairs(n, size=64, seed=11):
    """Deterministic in-memory (artifact, clean, mask) triples."""
    geo = ProjectionGeometry(image_size=size)
    spectrum = Spectrum()
    triples = []
    for i in range(n):
        clean = make_phantom(np.random.default_rng([seed, i, 0]), size=size)
        mask = make_metal_mask((size, size), np.random.default_rng([seed, i, 1]))
        artifact, clean, mask = synthesize_pair(clean, mask, spectrum, geo)
        triples.append((artifact, clean, mask))
    return triples


def pairs_as_refs(triples):
    return [
        (
            ImageRef(ref_id=f"art{i}", pair_id=i, image=art),
            ImageRef(ref_id=f"clean{i}", pair_id=i, image=clean),
        )
        for i, (art, clean, _mask) in enumerate(triples)
    ]


@pytest.fixture(scope="session")
def toy_triples():
    return synth_pairs(8)


@pytest.fixture(scope="session")
def toy_dataset(toy_triples):
    return split_unsupervised(pairs_as_refs(toy_triples), np.random.default_rng(3))


@pytest.fixture(scope="session")
def briefly_trained(toy_dataset):
    """A model that has taken a handful of real optimization steps."""
    torch.manual_seed(0)
    config = TrainConfig(
        iterations=30, seed=0, image_size=64, checkpoint_every=0, network=TINY_NET
    )
    state = init_train_state(config)
    rng = np.random.default_rng(5)
    from adnmar.arrays import HUWindow
    from adnmar.curation import sample_unpaired

    for _ in range(config.iterations):
        batch = sample_unpaired(toy_dataset, rng, HUWindow())
        x = torch.from_numpy(batch.x_a.pixels[None, None])
        y = torch.from_numpy(batch.y.pixels[None, None])
        train_step(state, x, y)
    state.model.eval()
    return state.model
