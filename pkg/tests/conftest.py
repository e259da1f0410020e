"""Shared fixtures: a small trained autoencoder, cached on disk between runs.

Training the toy model takes tens of seconds, so the result is cached under
tests/_cache keyed by a hash of everything that influences it; delete the
directory to force a retrain.
"""

import hashlib
from pathlib import Path

import pytest

from latentnav.checkpoint import load_arrays, save_arrays
from latentnav.geometry import CameraIntrinsics, GridSpec
from latentnav.latent_map import Encoder
from latentnav.renderer import (AutoencTrainConfig, Decoder, RaySamplingSpec,
                                train_autoencoder)
from latentnav.rng import substream
from latentnav.simworld import generate_world

CACHE = Path(__file__).parent / "_cache"

TOY_WORLD_SEEDS = (101, 202, 303)
TOY_DIM = 24
TOY_INIT_SEED = 71


def toy_train_config() -> AutoencTrainConfig:
    return AutoencTrainConfig(
        steps=2000, lr=3e-3, frames_per_sample=4, pixels_per_frame=128,
        walk_stride=2, seed=17, jitter=True,
        grid=GridSpec(resolution=0.125, cells=128),
        samp=RaySamplingSpec(samples_per_ray=24),
        intr=CameraIntrinsics.from_hfov(48, 48, 90.0))


def toy_cache_key() -> str:
    cfg = toy_train_config()
    src = repr((cfg, TOY_WORLD_SEEDS, TOY_DIM, TOY_INIT_SEED, "toy-v7"))
    return hashlib.sha256(src.encode()).hexdigest()[:16]


def load_or_train_toy():
    cfg = toy_train_config()
    worlds = [generate_world(s, rooms=2) for s in TOY_WORLD_SEEDS]
    CACHE.mkdir(exist_ok=True)
    path = CACHE / f"autoenc-{toy_cache_key()}.bin"
    if path.exists():
        arrays = load_arrays(path)
        enc = Encoder.from_arrays(arrays)
        dec = Decoder.from_arrays(arrays)
    else:
        enc = Encoder(dim=TOY_DIM, hidden=48, rng=substream(TOY_INIT_SEED, "enc"))
        dec = Decoder(dim=TOY_DIM, hidden=96, rng=substream(TOY_INIT_SEED, "dec"))
        train_autoencoder(worlds, enc, dec, cfg)
        save_arrays(path, {**enc.to_arrays(), **dec.to_arrays()})
    return worlds, enc, dec, cfg


@pytest.fixture(scope="session")
def trained_toy():
    """(worlds, encoder, decoder, train config) for the cached toy model."""
    return load_or_train_toy()
