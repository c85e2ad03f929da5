"""Toy corpora and trained models shared across test modules (cached per process)."""

from functools import lru_cache

import numpy as np

from latentdit.codec import encode
from latentdit.embedder import embed_grid, tiles
from latentdit.ingest import ToyCorpusSpec, make_toy_corpus
from latentdit.pipeline import StageSpec, TrainConfig, train_controlnet, train_stage

TOY_LR = 1e-3


def toy_train(seed=0):
    return TrainConfig(lr=TOY_LR, seed=seed)


def latents_grids(images):
    return encode(images), np.stack([embed_grid(im, 4, 4).tokens for im in images])


@lru_cache(maxsize=None)
def textures(n=64, seed=0):
    return make_toy_corpus(ToyCorpusSpec("textures", n=n, resolution=32, seed=seed))


@lru_cache(maxsize=None)
def textures_data(seed=0):
    return latents_grids(textures(64, seed)["images"])


@lru_cache(maxsize=None)
def stage1_textures(seed=0, steps=1000):
    lat, grids = textures_data(0)
    return train_stage(lat, grids, StageSpec(1, steps, 32), toy_train(seed))


@lru_cache(maxsize=None)
def two_domain(n=64, seed=0):
    return make_toy_corpus(ToyCorpusSpec("two-domain", n=n, resolution=32, seed=seed))


@lru_cache(maxsize=None)
def two_domain_base():
    d = two_domain()
    lat, grids = latents_grids(np.concatenate([d["source"], d["target"]]))
    model, _ = train_stage(lat, grids, StageSpec(1, 1000, 32), toy_train(0))
    return model


def tile_stack(images, k):
    """(N, H, W, C) -> (N*k*k, H/k, W/k, C), tiles row-major per image."""
    return np.concatenate([tiles(im, k, k).reshape((-1,) + tiles(im, k, k).shape[2:]) for im in images])


@lru_cache(maxsize=None)
def cells_controlnet():
    """Base trained on masked cells (stages 1 then 2) plus a stage-2 ControlNet."""
    c = make_toy_corpus(ToyCorpusSpec("masked-cells", n=64, resolution=32, seed=0))
    lat, grids = latents_grids(c["images"])
    m, _ = train_stage(lat, grids, StageSpec(1, 1000, 32), toy_train(0))
    m, _ = train_stage(lat, grids, StageSpec(2, 500, 16), toy_train(0), init=m)
    ims = tile_stack(c["images"], 2)
    masks = tile_stack(c["masks"][..., None], 2)[..., 0]
    lat2 = encode(ims)
    g2 = np.stack([embed_grid(im, 2, 2).tokens for im in ims])
    m, losses = train_controlnet(m, lat2, g2, masks, 500, 16, toy_train(0))
    return m, losses
