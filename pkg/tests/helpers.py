"""Shared builders for tests that need beats, examples or a tiny model."""

from functools import lru_cache

import numpy as np
import torch

from wearcast.model import ModelConfig, Normalizer, build_model, make_batch
from wearcast.pipeline import build_dataset
from wearcast.synth import SynthSpec, generate_cohort

ACCEPTANCE = {}  # criterion number -> (passed, label, seconds), printed by conftest


def beats(rng, start_min, minutes, mean=850.0, sd=40.0, drop=0.0):
    """Random beat train starting at ``start_min``; ``drop`` removes a fraction of beats."""
    iv = rng.normal(mean, sd, int(minutes * 60_000 / mean) + 10)
    t = start_min * 60_000 + np.cumsum(iv).astype(np.int64)
    keep = (t < (start_min + minutes) * 60_000) & (rng.random(len(t)) >= drop)
    return t[keep], iv[keep]


@lru_cache(maxsize=None)
def small_examples(n_users=3, days=8, noise=0.5, seed=0):
    cohort = generate_cohort(SynthSpec(n_users=n_users, days=days, noise_scale=noise, seed=seed))
    examples, _ = build_dataset(cohort.bundles, cohort.tags)
    return tuple(examples)


def tiny_model(examples, seed=0, **cfg_kw):
    """Width-8, depth-1 float64 model with randomized output heads, plus a batch."""
    cfg = ModelConfig(width=8, depth=1, heads=2, category_width=4, seed=seed, **cfg_kw)
    norm = Normalizer.fit(np.stack([e.context for e in examples]))
    model = build_model(examples[0].context.shape[-1], cfg).double()
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for head in (model.quantile_head, model.hazard_head):
            head.weight.copy_(torch.randn(head.weight.shape, generator=gen, dtype=torch.float64))
            head.bias.copy_(torch.randn(head.bias.shape, generator=gen, dtype=torch.float64))
    batch = make_batch(list(examples), cfg, norm, dtype=torch.float64)
    return model, batch, norm
