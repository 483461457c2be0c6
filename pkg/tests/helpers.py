"""Shared builders for the test modules."""

import numpy as np

from silentspeech.dsp import Waveform
from silentspeech.model import ModelDims
from silentspeech.training import Batch

# small enough for finite differences (8630 parameters), big enough to touch every tensor
TOY_DIMS = ModelDims(
    n_mels=3, mels_per_step=2, latent_dim=4, hidden_dim=8, embed_dim=8,
    context=3, image_height=8, image_width=8,
)


def harmonic(sr=8000, seconds=0.5, f0=200.0, amps=(1.0, 0.5, 0.3)):
    t = np.arange(int(sr * seconds)) / sr
    x = sum(a * np.sin(2 * np.pi * (k + 1) * f0 * t) for k, a in enumerate(amps))
    return Waveform(0.3 * x, sr)


def toy_batch(dims=TOY_DIMS, b=2, n=2, seed=0):
    rng = np.random.default_rng(seed)
    clips = rng.random((b, n, dims.context, dims.image_height, dims.image_width, dims.channels))
    audio = rng.standard_normal((b, n, dims.feature_dim))
    return Batch(clips, audio)
