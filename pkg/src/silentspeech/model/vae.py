"""Conditional-prior sequence VAE.

Training path: audio frames -> embed MLP -> audio LSTM -> posterior heads
-> reparameterised z_t -> decoder LSTM -> mirrored decoder MLP.
Frame path: K-frame clips -> conv encoder -> frame LSTM -> prior heads.
At test time z_t is drawn from the frame-conditioned prior instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .gaussian import LOGVAR_MAX, LOGVAR_MIN, DiagGaussian, clamp_log_var, kl_terms, kl_terms_grad
from .params import ModelParams


@dataclass(frozen=True)
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "LstmState":
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class FrameClip:
    pixels: np.ndarray  # (K, H, W, C) in [0, 1]
    center_index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 4:
            raise ValueError(f"clip must be K x H x W x C, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def context(self) -> int:
        return self.pixels.shape[0]


def stack_clip_channels(pixels: np.ndarray) -> np.ndarray:
    """(..., K, H, W, C) -> (..., H, W, K*C): context frames stacked along channels."""
    *lead, k, h, w, c = pixels.shape
    moved = np.moveaxis(pixels, -4, -2)
    return moved.reshape(*lead, h, w, k * c)


def _check_clip(params: ModelParams, pixels: np.ndarray):
    d = params.dims
    want = (d.context, d.image_height, d.image_width, d.channels)
    if tuple(pixels.shape[-4:]) != want:
        raise ValueError(f"clip shape {tuple(pixels.shape[-4:])} does not match model {want}")


def audio_embed(params: ModelParams, a_t) -> np.ndarray:
    a_t = np.asarray(a_t, dtype=np.float64)
    if a_t.shape[-1] != params.dims.feature_dim:
        raise ValueError(f"audio frame has {a_t.shape[-1]} values, model expects {params.dims.feature_dim}")
    return layers.mlp_forward(a_t, params.dense("audio_embed"))[0]


def lstm_step(state: LstmState, x, weights) -> tuple[LstmState, np.ndarray]:
    Wx, Wh, b = weights
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != Wx.shape[0] or state.hidden.shape[-1] != Wh.shape[0]:
        raise ValueError("LSTM input/state dimensions do not match weights")
    h, c, _ = layers.lstm_cell(x, state.hidden, state.cell, Wx, Wh, b)
    return LstmState(h, c), h


def _head(params, prefix, h) -> DiagGaussian:
    mean = layers.mlp_forward(h, params.dense(f"{prefix}_mean"))[0]
    raw = layers.mlp_forward(h, params.dense(f"{prefix}_logvar"))[0]
    return DiagGaussian.from_head(mean, raw)


def posterior_from_audio(params: ModelParams, h_audio) -> DiagGaussian:
    """q(z | a_1..a_t) from the audio LSTM hidden state."""
    return _head(params, "posterior", h_audio)


def prior_from_frames(params: ModelParams, h_frames) -> DiagGaussian:
    """q(z | f_1..f_t) from the frame LSTM hidden state."""
    return _head(params, "prior", h_frames)


def frame_encode(params: ModelParams, clip) -> np.ndarray:
    """Feature vector(s) for one clip (K, H, W, C) or a batch (..., K, H, W, C)."""
    pixels = clip.pixels if isinstance(clip, FrameClip) else np.asarray(clip, dtype=np.float64)
    _check_clip(params, pixels)
    lead = pixels.shape[:-4]
    x = stack_clip_channels(pixels)
    x = x.reshape(-1, *x.shape[-3:])
    fc = (params["frame_encoder.fc.W"], params["frame_encoder.fc.b"])
    out = layers.conv_encoder_forward(x, params.convs(), fc)[0]
    return out.reshape(*lead, -1)


def decode_step(params: ModelParams, state: LstmState, z) -> tuple[LstmState, np.ndarray]:
    state, h = lstm_step(state, z, params.lstm("decoder_lstm"))
    mel = layers.mlp_forward(h, params.dense("audio_decoder"))[0]
    return state, mel


def _as_clips(frames) -> np.ndarray:
    if isinstance(frames, (list, tuple)):
        frames = np.stack([c.pixels if isinstance(c, FrameClip) else c for c in frames])
    return np.asarray(frames, dtype=np.float64)


def prior_sequence(params: ModelParams, frames) -> list[DiagGaussian]:
    """Per-step priors for a frame stream (N, K, H, W, C), computed causally."""
    clips = _as_clips(frames)
    # clips are encoded independently, so batching them keeps the pass causal
    feats = frame_encode(params, clips)
    state = LstmState.zeros(params.dims.hidden_dim)
    out = []
    for t in range(clips.shape[0]):
        state, h = lstm_step(state, feats[t], params.lstm("frame_lstm"))
        out.append(prior_from_frames(params, h))
    return out


def posterior_sequence(params: ModelParams, audio) -> list[DiagGaussian]:
    audio = np.asarray(audio, dtype=np.float64)
    state = LstmState.zeros(params.dims.hidden_dim)
    out = []
    for t in range(audio.shape[0]):
        state, h = lstm_step(state, audio_embed(params, audio[t]), params.lstm("audio_lstm"))
        out.append(posterior_from_audio(params, h))
    return out


def _decode_sequence(params, gaussians, noise) -> np.ndarray:
    state = LstmState.zeros(params.dims.hidden_dim)
    out = []
    for g, eps in zip(gaussians, noise):
        z = g.mean + np.exp(0.5 * g.log_var) * eps
        state, mel = decode_step(params, state, z)
        out.append(mel)
    return np.stack(out)


def generate(params: ModelParams, frames, seed: int = 0) -> np.ndarray:
    """Sample an audio-feature sequence (N, feature_dim) for a frame stream.

    One prior sample per step; the noise is a pure function of ``seed``.
    """
    clips = _as_clips(frames)
    if clips.ndim != 5 or clips.shape[0] == 0:
        raise ValueError("frame stream must be a nonempty (N, K, H, W, C) array")
    priors = prior_sequence(params, clips)
    noise = np.random.default_rng(seed).standard_normal((len(priors), params.dims.latent_dim))
    return _decode_sequence(params, priors, noise)


def reconstruct(params: ModelParams, audio, seed: int = 0) -> np.ndarray:
    """Training-mode pass: posterior sample per step, then decode."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 2 or audio.shape[0] == 0:
        raise ValueError("audio must be a nonempty (N, feature_dim) array")
    posts = posterior_sequence(params, audio)
    noise = np.random.default_rng(seed).standard_normal((len(posts), params.dims.latent_dim))
    return _decode_sequence(params, posts, noise)


# ---------------------------------------------------------------- batched training path


def _heads_forward(params, prefix, h):
    mean, mc = layers.mlp_forward(h, params.dense(f"{prefix}_mean"))
    raw, lc = layers.mlp_forward(h, params.dense(f"{prefix}_logvar"))
    return mean, clamp_log_var(raw), (mc, lc, raw)


def _heads_backward(params, prefix, d_mean, d_lv, cache, grads):
    mc, lc, raw = cache
    d_raw = d_lv * ((raw >= LOGVAR_MIN) & (raw <= LOGVAR_MAX))
    dh_m, gm = layers.mlp_backward(d_mean, params.dense(f"{prefix}_mean"), mc)
    dh_l, gl = layers.mlp_backward(d_raw, params.dense(f"{prefix}_logvar"), lc)
    _store_dense(grads, f"{prefix}_mean", gm)
    _store_dense(grads, f"{prefix}_logvar", gl)
    return dh_m + dh_l


def _store_dense(grads, prefix, layer_grads):
    for i, (dW, db) in enumerate(layer_grads):
        grads[f"{prefix}.{i}.W"] = dW
        grads[f"{prefix}.{i}.b"] = db


def _store_lstm(grads, prefix, dWx, dWh, db):
    grads[f"{prefix}.Wx"] = dWx
    grads[f"{prefix}.Wh"] = dWh
    grads[f"{prefix}.b"] = db


@dataclass
class TrainForward:
    recon: np.ndarray  # (B,) sum over steps of 0.5 * ||a_t - a_hat_t||^2
    kl: np.ndarray  # (B,) sum over steps of KL(q_a || q_f)
    audio_hat: np.ndarray  # (B, N, D)
    cache: tuple


def train_forward(params: ModelParams, clips, audio, noise) -> TrainForward:
    """Full unrolled pass over a batch.

    ``clips`` (B, N, K, H, W, C), ``audio`` (B, N, D), ``noise`` (B, N, latent).
    """
    B, N, D = audio.shape
    ea, c_embed = layers.mlp_forward(audio, params.dense("audio_embed"))
    ha, c_alstm = layers.lstm_forward(ea, *params.lstm("audio_lstm"))
    mq, lvq, c_post = _heads_forward(params, "posterior", ha)

    _check_clip(params, clips)
    x = stack_clip_channels(clips)
    x = x.reshape(B * N, *x.shape[-3:])
    fc = (params["frame_encoder.fc.W"], params["frame_encoder.fc.b"])
    ef, c_conv = layers.conv_encoder_forward(x, params.convs(), fc)
    ef = ef.reshape(B, N, -1)
    hf, c_flstm = layers.lstm_forward(ef, *params.lstm("frame_lstm"))
    mp, lvp, c_prior = _heads_forward(params, "prior", hf)

    std = np.exp(0.5 * lvq)
    z = mq + std * noise
    hd, c_dlstm = layers.lstm_forward(z, *params.lstm("decoder_lstm"))
    a_hat, c_dec = layers.mlp_forward(hd, params.dense("audio_decoder"))

    resid = a_hat - audio
    recon = 0.5 * np.sum(resid**2, axis=(1, 2))
    kl = np.sum(kl_terms(mq, lvq, mp, lvp), axis=(1, 2))
    cache = (c_embed, c_alstm, c_post, c_conv, c_flstm, c_prior, c_dlstm, c_dec,
             resid, mq, lvq, mp, lvp, std, noise, (B, N))
    return TrainForward(recon, kl, a_hat, cache)


def train_backward(params: ModelParams, fwd: TrainForward, recon_weight, kl_weight) -> dict:
    """Gradient of ``mean_b(recon_weight * recon_b + kl_weight * kl_b)``."""
    (c_embed, c_alstm, c_post, c_conv, c_flstm, c_prior, c_dlstm, c_dec,
     resid, mq, lvq, mp, lvp, std, noise, (B, N)) = fwd.cache
    grads: dict[str, np.ndarray] = {}

    d_ahat = (recon_weight / B) * resid
    dhd, gdec = layers.mlp_backward(d_ahat, params.dense("audio_decoder"), c_dec)
    _store_dense(grads, "audio_decoder", gdec)
    dz, *gd = layers.lstm_backward(dhd, *params.lstm("decoder_lstm"), c_dlstm)
    _store_lstm(grads, "decoder_lstm", *gd)

    k_mq, k_lvq, k_mp, k_lvp = kl_terms_grad(mq, lvq, mp, lvp)
    scale = kl_weight / B
    d_mq = dz + scale * k_mq
    d_lvq = dz * 0.5 * std * noise + scale * k_lvq

    dhf = _heads_backward(params, "prior", scale * k_mp, scale * k_lvp, c_prior, grads)
    def_, *gf = layers.lstm_backward(dhf, *params.lstm("frame_lstm"), c_flstm)
    _store_lstm(grads, "frame_lstm", *gf)
    fc = (params["frame_encoder.fc.W"], params["frame_encoder.fc.b"])
    _, dconvs, dfc = layers.conv_encoder_backward(def_.reshape(B * N, -1), params.convs(), fc, c_conv)
    for i, (dW, db) in enumerate(dconvs):
        grads[f"frame_encoder.conv{i}.W"] = dW
        grads[f"frame_encoder.conv{i}.b"] = db
    grads["frame_encoder.fc.W"], grads["frame_encoder.fc.b"] = dfc

    dha = _heads_backward(params, "posterior", d_mq, d_lvq, c_post, grads)
    dea, *ga = layers.lstm_backward(dha, *params.lstm("audio_lstm"), c_alstm)
    _store_lstm(grads, "audio_lstm", *ga)
    _, gemb = layers.mlp_backward(dea, params.dense("audio_embed"), c_embed)
    _store_dense(grads, "audio_embed", gemb)
    return grads
