"""Training objective, gradients, gradient checking and the optimisation loop.

The objective is the conditional-prior ELBO

    sum_t  lambda * E_q[log p(a_t | z)]  -  beta * KL(q(z | a_<=t) || q(z | f_<=t))

with a unit-variance Gaussian likelihood (the normalising constant is dropped,
so the reconstruction term is ``-0.5 * lambda * ||a_t - a_hat_t||^2``) and one
reparameterised sample per step. Batch values are means over examples.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import yaml

from .dataio import PairedSequence
from .model.params import ModelParams, save_checkpoint
from .model.vae import train_backward, train_forward

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    beta: float = 1e-6
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError("lambda must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    # config files say "lambda"; the attribute cannot
    _ALIASES = {"lambda": "lam"}

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            name = cls._ALIASES.get(key, key)
            if name not in known:
                raise ConfigError(f"unknown config key: {key!r}")
            default = getattr(cls, name)
            kwargs[name] = type(default)(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        values = load_flat_config(path) if path else {}
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def load_flat_config(path) -> dict:
    """Read a flat ``key: value`` YAML file."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected key/value pairs")
    for k, v in data.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"{path}: key {k!r} is nested; config must be flat")
    return data


@dataclass(frozen=True)
class ElboBreakdown:
    recon_term: float
    kl_term: float
    elbo: float
    lam: float
    beta: float

    @classmethod
    def build(cls, recon_term, kl_term, lam, beta) -> "ElboBreakdown":
        return cls(float(recon_term), float(kl_term), float(recon_term - beta * kl_term), lam, beta)


@dataclass
class Batch:
    clips: np.ndarray  # (B, N, K, H, W, C)
    audio: np.ndarray  # (B, N, D)

    @property
    def size(self) -> int:
        return self.audio.shape[0]


def make_batch(pairs: Iterable[PairedSequence]) -> Batch:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty batch")
    lengths = {len(p) for p in pairs}
    for p in pairs:
        if p.images.shape[0] != p.audio.frames.shape[0]:
            raise ValueError(f"{p.id}: frame/audio length mismatch")
    if len(lengths) != 1:
        raise ValueError(f"sequences in a batch must share one length, got {sorted(lengths)}")
    return Batch(np.stack([p.clips for p in pairs]), np.stack([p.audio.frames for p in pairs]))


def _as_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else make_batch(batch)


def _noise(batch: Batch, latent_dim: int, seed) -> np.ndarray:
    B, N, _ = batch.audio.shape
    return np.random.default_rng(seed).standard_normal((B, N, latent_dim))


def _breakdown(fwd, cfg: TrainConfig) -> ElboBreakdown:
    recon = -cfg.lam * float(np.mean(fwd.recon))
    kl = float(np.mean(fwd.kl))
    return ElboBreakdown.build(recon, kl, cfg.lam, cfg.beta)


def elbo(batch, params: ModelParams, cfg: TrainConfig = TrainConfig(), seed=0) -> ElboBreakdown:
    batch = _as_batch(batch)
    fwd = train_forward(params, batch.clips, batch.audio, _noise(batch, params.dims.latent_dim, seed))
    return _breakdown(fwd, cfg)


def backward(batch, params: ModelParams, cfg: TrainConfig = TrainConfig(), seed=0):
    """Gradient of ``-elbo`` for every parameter tensor; returns ``(grads, breakdown)``."""
    batch = _as_batch(batch)
    fwd = train_forward(params, batch.clips, batch.audio, _noise(batch, params.dims.latent_dim, seed))
    grads = train_backward(params, fwd, cfg.lam, cfg.beta)
    return grads, _breakdown(fwd, cfg)


def reconstruction_mse(pairs, params: ModelParams, seed=0) -> float:
    """Mean squared error per feature value of the posterior reconstruction."""
    batch = _as_batch(pairs)
    fwd = train_forward(params, batch.clips, batch.audio, _noise(batch, params.dims.latent_dim, seed))
    return float(np.mean((fwd.audio_hat - batch.audio) ** 2))


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradReport:
    """Analytic-vs-central-difference comparison.

    A tensor's error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
    i.e. the worst elementwise discrepancy relative to the tensor's gradient scale.
    """

    errors: list[tuple[str, float]]  # sorted, worst first

    @property
    def max_error(self) -> float:
        return max((e for _, e in self.errors), default=0.0)

    def as_dict(self) -> dict[str, float]:
        return dict(self.errors)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    loss: Callable[[], float], tensors: dict[str, np.ndarray], analytic: dict[str, np.ndarray], h=1e-5
) -> GradReport:
    """Central differences of ``loss()`` w.r.t. each tensor, perturbed in place."""
    errors = []
    for name, t in tensors.items():
        numeric = np.zeros_like(t)
        flat = t.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        errors.append((name, relative_error(analytic[name], numeric)))
    errors.sort(key=lambda item: item[1], reverse=True)
    return GradReport(errors)


def grad_check(params: ModelParams, toy_batch, cfg: TrainConfig = TrainConfig(), seed=0, h=1e-5) -> GradReport:
    if params.num_parameters() > 10_000:
        raise ValueError(f"grad_check is for toy models (<= 1e4 parameters), got {params.num_parameters()}")
    batch = _as_batch(toy_batch)
    p = params.copy()
    grads, _ = backward(batch, p, cfg, seed)
    return check_gradients(lambda: -elbo(batch, p, cfg, seed).elbo, p.tensors, grads, h)


# ---------------------------------------------------------------- optimisation


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    recon_term: float
    kl_term: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _batches(dataset: list[PairedSequence], batch_size: int, rng) -> list[list[PairedSequence]]:
    # group by length so every batch can be stacked
    by_len: dict[int, list[PairedSequence]] = {}
    for i in rng.permutation(len(dataset)):
        by_len.setdefault(len(dataset[i]), []).append(dataset[i])
    out = []
    for n in sorted(by_len):
        items = by_len[n]
        out.extend(items[j : j + batch_size] for j in range(0, len(items), batch_size))
    return out


def train(
    dataset: list[PairedSequence],
    params: ModelParams,
    cfg: TrainConfig = TrainConfig(),
    checkpoint_path=None,
    log_path=None,
    on_epoch: Callable[[EpochRecord, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Adam with global-norm clipping; epoch metrics are the batch-size-weighted means
    of the ELBO terms observed during that epoch (before each update)."""
    if not dataset:
        raise ValueError("empty dataset")
    params = params.copy()
    opt = Adam(cfg.learning_rate)
    history: list[EpochRecord] = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            totals = np.zeros(3)
            count = 0
            for bi, items in enumerate(_batches(dataset, cfg.batch_size, rng)):
                batch = make_batch(items)
                grads, br = backward(batch, params, cfg, seed=[cfg.seed, epoch, bi])
                if not np.isfinite(br.elbo):
                    raise DivergenceError(f"non-finite ELBO at epoch {epoch}, batch {bi}")
                clip_by_global_norm(grads, cfg.grad_clip)
                opt.step(params.tensors, grads)
                totals += batch.size * np.array([br.elbo, br.recon_term, br.kl_term])
                count += batch.size
            elbo_v, recon_v, kl_v = totals / count
            rec = EpochRecord(epoch, elbo_v, recon_v, kl_v, (time.perf_counter() - start) * 1e3)
            history.append(rec)
            log.info("epoch %d elbo %.4f recon %.4f kl %.4f", epoch, elbo_v, recon_v, kl_v)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
            if checkpoint_path:
                save_checkpoint(params, checkpoint_path)
            if on_epoch:
                on_epoch(rec, params)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path and cfg.epochs == 0:
        save_checkpoint(params, checkpoint_path)
    return params, history
