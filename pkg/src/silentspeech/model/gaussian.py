"""Diagonal Gaussians: reparameterised sampling and closed-form KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOGVAR_MIN = -14.0
LOGVAR_MAX = 14.0


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        log_var = np.asarray(self.log_var, dtype=np.float64)
        if mean.shape != log_var.shape:
            raise ValueError(f"mean {mean.shape} and log_var {log_var.shape} differ in shape")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
            raise ValueError("Gaussian parameters must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def from_head(cls, mean, raw_log_var) -> "DiagGaussian":
        return cls(mean, clamp_log_var(raw_log_var))


def clamp_log_var(raw):
    return np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(g: DiagGaussian, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != g.dim:
        raise ValueError(f"noise has length {noise.shape[-1]}, latent_dim is {g.dim}")
    return g.mean + np.exp(0.5 * g.log_var) * noise


def kl_terms(mq, lvq, mp, lvp):
    """Elementwise KL(q || p) contributions; sum over the last axis for the divergence."""
    return 0.5 * (lvp - lvq + (np.exp(lvq) + (mq - mp) ** 2) * np.exp(-lvp) - 1.0)


def kl_terms_grad(mq, lvq, mp, lvp):
    """Partials of :func:`kl_terms` w.r.t. (mq, lvq, mp, lvp)."""
    inv_vp = np.exp(-lvp)
    diff = mq - mp
    d_mq = diff * inv_vp
    d_lvq = 0.5 * (np.exp(lvq) * inv_vp - 1.0)
    d_lvp = 0.5 * (1.0 - (np.exp(lvq) + diff**2) * inv_vp)
    return d_mq, d_lvq, -d_mq, d_lvp


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> float:
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: {q.mean.shape} vs {p.mean.shape}")
    kl = float(np.sum(kl_terms(q.mean, q.log_var, p.mean, p.log_var)))
    # rounding can leave a tiny negative value when q == p
    return max(kl, 0.0)
