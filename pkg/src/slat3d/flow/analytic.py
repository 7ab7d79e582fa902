"""Closed-form velocity fields used as oracles for the samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class ConstantField:
    c: np.ndarray

    def __call__(self, x, t, cond=None, **_):
        return np.broadcast_to(np.asarray(self.c, dtype=np.float64), np.shape(x)).copy()


@dataclass(frozen=True)
class GaussianField:
    """Marginal velocity E[eps - x0 | x(t) = x] for x0 ~ N(m, s^2 I), eps ~ N(0, I)."""

    mean: np.ndarray
    std: float

    def __call__(self, x, t, cond=None, **_):
        m, s2 = np.asarray(self.mean, dtype=np.float64), self.std**2
        var = (1 - t) ** 2 * s2 + t * t
        return -m + (t - (1 - t) * s2) * (x - (1 - t) * m) / var

    def endpoint(self, x_init):
        """Exact ODE solution at t=0 started from x_init at t=1."""
        return np.asarray(self.mean) + self.std * np.asarray(x_init)


@dataclass(frozen=True)
class GaussianMixtureField:
    """Marginal velocity for an isotropic Gaussian mixture in ``d`` dimensions.

    Components ``means`` (K, d) share one standard deviation per component.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def _terms(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        s2 = np.asarray(self.stds, dtype=np.float64) ** 2
        var = (1 - t) ** 2 * s2 + t * t  # (K,)
        diff = x[:, None, :] - (1 - t) * mu[None]  # (B, K, d)
        d = mu.shape[1]
        logp = (np.log(self.weights)[None] - 0.5 * (diff**2).sum(-1) / var[None] - 0.5 * d * np.log(var)[None])
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        vk = -mu[None] + ((t - (1 - t) * s2) / var)[None, :, None] * diff
        return resp, vk

    def __call__(self, x, t, cond=None, **_):
        shape = np.shape(x)
        resp, vk = self._terms(x, t)
        return np.einsum("bk,bkd->bd", resp, vk).reshape(shape)

    def sample(self, n, rng):
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        mu = np.asarray(self.means)[k]
        return mu + np.asarray(self.stds)[k][:, None] * rng.standard_normal(mu.shape)

    def conditional_sample(self, n, known_dim: int, value: float, rng):
        """Exact samples of the other coordinates given coordinate ``known_dim`` == value."""
        mu = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        logw = np.log(self.weights) - 0.5 * ((value - mu[:, known_dim]) / s) ** 2 - np.log(s)
        w = np.exp(logw - logsumexp(logw))
        k = rng.choice(len(w), size=n, p=w)
        out = mu[k] + s[k][:, None] * rng.standard_normal((n, mu.shape[1]))
        out[:, known_dim] = value
        return out
