"""Analytic target distributions: isotropic Gaussian mixtures and priors.

These provide exact densities, scores, and noised scores, so every flow
and training loop in this package can be checked against closed forms.
Components are isotropic, which keeps Gaussian-kernel convolution closed
form: noising by sigma just inflates each component's std.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from gpm.errors import ConfigurationError


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray    # (K, D)
    stds: np.ndarray     # (K,) isotropic per component

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "stds", np.asarray(self.stds, dtype=np.float64))
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigurationError("mixture weights must sum to 1")
        if np.any(self.stds <= 0):
            raise ConfigurationError("component stds must be positive")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    def to_json(self):
        return json.dumps({"weights": self.weights.tolist(),
                           "means": self.means.tolist(),
                           "stds": self.stds.tolist()})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.asarray(d["weights"]), np.asarray(d["means"]), np.asarray(d["stds"]))


@dataclass(frozen=True)
class ParticleCloud:
    positions: np.ndarray  # (N, D)
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "positions",
                           np.asarray(self.positions, dtype=np.float64))
        if self.positions.ndim != 2 or self.positions.shape[0] < 1:
            raise ConfigurationError("a cloud needs at least one particle")

    @property
    def n(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]


@dataclass(frozen=True)
class PriorSpec:
    dim: int
    kind: str = "standard-normal"

    def __post_init__(self):
        if self.kind != "standard-normal":
            raise ConfigurationError(f"unknown prior kind {self.kind!r}")
        if self.dim < 1:
            raise ConfigurationError("prior dim must be >= 1")


def make_ring_mixture(k: int, radius: float, std: float) -> GaussianMixture:
    """Equal-weight mixture with means evenly spaced on a circle.

    The first mean sits at angle 0, i.e. at (radius, 0).
    """
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    angles = 2.0 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(np.full(k, 1.0 / k), means, np.full(k, float(std)))


def gmm_sample(gm: GaussianMixture, n: int, seed: int) -> ParticleCloud:
    rng = np.random.default_rng(seed)
    comps = rng.choice(gm.n_components, size=n, p=gm.weights)
    eps = rng.standard_normal((n, gm.dim))
    positions = gm.means[comps] + gm.stds[comps, None] * eps
    return ParticleCloud(positions)


def prior_sample(prior: PriorSpec, n: int, seed: int) -> ParticleCloud:
    rng = np.random.default_rng(seed)
    return ParticleCloud(rng.standard_normal((n, prior.dim)))


def _log_component_densities(gm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """(N, K) log densities of each component at each query point."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = gm.dim
    diff = x[:, None, :] - gm.means[None, :, :]          # (N, K, D)
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    var = gm.stds ** 2
    return (np.log(gm.weights)[None, :]
            - 0.5 * sq / var[None, :]
            - 0.5 * d * np.log(2.0 * np.pi * var)[None, :])


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def gmm_log_density(gm: GaussianMixture, x) -> np.ndarray | float:
    """log density, stabilized so distant queries stay finite."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = _logsumexp(_log_component_densities(gm, x), axis=1)
    return float(out[0]) if single else out


def gmm_score(gm: GaussianMixture, x) -> np.ndarray:
    """Gradient of the log density: responsibility-weighted pull to means."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    logc = _log_component_densities(gm, xb)              # (N, K)
    logc -= np.max(logc, axis=1, keepdims=True)
    resp = np.exp(logc)
    resp /= resp.sum(axis=1, keepdims=True)
    pull = (gm.means[None, :, :] - xb[:, None, :]) / (gm.stds ** 2)[None, :, None]
    score = np.einsum("nk,nkd->nd", resp, pull)
    return score[0] if single else score


def noised_mixture(gm: GaussianMixture, sigma: float) -> GaussianMixture:
    """Exact Gaussian-kernel convolution: stds become sqrt(s^2 + sigma^2)."""
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    if sigma == 0.0:
        return gm
    return GaussianMixture(gm.weights, gm.means, np.sqrt(gm.stds ** 2 + sigma ** 2))
