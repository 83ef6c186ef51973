"""Diagonal Gaussian machinery: KL, log-density, reparametrized sampling, Parzen.

Every distribution here is parametrized by a mean and a *log-variance*, so the
diagonal covariance is ``exp(logvar)`` and the standard deviation is
``exp(logvar / 2)``.  Functions accept a single vector of shape ``(d,)`` or a
batch of shape ``(n, d)``; reductions always run over the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.special import logsumexp

from . import ndgrad as nd
from .errors import ShapeError
from .ndgrad import Tensor

LOG_2PI = math.log(2.0 * math.pi)

ReconMode = Literal["exact", "paper"]


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator: PCG64 bit stream, numpy's ziggurat normal transform.

    Identical seeds give identical streams across runs and platforms for a
    fixed numpy version.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True)
class GaussianDiag:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(
                f"mean and logvar shapes differ: {self.mean.shape} vs {self.logvar.shape}"
            )

    @classmethod
    def standard(cls, shape) -> "GaussianDiag":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar.data)

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)


def _match(op: str, a, b) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dimension mismatch {a.shape} vs {b.shape}")


def kl_diag(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """Exact KL(q || p), summed over the last axis."""
    _match("kl_diag", q.mean, p.mean)
    d = q.mean.shape[-1]
    inv_pvar = nd.exp(-p.logvar)
    terms = (
        (p.logvar - q.logvar)
        + nd.exp(q.logvar - p.logvar)
        + nd.square(q.mean - p.mean) * inv_pvar
    )
    return nd.shift(nd.scale(nd.sum(terms, axis=-1), 0.5), -0.5 * d)


def gaussian_log_density(x: Tensor, g: GaussianDiag, mode: ReconMode = "exact") -> Tensor:
    """log N(x; g) summed over the last axis.

    ``mode="paper"`` evaluates the alternative reconstruction term
    ``-[sum (mean - x)^2 / (2 exp(logvar)) + sum exp(logvar)]``, which is not a
    normalized density and must not be used where a true bound is required.
    """
    x = nd.as_tensor(x)
    _match("gaussian_log_density", x, g.mean)
    sq = nd.square(g.mean - x) * nd.exp(-g.logvar)
    if mode == "exact":
        d = x.shape[-1]
        return nd.shift(nd.scale(nd.sum(sq + g.logvar, axis=-1), -0.5), -0.5 * d * LOG_2PI)
    if mode == "paper":
        return nd.scale(nd.sum(nd.scale(sq, 0.5) + nd.exp(g.logvar), axis=-1), -1.0)
    raise ValueError(f"unknown reconstruction mode {mode!r}")


def reparam_sample(g: GaussianDiag, eps) -> Tensor:
    """mean + eps * exp(logvar / 2), differentiable in mean and logvar."""
    eps = nd.as_tensor(eps)
    _match("reparam_sample", eps, g.mean)
    return g.mean + eps * nd.exp(nd.scale(g.logvar, 0.5))


def parzen_log_density(x, samples, sigma: float) -> float | np.ndarray:
    """Log-density of ``x`` under an isotropic Gaussian kernel mixture.

    ``samples`` is an (S, d) array (or a sequence of length-d vectors).  ``x``
    may be a single (d,) point or a batch (n, d); a batch returns one value per
    row.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    xs = np.asarray(samples.data if isinstance(samples, Tensor) else samples, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[None, :]
    if xs.shape[0] == 0:
        raise ValueError("parzen_log_density needs at least one sample")
    pts = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != xs.shape[1]:
        raise ShapeError(f"parzen: point width {pts.shape[1]} vs sample width {xs.shape[1]}")
    d = pts.shape[1]
    sq = np.stack([np.einsum("sd,sd->s", xs - row, xs - row) for row in pts])
    ll = (
        logsumexp(-sq / (2.0 * sigma * sigma), axis=1)
        - math.log(xs.shape[0])
        - 0.5 * d * math.log(2.0 * math.pi * sigma * sigma)
    )
    return float(ll[0]) if single else ll


def parzen_log_density_batched(
    points: np.ndarray, samples: np.ndarray, sigmas: Sequence[float]
) -> np.ndarray:
    """Per-instance Parzen log-densities for a whole grid of bandwidths.

    ``points`` is (n, d) and ``samples`` is (n, S, d): each point gets its own
    sample set.  Returns an (len(sigmas), n) array.
    """
    points = np.asarray(points, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    n, S, d = samples.shape
    diff = samples - points[:, None, :]
    sq = np.einsum("nsd,nsd->ns", diff, diff)
    out = np.empty((len(sigmas), n))
    for k, sigma in enumerate(sigmas):
        out[k] = (
            logsumexp(-sq / (2.0 * sigma * sigma), axis=1)
            - math.log(S)
            - 0.5 * d * math.log(2.0 * math.pi * sigma * sigma)
        )
    return out
