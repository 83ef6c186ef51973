"""Evaluation battery: test-set bounds, conditional Parzen scores, the
Gauss-Hermite likelihood oracle, latent-geometry export and attribute scoring.

Functions take either a :class:`~cmma.train.Checkpoint` or an already built
parameter collection.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import ATTR_NAMES, MultimodalDataset, attribute_oracle
from .gaussian import LOG_2PI, GaussianDiag, gaussian_log_density, kl_diag, make_rng, parzen_log_density_batched
from .model import CvaeParams, decoder, encoder, generate_from_attributes, modify, prior_net
from .train import Checkpoint, TrainConfig, evaluate_bound


def _unpack(model_or_ckpt):
    if isinstance(model_or_ckpt, Checkpoint):
        return model_or_ckpt.model(), model_or_ckpt.config
    return model_or_ckpt, None


def eval_seed(config: TrainConfig) -> int:
    return config.seed + 1


# -- variational bound --------------------------------------------------------------


def test_bound(checkpoint: Checkpoint, dataset: MultimodalDataset, split: str = "test", seed: int | None = None) -> dict:
    """Mean recon / kl / total over a split with a fixed evaluation noise seed."""
    model, config = _unpack(checkpoint)
    if dataset.x_dim != model.x_dim or dataset.y_dim != model.y_dim:
        raise ValueError(
            f"model expects (x, y) widths ({model.x_dim}, {model.y_dim}), "
            f"dataset has ({dataset.x_dim}, {dataset.y_dim})"
        )
    X, Y = dataset.split(split)
    return evaluate_bound(model, X, Y, config, eval_seed(config) if seed is None else seed)


test_bound.__test__ = False  # not a pytest test despite the name


# -- Parzen window ------------------------------------------------------------------


@dataclass(frozen=True)
class ParzenConfig:
    samples: int = 100
    sigmas: tuple[float, ...] = tuple(np.geomspace(0.01, 1.0, 20).tolist())
    seed: int = 0

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("need at least 2 samples per instance")
        if not self.sigmas:
            raise ValueError("sigma grid is empty")
        if list(self.sigmas) != sorted(self.sigmas):
            raise ValueError("sigma grid must be ascending")


@dataclass
class ParzenResult:
    sigma: float
    mean_ll: float
    test_ll: np.ndarray
    validation_curve: np.ndarray  # mean validation log-likelihood per grid sigma


Sampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


def model_sampler(model) -> Sampler:
    """Draw decoder means at latents from the (conditional) prior.

    Returns an (n, S, m) array for an (n, A) attribute matrix.
    """

    def sample(Y: np.ndarray, S: int, rng: np.random.Generator) -> np.ndarray:
        n = Y.shape[0]
        reps = np.repeat(Y, S, axis=0)
        eps = rng.standard_normal((n * S, model.latent_dim))
        out = generate_from_attributes(model, reps, eps)
        return out.reshape(n, S, -1)

    return sample


def parzen_scores(
    sampler: Sampler,
    validation: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    config: ParzenConfig,
) -> ParzenResult:
    """Choose sigma on validation, then score the test split at that sigma.

    Each instance gets its own S samples generated from its attributes.  Ties
    in the validation curve go to the smaller sigma.
    """
    rng = make_rng(config.seed)
    Xv, Yv = validation
    Xt, Yt = test
    val = parzen_log_density_batched(Xv, sampler(Yv, config.samples, rng), config.sigmas)
    curve = val.mean(axis=1)
    k = int(np.argmax(curve))
    sigma = float(config.sigmas[k])
    test_ll = parzen_log_density_batched(Xt, sampler(Yt, config.samples, rng), [sigma])[0]
    return ParzenResult(sigma, float(test_ll.mean()), test_ll, curve)


def parzen_eval(checkpoint, dataset: MultimodalDataset, config: ParzenConfig = ParzenConfig()) -> ParzenResult:
    model, _ = _unpack(checkpoint)
    return parzen_scores(
        model_sampler(model), dataset.split("validation"), dataset.split("test"), config
    )


# -- Gauss-Hermite oracle ------------------------------------------------------------


def _hermite_grid(K: int, J: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor-product nodes (K**J, J) and log-weights normalized for N(0, I/2)."""
    u, w = np.polynomial.hermite.hermgauss(K)
    grids = np.meshgrid(*([u] * J), indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
    logw = np.zeros(nodes.shape[0])
    for axes in np.meshgrid(*([np.log(w)] * J), indexing="ij"):
        logw += axes.reshape(-1)
    return nodes, logw - 0.5 * J * math.log(math.pi)


def _check_oracle_dims(model, K: int) -> None:
    if model.latent_dim > 2:
        raise ValueError(f"oracle restricted to J ≤ 2 (model has J = {model.latent_dim})")
    if K < 16:
        raise ValueError("quadrature needs at least 16 nodes per dimension")


def _prior(model, y: np.ndarray) -> GaussianDiag:
    if isinstance(model, CvaeParams):
        return GaussianDiag.standard((model.latent_dim,))
    return prior_net(model, y)


def quadrature_loglik(checkpoint, x, y, nodes: int = 128, center: str = "posterior") -> float:
    """log p(x | y) = log of the integral of p(x | z) p(z | y) dz, by tensor-product Gauss-Hermite.

    ``center="prior"`` substitutes z = mu_prior + sqrt(2) * std_prior * u, so
    the weight function is the prior itself.  ``center="posterior"`` places the
    nodes under the encoder's q(z | x, y) instead and carries the density ratio
    p(z | y) / q(z | x, y) in the integrand.  The two compute the same integral;
    the posterior placement converges far faster once the likelihood is much
    narrower than the prior, which is the normal state of a trained model.
    Terms are accumulated in log space and true Gaussian densities are used
    regardless of the training recon mode.
    """
    model, _ = _unpack(checkpoint)
    _check_oracle_dims(model, nodes)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    u, logw = _hermite_grid(nodes, model.latent_dim)
    p = _prior(model, y)
    if center == "prior":
        z = p.mean.data + math.sqrt(2.0) * p.std * u
        log_ratio = 0.0
    elif center == "posterior":
        q = encoder(model, x, y)
        z = q.mean.data + math.sqrt(2.0) * q.std * u
        log_ratio = _log_normal(z, p) - _log_normal(z, q)
    else:
        raise ValueError(f"unknown quadrature center {center!r}")
    ys = np.broadcast_to(y, (z.shape[0], y.size))
    px = decoder(model, z, ys)
    ll = gaussian_log_density(np.broadcast_to(x, px.mean.shape), px, "exact").data
    return float(logsumexp(logw + ll + log_ratio))


def _log_normal(z: np.ndarray, g: GaussianDiag) -> np.ndarray:
    return -0.5 * np.sum((z - g.mean.data) ** 2 / g.var + g.logvar.data + LOG_2PI, axis=-1)


def expected_bound(checkpoint, x, y, nodes: int = 64) -> dict[str, float]:
    """The bound's expectation over its noise, computed by quadrature.

    ``E_eps[recon]`` is integrated with Gauss-Hermite nodes under q(z | x, y)
    (exact mode); the KL term is already closed-form.  This is the noise-free
    value a single-sample bound estimates.
    """
    model, _ = _unpack(checkpoint)
    _check_oracle_dims(model, nodes)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    q = encoder(model, x, y)
    p = _prior(model, y)
    kl = kl_diag(q, p).item()
    u, logw = _hermite_grid(nodes, model.latent_dim)
    z = q.mean.data + math.sqrt(2.0) * q.std * u
    ys = np.broadcast_to(y, (z.shape[0], y.size))
    px = decoder(model, z, ys)
    ll = gaussian_log_density(np.broadcast_to(x, px.mean.shape), px, "exact").data
    recon = float(np.exp(logw) @ ll)
    return {"recon": recon, "kl": kl, "total": recon - kl}


# -- latent geometry -----------------------------------------------------------------


@dataclass
class LatentMapRow:
    instance: int
    prior_mean: np.ndarray
    prior_std: np.ndarray
    post_mean: np.ndarray
    post_std: np.ndarray


def latent_map(checkpoint, dataset: MultimodalDataset, split: str = "test") -> list[LatentMapRow]:
    model, _ = _unpack(checkpoint)
    idx = dataset.indices(split)
    X, Y = dataset.split(split)
    q = encoder(model, X, Y)
    if isinstance(model, CvaeParams):
        p = GaussianDiag.standard(q.mean.shape)
    else:
        p = prior_net(model, Y)
    return [
        LatentMapRow(int(i), p.mean.data[k], p.std[k], q.mean.data[k], q.std[k])
        for k, i in enumerate(idx)
    ]


def write_latent_csv(rows: Sequence[LatentMapRow], path) -> None:
    J = rows[0].prior_mean.size if rows else 0
    header = ["instance"]
    for prefix in ("prior_mean", "prior_std", "post_mean", "post_std"):
        header += [f"{prefix}_{j}" for j in range(J)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(
                [r.instance]
                + [repr(float(v)) for arr in (r.prior_mean, r.prior_std, r.post_mean, r.post_std) for v in arr]
            )


# -- attribute scoring ----------------------------------------------------------------


@dataclass
class AttributeMatch:
    mode: str
    accuracy: np.ndarray  # per bit: generate-mode accuracy or modify-mode flip success
    preservation: np.ndarray | None = None  # [flipped bit, other bit] agreement with y_orig
    count: int = 0
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for k, name in enumerate(ATTR_NAMES[: self.accuracy.size]):
            row = {"bit": k, "name": name, "accuracy": float(self.accuracy[k])}
            if self.preservation is not None:
                others = np.delete(self.preservation[k], k)
                row["preservation"] = float(others.mean())
            out.append(row)
        return out


def generation_accuracy(model, attrs: np.ndarray) -> np.ndarray:
    """Per-bit oracle agreement of noise-free generations with their attributes."""
    bits, _ = attribute_oracle(generate_from_attributes(model, attrs))
    return (bits == attrs).mean(axis=0)


def modification_scores(model, X: np.ndarray, Y: np.ndarray, bit: int) -> tuple[float, np.ndarray]:
    """Flip one attribute on every (x, y) pair.

    Returns the flip-success rate and, per bit, how often the oracle still
    reports the original value.
    """
    Y_new = Y.copy()
    Y_new[:, bit] = 1.0 - Y_new[:, bit]
    bits, _ = attribute_oracle(modify(model, X, Y, Y_new))
    success = float((bits[:, bit] == Y_new[:, bit]).mean())
    return success, (bits == Y).mean(axis=0)


def attribute_match(checkpoint, dataset: MultimodalDataset, mode: str = "generate", split: str = "test") -> AttributeMatch:
    model, _ = _unpack(checkpoint)
    X, Y = dataset.split(split)
    if mode == "generate":
        return AttributeMatch(mode, generation_accuracy(model, Y), count=Y.shape[0])
    if mode == "modify":
        A = Y.shape[1]
        acc = np.zeros(A)
        keep = np.zeros((A, A))
        for k in range(A):
            acc[k], keep[k] = modification_scores(model, X, Y, k)
        return AttributeMatch(mode, acc, keep, count=Y.shape[0])
    raise ValueError(f"unknown attribute-match mode {mode!r}")


def write_attribute_csv(match: AttributeMatch, path) -> None:
    rows = match.rows()
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# -- reports ------------------------------------------------------------------------


def write_summary(path, model: str, split: str, bound_terms: dict | None, parzen: ParzenResult | None, seeds: dict, **extra) -> dict:
    doc = {
        "model": model,
        "split": split,
        "bound": None
        if bound_terms is None
        else {"recon": bound_terms["recon"], "kl": bound_terms["kl"], "total": bound_terms["total"]},
        "parzen": None if parzen is None else {"sigma": parzen.sigma, "mean_ll": parzen.mean_ll},
        "seeds": seeds,
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return doc
