"""CMMA and CVAE networks, their variational bounds, and latent-space operations.

CMMA is the directed model y -> z -> x with a learned conditional prior
``p_f(z|y)``, decoder ``p_g(x|z)`` and recognition network ``q_h(z|x,y)``.
An optional network ``h2`` models ``q(y|z)`` for the attribute term and for
attribute inference.  The CVAE baseline shares the encoder/decoder layout but
uses a fixed N(0, I) prior and a decoder that also sees y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import ndgrad as nd
from .errors import ShapeError
from .gaussian import GaussianDiag, ReconMode, gaussian_log_density, kl_diag, reparam_sample
from .ndgrad import Parameter, Tensor

LOGVAR_LIMIT = 10.0


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        widths = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")


class GaussianMlp:
    """Softplus MLP with two parallel linear heads: mean and log-variance.

    The log-variance head is squashed to (-LOGVAR_LIMIT, LOGVAR_LIMIT) with a
    scaled tanh so that ``exp`` can neither overflow nor collapse.
    """

    def __init__(self, name: str, spec: MlpSpec, rng: np.random.Generator | None = None):
        self.name = name
        self.spec = spec
        self.hidden: list[tuple[Parameter, Parameter]] = []
        fan_in = spec.input_dim
        for i, width in enumerate(spec.hidden):
            self.hidden.append(self._layer(f"{name}.hidden{i}", fan_in, width, rng))
            fan_in = width
        self.mu = self._layer(f"{name}.mu", fan_in, spec.output_dim, rng)
        self.logvar = self._layer(f"{name}.logvar", fan_in, spec.output_dim, rng)

    @staticmethod
    def _layer(prefix, fan_in, fan_out, rng):
        if rng is None:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        return Parameter(f"{prefix}.W", w), Parameter(f"{prefix}.b", np.zeros(fan_out))

    def parameters(self) -> list[Parameter]:
        out = [p for layer in self.hidden for p in layer]
        return out + [*self.mu, *self.logvar]

    def __call__(self, inp) -> GaussianDiag:
        inp = nd.as_tensor(inp)
        if inp.shape[-1] != self.spec.input_dim:
            raise ShapeError(
                f"{self.name}: expected input width {self.spec.input_dim}, got shape {inp.shape}"
            )
        act = inp
        for w, b in self.hidden:
            act = nd.softplus(nd.add_bias(act @ w, b))
        mean = nd.add_bias(act @ self.mu[0], self.mu[1])
        raw = nd.add_bias(act @ self.logvar[0], self.logvar[1])
        logvar = nd.scale(nd.tanh(nd.scale(raw, 1.0 / LOGVAR_LIMIT)), LOGVAR_LIMIT)
        return GaussianDiag(mean, logvar)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _ParamsMixin:
    def networks(self) -> Iterator[GaussianMlp]:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        return [p for net in self.networks() for p in net.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


@dataclass
class CmmaParams(_ParamsMixin):
    f: GaussianMlp
    h: GaussianMlp
    g: GaussianMlp
    h2: GaussianMlp | None
    x_dim: int
    y_dim: int
    latent_dim: int
    encoder_uses_y: bool = True
    y_mean: np.ndarray = field(default=None)  # type: ignore[assignment]

    kind = "cmma"

    def __post_init__(self):
        J = self.latent_dim
        enc_in = self.x_dim + (self.y_dim if self.encoder_uses_y else 0)
        checks = [
            (self.f.spec.input_dim, self.y_dim, "f input"),
            (self.f.spec.output_dim, J, "f output"),
            (self.h.spec.input_dim, enc_in, "h input"),
            (self.h.spec.output_dim, J, "h output"),
            (self.g.spec.input_dim, J, "g input"),
            (self.g.spec.output_dim, self.x_dim, "g output"),
        ]
        if self.h2 is not None:
            checks += [
                (self.h2.spec.input_dim, J, "h2 input"),
                (self.h2.spec.output_dim, self.y_dim, "h2 output"),
            ]
        for got, want, what in checks:
            if got != want:
                raise ShapeError(f"{what} width {got} inconsistent with expected {want}")
        if self.y_mean is None:
            self.y_mean = np.full(self.y_dim, 0.5)

    def networks(self):
        yield from (self.f, self.h, self.g)
        if self.h2 is not None:
            yield self.h2

    @classmethod
    def create(
        cls,
        x_dim: int,
        y_dim: int,
        latent_dim: int,
        f_hidden: Sequence[int] = (64,),
        h_hidden: Sequence[int] = (256, 64),
        g_hidden: Sequence[int] = (64, 256),
        y_decoder: bool = False,
        h2_hidden: Sequence[int] | None = None,
        encoder_uses_y: bool = True,
        rng: np.random.Generator | None = None,
    ) -> "CmmaParams":
        """Build the networks; ``rng=None`` gives an all-zero initialization."""
        J = latent_dim
        enc_in = x_dim + (y_dim if encoder_uses_y else 0)
        f = GaussianMlp("f", MlpSpec(y_dim, tuple(f_hidden), J), rng)
        h = GaussianMlp("h", MlpSpec(enc_in, tuple(h_hidden), J), rng)
        g = GaussianMlp("g", MlpSpec(J, tuple(g_hidden), x_dim), rng)
        h2 = None
        if y_decoder:
            hidden = tuple(f_hidden if h2_hidden is None else h2_hidden)
            h2 = GaussianMlp("h2", MlpSpec(J, hidden, y_dim), rng)
        return cls(f, h, g, h2, x_dim, y_dim, J, encoder_uses_y)


@dataclass
class CvaeParams(_ParamsMixin):
    encoder: GaussianMlp
    decoder: GaussianMlp
    x_dim: int
    y_dim: int
    latent_dim: int
    y_mean: np.ndarray = field(default=None)  # type: ignore[assignment]

    kind = "cvae"
    encoder_uses_y = True
    h2 = None

    def __post_init__(self):
        J = self.latent_dim
        if self.encoder.spec.input_dim != self.x_dim + self.y_dim or self.encoder.spec.output_dim != J:
            raise ShapeError("CVAE encoder must map (x, y) to the latent width")
        if self.decoder.spec.input_dim != J + self.y_dim or self.decoder.spec.output_dim != self.x_dim:
            raise ShapeError("CVAE decoder must map (z, y) to the image width")
        if self.y_mean is None:
            self.y_mean = np.full(self.y_dim, 0.5)

    def networks(self):
        yield from (self.encoder, self.decoder)

    @classmethod
    def create(
        cls,
        x_dim: int,
        y_dim: int,
        latent_dim: int,
        h_hidden: Sequence[int] = (256, 64),
        g_hidden: Sequence[int] = (64, 256),
        rng: np.random.Generator | None = None,
    ) -> "CvaeParams":
        enc = GaussianMlp("enc", MlpSpec(x_dim + y_dim, tuple(h_hidden), latent_dim), rng)
        dec = GaussianMlp("dec", MlpSpec(latent_dim + y_dim, tuple(g_hidden), x_dim), rng)
        return cls(enc, dec, x_dim, y_dim, latent_dim)


@dataclass(frozen=True)
class BoundConfig:
    recon_mode: ReconMode = "exact"
    lambda_y: float = 0.0


@dataclass
class BoundBreakdown:
    """Per-example terms of the variational bound (shape ``(n,)`` or scalar)."""

    recon: Tensor
    kl: Tensor
    y_term: Tensor | None
    bound: Tensor
    lambda_y: float = 0.0

    def means(self) -> dict[str, float]:
        y = 0.0 if self.y_term is None else float(np.mean(self.y_term.data))
        return {
            "recon": float(np.mean(self.recon.data)),
            "kl": float(np.mean(self.kl.data)),
            "y_term": y,
            "total": float(np.mean(self.bound.data)),
        }


# -- network entry points -------------------------------------------------------


def prior_net(params: CmmaParams, y) -> GaussianDiag:
    """p_f(z | y)."""
    return params.f(_t(y))


def encoder(params: CmmaParams | CvaeParams, x, y) -> GaussianDiag:
    """q_h(z | x, y); drops y when the model was built with ``encoder_uses_y=False``."""
    x, y = _t(x), _t(y)
    if isinstance(params, CvaeParams):
        return params.encoder(nd.concat([x, y]))
    if not params.encoder_uses_y:
        return params.h(x)
    return params.h(nd.concat([x, y]))


def decoder(params: CmmaParams | CvaeParams, z, y=None) -> GaussianDiag:
    """p_g(x | z) for CMMA, p(x | z, y) for the CVAE."""
    z = _t(z)
    if isinstance(params, CvaeParams):
        if y is None:
            raise ValueError("the CVAE decoder is conditioned on y")
        return params.decoder(nd.concat([z, _t(y)]))
    return params.g(z)


def y_decoder(params: CmmaParams, z) -> GaussianDiag:
    """q_{h2}(y | z)."""
    if getattr(params, "h2", None) is None:
        raise ValueError("attribute inference requires the y-decoder")
    return params.h2(_t(z))


# -- bounds ----------------------------------------------------------------------


def cmma_bound(
    params: CmmaParams,
    x,
    y,
    eps,
    config: BoundConfig = BoundConfig(),
    eps_y=None,
) -> BoundBreakdown:
    """Single-noise-sample estimate of the CMMA conditional bound.

    ``eps`` drives the posterior sample; ``eps_y`` drives the prior sample used
    by the optional attribute term (defaults to ``eps``).
    """
    x, y, eps = _t(x), _t(y), _t(eps)
    q = encoder(params, x, y)
    prior = prior_net(params, y)
    z = reparam_sample(q, eps)
    recon = gaussian_log_density(x, decoder(params, z), config.recon_mode)
    kl = kl_diag(q, prior)
    bound = recon - kl
    y_term = None
    if config.lambda_y > 0:
        z_prior = reparam_sample(prior, eps if eps_y is None else _t(eps_y))
        y_term = gaussian_log_density(y, y_decoder(params, z_prior), "exact")
        bound = bound + nd.scale(y_term, config.lambda_y)
    return BoundBreakdown(recon, kl, y_term, bound, config.lambda_y)


def cvae_bound(params: CvaeParams, x, y, eps, config: BoundConfig = BoundConfig()) -> BoundBreakdown:
    """E_q log p(x | y, z) - KL(q(z | x, y) || N(0, I)), single noise sample."""
    x, y, eps = _t(x), _t(y), _t(eps)
    q = encoder(params, x, y)
    z = reparam_sample(q, eps)
    recon = gaussian_log_density(x, decoder(params, z, y), config.recon_mode)
    kl = kl_diag(q, GaussianDiag.standard(q.mean.shape))
    return BoundBreakdown(recon, kl, None, recon - kl, 0.0)


def bound(params, x, y, eps, config: BoundConfig = BoundConfig(), eps_y=None) -> BoundBreakdown:
    if isinstance(params, CvaeParams):
        return cvae_bound(params, x, y, eps, config)
    return cmma_bound(params, x, y, eps, config, eps_y)


# -- generation and editing --------------------------------------------------------


def generate_from_attributes(params, y, eps=None) -> np.ndarray:
    """Decoder mean at a latent drawn from the prior; ``eps=None`` means zero noise.

    For CMMA this is ``g_mu(f_mu(y))`` when the noise is zero.
    """
    y = _t(y)
    if isinstance(params, CvaeParams):
        lead = y.shape[:-1] + (params.latent_dim,)
        prior = GaussianDiag.standard(lead)
    else:
        prior = prior_net(params, y)
    z = prior.mean if eps is None else reparam_sample(prior, eps)
    return decoder(params, z, y).mean.data


def modify(params, x, y_orig, y_new) -> np.ndarray:
    """Edit an image by moving its latent code along the prior-mean difference.

    CMMA: ``z = h_mu(x, y_new) + f_mu(y_new) - f_mu(y_orig)``, decoded to its
    mean.  With ``y_new == y_orig`` the shift is exactly zero.  The CVAE has no
    conditional prior, so it encodes with ``y_orig`` and decodes with ``y_new``.
    """
    x, y_orig, y_new = _t(x), _t(y_orig), _t(y_new)
    if isinstance(params, CvaeParams):
        z = encoder(params, x, y_orig).mean
        return decoder(params, z, y_new).mean.data
    z = encoder(params, x, y_new).mean.data
    delta = prior_net(params, y_new).mean.data - prior_net(params, y_orig).mean.data
    return decoder(params, Tensor(z + delta)).mean.data


def reconstruct(params, x, y) -> np.ndarray:
    """Decoder mean at the posterior mean."""
    z = encoder(params, x, y).mean
    return decoder(params, z, y).mean.data


def threshold(values, level: float = 0.5) -> np.ndarray:
    return (np.asarray(values) >= level).astype(np.float64)


def infer_attributes(params: CmmaParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Recover attributes from an image alone.

    The encoder receives the training-set attribute mean as a neutral y; the
    y-decoder mean is returned together with its 0.5-thresholded bits.
    """
    if getattr(params, "h2", None) is None:
        raise ValueError("attribute inference requires the y-decoder")
    x = _t(x)
    y_bar = np.broadcast_to(params.y_mean, x.shape[:-1] + (params.y_dim,))
    z = encoder(params, x, Tensor(y_bar)).mean
    probs = y_decoder(params, z).mean.data
    return probs, threshold(probs)
