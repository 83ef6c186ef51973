"""Adagrad minibatch training, gradient checking and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .data import MultimodalDataset
from .errors import FormatError, NonFiniteError, ShapeError, TruncatedError, VersionError
from .gaussian import make_rng
from .model import BoundConfig, CmmaParams, CvaeParams, bound
from .ndgrad import Parameter

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_GRADCHECK_PARAMS = 5000


@dataclass(frozen=True)
class TrainConfig:
    model: str = "cmma"
    epochs: int = 200
    batch: int = 5  # best validation bound within the 200-epoch budget
    lr: float = 0.01
    delta: float = 1e-8
    seed: int = 0
    lambda_y: float = 0.0
    recon_mode: str = "exact"
    encoder_uses_y: bool = True
    latent_dim: int = 8
    f_hidden: tuple[int, ...] = (64,)
    h_hidden: tuple[int, ...] = (256, 64)
    g_hidden: tuple[int, ...] = (64, 256)

    def __post_init__(self):
        if self.model not in ("cmma", "cvae"):
            raise ValueError(f"model must be 'cmma' or 'cvae', got {self.model!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.recon_mode not in ("exact", "paper"):
            raise ValueError(f"unknown reconstruction mode {self.recon_mode!r}")
        if self.lambda_y < 0:
            raise ValueError("lambda_y must be non-negative")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        for name in ("f_hidden", "h_hidden", "g_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))

    @property
    def bound_config(self) -> BoundConfig:
        return BoundConfig(recon_mode=self.recon_mode, lambda_y=self.lambda_y)  # type: ignore[arg-type]

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("f_hidden", "h_hidden", "g_hidden"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def build_params(config: TrainConfig, x_dim: int, y_dim: int, rng=None):
    """Instantiate the networks named by ``config``; ``rng=None`` zero-initializes."""
    if config.model == "cvae":
        return CvaeParams.create(x_dim, y_dim, config.latent_dim, config.h_hidden, config.g_hidden, rng)
    return CmmaParams.create(
        x_dim,
        y_dim,
        config.latent_dim,
        config.f_hidden,
        config.h_hidden,
        config.g_hidden,
        y_decoder=config.lambda_y > 0,
        encoder_uses_y=config.encoder_uses_y,
        rng=rng,
    )


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdagradState:
    lr: float = 0.01
    delta: float = 1e-8
    accum: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def adagrad_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdagradState) -> None:
    """In place: G += g**2; theta -= lr * g / (sqrt(G) + delta)."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"{p.name}: gradient shape {g.shape} vs parameter {p.shape}")
        G = state.accum.get(p.name)
        if G is None:
            G = state.accum[p.name] = np.zeros_like(p.data)
        G += g * g
        p.data -= state.lr * g / (np.sqrt(G) + state.delta)
    state.steps += 1


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    x_dim: int
    y_dim: int
    params: dict[str, np.ndarray]
    y_mean: np.ndarray
    adagrad: AdagradState | None = None
    metrics: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, config, model, adagrad=None, metrics=None) -> "Checkpoint":
        return cls(
            config=config,
            x_dim=model.x_dim,
            y_dim=model.y_dim,
            params={p.name: p.data.copy() for p in model.parameters()},
            y_mean=np.array(model.y_mean, dtype=np.float64),
            adagrad=adagrad,
            metrics=dict(metrics or {}),
        )

    def model(self):
        """Rebuild the parameter collection carried by this checkpoint."""
        m = build_params(self.config, self.x_dim, self.y_dim, rng=None)
        named = m.named_parameters()
        if set(named) != set(self.params):
            raise FormatError("checkpoint parameters do not match the configured architecture")
        for name, p in named.items():
            value = self.params[name]
            if value.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape}, architecture needs {p.shape}")
            p.data[...] = value
        m.y_mean = self.y_mean.copy()
        return m

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return _encode(self) == _encode(other)


def _array_record(name: str, arr: np.ndarray) -> dict:
    return {"name": name, "shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _decode_array(rec: dict) -> tuple[str, np.ndarray]:
    shape = [int(s) for s in rec["shape"]]
    data = rec["data"]
    if math.prod(shape) != len(data):
        raise ShapeError(
            f"{rec['name']}: declared shape {shape} holds {math.prod(shape)} values, found {len(data)}"
        )
    return rec["name"], np.array(data, dtype=np.float64).reshape(shape)


def _encode(c: Checkpoint) -> dict:
    doc = {
        "format_version": c.format_version,
        "config": c.config.to_dict(),
        "dims": {"x": c.x_dim, "y": c.y_dim},
        "y_mean": c.y_mean.tolist(),
        "params": [_array_record(n, a) for n, a in c.params.items()],
        "metrics": c.metrics,
    }
    if c.adagrad is not None:
        doc["adagrad"] = {
            "lr": c.adagrad.lr,
            "delta": c.adagrad.delta,
            "steps": c.adagrad.steps,
            "accumulators": [_array_record(n, a) for n, a in c.adagrad.accum.items()],
        }
    return doc


def save_checkpoint(c: Checkpoint, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    text = json.dumps(_encode(c), allow_nan=False)
    Path(path).write_text(text, encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TruncatedError(f"checkpoint is not complete JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("checkpoint root must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(FORMAT_VERSION, version)
    try:
        config = TrainConfig.from_dict(doc["config"])
        params = dict(_decode_array(r) for r in doc["params"])
        adagrad = None
        if doc.get("adagrad") is not None:
            a = doc["adagrad"]
            accum = dict(_decode_array(r) for r in a["accumulators"])
            adagrad = AdagradState(a["lr"], a["delta"], accum, a.get("steps", 0))
        return Checkpoint(
            config=config,
            x_dim=int(doc["dims"]["x"]),
            y_dim=int(doc["dims"]["y"]),
            params=params,
            y_mean=np.array(doc["y_mean"], dtype=np.float64),
            adagrad=adagrad,
            metrics=doc.get("metrics", {}),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing field {exc}") from exc


# -- training ---------------------------------------------------------------------


def draw_noise(rng: np.random.Generator, n: int, config: TrainConfig):
    eps = rng.standard_normal((n, config.latent_dim))
    eps_y = rng.standard_normal((n, config.latent_dim)) if config.lambda_y > 0 else None
    return eps, eps_y


def evaluate_bound(model, X, Y, config: TrainConfig, seed: int) -> dict[str, float]:
    """Mean bound terms over (X, Y) with noise drawn from a dedicated seed."""
    eps, eps_y = draw_noise(make_rng(seed), X.shape[0], config)
    return bound(model, X, Y, eps, config.bound_config, eps_y).means()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best: Checkpoint
    history: list[dict]


def train(dataset: MultimodalDataset, config: TrainConfig) -> TrainResult:
    """Maximize the mean bound over the training split with Adagrad.

    Every source of randomness (initialization, shuffling, noise) comes from
    ``make_rng(config.seed)``; validation noise comes from ``seed + 1`` so that
    epoch-to-epoch validation numbers are comparable.
    """
    rng = make_rng(config.seed)
    X, Y = dataset.split("train")
    Xv, Yv = dataset.split("validation")
    model = build_params(config, dataset.x_dim, dataset.y_dim, rng)
    model.y_mean = Y.mean(axis=0)
    params = model.parameters()
    state = AdagradState(config.lr, config.delta)
    bcfg = config.bound_config
    history: list[dict] = []
    best_val = -np.inf
    best_params = None
    n = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch)):
            idx = order[start : start + config.batch]
            eps, eps_y = draw_noise(rng, idx.size, config)
            nd.zero_grad(params)
            with nd.Tape() as tape:
                terms = bound(model, X[idx], Y[idx], eps, bcfg, eps_y)
                loss = nd.scale(nd.mean(terms.bound), -1.0)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            adagrad_step(params, [p.grad for p in params], state)
            total += -value * idx.size
        val = evaluate_bound(model, Xv, Yv, config, config.seed + 1)
        row = {"epoch": epoch, "train_bound": total / n, "val_bound": val["total"]}
        history.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, row["train_bound"], row["val_bound"])
        if val["total"] > best_val:
            best_val = val["total"]
            best_params = {p.name: p.data.copy() for p in params}
    metrics = {"final": history[-1], "history": history, "best_val_bound": best_val}
    final = Checkpoint.from_model(config, model, state, metrics)
    best = Checkpoint.from_model(config, model, None, {"best_val_bound": best_val})
    best.params = best_params
    return TrainResult(final, best, history)


# -- gradient check ---------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    errors: list[dict[str, float]]  # one {block: max relative error} per trial

    @property
    def max_errors(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for trial in self.errors:
            for block, err in trial.items():
                out[block] = max(out.get(block, 0.0), err)
        return out

    @property
    def worst(self) -> float:
        return max(self.max_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def grad_check(
    config: TrainConfig,
    x_dim: int,
    y_dim: int,
    tolerance: float = 1e-4,
    trials: int = 5,
    batch: int = 2,
    fd_eps: float = 1e-5,
    zero_init: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of the mean bound against central differences.

    Each trial seeds initialization, inputs and frozen noise from its own seed.
    """
    results = []
    for trial in range(trials):
        rng = make_rng(config.seed + trial)
        model = build_params(config, x_dim, y_dim, None if zero_init else rng)
        params = model.parameters()
        count = sum(p.size for p in params)
        if count > MAX_GRADCHECK_PARAMS:
            raise ValueError(f"{count} parameters is too many for finite differences")
        x = rng.uniform(0.0, 1.0, (batch, x_dim))
        y = rng.integers(0, 2, (batch, y_dim)).astype(np.float64)
        eps, eps_y = draw_noise(rng, batch, config)
        bcfg = config.bound_config

        def objective():
            return nd.mean(bound(model, x, y, eps, bcfg, eps_y).bound)

        analytic = nd.grad_of(objective, params)
        numeric = nd.finite_difference_gradient(objective, params, fd_eps)
        per_block: dict[str, float] = {}
        for p, a, n in zip(params, analytic, numeric):
            block = p.name.split(".")[0]
            per_block[block] = max(per_block.get(block, 0.0), nd.relative_error(a, n))
        results.append(per_block)
    return GradCheckReport(tolerance, results)
