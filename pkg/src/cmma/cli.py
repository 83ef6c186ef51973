"""Command-line entry point: ``cmma <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command itself
fails (bad input file, validation failure, numerical error).  Every run first
prints its resolved configuration as one JSON line on stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import GlyphConfig, generate_dataset, load_dataset, read_pgm, save_dataset, write_pgm
from .errors import CmmaError
from .eval import (
    ParzenConfig,
    attribute_match,
    eval_seed,
    expected_bound,
    latent_map,
    parzen_eval,
    quadrature_loglik,
    test_bound,
    write_attribute_csv,
    write_latent_csv,
    write_summary,
)
from .gaussian import make_rng
from .model import generate_from_attributes, infer_attributes, modify
from .train import TrainConfig, grad_check, load_checkpoint, save_checkpoint, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so ``run`` controls the status code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_help()}")


def _bits(text: str) -> np.ndarray:
    try:
        vals = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated 0/1 bits, got {text!r}") from None
    if not vals or any(v not in (0, 1) for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated 0/1 bits, got {text!r}")
    return np.array(vals, dtype=np.float64)


def _widths(text: str) -> tuple[int, ...]:
    if text.strip() == "":
        return ()
    try:
        vals = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer widths, got {text!r}") from None
    if any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"layer widths must be positive, got {text!r}")
    return vals


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _model_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--model", choices=("cmma", "cvae"), default=d.model)
    p.add_argument("--latent-dim", type=_positive_int, default=d.latent_dim)
    p.add_argument("--recon-mode", choices=("exact", "paper"), default=d.recon_mode)
    p.add_argument("--lambda-y", type=float, default=d.lambda_y)
    p.add_argument("--no-encoder-y", action="store_true", help="encoder sees x only")
    p.add_argument("--f-hidden", type=_widths, default=d.f_hidden)
    p.add_argument("--h-hidden", type=_widths, default=d.h_hidden)
    p.add_argument("--g-hidden", type=_widths, default=d.g_hidden)
    p.add_argument("--seed", type=int, default=d.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmma", description="Conditional multimodal autoencoder toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("gen-data", help="generate a glyph dataset")
    p.add_argument("--n", type=_positive_int, default=2000)
    p.add_argument("--noise", type=float, default=GlyphConfig.noise)
    p.add_argument("--side", type=int, default=GlyphConfig.side)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    _model_flags(p)
    d = TrainConfig()
    p.add_argument("--epochs", type=_positive_int, default=d.epochs)
    p.add_argument("--batch", type=_positive_int, default=d.batch)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--delta", type=float, default=d.delta)
    p.add_argument("--keep", choices=("final", "best"), default="final", help="which parameters to save")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-bound", help="mean variational bound on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--seed", type=int, default=None, help="noise seed (default: training seed + 1)")
    p.add_argument("--out", help="summary JSON path")

    p = sub.add_parser("eval-parzen", help="conditional Parzen-window score on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=_positive_int, default=ParzenConfig.samples)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="summary JSON path")

    p = sub.add_parser("eval-oracle", help="quadrature log-likelihood versus the bound (J <= 2)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--count", type=_positive_int, default=100)
    p.add_argument("--nodes", type=_positive_int, default=128)
    p.add_argument("--center", choices=("posterior", "prior"), default="posterior",
                   help="Gaussian the quadrature grid is built around")
    p.add_argument("--out", help="report JSON path")

    p = sub.add_parser("generate", help="render an image from attribute bits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--attrs", type=_bits, required=True)
    p.add_argument("--seed", type=int, default=None, help="draw a latent sample instead of the prior mean")
    p.add_argument("--out", required=True)

    p = sub.add_parser("modify", help="change the attributes of an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--attrs-old", type=_bits, required=True)
    p.add_argument("--attrs-new", type=_bits, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer-attrs", help="predict attribute bits of an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="JSON path")

    p = sub.add_parser("latent-map", help="export prior and posterior moments as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("attr-match", help="oracle scoring of generated or modified images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("generate", "modify"), default="generate")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="analytic versus finite-difference gradients")
    d = TrainConfig(latent_dim=4, f_hidden=(16,), h_hidden=(24, 16), g_hidden=(16, 24))
    p.add_argument("--model", choices=("cmma", "cvae"), default="cmma")
    p.add_argument("--latent-dim", type=_positive_int, default=d.latent_dim)
    p.add_argument("--recon-mode", choices=("exact", "paper"), default="exact")
    p.add_argument("--lambda-y", type=float, default=0.0)
    p.add_argument("--f-hidden", type=_widths, default=d.f_hidden)
    p.add_argument("--h-hidden", type=_widths, default=d.h_hidden)
    p.add_argument("--g-hidden", type=_widths, default=d.g_hidden)
    p.add_argument("--x-dim", type=_positive_int, default=16)
    p.add_argument("--y-dim", type=_positive_int, default=4)
    p.add_argument("--trials", type=_positive_int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=42)
    return parser


def _train_config(a) -> TrainConfig:
    return TrainConfig(
        model=a.model,
        epochs=getattr(a, "epochs", 1),
        batch=getattr(a, "batch", TrainConfig.batch),
        lr=getattr(a, "lr", TrainConfig.lr),
        delta=getattr(a, "delta", TrainConfig.delta),
        seed=a.seed,
        lambda_y=a.lambda_y,
        recon_mode=a.recon_mode,
        encoder_uses_y=not getattr(a, "no_encoder_y", False),
        latent_dim=a.latent_dim,
        f_hidden=a.f_hidden,
        h_hidden=a.h_hidden,
        g_hidden=a.g_hidden,
    )


def _emit(doc, path=None) -> None:
    text = json.dumps(doc, indent=2)
    if path:
        Path(path).write_text(text, encoding="utf-8")
    print(text)


def _check_attrs(model, *vectors) -> None:
    for v in vectors:
        if v.size != model.y_dim:
            raise ValueError(f"model expects {model.y_dim} attribute bits, got {v.size}")


def _load_image(model, path) -> np.ndarray:
    img = read_pgm(path).reshape(-1)
    if img.size != model.x_dim:
        raise ValueError(f"model expects {model.x_dim} pixels, image {path} has {img.size}")
    return img


def _cmd_gen_data(a) -> None:
    ds = generate_dataset(a.n, GlyphConfig(side=a.side, noise=a.noise, seed=a.seed))
    save_dataset(ds, a.out)
    _emit({"out": a.out, "n": ds.n, "pixel_variance": ds.pixel_variance()})


def _cmd_train(a) -> None:
    config = _train_config(a)
    result = train(load_dataset(a.data), config)
    ck = result.best if a.keep == "best" else result.checkpoint
    save_checkpoint(ck, a.out)
    _emit({"out": a.out, "final": result.history[-1], "first": result.history[0]})


def _cmd_eval_bound(a) -> None:
    ck = load_checkpoint(a.ckpt)
    seed = eval_seed(ck.config) if a.seed is None else a.seed
    terms = test_bound(ck, load_dataset(a.data), a.split, seed)
    doc = {"model": ck.config.model, "split": a.split, "bound": terms, "seeds": {"eval": seed}}
    if a.out:
        write_summary(a.out, ck.config.model, a.split, terms, None, {"eval": seed})
    print(json.dumps(doc, indent=2))


def _cmd_eval_parzen(a) -> None:
    ck = load_checkpoint(a.ckpt)
    res = parzen_eval(ck, load_dataset(a.data), ParzenConfig(samples=a.samples, seed=a.seed))
    doc = {"model": ck.config.model, "split": "test", "parzen": {"sigma": res.sigma, "mean_ll": res.mean_ll}}
    if a.out:
        write_summary(a.out, ck.config.model, "test", None, res, {"parzen": a.seed})
    print(json.dumps(doc, indent=2))


def _cmd_eval_oracle(a) -> None:
    ck = load_checkpoint(a.ckpt)
    model = ck.model()
    if model.latent_dim > 2:
        raise ValueError(f"oracle restricted to J ≤ 2 (checkpoint has J = {model.latent_dim})")
    X, Y = load_dataset(a.data).split(a.split)
    X, Y = X[: a.count], Y[: a.count]
    # the bound averaged over encoder noise, so the comparison is noise-free
    lower = np.array([expected_bound(model, x, y)["total"] for x, y in zip(X, Y)])
    ll = np.array([quadrature_loglik(model, x, y, a.nodes, a.center) for x, y in zip(X, Y)])
    gap = ll - lower
    _emit(
        {
            "model": ck.config.model,
            "count": int(X.shape[0]),
            "nodes": a.nodes,
            "center": a.center,
            "mean_loglik": float(ll.mean()),
            "mean_bound": float(lower.mean()),
            "min_gap": float(gap.min()),
            "violations": int(np.sum(gap < -1e-3)),
        },
        a.out,
    )


def _cmd_generate(a) -> None:
    model = load_checkpoint(a.ckpt).model()
    _check_attrs(model, a.attrs)
    eps = None if a.seed is None else make_rng(a.seed).standard_normal(model.latent_dim)
    write_pgm(a.out, generate_from_attributes(model, a.attrs, eps))


def _cmd_modify(a) -> None:
    model = load_checkpoint(a.ckpt).model()
    _check_attrs(model, a.attrs_old, a.attrs_new)
    x = _load_image(model, a.image)
    write_pgm(a.out, modify(model, x, a.attrs_old, a.attrs_new))


def _cmd_infer_attrs(a) -> None:
    model = load_checkpoint(a.ckpt).model()
    probs, bits = infer_attributes(model, _load_image(model, a.image))
    _emit({"bits": bits.astype(int).tolist(), "probs": probs.tolist()}, a.out)


def _cmd_latent_map(a) -> None:
    rows = latent_map(load_checkpoint(a.ckpt), load_dataset(a.data), a.split)
    write_latent_csv(rows, a.out)


def _cmd_attr_match(a) -> None:
    match = attribute_match(load_checkpoint(a.ckpt), load_dataset(a.data), a.mode, a.split)
    write_attribute_csv(match, a.out)
    print(json.dumps(match.rows(), indent=2))


def _cmd_gradcheck(a) -> int:
    config = _train_config(a)
    report = grad_check(config, a.x_dim, a.y_dim, a.tolerance, a.trials)
    print(json.dumps({"max_errors": report.max_errors, "worst": report.worst, "passed": report.passed}, indent=2))
    return 0 if report.passed else 2


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval-bound": _cmd_eval_bound,
    "eval-parzen": _cmd_eval_parzen,
    "eval-oracle": _cmd_eval_oracle,
    "generate": _cmd_generate,
    "modify": _cmd_modify,
    "infer-attrs": _cmd_infer_attrs,
    "latent-map": _cmd_latent_map,
    "attr-match": _cmd_attr_match,
    "gradcheck": _cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    resolved = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(args).items()}
    print(json.dumps(resolved, sort_keys=True))
    try:
        status = COMMANDS[args.command](args)
    except (CmmaError, ValueError, OSError, FloatingPointError) as e:
        print(f"cmma {args.command}: {e}", file=sys.stderr)
        return 2
    return status or 0


def main() -> None:
    sys.exit(run())
