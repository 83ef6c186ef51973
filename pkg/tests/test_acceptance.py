"""Acceptance battery A1-A10.

Each criterion prints one ``A<n> PASS|FAIL`` line straight to the terminal
(bypassing capture) and then asserts.  Trained models are shared across
criteria through module fixtures; the full module takes roughly 20-30 minutes
on one core.
"""

import itertools
import json
import math

import numpy as np
import pytest

from cmma.data import GlyphConfig, attribute_oracle, generate_dataset, load_dataset, render_glyph, save_dataset
from cmma.eval import (
    ParzenConfig,
    expected_bound,
    generation_accuracy,
    latent_map,
    modification_scores,
    parzen_eval,
    quadrature_loglik,
    test_bound,
    write_latent_csv,
    write_summary,
)
from cmma.gaussian import GaussianDiag, kl_diag, make_rng
from cmma.model import infer_attributes, modify, reconstruct
from cmma.ndgrad import Tensor
from cmma.train import TrainConfig, grad_check, load_checkpoint, save_checkpoint, train

from test_eval import closed_form_marginal, linear_gaussian

ALL_Y = np.array(list(itertools.product([0, 1], repeat=8)), dtype=float)
SIZE, HPOS, VPOS, INTENSITY = 1, 2, 3, 4
CORE_BITS = [SIZE, HPOS, VPOS, INTENSITY]


@pytest.fixture
def report(capsys):
    def emit(tag, ok, detail):
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{tag}: {detail}"

    return emit


# -- shared trained models ---------------------------------------------------------------


@pytest.fixture(scope="module")
def glyphs():
    return generate_dataset(2000, GlyphConfig())


@pytest.fixture(scope="module")
def default_runs(glyphs):
    """Default-config CMMA trainings keyed by seed (A4-A6, A8)."""
    return {}


def trained_cmma(glyphs, cache, seed):
    if seed not in cache:
        cache[seed] = train(glyphs, TrainConfig(seed=seed))
    return cache[seed]


@pytest.fixture(scope="module")
def cmma_default(glyphs, default_runs):
    return trained_cmma(glyphs, default_runs, 0)


@pytest.fixture(scope="module")
def cmma_with_y(glyphs):
    return train(glyphs, TrainConfig(lambda_y=1.0))


# -- A1 ----------------------------------------------------------------------------------


def test_a1_gradient_fidelity(report):
    worst = 0.0
    for seed, mode, lam in itertools.product(range(5), ("exact", "paper"), (0.0, 1.0)):
        cfg = TrainConfig(seed=seed, recon_mode=mode, lambda_y=lam, latent_dim=4,
                          f_hidden=(16,), h_hidden=(24, 16), g_hidden=(16, 24))
        worst = max(worst, grad_check(cfg, 16, 4, tolerance=1e-4, trials=1).worst)
    report("A1", worst <= 1e-4, f"max relative error {worst:.2e} over 20 checks (tolerance 1e-4)")


# -- A2 ----------------------------------------------------------------------------------


def test_a2_kl_correctness(report):
    rng = np.random.default_rng(2024)

    def rand_gauss(d):
        return GaussianDiag(Tensor(rng.normal(size=d)), Tensor(rng.uniform(-2, 2, d)))

    self_kl = max(abs(kl_diag(p, p).item()) for p in (rand_gauss(int(rng.integers(1, 9))) for _ in range(100)))
    min_kl = min(kl_diag(rand_gauss(d), rand_gauss(d)).item() for d in rng.integers(1, 9, 1000))
    worst_z = 0.0
    mc_rng = make_rng(77)
    for _ in range(10):
        d = int(rng.integers(1, 5))
        q, p = rand_gauss(d), rand_gauss(d)
        z = q.mean.data + mc_rng.standard_normal((10**6, d)) * q.std
        logq = -0.5 * np.sum(np.log(2 * np.pi * q.var) + (z - q.mean.data) ** 2 / q.var, axis=1)
        logp = -0.5 * np.sum(np.log(2 * np.pi * p.var) + (z - p.mean.data) ** 2 / p.var, axis=1)
        w = logq - logp
        se = w.std(ddof=1) / math.sqrt(w.size)
        worst_z = max(worst_z, abs(w.mean() - kl_diag(q, p).item()) / se)
    ok = self_kl <= 1e-12 and min_kl >= 0 and worst_z <= 3
    report("A2", ok, f"max |KL(p,p)| {self_kl:.1e}, min KL {min_kl:.2e}, worst MC deviation {worst_z:.2f} SE")


# -- A3 ----------------------------------------------------------------------------------


def test_a3_bound_validity(report, small_glyphs, small_cmma, small_cvae):
    # 500 glyphs hold out 100 instances: validation and test together
    X = np.concatenate([small_glyphs.split("validation")[0], small_glyphs.split("test")[0]])
    Y = np.concatenate([small_glyphs.split("validation")[1], small_glyphs.split("test")[1]])
    details, ok = [], True
    for name, res in (("cmma", small_cmma), ("cvae", small_cvae)):
        m = res.checkpoint.model()
        gaps = np.array([quadrature_loglik(m, x, y, 128) - expected_bound(m, x, y)["total"] for x, y in zip(X, Y)])
        ok &= bool(np.all(gaps >= -1e-3))
        details.append(f"{name} min gap {gaps.min():.2e} on {len(gaps)} points")
    errs = []
    for J, seed in itertools.product((1, 2), range(3)):
        params = linear_gaussian(J, seed=seed)
        r = np.random.default_rng(seed + 10)
        x, y = r.normal(size=3), r.integers(0, 2, 2).astype(float)
        errs.append(abs(quadrature_loglik(params, x, y, 128) - closed_form_marginal(params, x, y)))
    ok &= bool(np.all(np.array(errs) <= 1e-6))
    details.append(f"linear-Gaussian max error {np.max(errs):.1e}")
    report("A3", ok, "; ".join(details))


# -- A4 ----------------------------------------------------------------------------------


def test_a4_training_sanity(report, glyphs, cmma_default):
    hist = cmma_default.history
    m = cmma_default.checkpoint.model()
    X, Y = glyphs.split("test")
    mse = float(np.mean((reconstruct(m, X, Y) - X) ** 2))
    var = glyphs.pixel_variance()
    ok = hist[-1]["train_bound"] > hist[0]["train_bound"] and mse < var
    report("A4", ok, f"train bound {hist[0]['train_bound']:.1f} -> {hist[-1]['train_bound']:.1f}; "
                     f"test MSE {mse:.4f} vs pixel variance {var:.4f}")


# -- A5 ----------------------------------------------------------------------------------


def test_a5_conditional_generation(report, cmma_default):
    acc = generation_accuracy(cmma_default.checkpoint.model(), ALL_Y)
    core = acc[CORE_BITS]
    report("A5", bool(np.all(core >= 0.8)),
           "size/hpos/vpos/intensity accuracy " + " ".join(f"{a:.3f}" for a in core) + " (need >= 0.8)")


# -- A6 ----------------------------------------------------------------------------------


def test_a6_modification(report, glyphs, cmma_default):
    m = cmma_default.checkpoint.model()
    X, Y = glyphs.split("test")
    X, Y = X[:100], Y[:100]
    flip, kept = modification_scores(m, X, Y, INTENSITY)
    identity = modify(m, X, Y, Y).tobytes() == reconstruct(m, X, Y).tobytes()
    ok = flip >= 0.8 and kept[HPOS] >= 0.8 and kept[VPOS] >= 0.8 and identity
    report("A6", ok, f"intensity flipped {flip:.2f}, positions kept {kept[HPOS]:.2f}/{kept[VPOS]:.2f}, "
                     f"unchanged attributes reproduce reconstruction: {identity}")


# -- A7 ----------------------------------------------------------------------------------


def test_a7_attribute_inference(report, glyphs, cmma_with_y):
    m = cmma_with_y.checkpoint.model()
    _, Y = glyphs.split("test")
    Y = Y[:100]
    _, bits = infer_attributes(m, np.stack([render_glyph(y) for y in Y]))
    acc = (bits == Y).mean(axis=0)[CORE_BITS]
    report("A7", bool(np.all(acc >= 0.8)),
           "size/hpos/vpos/intensity accuracy " + " ".join(f"{a:.2f}" for a in acc) + " (need >= 0.8)")


# -- A8 ----------------------------------------------------------------------------------


def test_a8_cmma_versus_cvae(report, glyphs, default_runs, tmp_path_factory):
    out = tmp_path_factory.mktemp("a8")
    scores = {"cmma": [], "cvae": []}
    for seed in range(3):
        runs = {"cmma": trained_cmma(glyphs, default_runs, seed).checkpoint,
                "cvae": train(glyphs, TrainConfig(model="cvae", seed=seed)).checkpoint}
        for kind, ck in runs.items():
            terms = test_bound(ck, glyphs)
            pz = parzen_eval(ck, glyphs, ParzenConfig(seed=seed))
            write_summary(out / f"{kind}_{seed}.json", kind, "test", terms, pz, {"train": seed, "parzen": seed})
            scores[kind].append((terms["total"], pz.mean_ll))
    mean = {k: np.mean(v, axis=0) for k, v in scores.items()}
    bound_ok = bool(mean["cmma"][0] >= mean["cvae"][0])
    parzen_ok = bool(mean["cmma"][1] >= mean["cvae"][1])
    summary = {
        "cmma": {"bound": mean["cmma"][0], "parzen": mean["cmma"][1]},
        "cvae": {"bound": mean["cvae"][0], "parzen": mean["cvae"][1]},
        "bound_inequality_holds": bound_ok,
        "parzen_inequality_holds": parzen_ok,
        "seeds": [0, 1, 2],
    }
    (out / "comparison.json").write_text(json.dumps(summary, indent=2, default=float))
    report("A8", bound_ok and parzen_ok,
           f"bound cmma {mean['cmma'][0]:.1f} vs cvae {mean['cvae'][0]:.1f}; "
           f"parzen cmma {mean['cmma'][1]:.1f} vs cvae {mean['cvae'][1]:.1f}; summary {out / 'comparison.json'}")


# -- A9 ----------------------------------------------------------------------------------


def test_a9_latent_map(report, small_glyphs, small_cmma, tmp_path):
    rows = latent_map(small_cmma.checkpoint, small_glyphs, "test")
    write_latent_csv(rows, tmp_path / "latent.csv")
    n_rows = len((tmp_path / "latent.csv").read_text().splitlines()) - 1
    post = np.mean([r.post_std for r in rows])
    prior = np.mean([r.prior_std for r in rows])
    ok = post < prior and n_rows == small_glyphs.test.size
    report("A9", ok, f"mean posterior std {post:.3f} vs mean prior std {prior:.3f}; "
                     f"{n_rows} CSV rows for {small_glyphs.test.size} test instances")


# -- A10 ---------------------------------------------------------------------------------


def test_a10_determinism_and_persistence(report, tmp_path):
    ds = generate_dataset(200, GlyphConfig(seed=5))
    cfg = TrainConfig(epochs=3, batch=20, lambda_y=1.0, latent_dim=2, f_hidden=(8,), h_hidden=(16,), g_hidden=(16,))
    save_checkpoint(train(ds, cfg).checkpoint, tmp_path / "a.json")
    save_checkpoint(train(ds, cfg).checkpoint, tmp_path / "b.json")
    same_train = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    save_checkpoint(load_checkpoint(tmp_path / "a.json"), tmp_path / "c.json")
    ckpt_trip = (tmp_path / "c.json").read_bytes() == (tmp_path / "a.json").read_bytes()
    save_dataset(ds, tmp_path / "d.bin")
    save_dataset(load_dataset(tmp_path / "d.bin"), tmp_path / "e.bin")
    data_trip = (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes() and load_dataset(tmp_path / "d.bin") == ds
    bits, _ = attribute_oracle(np.stack([render_glyph(y) for y in ALL_Y]))
    oracle = int(np.sum(np.all(bits == ALL_Y, axis=1)))
    ok = same_train and ckpt_trip and data_trip and oracle == 256
    report("A10", ok, f"identical training {same_train}, checkpoint round trip {ckpt_trip}, "
                      f"dataset round trip {data_trip}, oracle {oracle}/256")
