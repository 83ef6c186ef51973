import itertools
import re
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmma.data import (
    MAGIC,
    GlyphConfig,
    MultimodalDataset,
    attribute_oracle,
    generate_dataset,
    load_dataset,
    read_pgm,
    render_glyph,
    save_dataset,
    shape_mask,
    write_pgm,
)
from cmma.errors import MagicError, RangeError, TruncatedError
from cmma.gaussian import make_rng

ALL_Y = [np.array(bits, dtype=float) for bits in itertools.product([0, 1], repeat=8)]


def reference_render(bits, s=16):
    """Plain-loop restatement of the glyph rules, kept independent of the module."""
    half = lambda v: int(v + 0.5)  # noqa: E731 - values are positive
    r = (half(0.19 * s), half(0.31 * s))[int(bits[1])]
    cx = (half(0.31 * s), half(0.63 * s))[int(bits[2])]
    cy = (half(0.31 * s), half(0.63 * s))[int(bits[3])]
    v = 1.0 if bits[4] else 0.5

    def inside(row, col):
        dx, dy = col - cx, row - cy
        if bits[0]:
            return dx * dx + dy * dy <= r * r
        return abs(dx) <= r and abs(dy) <= r

    img = [[0.0] * s for _ in range(s)]
    if bits[5]:
        for i in range(s):
            img[0][i] = img[s - 1][i] = img[i][0] = img[i][s - 1] = v / 2
    for row in range(s):
        for col in range(s):
            if not inside(row, col):
                continue
            if bits[7]:
                nbrs = [(row - 1, col), (row + 1, col), (row, col - 1), (row, col + 1)]
                if all(0 <= a < s and 0 <= b < s and inside(a, b) for a, b in nbrs):
                    continue
            img[row][col] = v
    if bits[6]:
        img = [[p + 0.1 for p in line] for line in img]
    return np.clip(np.array(img), 0, 1).reshape(-1)


def parse_pgm(raw: bytes):
    """Minimal independent P5 parser."""
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    assert m, "not a P5 header"
    w, h, maxval = (int(g) for g in m.groups())
    return w, h, maxval, np.frombuffer(raw[m.end():], dtype=np.uint8)


# -- renderer -------------------------------------------------------------------------


def test_all_zero_attributes():
    img = render_glyph(np.zeros(8)).reshape(16, 16)
    assert img[5, 5] == 0.5 and img[15, 15] == 0.0


def test_renderer_matches_reference_for_every_attribute_vector():
    for y in ALL_Y:
        np.testing.assert_array_equal(render_glyph(y), reference_render(y))


def test_renderer_deterministic_without_rng():
    y = ALL_Y[77]
    assert render_glyph(y).tobytes() == render_glyph(y).tobytes()


def test_haze_floor():
    y = np.zeros(8)
    y[6] = 1
    assert render_glyph(y).min() == pytest.approx(0.1)


def test_renderer_clips_at_large_noise():
    rng = make_rng(0)
    cfg = GlyphConfig(noise=0.49)
    for y in ALL_Y[::17]:
        img = render_glyph(y, cfg, rng)
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_renderer_rejects_non_binary():
    with pytest.raises(ValueError):
        render_glyph(np.array([0, 1, 2, 0, 0, 0, 0, 0]))
    with pytest.raises(ValueError):
        render_glyph(np.zeros(7))


@pytest.mark.parametrize("bad", [dict(side=7), dict(noise=0.5), dict(noise=-0.1)])
def test_glyph_config_validation(bad):
    with pytest.raises(ValueError):
        GlyphConfig(**bad)


def test_hollow_mask_is_outline():
    y = np.array([0, 1, 0, 0, 0, 0, 0, 1.0])
    mask = shape_mask(y)
    assert mask.sum() == 4 * (2 * 5 + 1) - 4


# -- oracle ---------------------------------------------------------------------------


def test_oracle_exact_on_all_noiseless_renders():
    correct = sum(np.array_equal(attribute_oracle(render_glyph(y))[0], y) for y in ALL_Y)
    assert correct == 256


def test_oracle_on_blank_image():
    bits, conf = attribute_oracle(np.zeros(256))
    assert bits[1] == 0 and conf[1] == 0.0
    assert np.all((conf >= 0) & (conf <= 1))


def test_oracle_robust_to_noise():
    rng = make_rng(123)
    cfg = GlyphConfig(noise=0.05)
    agree = np.zeros(8)
    n = 1000
    for _ in range(n):
        y = rng.integers(0, 2, 8).astype(float)
        clean = attribute_oracle(render_glyph(y))[0]
        noisy = attribute_oracle(render_glyph(y, cfg, rng))[0]
        agree += clean == noisy
    assert np.all(agree / n >= 0.99), agree / n


def test_oracle_batch_matches_single():
    X = np.stack([render_glyph(y) for y in ALL_Y[:10]])
    bits, conf = attribute_oracle(X)
    for i in range(10):
        b, c = attribute_oracle(X[i])
        assert np.array_equal(bits[i], b) and np.array_equal(conf[i], c)


# -- dataset ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(2000, GlyphConfig(seed=7))


def test_split_sizes(ds):
    assert (ds.train.size, ds.validation.size, ds.test.size) == (1600, 200, 200)


def test_split_partition(ds):
    idx = np.concatenate([ds.train, ds.validation, ds.test])
    assert np.array_equal(np.sort(idx), np.arange(2000))


def test_generation_deterministic(ds):
    assert generate_dataset(2000, GlyphConfig(seed=7)) == ds
    assert generate_dataset(2000, GlyphConfig(seed=8)) != ds


def test_attribute_marginals(ds):
    marg = ds.Y.mean(axis=0)
    assert np.all((marg >= 0.4) & (marg <= 0.6))


def test_values_in_range(ds):
    assert ds.X.min() >= 0 and ds.X.max() <= 1
    assert set(np.unique(ds.Y)) <= {0.0, 1.0}


def test_too_small_dataset_rejected():
    with pytest.raises(ValueError):
        generate_dataset(9)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(10, 60), seed=st.integers(0, 10**6))
def test_round_trip_bitwise(tmp_path_factory, n, seed):
    d = generate_dataset(n, GlyphConfig(side=8, seed=seed))
    path = tmp_path_factory.mktemp("ds") / "d.bin"
    save_dataset(d, path)
    back = load_dataset(path)
    assert back == d
    save_dataset(back, path.with_suffix(".2"))
    assert path.with_suffix(".2").read_bytes() == path.read_bytes()


def test_file_layout(tmp_path):
    d = generate_dataset(10, GlyphConfig(side=8, seed=0))
    path = tmp_path / "d.bin"
    save_dataset(d, path)
    raw = path.read_bytes()
    assert raw[:8] == b"CMMADS1\n"
    assert struct.unpack("<III", raw[8:20]) == (10, 64, 8)
    X = np.frombuffer(raw[20 : 20 + 4 * 640], dtype="<f4")
    assert np.array_equal(X, d.X.reshape(-1))
    assert len(raw) == 20 + 4 * 640 + 4 * 80 + 3 * 4 + 4 * 10


@pytest.fixture
def saved(tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(generate_dataset(10, GlyphConfig(side=8, seed=0)), path)
    return path


def test_bad_magic(saved):
    raw = bytearray(saved.read_bytes())
    raw[0:1] = b"X"
    saved.write_bytes(bytes(raw))
    with pytest.raises(MagicError):
        load_dataset(saved)


def test_truncated(saved):
    saved.write_bytes(saved.read_bytes()[:-3])
    with pytest.raises(TruncatedError):
        load_dataset(saved)


def test_out_of_range_pixel(saved):
    raw = bytearray(saved.read_bytes())
    raw[20:24] = struct.pack("<f", 1.5)
    saved.write_bytes(bytes(raw))
    with pytest.raises(RangeError):
        load_dataset(saved)


def test_non_binary_attribute(saved):
    raw = bytearray(saved.read_bytes())
    off = 20 + 4 * 640
    raw[off : off + 4] = struct.pack("<f", 0.5)
    saved.write_bytes(bytes(raw))
    with pytest.raises(RangeError):
        load_dataset(saved)


def test_error_kinds_distinct():
    for a, b in itertools.permutations([MagicError, TruncatedError, RangeError], 2):
        assert not issubclass(a, b)


def test_overlapping_splits_rejected():
    X, Y = np.zeros((4, 64), np.float32), np.zeros((4, 8), np.float32)
    with pytest.raises(RangeError):
        MultimodalDataset(X, Y, np.array([0, 1]), np.array([1]), np.array([3]))


# -- images -----------------------------------------------------------------------------


def test_pgm_written_format(tmp_path):
    img = render_glyph(ALL_Y[200])
    write_pgm(tmp_path / "g.pgm", img)
    w, h, maxval, pix = parse_pgm((tmp_path / "g.pgm").read_bytes())
    assert (w, h, maxval) == (16, 16, 255)
    assert np.array_equal(pix, np.floor(255 * img + 0.5).astype(np.uint8))


def test_pgm_round_trip_within_quantization(tmp_path):
    img = np.linspace(0, 1, 64)
    write_pgm(tmp_path / "g.pgm", img)
    back = read_pgm(tmp_path / "g.pgm")
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_pgm_reader_handles_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 2\n255\n" + bytes([0, 255, 51, 102]))
    assert read_pgm(tmp_path / "c.pgm").tolist() == [0.0, 1.0, 0.2, 0.4]


def test_pgm_reader_rejects_other_formats(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(MagicError):
        read_pgm(tmp_path / "a.pgm")
    assert MAGIC == b"CMMADS1\n"
