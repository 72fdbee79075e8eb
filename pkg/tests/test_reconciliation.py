from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cowqkd import reconciliation as rc
from cowqkd.errors import ConfigError, DomainError, ProtocolError


@pytest.fixture(scope="module")
def h1024():
    return rc.ldpc_generate(1024, Fraction(3, 4), 1)


@pytest.fixture(scope="module")
def h4096_half():
    return rc.ldpc_generate(4096, Fraction(1, 2), 2)


def _flip(rng, x, p):
    return x ^ (rng.random(len(x)) < p).astype(np.uint8)


@pytest.mark.parametrize("a,b,q", [([0, 1, 1, 0], [0, 1, 1, 0], 0.0), ([0, 1, 1, 0], [1, 0, 0, 1], 1.0),
                                   ([0] * 32, [1] + [0] * 31, 0.03125)])
def test_estimate_qber(a, b, q):
    assert rc.estimate_qber(a, b) == q


def test_estimate_qber_errors():
    with pytest.raises(ProtocolError):
        rc.estimate_qber([0, 1], [0])
    with pytest.raises(DomainError):
        rc.estimate_qber([], [])


def test_estimate_qber_unbiased():
    rng = np.random.default_rng(0)
    n, p = 256, 0.05
    est = [rc.estimate_qber(np.zeros(n, np.uint8), rng.random(n) < p) for _ in range(1000)]
    assert abs(np.mean(est) - p) <= 3 * np.sqrt(p * (1 - p) / n / 1000)


@pytest.mark.parametrize("n,rate,m", [(1024, "3/4", 256), (1024, "1/2", 512), (4096, "3/4", 1024),
                                      (16384, "1/2", 8192), (1024, "5/6", 171)])
def test_generate_sizes(n, rate, m):
    h = rc.ldpc_generate(n, Fraction(rate), 0)
    assert (h.n, h.m) == (n, m)


@pytest.mark.parametrize("n,rate", [(1024, "1/2"), (1024, "3/4"), (4096, "5/6")])
def test_generate_structure(n, rate):
    h = rc.ldpc_generate(n, Fraction(rate), 3)
    cw = h.column_weights()
    rw = h.row_weights()
    assert np.all(cw == rc.COLUMN_WEIGHT)
    assert rw.max() - rw.min() <= 1
    edges = h.edge_chk * h.n + h.edge_var
    assert len(np.unique(edges)) == len(edges)


def test_generate_deterministic():
    a = rc.ldpc_generate(1024, 0.75, 7)
    b = rc.ldpc_generate(1024, 0.75, 7)
    c = rc.ldpc_generate(1024, 0.75, 8)
    assert np.array_equal(a.edge_var, b.edge_var) and np.array_equal(a.edge_chk, b.edge_chk)
    assert not np.array_equal(a.edge_var, c.edge_var)


@pytest.mark.parametrize("n,rate", [(1000, 0.75), (1024, 0.6), (2048, 0.5)])
def test_generate_unsupported(n, rate):
    with pytest.raises(ConfigError):
        rc.ldpc_generate(n, rate, 0)


def test_syndrome_zero(h1024):
    assert not rc.syndrome(h1024, np.zeros(1024, np.uint8)).any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_syndrome_linear(seed):
    h = rc.ldpc_generate(1024, 0.75, 1)
    rng = np.random.default_rng(seed)
    x, y = rng.integers(0, 2, (2, 1024), dtype=np.uint8)
    assert np.array_equal(rc.syndrome(h, x) ^ rc.syndrome(h, y), rc.syndrome(h, x ^ y))


@pytest.mark.parametrize("i", [0, 17, 1023])
def test_syndrome_unit_vector_is_column(h1024, i):
    e = np.zeros(1024, np.uint8)
    e[i] = 1
    assert np.array_equal(rc.syndrome(h1024, e), h1024.column(i))


def test_syndrome_matches_dense(h1024):
    x = np.random.default_rng(5).integers(0, 2, 1024, dtype=np.uint8)
    dense = h1024.to_dense().astype(np.int64)
    assert np.array_equal(rc.syndrome(h1024, x), (dense @ x) % 2)


def test_syndrome_length_mismatch(h1024):
    with pytest.raises(DomainError):
        rc.syndrome(h1024, np.zeros(1000, np.uint8))


def test_decode_zero_errors(h1024):
    x = np.random.default_rng(1).integers(0, 2, 1024, dtype=np.uint8)
    res = rc.decode(h1024, x, rc.syndrome(h1024, x), 0.01)
    assert res.ok and res.iterations == 0 and np.array_equal(res.bits, x)


def test_decode_one_percent(h1024):
    ok = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 2, 1024, dtype=np.uint8)
        res = rc.decode(h1024, _flip(rng, a, 0.01), rc.syndrome(h1024, a), 0.01)
        if res.ok:
            assert np.array_equal(rc.syndrome(h1024, res.bits), rc.syndrome(h1024, a))
        ok += bool(res.ok and np.array_equal(res.bits, a))
    assert ok >= 95


def test_decode_twenty_percent_fails(h1024):
    fails = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 2, 1024, dtype=np.uint8)
        res = rc.decode(h1024, _flip(rng, a, 0.2), rc.syndrome(h1024, a), 0.2, max_iter=20)
        fails += not res.ok
        if not res.ok:
            assert res.bits is None and res.reason == "residual_errors_unknown"
    assert fails >= 99


@pytest.mark.parametrize("qber", [0.03, 0.06])
def test_half_rate_below_ceiling(h4096_half, qber):
    ok = 0
    for seed in range(100):
        rng = np.random.default_rng([seed, 99])
        a = rng.integers(0, 2, 4096, dtype=np.uint8)
        res = rc.decode(h4096_half, _flip(rng, a, qber), rc.syndrome(h4096_half, a), qber)
        ok += bool(res.ok and np.array_equal(res.bits, a))
    assert ok >= 90


def test_decode_args(h1024):
    z = np.zeros(1024, np.uint8)
    with pytest.raises(DomainError):
        rc.decode(h1024, z, np.zeros(h1024.m, np.uint8), 0.5)
    with pytest.raises(DomainError):
        rc.decode(h1024, z, np.zeros(h1024.m, np.uint8), 0.1, max_iter=0)
    with pytest.raises(DomainError):
        rc.decode(h1024, z, np.zeros(3, np.uint8), 0.1)


def test_decode_does_not_touch_input(h1024):
    rng = np.random.default_rng(4)
    a = rng.integers(0, 2, 1024, dtype=np.uint8)
    b = _flip(rng, a, 0.01)
    keep = b.copy()
    rc.decode(h1024, b, rc.syndrome(h1024, a), 0.01)
    assert np.array_equal(b, keep)


def test_tags():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, 1024, dtype=np.uint8)
    assert rc.verify_blocks(rc.block_tag(x, 3, 11), rc.block_tag(x.copy(), 3, 11))
    with pytest.raises(ProtocolError):
        rc.verify_blocks(rc.block_tag(x, 3, 11), rc.block_tag(x, 4, 11))


def test_tag_single_flip_collisions():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 2, 1024, dtype=np.uint8)
    collisions = 0
    for trial in range(10**4):
        y = x.copy()
        y[rng.integers(1024)] ^= 1
        collisions += rc.verify_blocks(rc.block_tag(x, trial, 5), rc.block_tag(y, trial, 5))
    assert collisions == 0


def test_tag_short_block():
    t = rc.block_tag(np.array([1, 0, 1], np.uint8), 0, 1)
    assert 0 <= t.value < 2**3


def test_syndrome_message_consistency():
    tag = rc.BlockTag(1, 5)
    with pytest.raises(ProtocolError):
        rc.SyndromeMessage(2, np.zeros(4, np.uint8), tag)


def test_reconcile_blocks():
    h = rc.ldpc_generate(1024, 0.5, 0)
    rng = np.random.default_rng(2)
    a = rng.integers(0, 2, 5 * 1024 + 100, dtype=np.uint8)
    out = rc.reconcile(a, _flip(rng, a, 0.03), h, 0.03, tag_seed=4)
    assert len(out.block_ok) == 5 and out.success_fraction == 1.0
    assert np.array_equal(out.alice, out.bob) and len(out.alice) == 5 * 1024
    assert out.leaked_bits == 5 * h.m


def test_matrix_text_round_trip():
    h = rc.ldpc_generate(1024, 0.75, 9)
    text = h.to_text()
    first = text.splitlines()[0]
    assert first == "0: " + " ".join(map(str, np.flatnonzero(h.to_dense()[0])))
    back = rc.ParityCheckMatrix.from_text(text)
    assert back.n == h.n and back.m == h.m
    assert np.array_equal(back.to_dense(), h.to_dense())


@pytest.mark.parametrize("q,rate", [(0.0, Fraction(5, 6)), (0.008, Fraction(3, 4)), (0.03, Fraction(1, 2))])
def test_choose_code_rate(q, rate):
    assert rc.choose_code_rate(q) == rate
    assert rc.choose_code_rate(q, "3/4") == Fraction(3, 4)
