import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairacq.set_encoder import (MEMORY_WIDTH, PROCESSING_STEPS, FeatureToken, SetEncoder, TokenBatch,
                                 attention_weights, encode, process_block, read_block)

D = 10


@pytest.fixture(scope="module")
def encoder():
    return SetEncoder(D, np.random.default_rng(0))


def _tokens(rng, k, d=D):
    coords = rng.choice(d, size=k, replace=False)
    return [FeatureToken(float(rng.standard_normal()), int(j)) for j in coords]


# -- independent single-set oracle ------------------------------------------------

def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def oracle_encode(tokens, p, steps=PROCESSING_STEPS):
    """Token-by-token forward pass written from the architecture description."""
    d = p["R_W0"].shape[0] - 1
    mems = []
    for t in tokens:
        u = np.zeros(1 + d)
        u[0] = t.value
        u[1 + t.coordinate] = 1.0
        h0 = np.maximum(u @ p["R_W0"] + p["R_b0"], 0)
        h1 = np.maximum(h0 @ p["R_W1"] + p["R_b1"], 0)
        mems.append(h1 @ p["R_W2"] + p["R_b2"])
    H = p["L_U"].shape[0]

    def lstm(x, h, c):
        z = x @ p["L_W"] + h @ p["L_U"] + p["L_b"]
        i, f, g, o = _sig(z[:H]), _sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), _sig(z[3 * H:])
        c = f * c + i * g
        return o * np.tanh(c), c

    r = np.mean(mems, axis=0) if mems else np.zeros(H)
    h, c = lstm(np.concatenate([np.zeros(H), r]), np.zeros(H), np.zeros(H))
    for k in range(1, steps + 1):
        if mems:
            s = np.array([m @ h for m in mems])
            a = np.exp(s - s.max())
            a /= a.sum()
            r = sum(w * m for w, m in zip(a, mems))
        else:
            r = np.zeros(H)
        if k < steps:
            h, c = lstm(np.concatenate([h, r]), h, c)
    return r


@pytest.mark.parametrize("k", [0, 1, 3, 10])
def test_encode_matches_oracle(encoder, k):
    rng = np.random.default_rng(k)
    toks = _tokens(rng, k)
    np.testing.assert_allclose(encode(toks, encoder), oracle_encode(toks, encoder.params), atol=1e-12)


def test_batched_forward_matches_single(encoder):
    rng = np.random.default_rng(1)
    values = rng.standard_normal((6, D))
    colmask = rng.random((6, D)) < 0.4
    colmask[0] = False
    emb, _ = encoder.forward(TokenBatch.from_dense(values, colmask))
    for i in range(6):
        toks = [FeatureToken(values[i, j], j) for j in np.flatnonzero(colmask[i])]
        np.testing.assert_allclose(emb[i], oracle_encode(toks, encoder.params), atol=1e-12)


# -- reading block ------------------------------------------------------------------

def test_read_block_shapes(encoder):
    assert read_block([], encoder).shape == (0, MEMORY_WIDTH)
    assert read_block([FeatureToken(1.0, 3)], encoder).shape == (1, MEMORY_WIDTH)


def test_read_block_permutes_with_input(encoder):
    rng = np.random.default_rng(2)
    toks = _tokens(rng, 6)
    perm = rng.permutation(6)
    a = read_block(toks, encoder)
    b = read_block([toks[i] for i in perm], encoder)
    np.testing.assert_array_equal(a[perm], b)


def test_duplicate_coordinates_rejected(encoder):
    with pytest.raises(ValueError, match="duplicate"):
        read_block([FeatureToken(1.0, 2), FeatureToken(0.5, 2)], encoder)


def test_out_of_range_coordinate_rejected(encoder):
    with pytest.raises(ValueError):
        read_block([FeatureToken(1.0, D)], encoder)


# -- attention ------------------------------------------------------------------------

def test_attention_examples():
    q = np.array([1.0, 0.0])
    assert attention_weights(np.array([[3.0, 1.0]]), q) == pytest.approx([1.0])
    assert attention_weights(np.array([[2.0, 1.0], [2.0, 1.0]]), q) == pytest.approx([0.5, 0.5])
    w = attention_weights(np.array([[0.0, 5.0], [np.log(2.0), -1.0]]), q)
    np.testing.assert_allclose(w, [1 / 3, 2 / 3], atol=1e-12)


def test_attention_empty_rejected():
    with pytest.raises(ValueError):
        attention_weights(np.zeros((0, 4)), np.ones(4))


@given(n=st.integers(1, 12), seed=st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_attention_normalized_every_round(n, seed):
    enc = SetEncoder(D, np.random.default_rng(seed))
    mem = np.random.default_rng(seed + 1).standard_normal((n, MEMORY_WIDTH)) * 3
    _, trace = process_block(mem, enc, return_trace=True)
    assert len(trace) == PROCESSING_STEPS
    for a in trace:
        assert np.all(a >= 0)
        assert abs(a.sum() - 1.0) < 1e-6


# -- processing block -------------------------------------------------------------------

def test_empty_set_embedding_is_zero(encoder):
    np.testing.assert_array_equal(process_block(np.zeros((0, MEMORY_WIDTH)), encoder), np.zeros(MEMORY_WIDTH))
    np.testing.assert_array_equal(encode([], encoder), np.zeros(MEMORY_WIDTH))


def test_singleton_reads_its_memory(encoder):
    m = np.random.default_rng(3).standard_normal((1, MEMORY_WIDTH))
    r, trace = process_block(m, encoder, return_trace=True)
    np.testing.assert_allclose(r, m[0], atol=1e-12)
    assert all(a.tolist() == [1.0] for a in trace)


def test_exactly_five_rounds_any_size(encoder):
    rng = np.random.default_rng(4)
    for n in (0, 1, 7):
        _, trace = process_block(rng.standard_normal((n, MEMORY_WIDTH)), encoder, return_trace=True)
        assert len(trace) == PROCESSING_STEPS
    batch = TokenBatch.from_dense(rng.standard_normal((3, D)), rng.random((3, D)) < 0.5)
    _, cache = encoder.forward(batch)
    assert len(encoder.attention_trace(cache)) == PROCESSING_STEPS


def test_process_block_agrees_with_encode(encoder):
    rng = np.random.default_rng(5)
    toks = _tokens(rng, 5)
    np.testing.assert_allclose(process_block(read_block(toks, encoder), encoder), encode(toks, encoder),
                               atol=1e-12)


@given(k=st.integers(0, D), seed=st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_permutation_invariance(k, seed):
    rng = np.random.default_rng(seed)
    enc = SetEncoder(D, rng)
    toks = _tokens(rng, k)
    perm = rng.permutation(k)
    a = encode(toks, enc)
    b = encode([toks[i] for i in perm], enc)
    assert np.max(np.abs(a - b)) < 1e-5
    assert np.all(np.isfinite(a))


def test_embedding_reproducible():
    a = SetEncoder(D, np.random.default_rng(9))
    b = SetEncoder(D, np.random.default_rng(9))
    toks = _tokens(np.random.default_rng(0), 4)
    np.testing.assert_array_equal(encode(toks, a), encode(toks, b))


# -- gradients --------------------------------------------------------------------------

def _finite_difference(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def test_encoder_gradients_three_feature_inputs():
    rng = np.random.default_rng(11)
    enc = SetEncoder(5, rng)
    values = rng.standard_normal((4, 5))
    colmask = np.zeros((4, 5), dtype=bool)
    for i in range(4):
        colmask[i, rng.choice(5, 3, replace=False)] = True
    batch = TokenBatch.from_dense(values, colmask)
    w = rng.standard_normal(MEMORY_WIDTH)

    def loss():
        emb, _ = enc.forward(batch)
        return float(np.sum(np.tanh(emb @ w)))

    emb, cache = enc.forward(batch)
    demb = (1 - np.tanh(emb @ w) ** 2)[:, None] * w[None, :]
    grads = enc.backward(demb, cache)
    for name, p in enc.params.items():
        num = _finite_difference(loss, p)
        err = np.max(np.abs(num - grads[name])) / max(1e-8, np.max(np.abs(num)) + np.max(np.abs(grads[name])))
        assert err < 1e-3, (name, err)
