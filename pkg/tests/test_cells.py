import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from art_transfer import numcore as nc
from art_transfer.cells import (FORGET_BIAS, LstmParams, RnnParams, encode_source, init_lstm,
                                lstm_step, reverse_sequence, rnn_step)
from art_transfer.errors import ContractViolation, DimensionError
from art_transfer.gradcheck import COMPONENTS


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_lstm(xs, W, b, h=None, c=None):
    """Independent loop oracle with gate blocks [c~; o; i; f]."""
    d = W.shape[0] // 4
    h = np.zeros(d) if h is None else h
    c = np.zeros(d) if c is None else c
    hs, cs = [], []
    for x in xs:
        z = W @ np.concatenate([x, h]) + b
        c = np.tanh(z[:d]) * _sig(z[2 * d:3 * d]) + c * _sig(z[3 * d:])
        h = _sig(z[d:2 * d]) * np.tanh(c)
        hs.append(h)
        cs.append(c)
    return np.array(hs), np.array(cs)


def _lstm(W, b, d_in):
    return LstmParams(nc.constant(W), nc.constant(b), d_in)


def _random_lstm(rng, d_in, d):
    return _lstm(rng.normal(size=(4 * d, d_in + d)), rng.normal(size=4 * d), d_in)


def test_rnn_zero_params_give_zero():
    p = RnnParams(nc.constant(np.zeros((2, 3))), nc.constant(np.zeros((2, 2))),
                  nc.constant(np.zeros(2)))
    out = rnn_step(nc.constant([0.4, -7.0]), nc.constant([1.0, 2.0, 3.0]), p)
    assert out.value.tolist() == [0.0, 0.0]


def test_rnn_identity_input():
    p = RnnParams(nc.constant(np.eye(1)), nc.constant(np.zeros((1, 1))), nc.constant(np.zeros(1)))
    out = rnn_step(nc.constant([0.3]), nc.constant([0.5]), p)
    assert out.value[0] == pytest.approx(math.tanh(0.5), abs=1e-15)
    assert round(out.value[0], 4) == 0.4621


def test_rnn_gradient_wrt_h_prev():
    rng = np.random.default_rng(4)
    W_x, W_h, b, x = rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=2)
    err = nc.grad_check(
        lambda h: nc.sum(rnn_step(h, nc.constant(x), RnnParams(*map(nc.constant, (W_x, W_h, b))))),
        [rng.normal(size=3)])
    assert err < 1e-4
    assert COMPONENTS["rnn"](0) < 1e-4


def test_lstm_zero_params_with_unit_memory():
    h, c = lstm_step(nc.constant([0.7]), nc.constant([0.2]), nc.constant([1.0]),
                     _lstm(np.zeros((4, 2)), np.zeros(4), 1))
    assert c.value[0] == 0.5
    assert h.value[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-15)
    assert round(h.value[0], 4) == 0.2311


def test_lstm_zero_params_zero_memory():
    h, c = lstm_step(nc.constant([0.7, 1.0]), nc.constant([0.2, 0.1]), nc.constant([0.0, 0.0]),
                     _lstm(np.zeros((8, 4)), np.zeros(8), 2))
    assert h.value.tolist() == [0.0, 0.0] and c.value.tolist() == [0.0, 0.0]


def test_lstm_step_matches_oracle_and_grad_check():
    rng = np.random.default_rng(1)
    p = _random_lstm(rng, 3, 3)
    x, h0, c0 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    h, c = lstm_step(x, h0, c0, p)
    hs, cs = np_lstm([x], p.W.value, p.b.value, h0, c0)
    np.testing.assert_allclose(h.value, hs[0], rtol=0, atol=1e-14)
    np.testing.assert_allclose(c.value, cs[0], rtol=0, atol=1e-14)
    assert max(COMPONENTS["lstm"](s) for s in range(10)) < 1e-4


def test_lstm_shape_mismatch():
    with pytest.raises(DimensionError):
        lstm_step(np.zeros(2), np.zeros(3), np.zeros(3), _lstm(np.zeros((12, 6)), np.zeros(12), 3))


def test_forget_bias_initialised_to_one():
    store = nc.ParamStore()
    p = init_lstm(store, "s", 5, 4, np.random.default_rng(0))
    assert p.b.value[12:].tolist() == [FORGET_BIAS] * 4
    assert p.b.value[:12].tolist() == [0.0] * 12
    assert p.W.value.shape == (16, 9)


def test_encode_source_single_step_equals_lstm_step():
    rng = np.random.default_rng(2)
    p = _random_lstm(rng, 2, 3)
    x = rng.normal(size=2)
    enc = encode_source([x], p)
    h, c = lstm_step(x, np.zeros(3), np.zeros(3), p)
    assert enc.length == 1
    assert enc.H_S[0].value.tobytes() == h.value.tobytes()
    assert enc.C_S[0].value.tobytes() == c.value.tobytes()


def test_encode_source_zero_params():
    enc = encode_source(np.ones((3, 2)), _lstm(np.zeros((8, 4)), np.zeros(8), 2))
    assert np.all(enc.H.value == 0.0) and np.all(enc.C.value == 0.0)


def test_encode_source_matches_loop_oracle():
    rng = np.random.default_rng(3)
    p = _random_lstm(rng, 3, 4)
    xs = rng.normal(size=(4, 3))
    enc = encode_source(xs, p)
    hs, cs = np_lstm(xs, p.W.value, p.b.value)
    np.testing.assert_allclose(enc.H.value, hs, rtol=0, atol=1e-13)
    np.testing.assert_allclose(enc.C.value, cs, rtol=0, atol=1e-13)


def test_encode_source_rejects_empty():
    p = _lstm(np.zeros((8, 4)), np.zeros(8), 2)
    with pytest.raises(ContractViolation):
        encode_source([], p)
    with pytest.raises(ContractViolation):
        encode_source(np.zeros((0, 2)), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7), st.integers(1, 7))
def test_encode_source_is_causal(seed, n, k):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    p = _random_lstm(rng, 2, 3)
    xs = rng.normal(size=(n, 2))
    full, part = encode_source(xs, p), encode_source(xs[:k], p)
    for i in range(k):
        assert full.H_S[i].value.tobytes() == part.H_S[i].value.tobytes()
        assert full.C_S[i].value.tobytes() == part.C_S[i].value.tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_hidden_state_is_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p = _lstm(scale * rng.normal(size=(12, 5)), scale * rng.normal(size=12), 2)
    enc = encode_source(scale * rng.normal(size=(6, 2)), p)
    assert np.all(np.abs(enc.H.value) <= 1.0)
    assert np.all(np.isfinite(enc.C.value))


def test_encode_source_is_pure():
    rng = np.random.default_rng(5)
    p = _random_lstm(rng, 3, 3)
    xs = rng.normal(size=(5, 3))
    a, b = encode_source(xs, p), encode_source(xs.copy(), p)
    assert a.H.value.tobytes() == b.H.value.tobytes()
    assert a.C.value.tobytes() == b.C.value.tobytes()


def test_batched_encoding_matches_per_row():
    rng = np.random.default_rng(6)
    p = _random_lstm(rng, 2, 3)
    X = rng.normal(size=(3, 5, 2))
    enc = encode_source(X, p)
    for b in range(3):
        single = encode_source(X[b], p)
        np.testing.assert_allclose(enc.H.value[b], single.H.value, rtol=0, atol=1e-14)


def test_reverse_sequence_keeps_padding_at_end():
    X = nc.constant(np.arange(8.0).reshape(2, 4, 1))
    out = reverse_sequence(X, np.array([4, 2]))
    assert out.value[..., 0].tolist() == [[3, 2, 1, 0], [5, 4, 6, 7]]
    back = reverse_sequence(out, np.array([4, 2]))
    assert back.value.tobytes() == X.value.tobytes()
