import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from art_transfer import art
from art_transfer import numcore as nc
from art_transfer.cells import (LstmParams, SourceEncoding, encode_source, init_lstm,
                                lstm_step, reverse_sequence)
from art_transfer.data import SyntheticTaskSpec, Vocabulary, generate_synthetic_transfer
from art_transfer.errors import ConfigError, ContractViolation, DimensionError
from art_transfer.gradcheck import COMPONENTS, art_step_problem, grad_check_store


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _encoding(S, C=None, mask=None):
    S = np.asarray(S, float)
    C = S if C is None else np.asarray(C, float)
    Hn, Cn = nc.constant(S), nc.constant(C)
    return SourceEncoding([Hn[..., j, :] for j in range(S.shape[-2])],
                          [Cn[..., j, :] for j in range(C.shape[-2])], Hn, Cn, mask)


def _attn(rng, d, d_a):
    return art.AttentionParams(nc.constant(rng.normal(size=(d_a, d))),
                               nc.constant(rng.normal(size=(d_a, d))),
                               nc.constant(rng.normal(size=d_a)))


def _setup(seed, d=3, d_in=3, n=4, scale=0.8):
    rng = np.random.default_rng(seed)
    store = nc.ParamStore()
    src_f = init_lstm(store, "source.fwd", d_in, d, rng)
    src_b = init_lstm(store, "source.bwd", d_in, d, rng)
    fwd = art.init_art_lstm(store, "target.fwd", d_in, d, d, rng)
    bwd = art.init_art_lstm(store, "target.bwd", d_in, d, d, rng)
    for _, p in store.items():
        p.value[...] = rng.normal(scale=scale, size=p.value.shape)
    X = nc.constant(rng.normal(size=(n, d_in)))
    return store, src_f, src_b, fwd, bwd, X


def _encode(kind, fwd, bwd, src_f, src_b, X, lengths=None, **pins):
    mask = None if lengths is None else art.padding_mask(lengths, X.value.shape[-2])
    ef = encode_source(X, src_f, mask=mask)
    eb = encode_source(reverse_sequence(X, lengths), src_b, mask=mask)
    enc = art.build_ablation(kind, fwd, bwd, **pins)
    return enc.encode(X, ef, eb, lengths), enc


# ----------------------------------------------------------------- attention

def test_zero_v_gives_uniform_weights():
    rng = np.random.default_rng(0)
    p = _attn(rng, 3, 2)
    p.v_a.value[:] = 0.0
    enc = _encoding(rng.normal(size=(5, 3)))
    art.precompute_keys(enc, "h", p)
    alpha = art.attention_weights(rng.normal(size=3), enc, "h", p).value
    np.testing.assert_allclose(alpha, np.full(5, 0.2), rtol=0, atol=1e-15)


def test_singleton_attention_is_one():
    rng = np.random.default_rng(1)
    p = _attn(rng, 3, 3)
    enc = _encoding(rng.normal(size=(1, 3)))
    art.precompute_keys(enc, "c", p)
    assert art.attention_weights(rng.normal(size=3), enc, "c", p).value.tolist() == [1.0]


@pytest.mark.parametrize("seed", range(5))
def test_cached_keys_match_uncached_scoring(seed):
    rng = np.random.default_rng(seed)
    p = _attn(rng, 3, 4)
    S, q = rng.normal(size=(3, 3)), rng.normal(size=3)
    enc = _encoding(S)
    art.precompute_keys(enc, "h", p)
    alpha = art.attention_weights(q, enc, "h", p).value
    W_a, U_a, v_a = p.W_a.value, p.U_a.value, p.v_a.value
    scores = np.array([v_a @ np.tanh(W_a @ q + U_a @ s) for s in S])
    expected = np.exp(scores - scores.max()) / np.exp(scores - scores.max()).sum()
    np.testing.assert_allclose(alpha, expected, rtol=0, atol=1e-12)


def test_missing_or_foreign_keys_are_contract_violations():
    rng = np.random.default_rng(2)
    p, other = _attn(rng, 3, 3), _attn(rng, 3, 3)
    enc = _encoding(rng.normal(size=(4, 3)))
    with pytest.raises(ContractViolation):
        art.attention_weights(np.zeros(3), enc, "h", p)
    art.precompute_keys(enc, "h", other)
    with pytest.raises(ContractViolation):
        art.attention_weights(np.zeros(3), enc, "h", p)
    with pytest.raises(ContractViolation):
        art.attention_weights(np.zeros(3), enc, "x", other)


def test_masked_positions_get_exact_zero_weight():
    rng = np.random.default_rng(3)
    p = _attn(rng, 3, 3)
    mask = np.array([[True, True, True, False], [True, True, False, False]])
    enc = _encoding(rng.normal(size=(2, 4, 3)), mask=mask)
    art.precompute_keys(enc, "h", p)
    alpha = art.attention_weights(rng.normal(size=(2, 3)), enc, "h", p).value
    assert np.all(alpha[~mask] == 0.0)
    np.testing.assert_allclose(alpha.sum(-1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_attention_rows_are_distributions(seed, n):
    rng = np.random.default_rng(seed)
    p = _attn(rng, 3, 3)
    p.v_a.value[:] *= 30.0
    enc = _encoding(rng.normal(size=(n, 3)))
    art.precompute_keys(enc, "h", p)
    alpha = art.attention_weights(rng.normal(size=3), enc, "h", p).value
    assert alpha.shape == (n,) and np.all(alpha >= 0)
    assert abs(alpha.sum() - 1.0) <= 1e-9


def test_attention_grad_check():
    assert max(COMPONENTS["attention"](s) for s in range(10)) < 1e-4


# ------------------------------------------------------------------- context

def test_context_one_hot_and_symmetric():
    S = np.array([[1.0, 2.0], [3.0, -4.0], [0.5, 0.25]])
    assert art.context(np.array([0.0, 1.0, 0.0]), S).value.tolist() == [3.0, -4.0]
    s = np.array([0.3, -1.7, 2.2])
    assert art.context(np.array([0.5, 0.5]), np.stack([s, -s])).value.tolist() == [0.0] * 3


def test_context_matches_loop():
    rng = np.random.default_rng(4)
    alpha = rng.dirichlet(np.ones(4))
    S = rng.normal(size=(4, 3))
    expected = np.zeros(3)
    for j in range(4):
        expected += alpha[j] * S[j]
    np.testing.assert_allclose(art.context(alpha, S).value, expected, rtol=0, atol=1e-14)


def test_context_length_mismatch():
    with pytest.raises(DimensionError):
        art.context(np.ones(3) / 3, np.zeros((4, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_context_is_permutation_covariant(seed, n):
    rng = np.random.default_rng(seed)
    p = _attn(rng, 3, 3)
    S, q = rng.normal(size=(n, 3)), rng.normal(size=3)
    perm = rng.permutation(n)
    out = []
    for states in (S, S[perm]):
        enc = _encoding(states)
        art.precompute_keys(enc, "h", p)
        out.append(art.context(art.attention_weights(q, enc, "h", p), enc.H).value)
    np.testing.assert_allclose(out[0], out[1], rtol=0, atol=1e-12)


# --------------------------------------------------------------- concentrate

def test_concentrate_zero_weights():
    z = nc.constant(np.zeros((2, 2)))
    pi, s = np.array([1.0, -2.0]), np.array([3.0, 0.5])
    psi, u = art.concentrate(pi, s, art.ConcentrateParams(z, z))
    assert u.value.tolist() == [0.5, 0.5]
    np.testing.assert_allclose(psi.value, 0.5 * pi + 0.5 * s, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_concentrate_fixed_point(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=3)
    p = art.ConcentrateParams(nc.constant(rng.normal(size=(3, 3))),
                              nc.constant(rng.normal(size=(3, 3))))
    psi, _ = art.concentrate(s, s.copy(), p)
    np.testing.assert_allclose(psi.value, s, rtol=1e-15, atol=1e-15)


def test_concentrate_shape_mismatch_and_grad_check():
    z = nc.constant(np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        art.concentrate(np.zeros(2), np.zeros(3), art.ConcentrateParams(z, z))
    assert max(COMPONENTS["concentrate"](s) for s in range(10)) < 1e-4


# ---------------------------------------------------------------------- fuse

def _zero_fusion(d_in, d):
    mats = {}
    for g in ("psi", "z", "r"):
        mats[f"W_{g}"] = nc.constant(np.zeros((d, d_in)))
        mats[f"U_{g}"] = nc.constant(np.zeros((d, d)))
        mats[f"C_{g}"] = nc.constant(np.zeros((d, d)))
    return art.FusionParams(**mats)


def test_fuse_pinned_update_gate_returns_prev():
    rng = np.random.default_rng(5)
    p = _zero_fusion(2, 3)
    for m in vars(p).values():
        m.value[...] = rng.normal(size=m.value.shape)
    prev = rng.normal(size=3)
    out = art.fuse(rng.normal(size=2), prev, rng.normal(size=3), p, pin_z=0.0)
    assert out.value.tobytes() == prev.tobytes()


def test_fuse_zero_params_halves_prev():
    prev = np.array([0.8, -0.4, 2.0])
    out = art.fuse(np.array([1.0, 1.0]), prev, np.array([5.0, 5.0, 5.0]), _zero_fusion(2, 3))
    assert out.value.tolist() == (0.5 * prev).tolist()


def test_fuse_matches_formula_and_grad_check():
    rng = np.random.default_rng(6)
    p = _zero_fusion(2, 3)
    for m in vars(p).values():
        m.value[...] = rng.normal(size=m.value.shape)
    x, prev, psi = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    v = {k: m.value for k, m in vars(p).items()}
    r = _sig(v["W_r"] @ x + v["U_r"] @ prev + v["C_r"] @ psi)
    z = _sig(v["W_z"] @ x + v["U_z"] @ prev + v["C_z"] @ psi)
    cand = np.tanh(v["W_psi"] @ x + v["U_psi"] @ (r * prev) + v["C_psi"] @ psi)
    np.testing.assert_allclose(art.fuse(x, prev, psi, p).value, (1 - z) * prev + z * cand,
                               rtol=0, atol=1e-14)
    assert max(COMPONENTS["fuse"](s) for s in range(10)) < 1e-4


def test_fuse_shape_mismatch():
    with pytest.raises(DimensionError):
        art.fuse(np.zeros(2), np.zeros(3), np.zeros(2), _zero_fusion(2, 3))


# ------------------------------------------------------------------ ART step

def test_step_with_pinned_update_gate_is_plain_lstm():
    _, src_f, _, fwd, _, X = _setup(7)
    enc = encode_source(X, src_f)
    rng = np.random.default_rng(8)
    h0, c0 = rng.normal(size=3), rng.normal(size=3)
    h, c, _, _ = art.art_lstm_step(X[2], h0, c0, enc, 2, fwd, pin_z=0.0)
    hp, cp = lstm_step(X[2], h0, c0, fwd.target_lstm)
    assert h.value.tobytes() == hp.value.tobytes()
    assert c.value.tobytes() == cp.value.tobytes()


def test_step_single_source_position():
    _, src_f, _, fwd, _, X = _setup(9, n=1)
    enc = encode_source(X, src_f)
    h, c, a_h, a_c = art.art_lstm_step(X[0], np.zeros(3), np.zeros(3), enc, 0, fwd)
    assert a_h.value.tolist() == [1.0] and a_c.value.tolist() == [1.0]
    # pi equals the only source state, so psi equals it too and the step only sees S[0]
    psi_h, _ = art.concentrate(enc.H_S[0], enc.H_S[0], fwd.conc_h)
    np.testing.assert_allclose(psi_h.value, enc.H_S[0].value, rtol=1e-15, atol=1e-15)


def test_step_rejects_bad_position():
    _, src_f, _, fwd, _, X = _setup(10)
    enc = encode_source(X, src_f)
    with pytest.raises(ContractViolation):
        art.art_lstm_step(X[0], np.zeros(3), np.zeros(3), enc, 4, fwd)


@pytest.mark.parametrize("seed", range(3))
def test_full_step_coordinate_grad_check(seed):
    store, loss = art_step_problem(seed)
    errs = grad_check_store(loss, store, mode="coordinate")
    assert len(errs) == len(store.names())
    assert max(errs.values()) < 1e-4


def test_full_step_directional_grad_check():
    assert max(COMPONENTS["art_step"](s) for s in range(20)) < 1e-4


def test_injected_fault_is_detected():
    art.FAULTS.add("fuse.C_z")
    try:
        store, loss = art_step_problem(0)
        errs = grad_check_store(loss, store, mode="coordinate")
    finally:
        art.FAULTS.discard("fuse.C_z")
    bad = {k for k, v in errs.items() if v >= 1e-4}
    assert bad == {"target.fuse_c.C_z", "target.fuse_h.C_z"}


# ------------------------------------------------------------------ encoders

def test_single_position_output_width():
    _, src_f, src_b, fwd, bwd, X = _setup(11, n=1)
    out, traces = art.encode_target_bidirectional(
        X, encode_source(X, src_f), encode_source(X, src_b), fwd, bwd)
    assert len(out) == 1 and out[0].value.shape == (6,)
    assert [t.direction for t in traces] == ["forward", "backward"]
    assert traces[0].alpha_h.shape == (1, 1) and traces[1].alpha_c.tolist() == [[1.0]]


def test_traces_are_row_stochastic():
    _, src_f, src_b, fwd, bwd, X = _setup(12, n=5)
    out, traces = art.encode_target_bidirectional(
        X, encode_source(X, src_f), encode_source(reverse_sequence(X), src_b), fwd, bwd)
    for tr in traces:
        for a in (tr.alpha_h, tr.alpha_c):
            assert a.shape == (5, 5) and np.all(a >= 0)
            np.testing.assert_allclose(a.sum(1), 1.0, rtol=0, atol=1e-9)


def test_encoder_length_mismatch():
    _, src_f, src_b, fwd, bwd, X = _setup(13, n=4)
    short = encode_source(X[:3], src_f)
    with pytest.raises(ContractViolation):
        art.encode_target_bidirectional(X, short, encode_source(X, src_b), fwd, bwd)


def test_palindrome_symmetry_with_tied_parameters():
    _, src_f, _, fwd, _, _ = _setup(14)
    rng = np.random.default_rng(15)
    a, b = rng.normal(size=3), rng.normal(size=3)
    X = nc.constant(np.stack([a, b, b, a]))
    enc = encode_source(X, src_f)
    out, _ = art.encode_target_bidirectional(X, enc, enc, fwd, fwd)
    O = np.stack([o.value for o in out])
    swapped = np.concatenate([O[::-1, 3:], O[::-1, :3]], axis=1)
    np.testing.assert_allclose(O, swapped, rtol=0, atol=1e-15)


def test_encoder_is_deterministic():
    _, src_f, src_b, fwd, bwd, X = _setup(16)
    a, _ = _encode("full_art", fwd, bwd, src_f, src_b, X)
    b, _ = _encode("full_art", fwd, bwd, src_f, src_b, X)
    assert a.value.tobytes() == b.value.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_pinned_update_gate_reduces_encoder_to_lstm(seed):
    _, src_f, src_b, fwd, bwd, X = _setup(seed, n=5)
    pinned, _ = _encode("full_art", fwd, bwd, src_f, src_b, X, pin_z=0.0)
    plain, _ = _encode("lstm_only", fwd, bwd, src_f, src_b, X)
    assert pinned.value.tobytes() == plain.value.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_pinned_concentrate_gate_reduces_to_cct(seed):
    _, src_f, src_b, fwd, bwd, X = _setup(seed, n=5)
    pinned, _ = _encode("full_art", fwd, bwd, src_f, src_b, X, pin_u=1.0)
    cct, _ = _encode("cct", fwd, bwd, src_f, src_b, X)
    assert pinned.value.tobytes() == cct.value.tobytes()


def test_lstm_only_ignores_source_parameters():
    store, src_f, src_b, fwd, bwd, X = _setup(17)
    before, _ = _encode("lstm_only", fwd, bwd, src_f, src_b, X)
    for name, p in store.items("source"):
        p.value += 0.3
    after, _ = _encode("lstm_only", fwd, bwd, src_f, src_b, X)
    assert before.value.tobytes() == after.value.tobytes()
    full_before = _encode("full_art", fwd, bwd, src_f, src_b, X)[0].value
    for name, p in store.items("source"):
        p.value -= 0.6
    assert not np.allclose(full_before, _encode("full_art", fwd, bwd, src_f, src_b, X)[0].value)


def test_lwt_only_changes_the_last_cell_of_each_direction():
    _, src_f, src_b, fwd, bwd, X = _setup(18, n=5)
    lwt, _ = _encode("lwt", fwd, bwd, src_f, src_b, X)
    plain, _ = _encode("lstm_only", fwd, bwd, src_f, src_b, X)
    L, P = lwt.value, plain.value
    assert L[:4, :3].tobytes() == P[:4, :3].tobytes()
    assert L[1:, 3:].tobytes() == P[1:, 3:].tobytes()
    assert not np.allclose(L[4, :3], P[4, :3]) and not np.allclose(L[0, 3:], P[0, 3:])


def test_lwt_rejected_for_tagging():
    _, _, _, fwd, bwd, _ = _setup(19)
    with pytest.raises(ConfigError, match="lwt"):
        art.build_ablation("lwt", fwd, bwd, task="tagging")
    with pytest.raises(ConfigError):
        art.build_ablation("bogus", fwd, bwd)


def test_full_art_and_cct_differ_on_collocated_sentence():
    spec = SyntheticTaskSpec(seed=3)
    parts = generate_synthetic_transfer(spec, 0, 0, 20)
    ex = next(e for e in parts["target_test"] if any(m in e.tokens for m in spec.modifiers))
    vocab = Vocabulary.build([ex.tokens])
    rng = np.random.default_rng(20)
    table = rng.normal(size=(len(vocab), 3))
    X = nc.constant(table[vocab.encode(ex.tokens)])
    _, src_f, src_b, fwd, bwd, _ = _setup(20)
    full, _ = _encode("full_art", fwd, bwd, src_f, src_b, X)
    cct, _ = _encode("cct", fwd, bwd, src_f, src_b, X)
    assert not np.allclose(full.value, cct.value, atol=1e-6)


def test_padded_batch_matches_unpadded_rows():
    _, src_f, src_b, fwd, bwd, _ = _setup(21)
    rng = np.random.default_rng(22)
    lengths = np.array([5, 3, 1])
    Xb = rng.normal(size=(3, 5, 3))
    for b, L in enumerate(lengths):
        Xb[b, L:] = 0.0
    batched, enc = _encode("full_art", fwd, bwd, src_f, src_b, nc.constant(Xb), lengths)
    assert len(enc.traces) == 3
    for b, L in enumerate(lengths):
        single, enc1 = _encode("full_art", fwd, bwd, src_f, src_b, nc.constant(Xb[b, :L]))
        np.testing.assert_allclose(batched.value[b, :L], single.value, rtol=0, atol=1e-12)
        for tb, ts in zip(enc.traces[b], enc1.traces):
            assert tb.direction == ts.direction
            np.testing.assert_allclose(tb.alpha_h, ts.alpha_h, rtol=0, atol=1e-12)
            np.testing.assert_allclose(tb.alpha_c, ts.alpha_c, rtol=0, atol=1e-12)
