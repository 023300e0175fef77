"""Finite-difference verification of every differentiable component.

Primitive operations and small components are checked coordinate by
coordinate. The full ART step and the end-to-end model are checked per
parameter tensor along random directions: for every tensor ``P`` the
analytic ``<dL/dP, v>`` is compared with ``(L(P + eps v) - L(P - eps v)) / 2eps``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import art
from . import numcore as nc
from .cells import (LstmParams, RnnParams, SourceEncoding, encode_source, init_lstm,
                    lstm_step, rnn_step)
from .heads import (ClassifierHead, CrfHead, bce_loss, char_cnn_embed, classify,
                    crf_log_likelihood, init_char_cnn)
from .numcore import ParamStore

EPS = 1e-5
TOLERANCE = 1e-4


def _group(name: str) -> str:
    return name.rsplit(".", 1)[0]


def grad_check_store(loss_fn: Callable[[], nc.Node], store: ParamStore, eps: float = EPS,
                     mode: str = "coordinate", rng=None, names=None) -> dict[str, float]:
    """Worst relative error per parameter (or per module) of ``store``.

    ``mode`` is ``coordinate`` (every entry), ``tensor`` (one random direction per
    tensor) or ``module`` (one random direction per group of tensors sharing a prefix).
    """
    names = store.names() if names is None else names
    store.zero_grad()
    nc.backward(loss_fn())
    analytic = {n: store[n].grad.copy() for n in names}
    out = {}
    if mode == "coordinate":
        for name in names:
            p = store[name]
            numeric = np.zeros_like(p.value)
            for idx in np.ndindex(p.value.shape):
                orig = p.value[idx]
                p.value[idx] = orig + eps
                up = float(loss_fn().value)
                p.value[idx] = orig - eps
                dn = float(loss_fn().value)
                p.value[idx] = orig
                numeric[idx] = (up - dn) / (2 * eps)
            out[name] = nc.relative_error(analytic[name], numeric)
        store.zero_grad()
        return out
    if mode not in ("tensor", "module"):
        raise ValueError(f"unknown grad check mode {mode!r}")
    groups: dict[str, list[str]] = {}
    for name in names:
        groups.setdefault(name if mode == "tensor" else _group(name), []).append(name)
    for key, members in groups.items():
        dirs = {n: rng.normal(size=store[n].value.shape) for n in members}
        origs = {n: store[n].value.copy() for n in members}
        evals = []
        for sign in (1.0, -1.0):
            for n in members:
                store[n].value[...] = origs[n] + sign * eps * dirs[n]
            evals.append(float(loss_fn().value))
        for n in members:
            store[n].value[...] = origs[n]
        directional = math.fsum(float(np.sum(analytic[n] * dirs[n])) for n in members)
        out[key] = nc.relative_error(directional, (evals[0] - evals[1]) / (2 * eps))
    store.zero_grad()
    return out


# ------------------------------------------------------------- components
# Each check takes a seed and returns the worst relative error.

def op_cases(seed: int) -> dict[str, tuple]:
    """``name -> (fn, inputs)`` for every primitive, sized by ``seed``."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    keep = rng.random((2, d)) < 0.5
    # max is not differentiable at ties; keep candidates far apart relative to EPS
    spread = np.stack([rng.permutation(3) for _ in range(2 * d)]).reshape(2, d, 3).transpose(0, 2, 1)
    separated = 0.3 * spread + rng.uniform(0.0, 0.1, size=(2, 3, d))
    drop_seed = int(rng.integers(1 << 30))
    T = nc.tanh
    return {
        "add": (lambda a, b: nc.sum(T(nc.add(a, b))), [r(2, d), r(d)]),
        "sub": (lambda a, b: nc.sum(T(nc.sub(a, b))), [r(d), r(2, d)]),
        "mul": (lambda a, b: nc.sum(nc.mul(a, b)), [r(2, d), r(1, d)]),
        "one_minus": (lambda a: nc.sum(nc.mul(nc.one_minus(a), a)), [r(d)]),
        "scale": (lambda a: nc.sum(T(nc.scale(a, -1.7))), [r(d)]),
        "affine": (lambda x, W, b: nc.sum(T(nc.affine(x, W, b))), [r(d), r(2, d), r(2)]),
        "linear": (lambda x, W: nc.sum(T(nc.linear(x, W))), [r(2, d), r(3, d)]),
        "dot": (lambda x, v: nc.sum(T(nc.dot(x, v))), [r(3, d), r(d)]),
        "weighted_sum": (lambda w, s: nc.sum(T(nc.weighted_sum(w, s))), [r(2, d), r(2, d, 3)]),
        "softmax": (lambda x, c: nc.sum(nc.mul(nc.softmax(x), c)), [r(2, d), r(2, d)]),
        "logsumexp": (lambda x: nc.sum(nc.logsumexp(x, axis=-2)), [r(d, 3)]),
        "log_softmax": (lambda x, c: nc.sum(nc.mul(nc.log_softmax(x), c)), [r(d), r(d)]),
        "tanh": (lambda a: nc.sum(T(a)), [r(d)]),
        "sigmoid": (lambda a: nc.sum(nc.sigmoid(a)), [r(d)]),
        "exp": (lambda a: nc.sum(nc.exp(T(a))), [r(d)]),
        "log": (lambda a: nc.sum(nc.log(nc.sigmoid(a))), [r(d)]),
        "clip": (lambda a: nc.sum(T(nc.clip(a, -1.0, 1.0))), [r(2, d)]),
        "where": (lambda a, b: nc.sum(T(nc.where(keep, a, b))), [r(2, d), r(2, d)]),
        "dropout": (lambda a: nc.sum(T(nc.dropout(a, 0.3, True, np.random.default_rng(drop_seed)))),
                    [r(2, d)]),
        "getitem": (lambda a: nc.sum(T(a[np.array([0, 0, 1]), :])), [r(2, d)]),
        "take_rows": (lambda t: nc.sum(T(nc.take_rows(t, np.array([[1, 0], [1, 1]])))), [r(3, d)]),
        "reshape": (lambda a: nc.sum(nc.mul(nc.reshape(a, (d, 2)), nc.constant(np.arange(2 * d)
                                                                             .reshape(d, 2)))),
                    [r(2, d)]),
        "expand_dims": (lambda a, b: nc.sum(T(nc.add(nc.expand_dims(a, -2), b))),
                        [r(2, d), r(3, d)]),
        "concat": (lambda a, b: nc.sum(T(nc.concat([a, b]))), [r(2, d), r(2, 2)]),
        "stack": (lambda a, b: nc.sum(nc.mul(nc.stack([a, b], axis=-2), a)), [r(d), r(d)]),
        "mean": (lambda a: nc.mean(T(a)), [r(2, d)]),
        "max_over": (lambda x: nc.sum(T(nc.max_over(x, axis=-2))), [separated]),
        "lstm_cell": (lambda z, c: nc.sum(T(nc.lstm_cell(z, c))), [r(2, 4 * d), r(2, d)]),
    }


def _ops_check(seed: int) -> float:
    return max(nc.grad_check(fn, inputs) for fn, inputs in op_cases(seed).values())


def _rnn_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    d, d_in = 3, 2

    def fn(h, x, W_x, W_h, b):
        return nc.sum(nc.mul(rnn_step(h, x, RnnParams(W_x, W_h, b)), nc.constant(w)))
    w = rng.normal(size=d)
    return nc.grad_check(fn, [rng.normal(size=d), rng.normal(size=d_in),
                              rng.normal(size=(d, d_in)), rng.normal(size=(d, d)),
                              rng.normal(size=d)])


def _lstm_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    d, d_in = 3, 3
    wh, wc = rng.normal(size=d), rng.normal(size=d)

    def fn(x, h, c, W, b):
        h1, c1 = lstm_step(x, h, c, LstmParams(W, b, d_in))
        return nc.add(nc.dot(h1, nc.constant(wh)), nc.dot(c1, nc.constant(wc)))
    return nc.grad_check(fn, [rng.normal(size=d_in), rng.normal(size=d), rng.normal(size=d),
                              rng.normal(size=(4 * d, d_in + d)), rng.normal(size=4 * d)])


def _attention_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    d, d_a, n = 3, 3, 4
    w = rng.normal(size=n)

    def fn(q, S, W_a, U_a, v_a):
        rows = [S[j] for j in range(n)]
        enc = SourceEncoding(rows, rows, S, S)
        p = art.AttentionParams(W_a, U_a, v_a)
        art.precompute_keys(enc, "h", p)
        return nc.dot(art.attention_weights(q, enc, "h", p), nc.constant(w))
    return nc.grad_check(fn, [rng.normal(size=d), rng.normal(size=(n, d)),
                              rng.normal(size=(d_a, d)), rng.normal(size=(d_a, d)),
                              rng.normal(size=d_a)])


def _context_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    return nc.grad_check(lambda a, S: nc.dot(art.context(nc.softmax(a), S), nc.constant(w)),
                         [rng.normal(size=4), rng.normal(size=(4, 3))])


def _concentrate_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    w1, w2 = rng.normal(size=3), rng.normal(size=3)

    def fn(pi, s, W_u, C_u):
        psi, u = art.concentrate(pi, s, art.ConcentrateParams(W_u, C_u))
        return nc.add(nc.dot(psi, nc.constant(w1)), nc.dot(u, nc.constant(w2)))
    return nc.grad_check(fn, [rng.normal(size=3), rng.normal(size=3),
                              rng.normal(size=(3, 3)), rng.normal(size=(3, 3))])


def _fuse_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    d, d_in = 3, 2
    w = rng.normal(size=d)

    def fn(x, prev, psi, *mats):
        keys = ["W_psi", "U_psi", "C_psi", "W_z", "U_z", "C_z", "W_r", "U_r", "C_r"]
        p = art.FusionParams(**dict(zip(keys, mats)))
        return nc.dot(art.fuse(x, prev, psi, p), nc.constant(w))
    shapes = [(d, d_in), (d, d), (d, d)] * 3
    return nc.grad_check(fn, [rng.normal(size=d_in), rng.normal(size=d), rng.normal(size=d)]
                         + [rng.normal(size=s) for s in shapes])


def art_step_problem(seed: int, d: int = 3, d_a: int = 3, n: int = 4):
    """Store and loss for one full ART-LSTM step, including the source encoder."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    src = init_lstm(store, "source", d, d, rng)
    params = art.init_art_lstm(store, "target", d, d, d_a, rng)
    for name, p in store.items():
        p.value[...] = rng.normal(scale=0.8, size=p.value.shape)
    xs = store.add("inputs.xs", rng.normal(size=(n, d)))
    h0 = store.add("inputs.h_prev", rng.normal(scale=0.5, size=d))
    c0 = store.add("inputs.c_prev", rng.normal(size=d))
    i = int(rng.integers(0, n))
    wts = [rng.normal(size=s) for s in (d, d, n, n)]

    def loss():
        enc = encode_source(xs, src)
        h, c, a_h, a_c = art.art_lstm_step(xs[i], h0, c0, enc, i, params)
        terms = [nc.dot(v, nc.constant(w)) for v, w in zip((h, c, a_h, a_c), wts)]
        return nc.add(nc.add(terms[0], terms[1]), nc.add(terms[2], terms[3]))
    return store, loss


def _art_step_check(seed: int, mode: str = "module") -> float:
    store, loss = art_step_problem(seed)
    errs = grad_check_store(loss, store, mode=mode, rng=np.random.default_rng(seed + 1))
    return max(errs.values())


def _classifier_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    y = float(rng.integers(0, 2))

    def fn(S, W, b):
        return bce_loss(classify(S, ClassifierHead(W, b)), [y])
    return nc.grad_check(fn, [rng.normal(size=(4, 6)), rng.normal(size=(1, 6)),
                              rng.normal(size=1)])


def _bce_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=3).astype(float)
    return nc.grad_check(lambda p: bce_loss(p, y), [rng.uniform(0.05, 0.95, size=3)])


def _crf_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    K, n, w = int(rng.integers(2, 5)), int(rng.integers(1, 6)), 4
    tags = rng.integers(0, K, size=(2, n))
    mask = np.ones((2, n), bool)
    mask[1, max(1, n - 2):] = False

    def fn(S, E, T, st, sp):
        return crf_log_likelihood(S, tags, CrfHead(E, T, st, sp), mask)
    return nc.grad_check(fn, [rng.normal(size=(2, n, w)), rng.normal(size=(K, w)),
                              rng.normal(size=(K, K)), rng.normal(size=K), rng.normal(size=K)])


def _char_cnn_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    emb = init_char_cnn(store, "chars", 6, 3, rng, num_filters=5)
    for _, p in store.items():
        p.value[...] = rng.normal(size=p.value.shape)
    chars = np.array([[2, 3, 4, 5], [3, 1, 0, 0]])
    mask = chars != 0
    w = rng.normal(size=(2, 5))
    errs = grad_check_store(
        lambda: nc.sum(nc.mul(char_cnn_embed(chars, emb, mask), nc.constant(w))), store)
    return max(errs.values())


def end_to_end_problem(seed: int, d: int = 3, d_a: int = 3, n: int = 4):
    """Two-sentence classification batch through the full transfer model."""
    from .data import Example
    from .model import TransferModel
    from .train import Corpora, TrainingConfig, build_vocabs

    rng = np.random.default_rng(seed)
    words = [f"w{k}" for k in range(6)]
    ex = [Example([str(rng.choice(words)) for _ in range(n)], int(rng.integers(0, 2))),
          Example([str(rng.choice(words)) for _ in range(n - 1)], int(rng.integers(0, 2)))]
    cfg = TrainingConfig(hidden=d, attention_dim=d_a, word_dim=d, dropout=0.0, seed=seed)
    model = TransferModel(cfg, build_vocabs(cfg, Corpora(target_train=ex)))
    for _, p in model.store.items():
        p.value[...] = rng.normal(scale=0.8, size=p.value.shape)
    batch = model.batch(ex)
    names = [n_ for n_ in model.store.names() if not n_.startswith("source.head")]
    return model.store, (lambda: model.target_loss(batch, training=False)), names


def _end_to_end_check(seed: int, mode: str = "module") -> float:
    store, loss, names = end_to_end_problem(seed)
    errs = grad_check_store(loss, store, mode=mode, rng=np.random.default_rng(seed + 1),
                            names=names)
    return max(errs.values())


COMPONENTS: dict[str, Callable[[int], float]] = {
    "ops": _ops_check,
    "rnn": _rnn_check,
    "lstm": _lstm_check,
    "attention": _attention_check,
    "context": _context_check,
    "concentrate": _concentrate_check,
    "fuse": _fuse_check,
    "art_step": _art_step_check,
    "classifier": _classifier_check,
    "bce": _bce_check,
    "crf": _crf_check,
    "char_cnn": _char_cnn_check,
    "end_to_end": _end_to_end_check,
}


@dataclass
class ComponentResult:
    name: str
    worst: float
    seeds: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.worst < TOLERANCE


def run_suite(components=None, seeds: int = 100, start_seed: int = 0) -> list[ComponentResult]:
    names = list(COMPONENTS) if not components else list(components)
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise KeyError(f"unknown gradcheck component(s): {', '.join(unknown)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        worst = max(COMPONENTS[name](s) for s in range(start_seed, start_seed + seeds))
        results.append(ComponentResult(name, worst, seeds, time.perf_counter() - t0))
    return results
