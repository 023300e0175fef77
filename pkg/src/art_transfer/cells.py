"""Plain recurrent cells and the source-domain sequence encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ContractViolation, DimensionError
from .numcore import Node, ParamStore

FORGET_BIAS = 1.0


@dataclass
class RnnParams:
    W_x: Node
    W_h: Node
    b: Node

    @property
    def hidden(self) -> int:
        return self.W_h.value.shape[0]


@dataclass
class LstmParams:
    """Stacked transform of ``[x; h]`` to the four gate blocks ``[c~; o; i; f]``."""

    W: Node
    b: Node
    d_in: int

    @property
    def hidden(self) -> int:
        return self.W.value.shape[0] // 4

    def split(self) -> tuple[Node, Node]:
        """Input and recurrent column blocks of the stacked weight."""
        return self.W[:, :self.d_in], self.W[:, self.d_in:]


def init_rnn(store: ParamStore, prefix: str, d_in: int, d: int, rng) -> RnnParams:
    return RnnParams(
        W_x=store.add(f"{prefix}.W_x", nc.glorot_uniform(rng, (d, d_in))),
        W_h=store.add(f"{prefix}.W_h", nc.glorot_uniform(rng, (d, d))),
        b=store.add(f"{prefix}.b", np.zeros(d)),
    )


def init_lstm(store: ParamStore, prefix: str, d_in: int, d: int, rng) -> LstmParams:
    b = np.zeros(4 * d)
    b[3 * d:] = FORGET_BIAS
    return LstmParams(
        W=store.add(f"{prefix}.W", nc.glorot_uniform(rng, (4 * d, d_in + d))),
        b=store.add(f"{prefix}.b", b),
        d_in=d_in,
    )


def rnn_step(h_prev, x, params: RnnParams) -> Node:
    """Elman step ``tanh(W_x x + W_h h_prev + b)``."""
    return nc.tanh(nc.add(nc.affine(x, params.W_x, params.b), nc.linear(h_prev, params.W_h)))


def lstm_update(pre_x, h_prev, c_prev, W_h) -> tuple[Node, Node]:
    """Finish an LSTM step given the already-projected input ``W_x x + b``.

    Both the source encoder and the target encoder go through this function,
    which keeps their floating-point operations identical.
    """
    d = W_h.value.shape[1]
    pre = nc.add(pre_x, nc.linear(h_prev, W_h))
    hc = nc.lstm_cell(pre, c_prev)
    return hc[..., :d], hc[..., d:]


def lstm_step(x, h_prev, c_prev, params: LstmParams) -> tuple[Node, Node]:
    x = nc.as_node(x)
    if x.value.shape[-1] != params.d_in:
        raise DimensionError(f"lstm_step: input width {x.value.shape[-1]} != {params.d_in}")
    W_x, W_h = params.split()
    return lstm_update(nc.affine(x, W_x, params.b), h_prev, c_prev, W_h)


@dataclass
class SourceEncoding:
    """Per-position source states, stacked on axis -2 as ``(..., n, d)``.

    ``keys`` holds the attention keys ``U_a s_j`` for each stream once they
    have been precomputed by :func:`art_transfer.art.precompute_keys`.
    """

    H_S: list
    C_S: list
    H: Node
    C: Node
    mask: np.ndarray | None = None
    keys: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.H_S)

    @property
    def keys_h(self):
        return self.keys.get("h", (None,))[0]

    @property
    def keys_c(self):
        return self.keys.get("c", (None,))[0]

    def states(self, stream: str) -> Node:
        if stream == "h":
            return self.H
        if stream == "c":
            return self.C
        raise ContractViolation(f"unknown stream {stream!r}")

    def at(self, stream: str, i: int) -> Node:
        return (self.H_S if stream == "h" else self.C_S)[i]


def as_sequence(xs) -> Node:
    """Stack a list of per-position vectors into ``(..., n, d)``; pass Nodes through."""
    if isinstance(xs, Node):
        return xs
    if isinstance(xs, np.ndarray):
        return nc.constant(xs)
    if len(xs) == 0:
        raise ContractViolation("empty sequence")
    return nc.stack([nc.as_node(x) for x in xs], axis=-2)


def zero_state(X: Node, d: int) -> Node:
    return nc.constant(np.zeros(X.value.shape[:-2] + (d,)))


def encode_source(xs, params: LstmParams, h0=None, c0=None,
                  mask: np.ndarray | None = None) -> SourceEncoding:
    """Run the LSTM over ``xs`` and keep every intermediate ``(h, c)``."""
    X = as_sequence(xs)
    n = X.value.shape[-2]
    if n < 1:
        raise ContractViolation("encode_source needs at least one position")
    if X.value.shape[-1] != params.d_in:
        raise DimensionError(f"encode_source: input width {X.value.shape[-1]} != {params.d_in}")
    d = params.hidden
    h = zero_state(X, d) if h0 is None else nc.as_node(h0)
    c = zero_state(X, d) if c0 is None else nc.as_node(c0)
    W_x, W_h = params.split()
    H_S, C_S = [], []
    for t in range(n):
        # per-step projection keeps each state independent of the sequence length
        h, c = lstm_update(nc.affine(X[..., t, :], W_x, params.b), h, c, W_h)
        H_S.append(h)
        C_S.append(c)
    return SourceEncoding(H_S, C_S, nc.stack(H_S, axis=-2), nc.stack(C_S, axis=-2), mask)


def reversal_index(lengths: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays reversing each row's first ``lengths[b]`` positions in place.

    Padding stays at the end. The map is its own inverse.
    """
    lengths = np.asarray(lengths)
    t = np.arange(n)[None, :]
    idx = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.broadcast_to(np.arange(len(lengths))[:, None], idx.shape)
    return rows, idx


def reverse_sequence(X: Node, lengths: np.ndarray | None = None) -> Node:
    """Reverse along axis -2, per row within its true length when batched."""
    if lengths is None or X.value.ndim == 2:
        return X[..., ::-1, :]
    rows, idx = reversal_index(lengths, X.value.shape[-2])
    return X[rows, idx]
