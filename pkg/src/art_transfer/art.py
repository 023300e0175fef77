"""Aligned recurrent transfer: attention over source states fused into a target LSTM.

A target step ``i`` builds, separately for the short-term (``h``) and
long-term (``c``) streams:

* attention weights over all source positions, queried by the previous
  target state of that stream;
* a context vector ``pi`` (attention-weighted source states);
* ``psi = (1-u)*pi + u*s_i`` where ``u`` is the concentrate gate and ``s_i``
  the source state at the same position;
* a GRU-like fusion of the previous target state with ``psi``.

The fused ``h`` feeds the gate block of the target LSTM and the fused ``c``
replaces the previous cell state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .cells import (LstmParams, SourceEncoding, as_sequence, init_lstm, lstm_update,
                    reverse_sequence, reversal_index, zero_state)
from .errors import ConfigError, ContractViolation, DimensionError
from .numcore import Node, ParamStore

STREAMS = ("h", "c")
MODES = ("full_art", "cct", "lwt", "lstm_only")

# Names of deliberately broken gradients, for exercising the gradient checker.
FAULTS: set[str] = set()


@dataclass
class AttentionParams:
    W_a: Node
    U_a: Node
    v_a: Node


@dataclass
class ConcentrateParams:
    W_u: Node
    C_u: Node


@dataclass
class FusionParams:
    W_psi: Node
    U_psi: Node
    C_psi: Node
    W_z: Node
    U_z: Node
    C_z: Node
    W_r: Node
    U_r: Node
    C_r: Node


@dataclass
class ArtLstmParams:
    target_lstm: LstmParams
    fuse_h: FusionParams
    fuse_c: FusionParams
    attn_h: AttentionParams
    attn_c: AttentionParams
    conc_h: ConcentrateParams
    conc_c: ConcentrateParams

    @property
    def hidden(self) -> int:
        return self.target_lstm.hidden

    def attn(self, stream: str) -> AttentionParams:
        return self.attn_h if stream == "h" else self.attn_c

    def conc(self, stream: str) -> ConcentrateParams:
        return self.conc_h if stream == "h" else self.conc_c

    def fusion(self, stream: str) -> FusionParams:
        return self.fuse_h if stream == "h" else self.fuse_c


@dataclass
class AttentionTrace:
    """Attention matrices for one sentence and direction.

    Row ``i`` is the target position, column ``j`` the source position, both
    in original sentence order regardless of direction.
    """

    alpha_h: np.ndarray
    alpha_c: np.ndarray
    direction: str


# ---------------------------------------------------------------- parameters

def init_attention(store: ParamStore, prefix: str, d: int, d_a: int, rng) -> AttentionParams:
    return AttentionParams(
        W_a=store.add(f"{prefix}.W_a", nc.glorot_uniform(rng, (d_a, d))),
        U_a=store.add(f"{prefix}.U_a", nc.glorot_uniform(rng, (d_a, d))),
        v_a=store.add(f"{prefix}.v_a", nc.glorot_uniform(rng, (d_a,))),
    )


def init_concentrate(store: ParamStore, prefix: str, d: int, rng) -> ConcentrateParams:
    return ConcentrateParams(
        W_u=store.add(f"{prefix}.W_u", nc.glorot_uniform(rng, (d, d))),
        C_u=store.add(f"{prefix}.C_u", nc.glorot_uniform(rng, (d, d))),
    )


def init_fusion(store: ParamStore, prefix: str, d_in: int, d: int, rng) -> FusionParams:
    mats = {}
    for gate in ("psi", "z", "r"):
        mats[f"W_{gate}"] = store.add(f"{prefix}.W_{gate}", nc.glorot_uniform(rng, (d, d_in)))
        mats[f"U_{gate}"] = store.add(f"{prefix}.U_{gate}", nc.glorot_uniform(rng, (d, d)))
        mats[f"C_{gate}"] = store.add(f"{prefix}.C_{gate}", nc.glorot_uniform(rng, (d, d)))
    return FusionParams(**mats)


def init_art_lstm(store: ParamStore, prefix: str, d_in: int, d: int, d_a: int | None,
                  rng) -> ArtLstmParams:
    d_a = d if d_a is None else d_a
    return ArtLstmParams(
        target_lstm=init_lstm(store, f"{prefix}.lstm", d_in, d, rng),
        fuse_h=init_fusion(store, f"{prefix}.fuse_h", d_in, d, rng),
        fuse_c=init_fusion(store, f"{prefix}.fuse_c", d_in, d, rng),
        attn_h=init_attention(store, f"{prefix}.attn_h", d, d_a, rng),
        attn_c=init_attention(store, f"{prefix}.attn_c", d, d_a, rng),
        conc_h=init_concentrate(store, f"{prefix}.conc_h", d, rng),
        conc_c=init_concentrate(store, f"{prefix}.conc_c", d, rng),
    )


# ----------------------------------------------------------------- attention

def precompute_keys(encoding: SourceEncoding, stream: str, params: AttentionParams) -> Node:
    """Cache ``U_a s_j`` for every source position; it does not depend on the query."""
    keys = nc.linear(encoding.states(stream), params.U_a)
    encoding.keys[stream] = (keys, id(params))
    return keys


def attention_scores(query, keys: Node, params: AttentionParams) -> Node:
    q = nc.expand_dims(nc.linear(query, params.W_a), -2)
    scores = nc.dot(nc.tanh(nc.add(q, keys)), params.v_a)
    return nc.clip(scores, -nc.SCORE_CLAMP, nc.SCORE_CLAMP)


def attention_weights(query, encoding: SourceEncoding, stream: str,
                      params: AttentionParams) -> Node:
    """Softmax over source positions of ``v_a . tanh(W_a query + U_a s_j)``.

    Padding positions (``encoding.mask`` false) get exactly zero weight.
    """
    if stream not in STREAMS:
        raise ContractViolation(f"unknown stream {stream!r}")
    cached = encoding.keys.get(stream)
    if cached is None:
        raise ContractViolation(f"attention keys for stream {stream!r} were not precomputed")
    keys, owner = cached
    if owner != id(params):
        raise ContractViolation(f"stream {stream!r} keys were built with other attention params")
    return nc.softmax(attention_scores(query, keys, params), mask=encoding.mask)


def context(alpha, states) -> Node:
    """Attention-weighted sum of source states."""
    S = as_sequence(states)
    alpha = nc.as_node(alpha)
    if alpha.value.shape[-1] != S.value.shape[-2]:
        raise DimensionError(
            f"context: {alpha.value.shape[-1]} weights for {S.value.shape[-2]} states")
    return nc.weighted_sum(alpha, S)


def _concentrate_weight(params: ConcentrateParams) -> Node:
    return nc.concat([params.W_u, params.C_u], axis=1)


def concentrate(pi, s_corr, params: ConcentrateParams, pin_u: float | None = None,
                _W=None) -> tuple[Node, Node]:
    """Mix the context with the same-position source state.

    Returns ``(psi, u)`` with ``u = sigmoid(W_u s_corr + C_u pi)`` and
    ``psi = (1-u)*pi + u*s_corr``. ``pin_u`` replaces ``u`` by a constant.
    """
    pi, s_corr = nc.as_node(pi), nc.as_node(s_corr)
    if pi.value.shape != s_corr.value.shape:
        raise DimensionError(f"concentrate: pi {pi.shape} vs source state {s_corr.shape}")
    if pin_u is None:
        W = _concentrate_weight(params) if _W is None else _W
        u = nc.sigmoid(nc.linear(nc.concat([s_corr, pi]), W))
    else:
        u = nc.constant(np.full(pi.value.shape, pin_u))
    psi = nc.add(nc.mul(nc.one_minus(u), pi), nc.mul(u, s_corr))
    return psi, u


@dataclass
class _FusionPack:
    """Per-forward-pass concatenations of the fusion matrices."""

    zr: Node
    cand: Node
    d: int

    @classmethod
    def build(cls, p: FusionParams) -> "_FusionPack":
        C_z = nc.grad_scale(p.C_z, 1.5) if "fuse.C_z" in FAULTS else p.C_z
        zr = nc.concat([nc.concat([p.W_z, p.U_z, C_z], axis=1),
                        nc.concat([p.W_r, p.U_r, p.C_r], axis=1)], axis=0)
        cand = nc.concat([p.W_psi, p.U_psi, p.C_psi], axis=1)
        return cls(zr, cand, p.U_z.value.shape[0])


def fuse(x, prev, psi, params: FusionParams, pin_z: float | None = None,
         _pack: _FusionPack | None = None) -> Node:
    """Gated merge of the previous target state with the transferred ``psi``.

    ``r`` and ``z`` are sigmoid gates over ``(x, prev, psi)``;
    the candidate is ``tanh(W_psi x + U_psi (r*prev) + C_psi psi)`` and the
    result is ``(1-z)*prev + z*candidate``.
    """
    x, prev, psi = nc.as_node(x), nc.as_node(prev), nc.as_node(psi)
    if prev.value.shape != psi.value.shape:
        raise DimensionError(f"fuse: prev {prev.shape} vs psi {psi.shape}")
    pack = _FusionPack.build(params) if _pack is None else _pack
    d = pack.d
    gates = nc.sigmoid(nc.linear(nc.concat([x, prev, psi]), pack.zr))
    r = gates[..., d:]
    z = gates[..., :d] if pin_z is None else nc.constant(np.full(prev.value.shape, pin_z))
    cand = nc.tanh(nc.linear(nc.concat([x, nc.mul(r, prev), psi]), pack.cand))
    return nc.add(nc.mul(nc.one_minus(z), prev), nc.mul(z, cand))


# ------------------------------------------------------------------ ART step

@dataclass
class _StepContext:
    """Per-sequence caches shared by every step of one direction."""

    params: ArtLstmParams
    encoding: SourceEncoding
    W_x: Node
    W_h: Node
    fusion: dict
    conc: dict

    @classmethod
    def build(cls, params: ArtLstmParams, encoding: SourceEncoding) -> "_StepContext":
        for stream in STREAMS:
            cached = encoding.keys.get(stream)
            if cached is None or cached[1] != id(params.attn(stream)):
                precompute_keys(encoding, stream, params.attn(stream))
        W_x, W_h = params.target_lstm.split()
        return cls(params, encoding, W_x, W_h,
                   {s: _FusionPack.build(params.fusion(s)) for s in STREAMS},
                   {s: _concentrate_weight(params.conc(s)) for s in STREAMS})


def _transfer(ctx: _StepContext, stream: str, x, prev, i: int, pin_u, pin_z, cct: bool):
    """Fused recurrent input of one stream, plus its attention weights."""
    enc = ctx.encoding
    s_corr = enc.at(stream, i)
    if cct:
        alpha = None
        psi = s_corr
    else:
        alpha = attention_weights(prev, enc, stream, ctx.params.attn(stream))
        pi = context(alpha, enc.states(stream))
        psi, _ = concentrate(pi, s_corr, ctx.params.conc(stream), pin_u, _W=ctx.conc[stream])
    fused = fuse(x, prev, psi, ctx.params.fusion(stream), pin_z, _pack=ctx.fusion[stream])
    return fused, alpha


def _art_step(ctx: _StepContext, x, pre_x, h_prev, c_prev, i: int,
              pin_u=None, pin_z=None, cct=False):
    fused_h, alpha_h = _transfer(ctx, "h", x, h_prev, i, pin_u, pin_z, cct)
    fused_c, alpha_c = _transfer(ctx, "c", x, c_prev, i, pin_u, pin_z, cct)
    h, c = lstm_update(pre_x, fused_h, fused_c, ctx.W_h)
    return h, c, alpha_h, alpha_c


def art_lstm_step(x, h_prev, c_prev, encoding: SourceEncoding, i: int,
                  params: ArtLstmParams, pin_u: float | None = None,
                  pin_z: float | None = None) -> tuple[Node, Node, Node, Node]:
    """One target step at position ``i``; returns ``(h, c, alpha_h, alpha_c)``."""
    if not 0 <= i < encoding.length:
        raise ContractViolation(f"position {i} outside source of length {encoding.length}")
    x = nc.as_node(x)
    ctx = _StepContext.build(params, encoding)
    pre_x = nc.affine(x, ctx.W_x, params.target_lstm.b)
    return _art_step(ctx, x, pre_x, h_prev, c_prev, i, pin_u, pin_z)


# ------------------------------------------------------------------- encoders

@dataclass
class DirectionOutput:
    H: Node                      # (..., n, d)
    alpha_h: np.ndarray | None   # (..., n, n) in this direction's frame
    alpha_c: np.ndarray | None


@dataclass
class TargetEncoder:
    """Bidirectional target encoder configured for one transfer mode.

    ``full_art`` runs the aligned transfer at every cell, ``cct`` transfers
    only the same-position source state, ``lwt`` transfers only at the last
    cell of each direction and ``lstm_only`` ignores the source entirely.
    ``pin_u`` / ``pin_z`` pin the concentrate and update gates.
    """

    kind: str
    fwd: ArtLstmParams
    bwd: ArtLstmParams
    pin_u: float | None = None
    pin_z: float | None = None
    record: bool = True
    traces: list = field(default_factory=list)

    @property
    def uses_source(self) -> bool:
        return self.kind != "lstm_only"

    def run_direction(self, X: Node, params: ArtLstmParams, encoding: SourceEncoding | None,
                      lengths: np.ndarray | None) -> DirectionOutput:
        n = X.value.shape[-2]
        d = params.hidden
        lstm = params.target_lstm
        h = zero_state(X, d)
        c = zero_state(X, d)
        W_x, W_h = lstm.split()
        pre_all = nc.affine(X, W_x, lstm.b)
        ctx = _StepContext.build(params, encoding) if self.uses_source else None
        record = self.record and self.kind == "full_art"
        a_h = np.zeros(X.value.shape[:-1] + (n,)) if record else None
        a_c = np.zeros_like(a_h) if record else None
        if lengths is None:
            last = np.full(X.value.shape[:-2], n - 1)
        else:
            last = np.asarray(lengths) - 1
        outs = []
        for t in range(n):
            pre_x = pre_all[..., t, :]
            if self.kind == "lstm_only":
                h, c = lstm_update(pre_x, h, c, W_h)
            elif self.kind == "lwt":
                is_last = last == t
                if np.any(is_last):
                    xt = X[..., t, :]
                    h_art, c_art, _, _ = _art_step(ctx, xt, pre_x, h, c, t,
                                                   self.pin_u, self.pin_z)
                    h_pl, c_pl = lstm_update(pre_x, h, c, W_h)
                    sel = np.expand_dims(is_last, -1)
                    h, c = nc.where(sel, h_art, h_pl), nc.where(sel, c_art, c_pl)
                else:
                    h, c = lstm_update(pre_x, h, c, W_h)
            else:
                xt = X[..., t, :]
                h, c, al_h, al_c = _art_step(ctx, xt, pre_x, h, c, t, self.pin_u,
                                             self.pin_z, cct=self.kind == "cct")
                if record:
                    a_h[..., t, :] = al_h.value
                    a_c[..., t, :] = al_c.value
            outs.append(h)
        return DirectionOutput(nc.stack(outs, axis=-2), a_h, a_c)

    def encode(self, X: Node, fwd_encoding: SourceEncoding | None,
               bwd_encoding: SourceEncoding | None,
               lengths: np.ndarray | None = None) -> Node:
        """Concatenated forward/backward states ``(..., n, 2d)``.

        ``bwd_encoding`` must be built over the per-row reversed input, so
        position ``t`` of both backward runs refers to the same token.
        """
        n = X.value.shape[-2]
        for enc in (fwd_encoding, bwd_encoding):
            if self.uses_source and (enc is None or enc.length != n):
                raise ContractViolation("source encoding length does not match the input")
        fwd = self.run_direction(X, self.fwd, fwd_encoding, lengths)
        Xr = reverse_sequence(X, lengths)
        bwd = self.run_direction(Xr, self.bwd, bwd_encoding, lengths)
        H_bwd = reverse_sequence(bwd.H, lengths)
        self.traces = []
        if fwd.alpha_h is not None:
            self.traces = _collect_traces(fwd, bwd, lengths, n)
        return nc.concat([fwd.H, H_bwd], axis=-1)


def _collect_traces(fwd: DirectionOutput, bwd: DirectionOutput, lengths, n: int) -> list:
    """One forward and one backward :class:`AttentionTrace` per sentence."""
    if fwd.alpha_h.ndim == 2:
        return [AttentionTrace(fwd.alpha_h.copy(), fwd.alpha_c.copy(), "forward"),
                AttentionTrace(bwd.alpha_h[::-1, ::-1].copy(), bwd.alpha_c[::-1, ::-1].copy(),
                               "backward")]
    lengths = np.full(fwd.alpha_h.shape[0], n) if lengths is None else np.asarray(lengths)
    traces = []
    for b, L in enumerate(lengths):
        traces.append([
            AttentionTrace(fwd.alpha_h[b, :L, :L].copy(), fwd.alpha_c[b, :L, :L].copy(),
                           "forward"),
            AttentionTrace(bwd.alpha_h[b, :L, :L][::-1, ::-1].copy(),
                           bwd.alpha_c[b, :L, :L][::-1, ::-1].copy(), "backward"),
        ])
    return traces


def build_ablation(kind: str, fwd_params: ArtLstmParams, bwd_params: ArtLstmParams,
                   task: str = "classification", **pins) -> TargetEncoder:
    if kind not in MODES:
        raise ConfigError(f"unknown transfer mode {kind!r}; expected one of {MODES}")
    if kind == "lwt" and task != "classification":
        raise ConfigError("lwt transfers a single sentence-level cell and only supports "
                          "sentence classification")
    return TargetEncoder(kind, fwd_params, bwd_params, **pins)


def encode_target_bidirectional(xs, fwd_encoding: SourceEncoding, bwd_encoding: SourceEncoding,
                                fwd_params: ArtLstmParams, bwd_params: ArtLstmParams,
                                lengths: np.ndarray | None = None,
                                kind: str = "full_art") -> tuple[list, list]:
    """Full-ART bidirectional target encoding of one sequence (or a padded batch).

    Returns per-position outputs of width ``2d`` and the attention traces.
    """
    X = as_sequence(xs)
    enc = build_ablation(kind, fwd_params, bwd_params)
    n = X.value.shape[-2]
    if fwd_encoding.length != n or bwd_encoding.length != n:
        raise ContractViolation(
            f"input length {n} vs source encodings {fwd_encoding.length}/{bwd_encoding.length}")
    out = enc.encode(X, fwd_encoding, bwd_encoding, lengths)
    return [out[..., t, :] for t in range(n)], enc.traces


def padding_mask(lengths: np.ndarray, n: int) -> np.ndarray:
    return np.arange(n)[None, :] < np.asarray(lengths)[:, None]


__all__ = [
    "AttentionParams", "ConcentrateParams", "FusionParams", "ArtLstmParams", "AttentionTrace",
    "TargetEncoder", "init_art_lstm", "precompute_keys", "attention_weights", "context",
    "concentrate", "fuse", "art_lstm_step", "encode_target_bidirectional", "build_ablation",
    "padding_mask", "reversal_index", "FAULTS",
]
