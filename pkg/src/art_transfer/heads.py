"""Output layers and losses: max-pool sigmoid classifier, linear-chain CRF, char CNN."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .cells import as_sequence
from .errors import ContractViolation, DataError, DimensionError
from .numcore import Node, ParamStore

P_CLAMP = 1e-12
CHAR_PAD = 0
CHAR_UNK = 1


# ----------------------------------------------------------------- classifier

@dataclass
class ClassifierHead:
    W_y: Node   # (1, 2d)
    b_y: Node   # (1,)


def init_classifier(store: ParamStore, prefix: str, width: int, rng) -> ClassifierHead:
    return ClassifierHead(
        W_y=store.add(f"{prefix}.W_y", nc.glorot_uniform(rng, (1, width))),
        b_y=store.add(f"{prefix}.b_y", np.zeros(1)),
    )


def classify(states, head: ClassifierHead, dropout_p: float = 0.0, training: bool = False,
             rng=None, mask: np.ndarray | None = None) -> Node:
    """Positive-class probability from max-pooled states ``(..., n, 2d)``."""
    S = as_sequence(states)
    if S.value.shape[-2] < 1:
        raise ContractViolation("classify needs at least one state")
    if S.value.shape[-1] != head.W_y.value.shape[1]:
        raise DimensionError(f"classify: state width {S.value.shape[-1]} vs head "
                             f"{head.W_y.value.shape[1]}")
    pooled = nc.max_over(S, axis=-2, mask=mask)
    pooled = nc.dropout(pooled, dropout_p, training, rng)
    logit = nc.affine(pooled, head.W_y, head.b_y)
    return nc.sigmoid(logit)[..., 0]


def bce_loss(p, y) -> Node:
    """Mean binary cross entropy; ``p`` is clamped to ``[1e-12, 1-1e-12]``."""
    p = nc.clip(nc.as_node(p), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=float)
    terms = nc.add(nc.mul(nc.constant(-y), nc.log(p)),
                   nc.mul(nc.constant(-(1.0 - y)), nc.log(nc.one_minus(p))))
    return nc.mean(terms)


# ------------------------------------------------------------------------ CRF

@dataclass
class CrfHead:
    """``transition[a, b]`` scores moving from tag ``a`` to tag ``b``."""

    emission: Node    # (K, 2d)
    transition: Node  # (K, K)
    start: Node       # (K,)
    stop: Node        # (K,)

    @property
    def num_tags(self) -> int:
        return self.transition.value.shape[0]


def init_crf(store: ParamStore, prefix: str, width: int, num_tags: int, rng) -> CrfHead:
    if num_tags < 2:
        raise ContractViolation("a CRF needs at least two tags")
    return CrfHead(
        emission=store.add(f"{prefix}.emission", nc.glorot_uniform(rng, (num_tags, width))),
        transition=store.add(f"{prefix}.transition", np.zeros((num_tags, num_tags))),
        start=store.add(f"{prefix}.start", np.zeros(num_tags)),
        stop=store.add(f"{prefix}.stop", np.zeros(num_tags)),
    )


def _batched(states, tags=None, mask=None):
    S = as_sequence(states)
    single = S.value.ndim == 2
    if single:
        S = nc.expand_dims(S, 0)
        if tags is not None:
            tags = np.asarray(tags)[None, :]
        if mask is not None:
            mask = np.asarray(mask)[None, :]
    B, n = S.value.shape[:2]
    if mask is None:
        mask = np.ones((B, n), dtype=bool)
    return S, None if tags is None else np.asarray(tags, dtype=np.int64), np.asarray(mask, bool), single


def emissions(states, head: CrfHead) -> Node:
    return nc.linear(as_sequence(states), head.emission)


def crf_log_partition(em: Node, head: CrfHead, mask: np.ndarray) -> Node:
    """Forward algorithm in log space over emission scores ``(B, n, K)``."""
    n = em.value.shape[1]
    alpha = nc.add(em[:, 0, :], head.start)
    for t in range(1, n):
        scores = nc.add(nc.expand_dims(alpha, -1), head.transition)   # (B, K, K)
        nxt = nc.add(nc.logsumexp(scores, axis=-2), em[:, t, :])
        alpha = nc.where(mask[:, t:t + 1], nxt, alpha)
    return nc.logsumexp(nc.add(alpha, head.stop), axis=-1)


def crf_path_score(em: Node, tags: np.ndarray, head: CrfHead, mask: np.ndarray) -> Node:
    B, n = tags.shape
    lengths = mask.sum(axis=1)
    rows = np.arange(B)
    b_idx, t_idx = np.nonzero(mask)
    emit = nc.sum(nc.reshape(em[b_idx, t_idx, tags[b_idx, t_idx]], (-1,)))
    score = nc.add(emit, nc.sum(head.start[tags[:, 0]]))
    last = tags[rows, lengths - 1]
    score = nc.add(score, nc.sum(head.stop[last]))
    if n > 1:
        pair = mask[:, 1:]
        pb, pt = np.nonzero(pair)
        if len(pb):
            score = nc.add(score, nc.sum(head.transition[tags[pb, pt], tags[pb, pt + 1]]))
    return score


def crf_log_likelihood(states, tags, head: CrfHead, mask: np.ndarray | None = None) -> Node:
    """Summed ``score(gold) - log Z`` over the sentences in ``states``."""
    S, tags, mask, _ = _batched(states, tags, mask)
    K = head.num_tags
    if tags.shape != mask.shape:
        raise DimensionError(f"tags {tags.shape} vs states {S.value.shape[:2]}")
    valid = tags[mask]
    if valid.size and (valid.min() < 0 or valid.max() >= K):
        raise DataError(f"tag id outside [0, {K})")
    if not mask[:, 0].all():
        raise ContractViolation("every sentence needs at least one position")
    em = emissions(S, head)
    logz = crf_log_partition(em, head, mask)
    return nc.sub(crf_path_score(em, np.where(mask, tags, 0), head, mask), nc.sum(logz))


def viterbi_decode(states, head: CrfHead, mask: np.ndarray | None = None):
    """MAP tag sequence and its score; ties go to the lower tag id.

    For a single sequence returns ``(tags, score)``; for a batch, a list of
    such pairs.
    """
    S, _, mask, single = _batched(states, None, mask)
    em = emissions(S, head).value
    results = [_viterbi_one(em[b, :int(mask[b].sum())], head) for b in range(em.shape[0])]
    return results[0] if single else results


def _viterbi_one(em: np.ndarray, head: CrfHead) -> tuple[list[int], float]:
    trans = head.transition.value
    delta = em[0] + head.start.value
    back = []
    for t in range(1, len(em)):
        cand = delta[:, None] + trans            # (prev, cur)
        arg = np.argmax(cand, axis=0)            # first max -> lowest prev id
        delta = cand[arg, np.arange(len(arg))] + em[t]
        back.append(arg)
    final = delta + head.stop.value
    best = int(np.argmax(final))
    score = float(final[best])
    path = [best]
    for arg in reversed(back):
        path.append(int(arg[path[-1]]))
    return path[::-1], score


def sequence_score(em: np.ndarray, tags, head: CrfHead) -> float:
    """Unnormalized score of one tag path under emissions ``em`` ``(n, K)``."""
    tags = list(tags)
    s = head.start.value[tags[0]] + head.stop.value[tags[-1]]
    s += sum(em[t, k] for t, k in enumerate(tags))
    s += sum(head.transition.value[a, b] for a, b in zip(tags, tags[1:]))
    return float(s)


def brute_force_paths(em: np.ndarray, head: CrfHead):
    """All ``K**n`` paths with their scores, for small ``n``."""
    n, K = em.shape
    return [(p, sequence_score(em, p, head)) for p in itertools.product(range(K), repeat=n)]


def token_softmax_loss(states, tags, head: CrfHead, mask: np.ndarray | None = None) -> Node:
    """Summed per-token log-likelihood under a softmax of the emission scores."""
    S, tags, mask, _ = _batched(states, tags, mask)
    logp = nc.log_softmax(emissions(S, head))
    b_idx, t_idx = np.nonzero(mask)
    return nc.sum(nc.reshape(logp[b_idx, t_idx, tags[b_idx, t_idx]], (-1,)))


def token_argmax(states, head: CrfHead, mask: np.ndarray | None = None):
    S, _, mask, single = _batched(states, None, mask)
    em = emissions(S, head).value
    out = [list(np.argmax(em[b, :int(mask[b].sum())], axis=-1).astype(int))
           for b in range(em.shape[0])]
    return out[0] if single else out


# ------------------------------------------------------------------- char CNN

@dataclass
class CharCnnEmbedder:
    table: Node     # (|C|, d_c)
    filters: Node   # (num_filters, width * d_c)
    bias: Node      # (num_filters,)
    width: int = 3

    @property
    def num_filters(self) -> int:
        return self.filters.value.shape[0]


def init_char_cnn(store: ParamStore, prefix: str, num_chars: int, d_c: int, rng,
                  num_filters: int = 50, width: int = 3) -> CharCnnEmbedder:
    return CharCnnEmbedder(
        table=store.add(f"{prefix}.table", nc.glorot_uniform(rng, (num_chars, d_c))),
        filters=store.add(f"{prefix}.filters",
                          nc.glorot_uniform(rng, (num_filters, width * d_c))),
        bias=store.add(f"{prefix}.bias", np.zeros(num_filters)),
        width=width,
    )


def pad_chars(char_ids, width: int = 3) -> list[int]:
    ids = list(char_ids)
    if not ids:
        raise ContractViolation("empty token")
    return ids + [CHAR_PAD] * max(0, width - len(ids))


def char_cnn_embed(chars, emb: CharCnnEmbedder, mask: np.ndarray | None = None) -> Node:
    """Max-over-time filter responses.

    ``chars`` is one token's char ids (returns ``(F,)``) or an integer array
    ``(..., L)`` of padded tokens with ``mask`` marking real characters
    (returns ``(..., F)``).
    """
    ids = np.asarray(chars, dtype=np.int64)
    w = emb.width
    if ids.ndim == 1:
        ids = np.asarray(pad_chars(ids, w))
        mask = np.ones(ids.shape, dtype=bool)
    elif mask is None:
        mask = ids != CHAR_PAD
    L = ids.shape[-1]
    if L < w:
        ids = np.concatenate([ids, np.full(ids.shape[:-1] + (w - L,), CHAR_PAD)], axis=-1)
        mask = np.concatenate([mask, np.zeros(mask.shape[:-1] + (w - L,), bool)], axis=-1)
        L = w
    n_win = L - w + 1
    lengths = np.maximum(np.asarray(mask).sum(axis=-1), w)
    win_valid = np.arange(n_win) < (lengths[..., None] - w + 1)
    window_ids = np.stack([ids[..., k:k + n_win] for k in range(w)], axis=-1)  # (..., n_win, w)
    vecs = nc.take_rows(emb.table, window_ids)                                  # (..., n_win, w, d_c)
    flat = nc.reshape(vecs, window_ids.shape[:-1] + (-1,))
    resp = nc.affine(flat, emb.filters, emb.bias)                               # (..., n_win, F)
    return nc.max_over(resp, axis=-2, mask=win_valid)


# -------------------------------------------------------------------- metrics

def accuracy(pred, gold) -> float:
    pred, gold = list(pred), list(gold)
    if len(pred) != len(gold):
        raise DimensionError("prediction and gold lengths differ")
    return sum(int(p == g) for p, g in zip(pred, gold)) / len(gold) if gold else 0.0


def token_accuracy(pred_seqs, gold_seqs) -> float:
    flat_p = [t for s in pred_seqs for t in s]
    flat_g = [t for s in gold_seqs for t in s]
    return accuracy(flat_p, flat_g)


def extract_spans(tags) -> set[tuple[int, int, str]]:
    """Entity spans ``(start, end_exclusive, type)`` from IOB1/IOB2 tags."""
    spans = set()
    start, kind = None, None
    for t, tag in enumerate(list(tags) + ["O"]):
        prefix, _, typ = tag.partition("-")
        begins = prefix == "B" or (prefix == "I" and (kind is None or typ != kind))
        if start is not None and (prefix == "O" or begins):
            spans.add((start, t, kind))
            start, kind = None, None
        if begins:
            start, kind = t, typ
        elif prefix not in ("B", "I", "O"):
            raise DataError(f"unrecognized tag {tag!r}")
    return spans


def span_f1(pred_seqs, gold_seqs) -> float:
    """Entity-level F1 with exact boundary and type match."""
    tp = n_pred = n_gold = 0
    for p, g in zip(pred_seqs, gold_seqs):
        ps, gs = extract_spans(p), extract_spans(g)
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    if tp == 0:
        return 0.0
    prec, rec = tp / n_pred, tp / n_gold
    return 2 * prec * rec / (prec + rec)
