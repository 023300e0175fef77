"""Source stack + ART target stack + task heads over shared embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .art import TargetEncoder, build_ablation, init_art_lstm
from .cells import encode_source, init_lstm, reverse_sequence
from .data import PAD, Batch, Vocabulary, encode_batch
from .heads import (char_cnn_embed, classify, crf_log_likelihood, init_char_cnn,
                    init_classifier, init_crf, token_argmax, token_softmax_loss,
                    viterbi_decode, bce_loss)
from .numcore import Node, ParamStore

PLAIN_MODES = ("lstm_only", "lstm_union", "lstm_source_only")


def encoder_kind(mode: str) -> str:
    return "lstm_only" if mode in PLAIN_MODES else mode


@dataclass
class Vocabs:
    words: Vocabulary
    chars: Vocabulary | None = None
    source_tags: Vocabulary | None = None
    target_tags: Vocabulary | None = None


class TransferModel:
    """Everything trainable for one experiment, in a single :class:`ParamStore`.

    Parameter names: ``embed.*`` (shared inputs), ``source.{fwd,bwd}.*`` and
    ``source.head.*`` (pre-trained stack), ``target.{fwd,bwd}.*`` and
    ``target.head.*`` (transfer stack).
    """

    def __init__(self, cfg, vocabs: Vocabs, pretrained: tuple | None = None):
        self.cfg = cfg
        self.vocabs = vocabs
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = np.random.default_rng(cfg.seed + 7919)
        d, tagging = cfg.hidden, cfg.task == "tagging"

        table = nc.glorot_uniform(rng, (len(vocabs.words), cfg.word_dim))
        if pretrained is not None:
            tokens, matrix = pretrained
            for tok, row in zip(tokens, matrix):
                if tok in vocabs.words:
                    table[vocabs.words.id(tok)] = row
        table[PAD] = 0.0
        self.word_table = self.store.add("embed.words", table)
        in_dim = cfg.word_dim
        self.char_cnn = None
        if tagging:
            self.char_cnn = init_char_cnn(self.store, "embed.chars", len(vocabs.chars),
                                          cfg.char_dim, rng, cfg.char_filters, cfg.char_width)
            in_dim += cfg.char_filters

        self.src_fwd = init_lstm(self.store, "source.fwd", in_dim, d, rng)
        self.src_bwd = init_lstm(self.store, "source.bwd", in_dim, d, rng)
        self.tgt_fwd = init_art_lstm(self.store, "target.fwd", in_dim, d, cfg.attention_dim, rng)
        self.tgt_bwd = init_art_lstm(self.store, "target.bwd", in_dim, d, cfg.attention_dim, rng)
        if tagging:
            self.src_head = init_crf(self.store, "source.head", 2 * d,
                                     len(vocabs.source_tags), rng)
            self.tgt_head = init_crf(self.store, "target.head", 2 * d,
                                     len(vocabs.target_tags), rng)
        else:
            self.src_head = init_classifier(self.store, "source.head", 2 * d, rng)
            self.tgt_head = init_classifier(self.store, "target.head", 2 * d, rng)
        self.pins: dict = {}
        self.last_traces: list = []

    # ------------------------------------------------------------ plumbing
    @property
    def tagging(self) -> bool:
        return self.cfg.task == "tagging"

    def batch(self, examples, side: str = "target") -> Batch:
        tags = None
        if self.tagging:
            tags = self.vocabs.source_tags if side == "source" else self.vocabs.target_tags
        return encode_batch(examples, self.vocabs.words, self.vocabs.chars, tags)

    def source_param_names(self) -> list[str]:
        return self.store.names("source.")

    def target_encoder(self, mode: str | None = None) -> TargetEncoder:
        kind = encoder_kind(mode or self.cfg.mode)
        return build_ablation(kind, self.tgt_fwd, self.tgt_bwd, self.cfg.task, **self.pins)

    # -------------------------------------------------------------- forward
    def embed(self, batch: Batch) -> Node:
        X = nc.take_rows(self.word_table, batch.ids)
        if self.char_cnn is not None:
            X = nc.concat([X, char_cnn_embed(batch.chars, self.char_cnn, batch.char_mask)])
        return X

    def source_encodings(self, X: Node, batch: Batch):
        fwd = encode_source(X, self.src_fwd, mask=batch.mask)
        bwd = encode_source(reverse_sequence(X, batch.lengths), self.src_bwd, mask=batch.mask)
        return fwd, bwd

    def source_states(self, batch: Batch) -> Node:
        X = self.embed(batch)
        fwd, bwd = self.source_encodings(X, batch)
        return nc.concat([fwd.H, reverse_sequence(bwd.H, batch.lengths)])

    def target_states(self, batch: Batch, mode: str | None = None) -> Node:
        X = self.embed(batch)
        enc = self.target_encoder(mode)
        fwd = bwd = None
        if enc.uses_source:
            fwd, bwd = self.source_encodings(X, batch)
        out = enc.encode(X, fwd, bwd, batch.lengths)
        self.last_traces = enc.traces
        return out

    def _head_loss(self, states: Node, batch: Batch, head, training: bool) -> Node:
        if self.tagging:
            states = nc.dropout(states, self.cfg.dropout, training, self.dropout_rng)
            if self.cfg.tag_loss == "softmax":
                ll = token_softmax_loss(states, batch.labels, head, batch.mask)
            else:
                ll = crf_log_likelihood(states, batch.labels, head, batch.mask)
            return nc.scale(ll, -1.0 / batch.size)
        p = classify(states, head, self.cfg.dropout, training, self.dropout_rng, batch.mask)
        return bce_loss(p, batch.labels)

    def source_loss(self, batch: Batch, training: bool = True) -> Node:
        return self._head_loss(self.source_states(batch), batch, self.src_head, training)

    def target_loss(self, batch: Batch, training: bool = True, mode: str | None = None) -> Node:
        return self._head_loss(self.target_states(batch, mode), batch, self.tgt_head, training)

    def _predict(self, states: Node, batch: Batch, head):
        if self.tagging:
            if self.cfg.tag_loss == "softmax":
                return token_argmax(states, head, batch.mask)
            return [path for path, _ in viterbi_decode(states, head, batch.mask)]
        return classify(states, head, mask=batch.mask).value

    def predict_source(self, batch: Batch):
        return self._predict(self.source_states(batch), batch, self.src_head)

    def predict_target(self, batch: Batch, mode: str | None = None):
        return self._predict(self.target_states(batch, mode), batch, self.tgt_head)
