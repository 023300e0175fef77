"""Pre-train / fine-tune protocol, baselines and experiment grids."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import (Example, Vocabulary, char_vocabulary, load_classification_tsv, load_conll,
                   tag_vocabulary)
from .errors import ConfigError, DataError
from .heads import accuracy, span_f1, token_accuracy
from .model import PLAIN_MODES, TransferModel, Vocabs

log = logging.getLogger(__name__)

TASKS = ("classification", "tagging")
ALL_MODES = ("full_art", "cct", "lwt", "lstm_only", "lstm_union", "lstm_source_only")
TRANSFER_MODES = ("full_art", "cct", "lwt")
DEFAULT_LR = {"adam": 1e-3, "adagrad": 0.1, "sgd": 0.1}
DATA_KEYS = ("source_train", "source_dev", "target_train", "target_dev", "target_test")


@dataclass
class TrainingConfig:
    """Every knob of a run. ``None`` fields resolve to task-dependent defaults."""

    task: str = "classification"
    mode: str = "full_art"
    hidden: int | None = None
    attention_dim: int | None = None
    word_dim: int | None = None
    char_dim: int = 25
    char_filters: int = 50
    char_width: int = 3
    optimizer: str | None = None
    lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    dropout: float = 0.5
    batch_size: int = 16
    pretrain_epochs: int = 20
    finetune_epochs: int = 30
    patience: int = 5
    seed: int = 0
    tag_loss: str = "crf"
    tag_metric: str = "accuracy"
    freeze_source_epochs: int = 0
    min_count: int = 1
    lowercase: bool | None = None
    embeddings: str = ""
    source_train: str = ""
    source_dev: str = ""
    target_train: str = ""
    target_dev: str = ""
    target_test: str = ""
    max_export_len: int = 100

    def __post_init__(self):
        tagging = self.task == "tagging"
        if self.hidden is None:
            self.hidden = 300 if tagging else 100
        if self.word_dim is None:
            self.word_dim = 50 if tagging else 100
        if self.optimizer is None:
            self.optimizer = "adagrad" if tagging else "adam"
        if self.lr is None:
            self.lr = DEFAULT_LR.get(self.optimizer, 1e-3)
        if self.attention_dim is None:
            self.attention_dim = self.hidden
        if self.lowercase is None:
            self.lowercase = not tagging
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.mode not in ALL_MODES:
            raise ConfigError(f"mode: expected one of {ALL_MODES}, got {self.mode!r}")
        if self.mode == "lwt" and self.task == "tagging":
            raise ConfigError("mode: lwt only supports sentence classification")
        for key in ("hidden", "attention_dim", "word_dim", "char_dim", "char_filters",
                    "char_width", "batch_size"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be positive")
        for key in ("pretrain_epochs", "finetune_epochs", "patience", "freeze_source_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be non-negative")
        if self.optimizer not in nc.OPTIMIZER_DEFAULTS:
            raise ConfigError(f"optimizer: unknown {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("lr: must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout: must be in [0, 1)")
        if self.tag_loss not in ("crf", "softmax"):
            raise ConfigError("tag_loss: expected crf or softmax")
        if self.tag_metric not in ("accuracy", "f1"):
            raise ConfigError("tag_metric: expected accuracy or f1")

    # ------------------------------------------------------------ key=value
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainingConfig":
        return TrainingConfig(**{**self.to_dict(), **changes})

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "TrainingConfig":
        """Build from string values, coercing each to its field type."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, text in raw.items():
            if key not in fields:
                raise ConfigError(f"{key}: unknown config key")
            kwargs[key] = _coerce(key, fields[key].type, text)
        return cls(**kwargs)

    def to_lines(self) -> list[str]:
        return [f"{k} = {_render(v)}" for k, v in self.to_dict().items()]


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, typ: str, text):
    if not isinstance(text, str):
        return text
    text = text.strip()
    optional = "None" in typ
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if typ.startswith("int"):
            return int(text)
        if typ.startswith("float"):
            return float(text)
        if typ.startswith("bool"):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ}") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path, overrides: dict | None = None) -> TrainingConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    raw = parse_config_text(text)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainingConfig.from_dict(raw)


# --------------------------------------------------------------------- corpora

@dataclass
class Corpora:
    source_train: list = field(default_factory=list)
    source_dev: list = field(default_factory=list)
    target_train: list = field(default_factory=list)
    target_dev: list = field(default_factory=list)
    target_test: list = field(default_factory=list)


def load_corpora(cfg: TrainingConfig, base: Path | None = None) -> Corpora:
    out = Corpora()
    for key in DATA_KEYS:
        name = getattr(cfg, key)
        if not name:
            continue
        path = Path(name) if base is None else Path(base) / name
        if not path.is_file():
            raise DataError(f"corpus file not found: {path}")
        if cfg.task == "tagging":
            setattr(out, key, load_conll(path))
        else:
            setattr(out, key, load_classification_tsv(path, cfg.lowercase))
    return out


def merge_sources(*corpora: Sequence[Example]) -> list[Example]:
    """Concatenate several source-domain corpora into one."""
    return [ex for c in corpora for ex in c]


def build_vocabs(cfg: TrainingConfig, corpora: Corpora,
                 extra_tokens: Sequence[str] = ()) -> Vocabs:
    seqs = [ex.tokens for key in ("source_train", "source_dev", "target_train", "target_dev")
            for ex in getattr(corpora, key)]
    words = Vocabulary.build(seqs, cfg.min_count)
    for tok in extra_tokens:
        words.add(tok)
    if cfg.task != "tagging":
        return Vocabs(words)
    src = corpora.source_train + corpora.source_dev
    tgt = corpora.target_train + corpora.target_dev + corpora.target_test
    source_tags = tag_vocabulary(src)
    target_tags = tag_vocabulary(tgt + (src if cfg.mode in ("lstm_union", "lstm_source_only")
                                        else []))
    return Vocabs(words, char_vocabulary(seqs), source_tags, target_tags)


# ------------------------------------------------------------------- training

@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    dev_loss: float
    dev_metric: float


@dataclass
class ExperimentReport:
    mode: str
    seed: int
    task: str
    history: list = field(default_factory=list)
    test_metric: float = float("nan")
    wall_clock: float = 0.0

    HEADER = "mode\tseed\tphase\tepoch\ttrain_loss\tdev_loss\tdev_metric"

    def rows(self) -> list[str]:
        out = [f"{self.mode}\t{self.seed}\t{r.phase}\t{r.epoch}\t{r.train_loss:.6f}\t"
               f"{r.dev_loss:.6f}\t{r.dev_metric:.6f}" for r in self.history]
        out.append(f"{self.mode}\t{self.seed}\ttest\t-\t-\t-\t{self.test_metric:.6f}")
        return out

    def trajectory(self) -> list[tuple]:
        return [dataclasses.astuple(r) for r in self.history] + [("test", self.test_metric)]


def _metric(model: TransferModel, preds, examples: Sequence[Example], side: str) -> float:
    if not model.tagging:
        return accuracy([int(p >= 0.5) for p in preds], [ex.label for ex in examples])
    tags = model.vocabs.source_tags if side == "source" else model.vocabs.target_tags
    pred_tags = [tags.decode(p) for p in preds]
    gold = [ex.label for ex in examples]
    if model.cfg.tag_metric == "f1":
        return span_f1(pred_tags, gold)
    return token_accuracy(pred_tags, gold)


def evaluate(model: TransferModel, examples: Sequence[Example], side: str = "target",
             mode: str | None = None, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and task metric, dropout off; ``side`` picks the stack."""
    if not examples:
        return float("nan"), float("nan")
    preds, total = [], 0.0
    for start in range(0, len(examples), batch_size):
        chunk = list(examples[start:start + batch_size])
        batch = model.batch(chunk, side)
        if side == "source":
            states = model.source_states(batch)
            head = model.src_head
        else:
            states = model.target_states(batch, mode)
            head = model.tgt_head
        loss = model._head_loss(states, batch, head, training=False)
        total += float(loss.value) * len(chunk)
        preds.extend(model._predict(states, batch, head))
    return total / len(examples), _metric(model, preds, examples, side)


def _fit(model: TransferModel, train: Sequence[Example], dev: Sequence[Example], side: str,
         loss_fn, epochs: int, phase: str, seed_offset: int, names_for_epoch=None,
         eval_side: str | None = None) -> list[EpochRecord]:
    cfg = model.cfg
    store = model.store
    rng = np.random.default_rng(cfg.seed + seed_offset)
    # each phase owns its dropout stream, so cached pre-training replays exactly
    model.dropout_rng = np.random.default_rng(cfg.seed + seed_offset + 7919)
    hyper = {}
    if cfg.optimizer == "adam":
        hyper = {"beta1": cfg.beta1, "beta2": cfg.beta2, "eps": cfg.eps}
    store.reset_optimizer()
    store.zero_grad()
    records: list[EpochRecord] = []
    best, best_metric, bad = None, -math.inf, 0
    for epoch in range(1, epochs + 1):
        names = names_for_epoch(epoch) if names_for_epoch else None
        losses = []
        order = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            batch = model.batch([train[i] for i in order[start:start + cfg.batch_size]], side)
            loss = loss_fn(batch)
            nc.backward(loss)
            nc.optimizer_step(store, cfg.optimizer, cfg.lr, names=names,
                              clip_norm=cfg.clip_norm, **hyper)
            losses.append(float(loss.value))
        dev_loss, dev_metric = evaluate(model, dev, eval_side or side)
        records.append(EpochRecord(phase, epoch, float(np.mean(losses)), dev_loss, dev_metric))
        log.info("%s epoch %d: train %.4f dev %.4f metric %.4f", phase, epoch,
                 records[-1].train_loss, dev_loss, dev_metric)
        if not dev:
            continue
        if dev_metric > best_metric:
            best, best_metric, bad = store.snapshot(), dev_metric, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if best is not None:
        store.load(best)
    return records


def pretrain_source(model: TransferModel, train: Sequence[Example], dev: Sequence[Example],
                    cfg: TrainingConfig | None = None) -> list[EpochRecord]:
    """Train embeddings, source LSTMs and the source head on source data."""
    cfg = cfg or model.cfg
    if not train:
        raise DataError("source corpus is empty")
    return _fit(model, train, dev, "source", lambda b: model.source_loss(b, training=True),
                cfg.pretrain_epochs, "pretrain", 101)


def finetune_target(model: TransferModel, train: Sequence[Example], dev: Sequence[Example],
                    cfg: TrainingConfig | None = None) -> list[EpochRecord]:
    """Jointly train every parameter on target data with the configured mode."""
    cfg = cfg or model.cfg
    if cfg.mode == "lwt" and cfg.task == "tagging":
        raise ConfigError("mode: lwt only supports sentence classification")
    if cfg.mode == "lstm_source_only":
        return []
    if not train:
        raise DataError("target corpus is empty")
    names_for_epoch = None
    if cfg.freeze_source_epochs:
        trainable = [n for n in model.store.names() if not n.startswith("source.")]
        everything = model.store.names()
        names_for_epoch = (lambda e: trainable if e <= cfg.freeze_source_epochs
                           else everything)
    return _fit(model, train, dev, "target",
                lambda b: model.target_loss(b, training=True, mode=cfg.mode),
                cfg.finetune_epochs, "finetune", 202, names_for_epoch)


def _train_plain(model: TransferModel, train, dev, cfg, phase: str) -> list[EpochRecord]:
    return _fit(model, train, dev, "target",
                lambda b: model.target_loss(b, training=True, mode="lstm_only"),
                cfg.finetune_epochs, phase, 202)


def _pretrain_key(cfg: TrainingConfig) -> tuple:
    skip = {"mode", "finetune_epochs", "freeze_source_epochs", "target_test", "max_export_len"}
    return tuple((k, v) for k, v in cfg.to_dict().items() if k not in skip)


def run_experiment(cfg: TrainingConfig, corpora: Corpora, pretrained_embeddings=None,
                   cache: dict | None = None) -> tuple[ExperimentReport, TransferModel]:
    """Train one configuration end to end and score it on the target test set.

    ``cache`` (shared across calls) reuses source pre-training between runs
    whose configurations differ only in fine-tuning settings.
    """
    t0 = time.perf_counter()
    extra = pretrained_embeddings[0] if pretrained_embeddings is not None else ()
    vocabs = build_vocabs(cfg, corpora, extra)
    model = TransferModel(cfg, vocabs, pretrained_embeddings)
    report = ExperimentReport(cfg.mode, cfg.seed, cfg.task)
    if cfg.mode in TRANSFER_MODES:
        key = _pretrain_key(cfg)
        if cache is not None and key in cache:
            snapshot, records = cache[key]
            model.store.load(snapshot)
        else:
            records = pretrain_source(model, corpora.source_train, corpora.source_dev, cfg)
            if cache is not None:
                cache[key] = (model.store.snapshot(), records)
        report.history.extend(records)
        report.history.extend(finetune_target(model, corpora.target_train,
                                              corpora.target_dev, cfg))
    elif cfg.mode == "lstm_only":
        report.history.extend(_train_plain(model, corpora.target_train, corpora.target_dev,
                                           cfg, "finetune"))
    elif cfg.mode == "lstm_union":
        union = list(corpora.source_train) + list(corpora.target_train)
        report.history.extend(_train_plain(model, union, corpora.target_dev, cfg, "union"))
    else:
        report.history.extend(_train_plain(model, corpora.source_train, corpora.source_dev,
                                           cfg, "source_only"))
    if corpora.target_test:
        _, report.test_metric = evaluate(model, corpora.target_test, "target", cfg.mode)
    report.wall_clock = time.perf_counter() - t0
    return report, model


def run_experiment_grid(cfgs: Sequence[TrainingConfig], corpora: Corpora,
                        pretrained_embeddings=None) -> list[ExperimentReport]:
    for cfg in cfgs:
        cfg.validate()
    cache: dict = {}
    return [run_experiment(cfg, corpora, pretrained_embeddings, cache)[0] for cfg in cfgs]


def summary_table(reports: Sequence[ExperimentReport]) -> str:
    """Median test metric per mode, one row per mode, tab separated."""
    by_mode: dict[str, list[float]] = {}
    for r in reports:
        by_mode.setdefault(r.mode, []).append(r.test_metric)
    lines = ["mode\truns\tmedian_test_metric"]
    for mode in ALL_MODES:
        if mode in by_mode:
            vals = by_mode[mode]
            lines.append(f"{mode}\t{len(vals)}\t{float(np.median(vals)):.4f}")
    return "\n".join(lines)
