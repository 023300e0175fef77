"""Versioned, line-oriented text checkpoints.

Layout::

    art-transfer-checkpoint 1
    [config]
    key = value
    [vocab words]
    "token"            (one JSON string per line)
    [param embed.words]
    shape 12 16
    v v v ...          (one line per leading index, 17 significant digits)
    [end]

Every float is written with ``%.17g`` so a reload restores it exactly.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .data import FLOAT_FORMAT, Vocabulary
from .errors import DataError
from .model import TransferModel, Vocabs
from .train import TrainingConfig, parse_config_text

MAGIC = "art-transfer-checkpoint"
VERSION = 1
VOCAB_FIELDS = ("words", "chars", "source_tags", "target_tags")


def atomic_write_text(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(model: TransferModel) -> str:
    lines = [f"{MAGIC} {VERSION}", "[config]"]
    lines += model.cfg.to_lines()
    for name in VOCAB_FIELDS:
        vocab = getattr(model.vocabs, name)
        if vocab is None:
            continue
        lines.append(f"[vocab {name}{'' if vocab.reserved else ' plain'}]")
        start = 2 if vocab.reserved else 0
        lines += [json.dumps(t, ensure_ascii=False) for t in vocab.itos[start:]]
    for name, p in model.store.items():
        v = p.value
        lines.append(f"[param {name}]")
        lines.append("shape " + " ".join(str(s) for s in v.shape))
        rows = v.reshape(v.shape[0], -1) if v.ndim > 1 else v.reshape(1, -1)
        lines += [" ".join(FLOAT_FORMAT % x for x in row) for row in rows]
    lines.append("[end]")
    return "\n".join(lines) + "\n"


def save(model: TransferModel, path) -> None:
    atomic_write_text(path, dumps(model))


def _sections(text: str, source: str):
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MAGIC + " "):
        raise DataError(f"{source}: not a checkpoint file")
    version = lines[0][len(MAGIC) + 1:].strip()
    if version != str(VERSION):
        raise DataError(f"{source}: unsupported checkpoint version {version!r}")
    if lines[-1] != "[end]":
        raise DataError(f"{source}: truncated checkpoint (missing [end])")
    sections, header, body = [], None, []
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            if header is not None:
                sections.append((header, body))
            header, body = line[1:-1], []
        else:
            body.append(line)
    return sections


def loads(text: str, source: str = "<checkpoint>") -> TransferModel:
    sections = _sections(text, source)
    if not sections or sections[0][0] != "config":
        raise DataError(f"{source}: config section must come first")
    cfg = TrainingConfig.from_dict(parse_config_text("\n".join(sections[0][1])))
    vocabs: dict[str, Vocabulary] = {}
    params: dict[str, np.ndarray] = {}
    for header, body in sections[1:]:
        kind, _, rest = header.partition(" ")
        if kind == "vocab":
            name, _, flag = rest.partition(" ")
            vocabs[name] = Vocabulary([json.loads(t) for t in body], reserved=flag != "plain")
        elif kind == "param":
            if not body or not body[0].startswith("shape"):
                raise DataError(f"{source}: parameter {rest} has no shape line")
            shape = tuple(int(s) for s in body[0].split()[1:])
            try:
                values = np.array([float(x) for row in body[1:] for x in row.split()])
            except ValueError:
                raise DataError(f"{source}: malformed number in parameter {rest}") from None
            if values.size != int(np.prod(shape)):
                raise DataError(f"{source}: parameter {rest} has {values.size} values for "
                                f"shape {shape}")
            params[rest] = values.reshape(shape)
        else:
            raise DataError(f"{source}: unknown section [{header}]")
    if "words" not in vocabs:
        raise DataError(f"{source}: missing word vocabulary")
    model = TransferModel(cfg, Vocabs(**{k: vocabs.get(k) for k in VOCAB_FIELDS}))
    expected = set(model.store.names())
    if set(params) != expected:
        missing, extra = sorted(expected - set(params)), sorted(set(params) - expected)
        raise DataError(f"{source}: parameter mismatch (missing {missing}, unexpected {extra})")
    for name, value in params.items():
        p = model.store[name]
        if p.value.shape != value.shape:
            raise DataError(f"{source}: parameter {name} has shape {value.shape}, "
                            f"model expects {p.value.shape}")
        p.value[...] = value
    return model


def load(path) -> TransferModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(text, str(path))
