"""Command-line entry point: ``art-transfer <command> [options]``.

Commands: ``train``, ``eval``, ``gradcheck``, ``export-attention`` and
``gen-synthetic``. Exit codes: 0 ok, 1 runtime failure, 2 config error,
3 data error. Every command writes ``manifest.json`` into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, art, checkpoint, gradcheck
from .benchmark import (BENCHMARK_CONFIG, N_SOURCE, N_SOURCE_DEV, N_TARGET_DEV, N_TARGET_TEST,
                        N_TARGET_TRAIN)
from .data import (Example, SyntheticTaskSpec, generate_synthetic_transfer,
                   load_classification_tsv, load_conll, load_embeddings_text,
                   write_classification_tsv)
from .errors import ConfigError, DataError
from .train import (ALL_MODES, DATA_KEYS, TrainingConfig, evaluate, load_config, load_corpora,
                    run_experiment)

log = logging.getLogger("art_transfer")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
STREAM_FILES = (("h", "forward", "h_fwd"), ("c", "forward", "c_fwd"),
                ("h", "backward", "h_bwd"), ("c", "backward", "c_bwd"))


@dataclass
class RunManifest:
    command: list
    config: dict | None = None
    seed: int | None = None
    build: str = ""
    started: str = ""
    finished: str = ""
    exit_code: int | None = None
    metrics: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint.atomic_write_text(out_dir / "manifest.json",
                                     json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    """``git describe``-style identifier, or the package version outside a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ------------------------------------------------------------------ commands

def _overrides(args) -> dict:
    return {"seed": args.seed, "mode": args.mode}


def _resolve_config(args) -> tuple[TrainingConfig, Path]:
    """Load the config with flag overrides; data paths become absolute."""
    overrides = {k: str(v) for k, v in _overrides(args).items() if v is not None}
    if args.config:
        cfg, base = load_config(args.config, overrides), Path(args.config).resolve().parent
    else:
        cfg, base = TrainingConfig.from_dict(overrides), Path.cwd()
    paths = {k: str(base / getattr(cfg, k)) for k in DATA_KEYS + ("embeddings",)
             if getattr(cfg, k)}
    return cfg.replace(**paths), base


def cmd_train(args, manifest: RunManifest) -> int:
    cfg, base = _resolve_config(args)
    manifest.config, manifest.seed = cfg.to_dict(), cfg.seed
    corpora = load_corpora(cfg, base)
    if not corpora.target_train and cfg.mode != "lstm_source_only":
        raise DataError("target_train: no target training corpus configured")
    if cfg.mode != "lstm_only" and not corpora.source_train:
        raise DataError("source_train: no source corpus configured")
    pretrained = None
    if cfg.embeddings:
        path = base / cfg.embeddings
        if not path.is_file():
            raise DataError(f"embeddings file not found: {path}")
        pretrained = load_embeddings_text(path, cfg.word_dim)
    report, model = run_experiment(cfg, corpora, pretrained)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, out / "model.ckpt")
    checkpoint.atomic_write_text(out / "report.tsv",
                                 "\n".join([report.HEADER] + report.rows()) + "\n")
    dev = [r.dev_metric for r in report.history if r.phase != "pretrain"]
    manifest.metrics = {"test_metric": report.test_metric,
                        "dev_metric": evaluate(model, corpora.target_dev)[1]
                        if corpora.target_dev else None,
                        "best_dev_metric": max(dev) if dev else None,
                        "epochs": len(report.history)}
    print(f"{cfg.mode}\tseed={cfg.seed}\ttest_metric={report.test_metric:.6f}")
    return EXIT_OK


def _read_examples(path: Path, cfg: TrainingConfig):
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    if cfg.task == "tagging":
        return load_conll(path)
    return load_classification_tsv(path, cfg.lowercase)


def cmd_eval(args, manifest: RunManifest) -> int:
    model = checkpoint.load(args.checkpoint)
    cfg = model.cfg
    manifest.config, manifest.seed = cfg.to_dict(), cfg.seed
    data = args.data or cfg.target_test
    if not data:
        raise ConfigError("data: no evaluation file given and none in the checkpoint config")
    examples = _read_examples(Path(data), cfg)
    loss, metric = evaluate(model, examples, args.side, args.mode)
    manifest.metrics = {"loss": loss, "metric": metric, "examples": len(examples)}
    print(f"loss={loss:.6f}\tmetric={metric:.6f}\texamples={len(examples)}")
    return EXIT_OK


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    for fault in args.inject_fault or []:
        art.FAULTS.add(fault)
    try:
        results = gradcheck.run_suite(args.component, seeds=args.seeds)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    finally:
        art.FAULTS.difference_update(args.inject_fault or [])
    failed = [r.name for r in results if not r.ok]
    for r in results:
        print(f"{r.name:<12} worst_rel_err={r.worst:.3e} seeds={r.seeds} "
              f"{'PASS' if r.ok else 'FAIL'} ({r.seconds:.2f}s)")
    manifest.metrics = {r.name: r.worst for r in results}
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def attention_csv(alpha, tokens) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + list(tokens))
    for tok, row in zip(tokens, alpha):
        writer.writerow([tok] + [f"{float(a):.6f}" for a in row])
    return buf.getvalue()


def cmd_export_attention(args, manifest: RunManifest) -> int:
    model = checkpoint.load(args.checkpoint)
    cfg = model.cfg
    manifest.config, manifest.seed = cfg.to_dict(), cfg.seed
    if cfg.mode != "full_art":
        raise ConfigError(f"mode: attention is only recorded in full_art, checkpoint has "
                          f"{cfg.mode!r}")
    path = Path(args.input)
    if not path.is_file():
        raise DataError(f"sentence file not found: {path}")
    sentences = [line.split() for line in path.read_text(encoding="utf-8").splitlines()]
    sentences = [[t.lower() for t in s] if cfg.lowercase else s for s in sentences if s]
    for k, toks in enumerate(sentences, 1):
        if len(toks) > cfg.max_export_len:
            raise DataError(f"{path}: sentence {k} has {len(toks)} tokens, more than "
                            f"max_export_len = {cfg.max_export_len}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for k, toks in enumerate(sentences, 1):
        # labels are never read here; any valid tag will do
        label = [model.vocabs.target_tags.itos[0]] * len(toks) if model.tagging else 0
        model.target_states(model.batch([Example(toks, label)]), "full_art")
        traces = {t.direction: t for t in model.last_traces[0]}
        for stream, direction, suffix in STREAM_FILES:
            alpha = getattr(traces[direction], f"alpha_{stream}")
            checkpoint.atomic_write_text(out / f"sentence{k:04d}_{suffix}.csv",
                                         attention_csv(alpha, toks))
            written += 1
    manifest.metrics = {"sentences": len(sentences), "files": written}
    print(f"wrote {written} attention matrices for {len(sentences)} sentence(s) to {out}")
    return EXIT_OK


def cmd_gen_synthetic(args, manifest: RunManifest) -> int:
    seed = 0 if args.seed is None else args.seed
    spec = SyntheticTaskSpec(seed=seed)
    parts = generate_synthetic_transfer(spec, args.n_source, args.n_target_train,
                                        args.n_target_test, args.n_source_dev,
                                        args.n_target_dev)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, examples in parts.items():
        write_classification_tsv(out / f"{name}.tsv", examples)
    cfg = TrainingConfig(**BENCHMARK_CONFIG, mode=args.mode or "full_art", seed=seed,
                         **{name: f"{name}.tsv" for name in parts})
    lines = ["# synthetic transfer task; data paths are relative to this file"] + cfg.to_lines()
    checkpoint.atomic_write_text(out / "synthetic.cfg", "\n".join(lines) + "\n")
    manifest.config, manifest.seed = cfg.to_dict(), seed
    manifest.metrics = {name: len(ex) for name, ex in parts.items()}
    print(f"wrote synthetic corpora and synthetic.cfg to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-attention": cmd_export_attention,
    "gen-synthetic": cmd_gen_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--mode", choices=ALL_MODES, help="overrides the config mode")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = argparse.ArgumentParser(prog="art-transfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="pre-train and fine-tune one configuration")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a corpus file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="corpus file (default: the checkpoint's target_test)")
    p.add_argument("--side", choices=("source", "target"), default="target")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--component", action="append", choices=sorted(gradcheck.COMPONENTS),
                   help="restrict to a component (repeatable)")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--inject-fault", action="append", metavar="NAME",
                   help="test hook: corrupt a gradient on purpose (e.g. fuse.C_z)")

    p = sub.add_parser("export-attention", parents=[common],
                       help="write attention matrices of each sentence as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="one whitespace-tokenized sentence per line")

    p = sub.add_parser("gen-synthetic", parents=[common],
                       help="write the synthetic transfer corpora and a matching config")
    p.add_argument("--n-source", type=int, default=N_SOURCE)
    p.add_argument("--n-source-dev", type=int, default=N_SOURCE_DEV)
    p.add_argument("--n-target-train", type=int, default=N_TARGET_TRAIN)
    p.add_argument("--n-target-dev", type=int, default=N_TARGET_DEV)
    p.add_argument("--n-target-test", type=int, default=N_TARGET_TEST)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    manifest = RunManifest(command=["art-transfer"] + argv, build=build_id(), started=_now())
    try:
        code = COMMANDS[args.command](args, manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    manifest.finished, manifest.exit_code = _now(), code
    try:
        manifest.write(Path(args.out))
    except OSError as exc:
        print(f"could not write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
