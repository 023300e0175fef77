"""Desk-scale synthetic transfer benchmark with pinned settings."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import SyntheticTaskSpec, generate_synthetic_transfer
from .train import Corpora, ExperimentReport, TrainingConfig, run_experiment_grid

N_SOURCE = 2000
N_SOURCE_DEV = 200
N_TARGET_TRAIN = 50
N_TARGET_DEV = 50
N_TARGET_TEST = 500
SEEDS = (0, 1, 2, 3, 4)

BENCHMARK_CONFIG = dict(
    task="classification",
    hidden=16,
    word_dim=16,
    attention_dim=16,
    optimizer="adam",
    lr=1e-2,
    dropout=0.2,
    batch_size=16,
    pretrain_epochs=10,
    finetune_epochs=50,
    patience=10,
)


def benchmark_corpora(seed: int, spec: SyntheticTaskSpec | None = None) -> Corpora:
    spec = spec or SyntheticTaskSpec(seed=seed)
    parts = generate_synthetic_transfer(spec, N_SOURCE, N_TARGET_TRAIN, N_TARGET_TEST,
                                        n_source_dev=N_SOURCE_DEV, n_target_dev=N_TARGET_DEV)
    return Corpora(**parts)


def benchmark_config(mode: str, seed: int, **overrides) -> TrainingConfig:
    return TrainingConfig(mode=mode, seed=seed, **{**BENCHMARK_CONFIG, **overrides})


def _run_seed(args) -> list[ExperimentReport]:
    seed, modes = args
    corpora = benchmark_corpora(seed)
    return run_experiment_grid([benchmark_config(m, seed) for m in modes], corpora)


@dataclass
class BenchmarkResult:
    reports: list

    def scores(self, mode: str) -> list[float]:
        return [r.test_metric for r in self.reports if r.mode == mode]

    def median(self, mode: str) -> float:
        return float(np.median(self.scores(mode)))


def run_synthetic_benchmark(modes=("full_art", "cct", "lstm_only"), seeds=SEEDS,
                            workers: int = 1) -> BenchmarkResult:
    """Train every mode on every seed's corpora; pre-training is shared per seed."""
    jobs = [(s, tuple(modes)) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_seed = list(pool.map(_run_seed, jobs))
    else:
        per_seed = [_run_seed(j) for j in jobs]
    return BenchmarkResult([r for rs in per_seed for r in rs])
