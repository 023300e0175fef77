"""Train the transfer model on the synthetic cross-domain task and compare ablations.

One seed of the pinned benchmark takes a minute or two on a single core.
Run: python demos/03_synthetic_transfer.py
"""
from art_transfer.benchmark import benchmark_config, benchmark_corpora
from art_transfer.data import SyntheticTaskSpec
from art_transfer.train import run_experiment_grid, summary_table

spec = SyntheticTaskSpec(seed=0)
corpora = benchmark_corpora(0, spec)
print("source train:", len(corpora.source_train), " target train:", len(corpora.target_train),
      " target test:", len(corpora.target_test))
print("a target example:", " ".join(corpora.target_train[0].tokens), "->",
      corpora.target_train[0].label)

# pre-training is shared by every mode that needs it
modes = ("full_art", "cct", "lstm_only")
reports = run_experiment_grid([benchmark_config(m, seed=0) for m in modes], corpora)
print(summary_table(reports))
