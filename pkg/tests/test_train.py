import numpy as np
import pytest

from art_transfer import checkpoint
from art_transfer import numcore as nc
from art_transfer.data import Example, SyntheticTaskSpec, generate_synthetic_transfer
from art_transfer.errors import ConfigError, DataError
from art_transfer.model import TransferModel
from art_transfer.train import (Corpora, TrainingConfig, build_vocabs, evaluate, finetune_target,
                                load_config, load_corpora, merge_sources, parse_config_text,
                                pretrain_source, run_experiment, run_experiment_grid,
                                summary_table)

SMALL = dict(hidden=4, word_dim=4, attention_dim=3, optimizer="adam", lr=1e-2, dropout=0.2,
             batch_size=8, pretrain_epochs=2, finetune_epochs=2, patience=5)


@pytest.fixture(scope="module")
def corpora():
    parts = generate_synthetic_transfer(SyntheticTaskSpec(seed=1), 48, 16, 24, 16, 16)
    return Corpora(**parts)


def _model(corpora, **kw):
    cfg = TrainingConfig(**{**SMALL, **kw})
    return TransferModel(cfg, build_vocabs(cfg, corpora)), cfg


def _tagging_corpora():
    rng = np.random.default_rng(0)
    words = {"Paris": "B-LOC", "Bob": "B-PER", "Smith": "I-PER", "the": "O", "in": "O",
             "went": "O", "to": "O"}
    def sent():
        toks = [str(t) for t in rng.choice(list(words), size=int(rng.integers(2, 6)))]
        return Example(toks, [words[t] for t in toks])
    return Corpora([sent() for _ in range(12)], [sent() for _ in range(4)],
                   [sent() for _ in range(6)], [sent() for _ in range(4)], [sent() for _ in range(4)])


# -------------------------------------------------------------------- config

def test_task_defaults():
    c = TrainingConfig()
    assert (c.hidden, c.word_dim, c.optimizer, c.lr, c.dropout) == (100, 100, "adam", 1e-3, 0.5)
    assert c.attention_dim == 100 and c.lowercase is True and c.patience == 5
    t = TrainingConfig(task="tagging")
    assert (t.hidden, t.word_dim, t.optimizer, t.lr) == (300, 50, "adagrad", 0.1)
    assert t.char_filters == 50 and t.char_width == 3 and t.lowercase is False


@pytest.mark.parametrize("kw,key", [
    (dict(hidden=0), "hidden"), (dict(mode="nope"), "mode"), (dict(lr=0.0), "lr"),
    (dict(task="tagging", mode="lwt"), "lwt"), (dict(dropout=1.0), "dropout"),
    (dict(optimizer="rmsprop"), "optimizer"), (dict(tag_loss="hinge"), "tag_loss"),
])
def test_invalid_config_names_key(kw, key):
    with pytest.raises(ConfigError, match=key):
        TrainingConfig(**kw)


def test_config_file_parsing_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\ntask = classification\nhidden = 7  # inline\nlr = 0.25\n"
                 "clip_norm = none\nlowercase = false\n")
    cfg = load_config(p, {"seed": "9", "mode": None})
    assert (cfg.hidden, cfg.lr, cfg.seed, cfg.clip_norm, cfg.lowercase) == (7, 0.25, 9, None, False)
    again = TrainingConfig.from_dict(parse_config_text("\n".join(cfg.to_lines())))
    assert again == cfg
    p.write_text("hidden = seven\n")
    with pytest.raises(ConfigError, match="hidden"):
        load_config(p)
    p.write_text("colour = blue\n")
    with pytest.raises(ConfigError, match="colour"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_missing_corpus_names_path(tmp_path):
    cfg = TrainingConfig(**SMALL, target_train="nowhere.tsv")
    with pytest.raises(DataError, match="nowhere.tsv"):
        load_corpora(cfg, tmp_path)


def test_merge_sources_concatenates():
    a, b = [Example(["x"], 1)], [Example(["y"], 0), Example(["z"], 1)]
    assert merge_sources(a, b) == a + b


# ------------------------------------------------------------------ training

def test_zero_epochs_leave_parameters_unchanged(corpora):
    model, cfg = _model(corpora, pretrain_epochs=0, finetune_epochs=0)
    before = model.store.snapshot()
    assert pretrain_source(model, corpora.source_train, corpora.source_dev) == []
    assert finetune_target(model, corpora.target_train, corpora.target_dev) == []
    for name, p in model.store.items():
        assert p.value.tobytes() == before[name].tobytes()


def test_zero_learning_rate_changes_nothing(corpora):
    model, cfg = _model(corpora)
    before = model.store.snapshot()
    nc.backward(model.target_loss(model.batch(corpora.target_train[:8])))
    with pytest.raises(ConfigError, match="learning rate"):
        nc.optimizer_step(model.store, "adam", 0.0)
    with pytest.raises(ConfigError, match="lr"):
        cfg.replace(lr=0.0)
    for name, p in model.store.items():
        assert p.value.tobytes() == before[name].tobytes()


def test_empty_corpora_rejected(corpora):
    model, _ = _model(corpora)
    with pytest.raises(DataError):
        pretrain_source(model, [], corpora.source_dev)
    with pytest.raises(DataError):
        finetune_target(model, [], corpora.target_dev)


def test_source_pretraining_learns_synthetic_task():
    parts = generate_synthetic_transfer(SyntheticTaskSpec(seed=0), 1000, 0, 0, n_source_dev=200)
    c = Corpora(**parts)
    cfg = TrainingConfig(hidden=16, word_dim=16, attention_dim=16, optimizer="adam", lr=1e-2,
                         dropout=0.2, batch_size=16, pretrain_epochs=20, patience=20)
    model = TransferModel(cfg, build_vocabs(cfg, c))
    records = pretrain_source(model, c.source_train, c.source_dev)
    assert len(records) == 20
    assert records[4].train_loss < records[0].train_loss
    assert max(r.dev_metric for r in records) > 0.95
    # the best checkpoint is restored at the end
    assert evaluate(model, c.source_dev, "source")[1] == max(r.dev_metric for r in records)


def test_first_target_batch_reaches_every_parameter_group(corpora):
    model, _ = _model(corpora, dropout=0.0)
    model.store.zero_grad()
    nc.backward(model.target_loss(model.batch(corpora.target_train[:8]), mode="full_art"))
    for name, p in model.store.items():
        if name.startswith("source.head"):
            assert not np.any(p.grad), name
        else:
            assert np.max(np.abs(p.grad)) > 0, name


def test_freeze_knob_holds_source_parameters(corpora):
    model, cfg = _model(corpora, freeze_source_epochs=1, finetune_epochs=1)
    before = model.store.snapshot()
    finetune_target(model, corpora.target_train, corpora.target_dev)
    changed = {n for n, p in model.store.items() if p.value.tobytes() != before[n].tobytes()}
    assert not any(n.startswith("source.") for n in changed)
    assert any(n.startswith("target.fwd.fuse_h") for n in changed)


def test_lstm_source_only_skips_target_training(corpora):
    cfg = TrainingConfig(**SMALL, mode="lstm_source_only")
    model = TransferModel(cfg, build_vocabs(cfg, corpora))
    assert finetune_target(model, corpora.target_train, corpora.target_dev) == []
    report, _ = run_experiment(cfg, corpora)
    assert {r.phase for r in report.history} == {"source_only"}
    assert 0.0 <= report.test_metric <= 1.0


def test_plain_modes_skip_pretraining(corpora):
    for mode, phase in (("lstm_only", "finetune"), ("lstm_union", "union")):
        report, _ = run_experiment(TrainingConfig(**SMALL, mode=mode), corpora)
        assert {r.phase for r in report.history} == {phase}


def test_lwt_tagging_rejected_at_finetune():
    c = _tagging_corpora()
    cfg = TrainingConfig(**{**SMALL, "optimizer": "adagrad", "lr": 0.1}, task="tagging",
                         char_dim=3, char_filters=4)
    model = TransferModel(cfg, build_vocabs(cfg, c))
    with pytest.raises(ConfigError, match="lwt"):
        finetune_target(model, c.target_train, c.target_dev, _lwt_tagging())


def _lwt_tagging():
    # bypasses validation to reach the trainer's own guard
    bad = TrainingConfig(**SMALL)
    bad.task, bad.mode = "tagging", "lwt"
    return bad


@pytest.mark.parametrize("tag_loss,metric", [("crf", "f1"), ("softmax", "accuracy")])
def test_tagging_pipeline_runs(tag_loss, metric):
    c = _tagging_corpora()
    cfg = TrainingConfig(task="tagging", hidden=4, word_dim=4, attention_dim=3, char_dim=3,
                         char_filters=4, dropout=0.1, batch_size=4, pretrain_epochs=2,
                         finetune_epochs=2, tag_loss=tag_loss, tag_metric=metric)
    report, model = run_experiment(cfg, c)
    assert len(report.history) == 4
    assert 0.0 <= report.test_metric <= 1.0
    assert all(np.isfinite(r.train_loss) for r in report.history)
    assert "embed.chars.filters" in model.store.names()


# -------------------------------------------------------- determinism & I/O

def test_runs_are_deterministic(corpora):
    cfg = TrainingConfig(**SMALL, seed=3)
    (r1, m1), (r2, m2) = run_experiment(cfg, corpora), run_experiment(cfg, corpora)
    assert r1.trajectory() == r2.trajectory()
    assert checkpoint.dumps(m1) == checkpoint.dumps(m2)


def test_grid_of_one_and_repeated_modes(corpora):
    cfg = TrainingConfig(**SMALL, mode="lstm_only")
    single, _ = run_experiment(cfg, corpora)
    grid = run_experiment_grid([cfg, cfg], corpora)
    assert [g.trajectory() for g in grid] == [single.trajectory()] * 2
    table = summary_table(grid)
    assert table.splitlines()[0].split("\t")[0] == "mode" and "lstm_only\t2" in table


def test_shared_pretraining_matches_separate_runs(corpora):
    cfgs = [TrainingConfig(**SMALL, mode=m) for m in ("full_art", "cct")]
    grid = run_experiment_grid(cfgs, corpora)
    alone = run_experiment(cfgs[1], corpora)[0]
    assert grid[1].trajectory() == alone.trajectory()


def test_checkpoint_restore_reproduces_dev_metric(corpora, tmp_path):
    cfg = TrainingConfig(**SMALL, mode="full_art")
    _, model = run_experiment(cfg, corpora)
    checkpoint.save(model, tmp_path / "a.ckpt")
    loaded = checkpoint.load(tmp_path / "a.ckpt")
    assert evaluate(loaded, corpora.target_dev) == evaluate(model, corpora.target_dev)
    checkpoint.save(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for name, p in model.store.items():
        assert loaded.store[name].value.tobytes() == p.value.tobytes()


def test_tagging_checkpoint_round_trip(tmp_path):
    c = _tagging_corpora()
    cfg = TrainingConfig(task="tagging", hidden=3, word_dim=3, attention_dim=3, char_dim=2,
                         char_filters=3, pretrain_epochs=0, finetune_epochs=0)
    model = TransferModel(cfg, build_vocabs(cfg, c))
    text = checkpoint.dumps(model)
    again = checkpoint.loads(text)
    assert checkpoint.dumps(again) == text
    assert again.vocabs.target_tags == model.vocabs.target_tags
    assert again.vocabs.target_tags.reserved is False


def test_checkpoint_rejects_bad_files(corpora, tmp_path):
    model, _ = _model(corpora)
    text = checkpoint.dumps(model)
    with pytest.raises(DataError, match="version"):
        checkpoint.loads(text.replace("checkpoint 1", "checkpoint 2", 1))
    with pytest.raises(DataError, match="truncated"):
        checkpoint.loads(text[: len(text) // 2])
    with pytest.raises(DataError):
        checkpoint.loads("hello\n")
    with pytest.raises(DataError):
        checkpoint.load(tmp_path / "missing.ckpt")
