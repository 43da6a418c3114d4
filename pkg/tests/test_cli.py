import csv
import json

import numpy as np
import pytest

from r2a import cli, corpus
from r2a.config import ConfigError, RunConfig

TINY = """
model.embedding_dim = 12
model.hidden = 6
model.r2a_hidden = 4
model.attention = 4
model.predictor_hidden = 6
model.critic_hidden = 8
model.bins = 10
r2a.epochs = 1
r2a.batch_size = 16
rationalizer.hidden = 6
rationalizer.epochs = 1
schedule.max_epochs = 2
target.lambda_grid = 1,0.1
data.target_train_size = 20
curve.sizes = 10,20
curve.modes = none,generated
synthetic.source_train = 40
synthetic.source_dev = 10
synthetic.source_test = 10
synthetic.target_train = 30
synthetic.target_dev = 10
synthetic.target_test = 20
synthetic.target_unlabeled = 40
synthetic.target_large = 40
"""


# -- config -------------------------------------------------------------------------


def test_defaults_carry_the_published_settings():
    cfg = RunConfig()
    assert (cfg.loss.att, cfg.loss.lm, cfg.loss.wd) == (0.01, 0.1, 0.01)
    assert (cfg.model.hidden, cfg.model.r2a_hidden, cfg.model.attention) == (200, 50, 50)
    assert (cfg.model.critic_hidden, cfg.r2a.penalty, cfg.r2a.critic_iters) == (100, 10.0, 5)
    assert cfg.schedule.lr == 1e-3 and cfg.schedule.divisor == 10
    assert cfg.target.lambda_grid == (100.0, 10.0, 1.0, 0.1, 0.01)


def test_text_round_trip():
    cfg = RunConfig.from_text(TINY, ["seed=7", "target.tune=false"])
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.seed == 7 and back.target.tune is False
    assert back.curve.sizes == (10, 20) and back.target.lambda_grid == (1.0, 0.1)


@pytest.mark.parametrize("text", [
    "mode = aspect-transfer",
    "nope.key = 1",
    "model.hidden = many",
    "loss.att = -1",
    "schedule.divisor = 1",
    "target.supervision = magic",
    "just words",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_aspect_transfer_with_zero_wd_is_valid():
    cfg = RunConfig.from_text("mode = aspect-transfer\nloss.wd = 0")
    assert cfg.r2a_config().mode == "aspect-transfer"


# -- command line ---------------------------------------------------------------


def run(tmp, *argv):
    return cli.main([argv[0], "--config", str(tmp / "tiny.cfg"), "--data", str(tmp / "data"),
                     "--set", f"paths.output_dir={tmp / 'runs'}", *argv[1:]])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    (tmp / "tiny.cfg").write_text(TINY)
    for argv in (["synth", "--out", str(tmp / "data")], ["rationalize"], ["train-r2a"],
                 ["gen-attention"], ["train-oracle"], ["train-target", "--mode", "none"],
                 ["train-target", "--mode", "rationale"],
                 ["train-target", "--mode", "generated"]):
        assert run(tmp, *argv) == 0, argv
    return tmp


def test_pipeline_outputs_exist(workspace):
    runs = workspace / "runs"
    for name in ("rationales/aspect0.train.jsonl", "rationales/rationalize.json", "r2a.ckpt",
                 "r2a.trace.json", "generated.jsonl", "oracle.jsonl", "target-none.ckpt",
                 "target-generated.json"):
        assert (runs / name).exists(), name
    assert not list(workspace.rglob("*.partial"))


def test_generated_attention_aligns_with_target_train(workspace):
    rows = corpus.read_attention(workspace / "runs" / "generated.jsonl")
    vocab = corpus.Vocab.load(workspace / "data" / "vocab.txt")
    train = corpus.load_examples(workspace / "data" / "aspect2.train.jsonl", vocab)[:20]
    assert len(rows) == 20
    for row, ex in zip(rows, train):
        assert len(row) == len(ex) and abs(row.sum() - 1) < 1e-6 and (row >= 0).all()


def test_eval_writes_report(workspace):
    runs = workspace / "runs"
    assert run(workspace, "eval", "--classifier", str(runs / "target-none.ckpt"),
               "--classifier", str(runs / "target-generated.ckpt"),
               "--attention", f"generated={runs / 'generated.jsonl'}",
               "--attention-of-classifiers") == 0
    with open(runs / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    metrics = {r["metric"] for r in rows}
    assert {"accuracy:none", "accuracy:generated", "distance:rationale",
            "distance:generated"} <= metrics
    for r in rows:
        value = float(r["value"])
        assert 0 <= value <= (1 if r["metric"].startswith("accuracy") else 1.9)
    assert "summary" in json.loads((runs / "report.json").read_text())


def test_export_and_learning_curve(workspace):
    assert run(workspace, "export-reprs", "--task", "aspect0") == 0
    with open(workspace / "runs" / "reprs-aspect0-train.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["index", "task", "label"] and len(rows[0]) == 3 + 4 * 6
    assert len(rows) == 41
    assert run(workspace, "learning-curve") == 0
    with open(workspace / "runs" / "curve.csv") as fh:
        curve = list(csv.DictReader(fh))
    assert [(r["mode"], r["n"]) for r in curve] == [("none", "10"), ("generated", "10"),
                                                   ("none", "20"), ("generated", "20")]


def test_synth_is_byte_identical(workspace, tmp_path):
    (tmp_path / "tiny.cfg").write_text(TINY)
    assert run(tmp_path, "synth", "--out", str(tmp_path / "a")) == 0
    for p in sorted((workspace / "data").iterdir()):
        assert (tmp_path / "a" / p.name).read_bytes() == p.read_bytes(), p.name


def test_stage_reruns_are_byte_identical(workspace):
    runs = workspace / "runs"
    before = {p: p.read_bytes() for p in [runs / "r2a.ckpt", runs / "generated.jsonl",
                                          runs / "target-generated.ckpt"]}
    for argv in (["train-r2a"], ["gen-attention"], ["train-target", "--mode", "generated"]):
        assert run(workspace, *argv) == 0
    for p, blob in before.items():
        assert p.read_bytes() == blob, p.name


def test_unknown_command_is_a_validation_error(capsys):
    assert cli.main(["fly"]) == 1
    assert "error" in capsys.readouterr().err


def test_aspect_transfer_with_wd_fails_validation(workspace):
    assert run(workspace, "train-target", "--set", "mode=aspect-transfer") == 1


def test_missing_checkpoint_is_a_validation_error(workspace):
    assert run(workspace, "gen-attention", "--checkpoint", str(workspace / "nope.ckpt"),
               "--out", str(workspace / "runs" / "never.jsonl")) == 1
    assert not (workspace / "runs" / "never.jsonl").exists()


def test_runtime_failure_removes_partial_outputs(workspace, monkeypatch):
    out = workspace / "failed"

    def boom(*a, **k):
        raise RuntimeError("disk full")

    # the checkpoint is written first, then the trace write fails
    monkeypatch.setattr(cli, "_write_json", boom)
    assert run(workspace, "train-r2a", "--out", str(out / "r2a.ckpt")) == 2
    assert not out.exists() or not any(out.iterdir())


def test_target_train_size_larger_than_split(workspace):
    assert run(workspace, "gen-attention", "--set", "data.target_train_size=999") == 1


def test_embeddings_written_by_synth_are_loaded(workspace):
    vocab = corpus.Vocab.load(workspace / "data" / "vocab.txt")
    emb = corpus.load_embeddings(workspace / "data" / "embeddings.txt", vocab, 0)
    spec = RunConfig.from_text(TINY).synthetic
    assert np.array_equal(emb, corpus.synthetic_embeddings(vocab, 12, spec.seed, spec))
