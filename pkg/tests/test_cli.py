import json

import jsonschema
import pytest

from memvqa.cli import METRICS_SCHEMA, main


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


SYNTH_ARGS = ["--classes", "6", "--n-train", "24", "--n-test", "8", "--regions", "4",
              "--feature-dim", "8", "--signal", "3", "--distractors", "0", "--seed", "7"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", *SYNTH_ARGS, "--out", str(root / "d")]) == 0
    cfg = root / "c.json"
    cfg.write_text(json.dumps({"hidden_size": 8, "memory_slots": 8, "epochs": 2, "seed": 1}))
    assert main(["train", "--config", str(cfg), "--data", str(root / "d"), "--out", str(root / "run1")]) == 0
    return root


def test_gen_synth_manifest(tmp_path):
    assert main(["gen-synth", "--classes", "50", "--zipf", "1.0", "--seed", "7", "--n-train", "100",
                 "--n-test", "10", "--regions", "2", "--feature-dim", "4", "--distractors", "1",
                 "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(manifest["class_names"]) == 50 and len(manifest["class_freqs"]) == 50
    assert {"class_freqs", "rare_class_ids", "seed", "config"} <= set(manifest)


def test_gen_synth_rerun_identical(tmp_path):
    assert main(["gen-synth", *SYNTH_ARGS, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-synth", *SYNTH_ARGS, "--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_gen_synth_bad_classes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-synth", "--classes", "0", "--out", str(tmp_path / "d")])
    assert exc.value.code == 2


def test_gen_synth_refuses_non_empty(tmp_path, capsys):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "x").write_text("keep")
    assert main(["gen-synth", *SYNTH_ARGS, "--out", str(tmp_path / "d")]) == 2
    assert "not empty" in capsys.readouterr().err
    assert main(["gen-synth", *SYNTH_ARGS, "--out", str(tmp_path / "d"), "--force"]) == 0


def test_unknown_flag_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-synth", "--bogus", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_train_outputs(run):
    out = run / "run1"
    assert (out / "checkpoint" / "manifest.json").exists()
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    config = json.loads((out / "config.json").read_text())
    assert config["hidden_size"] == 8 and config["external_memory_enabled"] is True


def test_train_no_external_memory(run):
    out = run / "abl"
    assert main(["train", "--config", str(run / "c.json"), "--data", str(run / "d"), "--out", str(out),
                 "--no-external-memory"]) == 0
    assert json.loads((out / "config.json").read_text())["external_memory_enabled"] is False


def test_train_missing_data_dir(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_train_bad_config_key(run, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"learning_rate": 1}))
    assert main(["train", "--config", str(cfg), "--data", str(run / "d"), "--out", str(tmp_path / "o")]) == 2


def test_train_memory_trace(run, tmp_path):
    trace = tmp_path / "trace.jsonl"
    assert main(["train", "--config", str(run / "c.json"), "--data", str(run / "d"),
                 "--out", str(tmp_path / "o"), "--memory-trace", str(trace)]) == 0
    rows = trace.read_text().splitlines()
    assert len(rows) == 2 * 24
    assert set(json.loads(rows[0])) == {"step", "w_r", "w_w", "w_u"}


def test_eval_schema_and_predictions(run, tmp_path, capsys):
    metrics_path, preds = tmp_path / "m.json", tmp_path / "p.jsonl"
    assert main(["eval", "--checkpoint", str(run / "run1"), "--data", str(run / "d"),
                 "--out", str(metrics_path), "--predictions", str(preds)]) == 0
    metrics = json.loads(metrics_path.read_text())
    jsonschema.validate(metrics, METRICS_SCHEMA)
    assert metrics["n"] == 8 and metrics["rare_n"] >= 0
    assert len(preds.read_text().splitlines()) == 8
    mc_path = tmp_path / "mc.json"
    assert main(["eval", "--checkpoint", str(run / "run1"), "--data", str(run / "d"),
                 "--mode", "multiple-choice", "--out", str(mc_path)]) == 0
    mc = json.loads(mc_path.read_text())
    jsonschema.validate(mc, METRICS_SCHEMA)
    assert mc["mode"] == "multiple-choice"


def test_eval_multiple_choice_without_candidates(run, tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "features").symlink_to(run / "d" / "features")
    rows = [json.loads(line) for line in (run / "d" / "test.jsonl").read_text().splitlines()]
    for r in rows:
        r.pop("multiple_choices")
    (d / "test.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert main(["eval", "--checkpoint", str(run / "run1"), "--data", str(d),
                 "--mode", "multiple-choice"]) == 2


def test_eval_vocab_mismatch(run, tmp_path, capsys):
    d = tmp_path / "d"
    d.mkdir()
    (d / "features").symlink_to(run / "d" / "features")
    (d / "test.jsonl").write_bytes((run / "d" / "test.jsonl").read_bytes())
    (d / "vocab.json").write_text(json.dumps([{"answer": "zebra", "count": 3}]))
    assert main(["eval", "--checkpoint", str(run / "run1"), "--data", str(d)]) == 1
    assert "VocabMismatchError" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path, run):
    assert main(["eval", "--checkpoint", str(tmp_path), "--data", str(run / "d")]) == 2


def test_inspect_one_example(run, tmp_path):
    qid = json.loads((run / "d" / "test.jsonl").read_text().splitlines()[2])["question_id"]
    out = tmp_path / "ins"
    assert main(["inspect", "--checkpoint", str(run / "run1"), "--data", str(run / "d"),
                 "--question-id", str(qid), "--out", str(out)]) == 0
    rows = [json.loads(line) for line in (out / "attention.jsonl").read_text().splitlines()]
    assert len(rows) == 1
    rec = rows[0]
    assert rec["question_id"] == qid
    assert len(rec["alpha_regions"]) == 4
    assert len(rec["alpha_words"]) == 3  # templated questions have three tokens
    assert abs(sum(rec["alpha_regions"]) - 1) <= 1e-6 and abs(sum(rec["alpha_words"]) - 1) <= 1e-6
    assert len(rec["top_words"]) == 3
    assert len((out / "memory_trace.jsonl").read_text().splitlines()) == 1


def test_inspect_trace_rows_match_steps(run, tmp_path):
    out = tmp_path / "ins"
    assert main(["inspect", "--checkpoint", str(run / "run1"), "--data", str(run / "d"),
                 "--limit", "5", "--out", str(out)]) == 0
    trace = [json.loads(line) for line in (out / "memory_trace.jsonl").read_text().splitlines()]
    assert [t["step"] for t in trace] == [1, 2, 3, 4, 5]
    for t in trace:
        assert abs(sum(t["w_r"]) - 1) <= 1e-6


def test_inspect_unknown_question(run, tmp_path, capsys):
    assert main(["inspect", "--checkpoint", str(run / "run1"), "--data", str(run / "d"),
                 "--question-id", "424242", "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "424242" in err and "available ids" in err


def test_eval_after_overfit_on_train_split(tmp_path):
    assert main(["gen-synth", *SYNTH_ARGS, "--out", str(tmp_path / "d")]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"hidden_size": 16, "memory_slots": 16, "epochs": 60,
                               "lr_answer": 3e-3, "lr_decay_per_epoch": 1.0}))
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "r")]) == 0
    m = tmp_path / "m.json"
    assert main(["eval", "--checkpoint", str(tmp_path / "r"), "--data", str(tmp_path / "d"),
                 "--split", "train", "--out", str(m)]) == 0
    assert json.loads(m.read_text())["accuracy"] >= 0.95
