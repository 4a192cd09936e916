import json

import pytest
from click.testing import CliRunner

from caption2ds.cli import main

TINY = ["--cell", "rnn2ds", "--state", "2x7x7", "--embed", "1x7x7", "--corpus", "synth:8",
        "--epochs", "2", "--batch-size", "4", "--threshold", "1", "--lr", "0.01"]


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    res = run("train", *TINY, "--out", out, "--deterministic")
    assert res.exit_code == 0, res.output
    return out


def test_train_writes_checkpoint_log_and_manifest(trained):
    assert (trained / "model.c2ds").exists()
    log = json.loads((trained / "train_log.json").read_text())
    assert [e["epoch"] for e in log] == [1, 2]
    man = json.loads((trained / "manifest.json").read_text())
    assert man["subcommand"] == "train" and man["version"] == "v0.1.0"
    assert man["outputs"] == ["model.c2ds", "train_log.json"]
    assert "timings" not in man


def test_deterministic_runs_are_byte_identical(trained, tmp_path):
    res = run("train", *TINY, "--out", tmp_path / "again", "--deterministic")
    assert res.exit_code == 0
    for name in ["model.c2ds", "train_log.json", "manifest.json"]:
        assert (tmp_path / "again" / name).read_bytes() == (trained / name).read_bytes()
    for d in ["c1", "c2"]:
        assert run("caption", trained / "model.c2ds", "synth:3:5", "--out", tmp_path / d,
                   "--deterministic").exit_code == 0
    for name in ["captions.jsonl", "manifest.json"]:
        assert (tmp_path / "c1" / name).read_bytes() == (tmp_path / "c2" / name).read_bytes()


def test_caption_emits_traces(trained, tmp_path):
    res = run("caption", trained / "model.c2ds", "synth:3:5", "--emit-trace", "--out", tmp_path)
    assert res.exit_code == 0
    lines = (tmp_path / "captions.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert len(list((tmp_path / "traces").glob("*.json"))) == 3
    assert "timings" in json.loads((tmp_path / "manifest.json").read_text())


def test_full_region_manipulation_is_a_no_op(trained, tmp_path):
    res = run("manipulate", trained / "model.c2ds", "synth:4:2", "--region", "1,1,7,7", "--out", tmp_path)
    assert res.exit_code == 0
    for line in (tmp_path / "paired.jsonl").read_text().splitlines():
        row = json.loads(line)
        assert row["baseline"] == row["intervened"]


def test_interpret_map_count(trained, tmp_path):
    res = run("interpret", trained / "model.c2ds", "synth:6:3", "--all-words", "--images", "2",
              "--out", tmp_path)
    assert res.exit_code == 0, res.output
    table = json.loads((tmp_path / "associations.json").read_text())
    expected = sum(min(2, e["support"]) for e in table.values())
    assert len(list((tmp_path / "maps").glob("*.pgm"))) == expected
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["lambda"] == 0.2


def test_usage_errors_exit_2(trained, tmp_path):
    assert run("train", "--cell", "nope", "--state", "4", "--corpus", "synth:3").exit_code == 2
    assert run("train", "--cell", "rnn2ds", "--state", "4", "--corpus", "synth:3",
               "--out", tmp_path).exit_code == 2
    assert run("manipulate", trained / "model.c2ds", "synth:2", "--region", "1,1,7").exit_code == 2
    assert run("manipulate", trained / "model.c2ds", "synth:2", "--region", "0,1,7,7",
               "--out", tmp_path).exit_code == 2
    assert run("manipulate", trained / "model.c2ds", "synth:2", "--out", tmp_path).exit_code == 2
    assert run("interpret", trained / "model.c2ds", "synth:2", "--word", "zebra",
               "--out", tmp_path).exit_code == 2


def test_empty_support_names_word(trained, tmp_path):
    # an in-vocabulary word that a barely trained model never emits on these scenes
    from caption2ds import checkpoint
    from caption2ds.decoder import generate_batch
    from caption2ds.cli import load_corpus
    import numpy as np

    model = checkpoint.load(trained / "model.c2ds")[0]
    recs = load_corpus("synth:3:4")
    caps, _ = generate_batch(model, np.stack([r.features for r in recs]), with_traces=False)
    used = {t for c in caps for t in c}
    unused = [w for w in model.vocab.words if model.vocab.id_of(w) not in used]
    assert unused
    res = CliRunner().invoke(main, ["interpret", str(trained / "model.c2ds"), "synth:3:4", "--word", unused[0],
                                    "--out", str(tmp_path)])
    assert res.exit_code == 2
    assert unused[0] in res.output


def test_deactivate_on_1d_checkpoint_is_unsupported(tmp_path):
    res = run("train", "--cell", "lstm1ds", "--state", "6", "--corpus", "synth:4", "--epochs", "1",
              "--threshold", "1", "--out", tmp_path / "m")
    assert res.exit_code == 0
    res = run("manipulate", tmp_path / "m" / "model.c2ds", "synth:2", "--deactivate", "0",
              "--out", tmp_path / "x")
    assert res.exit_code == 2


def test_io_errors_exit_1(tmp_path):
    assert run("caption", tmp_path / "missing.c2ds", "synth:2", "--out", tmp_path).exit_code == 1
    (tmp_path / "empty.jsonl").write_text("")
    assert run("train", *TINY[:6], "--corpus", tmp_path / "empty.jsonl", "--out", tmp_path).exit_code == 1
    (tmp_path / "bad.c2ds").write_bytes(b"nonsense")
    assert run("caption", tmp_path / "bad.c2ds", "synth:2", "--out", tmp_path).exit_code == 1


def test_gradcheck_pass_and_fail(tmp_path):
    res = run("gradcheck", "--cell", "gru2ds", "--state", "2x5x5", "--out", tmp_path / "ok")
    assert res.exit_code == 0, res.output
    report = json.loads((tmp_path / "ok" / "gradcheck.json").read_text())
    assert report["passed"] and set(report["per_param"])
    res = run("gradcheck", "--cell", "rnn1ds", "--state", "4", "--eps", "0.5", "--out", tmp_path / "bad")
    assert res.exit_code == 3


def test_thread_env_validation(tmp_path):
    res = CliRunner(env={"CAPTION2DS_THREADS": "zero"}).invoke(
        main, ["gradcheck", "--cell", "rnn1ds", "--state", "4", "--out", str(tmp_path)])
    assert res.exit_code == 2


def test_version():
    assert "0.1.0" in run("--version").output
