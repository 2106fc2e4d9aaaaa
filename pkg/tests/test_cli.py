import json
import shutil

import pytest
from typer.testing import CliRunner

from semantic_smoothing.cli import app
from semantic_smoothing.orchestrator.experiment_orchestrator import (
    CERTIFICATION_REPORT,
    CHECKPOINT,
    MANIFEST,
    CertificationOptions,
    ExperimentOrchestrator,
)

runner = CliRunner()

GEN_FLAGS = [
    "--vocabulary-size", "40",
    "--num-clusters", "4",
    "--cluster-size", "3",
    "--content-tokens", "3",
    "--sequence-length", "6",
    "--embedding-dim", "4",
    "--num-train", "40",
    "--num-test", "8",
]
TRAIN_FLAGS = [
    "--sigma", "0.5",
    "--gamma", "2",
    "--margin", "0.5",
    "--cls-epochs", "1",
    "--robust-epochs", "1",
    "--batch-size", "10",
    "--warmup-steps", "2",
    "--latent-dim", "4",
]


def invoke(*args):
    result = runner.invoke(app, [str(arg) for arg in args])
    return result


def ok(*args):
    result = invoke(*args)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    ok("--seed", 4, "--out", root / "data", "gen-data", *GEN_FLAGS)
    ok("--seed", 4, "--out", root / "train", "train", "--data", root / "data", *TRAIN_FLAGS)
    return root


def certify_args(root, out, *extra):
    return (
        "--seed", 4, "--out", out, "certify",
        "--checkpoint", root / "train" / CHECKPOINT,
        "--data", root / "data",
        "--t1", 5, "--t2", 60, "--limit", 4,
        *extra,
    )


def manifest(directory):
    return json.loads((directory / MANIFEST).read_text(encoding="utf-8"))


def test_gen_data_writes_corpus_and_manifest(pipeline):
    data = pipeline / "data"
    for name in ("train.tsv", "test.tsv", "intervened.tsv", "embeddings.txt", "substitutions.json"):
        assert (data / name).exists()
    written = manifest(data)
    assert written["command"] == "gen-data"
    assert written["seeds"]["root"] == 4
    assert len((data / "train.tsv").read_text(encoding="utf-8").splitlines()) == 40


def test_train_writes_checkpoints_and_log(pipeline):
    train = pipeline / "train"
    assert (train / CHECKPOINT).exists()
    assert (train / "checkpoint-phase1.json").exists()
    log = (train / "training_log.csv").read_text(encoding="utf-8").splitlines()
    assert log[0].startswith("epoch,phase")
    assert len(log) == 3
    assert manifest(train)["config"]["seed"] == 4


def test_certify_is_reproducible(pipeline, tmp_path):
    ok(*certify_args(pipeline, tmp_path / "first"))
    ok(*certify_args(pipeline, tmp_path / "second", "--alpha", 0.01))
    first = (tmp_path / "first" / CERTIFICATION_REPORT).read_bytes()
    second = (tmp_path / "second" / CERTIFICATION_REPORT).read_bytes()
    assert first == second
    lines = [json.loads(line) for line in first.decode("utf-8").splitlines()]
    assert len(lines) == 5
    assert lines[-1]["summary"]["total"] == 4
    assert (tmp_path / "first" / "summary.csv").exists()


def test_parallel_certification_matches_serial(pipeline, tmp_path):
    ok(*certify_args(pipeline, tmp_path / "serial"))
    ok("--jobs", 3, *certify_args(pipeline, tmp_path / "parallel"))
    assert (tmp_path / "serial" / CERTIFICATION_REPORT).read_bytes() == (
        tmp_path / "parallel" / CERTIFICATION_REPORT
    ).read_bytes()


def test_empty_selection_still_reports(pipeline, tmp_path):
    out = tmp_path / "empty"
    ok(
        "--out", out, "certify",
        "--checkpoint", pipeline / "train" / CHECKPOINT,
        "--data", pipeline / "data",
        "--t1", 5, "--t2", 20, "--limit", 0,
    )
    lines = (out / CERTIFICATION_REPORT).read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1
    summary = json.loads(lines[0])["summary"]
    assert summary["total"] == 0
    assert summary["certified_accuracy"] == 0.0


def test_config_file_fills_unset_flags(pipeline, tmp_path):
    settings = tmp_path / "run.conf"
    settings.write_text("# budget\nt2 = 30\n--t1=4\nlimit=2\n", encoding="utf-8")
    ok("--config", settings, *certify_args(pipeline, tmp_path / "from-file")[:-6])
    written = manifest(tmp_path / "from-file")["config"]
    assert (written["t1"], written["t2"], written["limit"]) == (4, 30, 2)

    ok("--config", settings, *certify_args(pipeline, tmp_path / "flag-wins"))
    written = manifest(tmp_path / "flag-wins")["config"]
    assert (written["t1"], written["t2"], written["limit"]) == (5, 60, 4)


def test_unknown_config_key_fails(tmp_path):
    settings = tmp_path / "run.conf"
    settings.write_text("seed=1\nbogus=2\n", encoding="utf-8")
    result = invoke("--config", settings, "config-info")
    assert result.exit_code == 1
    assert "bogus" in result.output


def test_dry_run_writes_nothing(pipeline, tmp_path):
    ok("--dry-run", "--out", tmp_path / "dry-data", "gen-data", *GEN_FLAGS)
    ok("--dry-run", "--out", tmp_path / "dry-train", "train", "--data", pipeline / "data", *TRAIN_FLAGS)
    ok("--dry-run", *certify_args(pipeline, tmp_path / "dry-certify"))
    for name in ("dry-data", "dry-train", "dry-certify"):
        assert not (tmp_path / name).exists()


def test_dry_run_still_validates(tmp_path):
    result = invoke("--dry-run", "--out", tmp_path / "x", "train", "--data", tmp_path / "missing")
    assert result.exit_code == 1
    result = invoke("--dry-run", "--out", tmp_path / "x", "train", "--data", tmp_path, "--sigma", "-1")
    assert result.exit_code == 1


def test_missing_data_flag(tmp_path):
    result = invoke("--out", tmp_path / "x", "train")
    assert result.exit_code == 1
    assert "--data" in result.output


def test_failed_training_removes_partial_outputs(pipeline, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(pipeline / "data", data)
    (data / "train.tsv").write_text("", encoding="utf-8")
    result = invoke("--out", tmp_path / "failed", "train", "--data", data, *TRAIN_FLAGS)
    assert result.exit_code == 1
    assert not (tmp_path / "failed").exists()


def test_certify_rejects_unknown_headword(pipeline, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(pipeline / "data", data)
    table = json.loads((data / "substitutions.json").read_text(encoding="utf-8"))
    table["zzz"] = ["c0_0"]
    (data / "substitutions.json").write_text(json.dumps(table), encoding="utf-8")
    result = invoke("--seed", 4, "--out", tmp_path / "certify", "certify", "--checkpoint", pipeline / "train" / CHECKPOINT, "--data", data)
    assert result.exit_code == 1
    assert not (tmp_path / "certify").exists()


def test_attack_command(pipeline, tmp_path):
    out = tmp_path / "attack"
    ok(
        "--seed", 4, "--out", out, "attack",
        "--checkpoint", pipeline / "train" / CHECKPOINT,
        "--data", pipeline / "data",
        "--attack", "random", "--draws", 16, "--trials", 5, "--limit", 3,
    )
    lines = (out / "attack.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 4
    assert json.loads(lines[-1])["summary"]["attack"] == "random"


def test_unknown_attack_fails(pipeline, tmp_path):
    result = invoke(
        "--out", tmp_path / "attack", "attack",
        "--checkpoint", pipeline / "train" / CHECKPOINT,
        "--data", pipeline / "data",
        "--attack", "hotflip",
    )
    assert result.exit_code == 1
    assert not (tmp_path / "attack").exists()


def test_alpha_sweep_rows(pipeline, tmp_path):
    out = tmp_path / "alpha"
    ok(
        "--out", out, "alpha-sweep",
        "--checkpoint", pipeline / "train" / CHECKPOINT,
        "--data", pipeline / "data",
        "--pairs", "40:0.001,20:0.05", "--t1", 5, "--limit", 3,
    )
    rows = (out / "alpha_sweep.csv").read_text(encoding="utf-8").splitlines()
    assert len(rows) == 3


@pytest.mark.parametrize(
    ("command", "grid_flag", "grid", "report"),
    [
        ("tradeoff", "--gammas", "0,2", "tradeoff.csv"),
        ("sigma-sweep", "--sigmas", "0.5,1", "sigma_sweep.csv"),
        ("margin-sweep", "--margins", "0.5,1", "margin_sweep.csv"),
    ],
)
def test_training_sweep_rows(pipeline, tmp_path, command, grid_flag, grid, report):
    out = tmp_path / command
    ok(
        "--seed", 4, "--out", out, command,
        "--data", pipeline / "data", grid_flag, grid,
        "--cls-epochs", 1, "--robust-epochs", 1,
        "--t1", 5, "--t2", 40, "--limit", 3,
    )
    rows = (out / report).read_text(encoding="utf-8").splitlines()
    assert len(rows) == 3
    assert rows[0].startswith("experiment,parameter,value")
    assert [row.split(",")[0] for row in rows[1:]] == [command] * 2
    assert manifest(out)["command"] == command


def test_config_info():
    result = ok("config-info")
    assert "SMOOTHING_SEED" in result.output


def test_orchestrator_dry_run_returns_none(pipeline, tmp_path):
    orchestrator = ExperimentOrchestrator(seed=1, dry_run=True)
    options = CertificationOptions(t1=2, t2=5)
    assert orchestrator.certify(pipeline / "train" / CHECKPOINT, pipeline / "data", options, tmp_path / "o") is None
    assert not (tmp_path / "o").exists()
