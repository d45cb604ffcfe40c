import json

import pytest

from cirlab.cli import main
from cirlab.io import read_records, write_records


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def clusters(tmp_path_factory):
    d = tmp_path_factory.mktemp("fixture")
    assert run("make-fixture", "clusters", "--out-dir", d, "--log-level", "WARNING") == 0
    return d


def pipeline(workdir, data, steps=5):
    common = ["--workdir", workdir, "--paths.embeddings", data / "embeddings.jsonl",
              "--log-level", "WARNING"]
    for stage in ("pairs", "captions", "queries", "filter"):
        assert run("syncir", stage, *common) == 0, stage
    train = ["--train.steps", steps, "--train.unlabeled_batch_size", 16,
             "--train.triplet_batch_size", 8]
    assert run("train", *common, *train) == 0
    assert run("eval", *common, "--paths.queries", data / "queries.jsonl") == 0


def test_pairs_on_cluster_fixture(tmp_path, clusters):
    assert run("syncir", "pairs", "--workdir", tmp_path,
               "--paths.embeddings", clusters / "embeddings.jsonl") == 0
    header, pairs = read_records(tmp_path / "pairs.jsonl", kind="pairs")
    assert header["format_version"] == 1 and header["config_hash"]
    assert len(pairs) == 180
    assert len({(p["reference_id"], p["target_id"]) for p in pairs}) == 180
    _, groups = read_records(tmp_path / "subgroups.jsonl", kind="subgroups")
    assert len(groups) == 20


def test_full_pipeline_and_warm_cache(tmp_path, clusters, capsys):
    pipeline(tmp_path, clusters)
    for name in ("pairs.jsonl", "captions.jsonl", "triplets.jsonl", "filtered.jsonl",
                 "filter_report.json", "checkpoint.pt", "history.jsonl", "metrics.json",
                 "metrics.txt", "syncir-pairs.config.json", "train.config.json"):
        assert (tmp_path / name).exists(), name
    report = json.loads((tmp_path / "filter_report.json").read_text())
    assert report["total"] == 180
    assert report["kept"] + report["dropped_same_caption"] + report["dropped_low_similarity"] == 180

    before = (tmp_path / "triplets.jsonl").read_bytes()
    capsys.readouterr()
    assert run("syncir", "queries", "--workdir", tmp_path) == 0
    assert "provider calls: 0" in capsys.readouterr().err
    assert (tmp_path / "triplets.jsonl").read_bytes() == before


def test_train_and_eval_are_reproducible(tmp_path, clusters):
    pipeline(tmp_path / "a", clusters)
    pipeline(tmp_path / "b", clusters)
    for name in ("history.jsonl", "metrics.json", "filtered.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_filter_on_empty_triplets(tmp_path):
    empty = tmp_path / "triplets.jsonl"
    empty.write_text("")
    assert run("syncir", "filter", "--workdir", tmp_path / "out", "--paths.triplets", empty) == 0
    _, kept = read_records(tmp_path / "out" / "filtered.jsonl")
    assert kept == []
    report = json.loads((tmp_path / "out" / "filter_report.json").read_text())
    assert report["total"] == report["kept"] == report["errored"] == 0


def test_missing_input_is_fatal_and_named(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert run("syncir", "pairs", "--workdir", tmp_path, "--paths.embeddings", missing) == 3
    assert str(missing) in capsys.readouterr().err
    assert run("syncir", "captions", "--workdir", tmp_path / "empty") == 3


@pytest.mark.parametrize("argv", [
    ["train", "--no-such-flag"],
    ["train", "--train.steps", "many"],
    ["train", "--model.activation", "swish"],
    ["frobnicate"],
    ["syncir"],
])
def test_usage_errors_exit_1(tmp_path, argv):
    if argv[0] == "train":
        argv = argv + ["--workdir", tmp_path]
    assert run(*argv) == 1


def test_provider_failures_are_partial(tmp_path, clusters):
    common = ["--workdir", tmp_path, "--log-level", "ERROR"]
    assert run("syncir", "pairs", *common, "--paths.embeddings", clusters / "embeddings.jsonl") == 0
    assert run("syncir", "captions", *common, "--providers.mode", "http",
               "--providers.caption.endpoint", "http://127.0.0.1:9/caption",
               "--providers.caption.max_retries", 0) == 2
    _, errors = read_records(tmp_path / "captions_errors.jsonl", kind="captions_errors")
    assert len(errors) == 120 and all("ProviderTimeout" in e["error"] for e in errors)


def test_version_mismatch_is_fatal(tmp_path):
    write_records(tmp_path / "pairs.jsonl", [], "pairs", "x")
    text = (tmp_path / "pairs.jsonl").read_text().replace('"format_version": 1',
                                                          '"format_version": 99')
    (tmp_path / "pairs.jsonl").write_text(text)
    assert run("syncir", "captions", "--workdir", tmp_path) == 3


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("seed: 2\ntrain:\n  steps: 7\n  temperature: 0.2\n")
    assert run("syncir", "pairs", "--config", cfg, "--train.steps", 3, "--workdir", tmp_path / "w",
               "--paths.embeddings", tmp_path / "missing.jsonl") == 3
    snap = json.loads((tmp_path / "w" / "syncir-pairs.config.json").read_text())
    assert snap["config"]["seed"] == 2
    assert snap["config"]["train"]["steps"] == 3
    assert snap["config"]["train"]["temperature"] == 0.2
    assert snap["config"]["train"]["seed"] == 2
    assert snap["config"]["train"]["learning_rate"] == 1e-4


def test_snapshot_hash_ignores_paths(tmp_path):
    for name in ("a", "b"):
        run("syncir", "pairs", "--workdir", tmp_path / name, "--paths.embeddings",
            tmp_path / f"{name}.jsonl")
    a = json.loads((tmp_path / "a" / "syncir-pairs.config.json").read_text())
    b = json.loads((tmp_path / "b" / "syncir-pairs.config.json").read_text())
    assert a["config"]["paths"] != b["config"]["paths"]
    assert a["config_hash"] == b["config_hash"]


def test_train_resumes_and_zero_steps(tmp_path, clusters):
    common = ["--workdir", tmp_path, "--paths.embeddings", clusters / "embeddings.jsonl",
              "--log-level", "WARNING"]
    for stage in ("pairs", "captions", "queries", "filter"):
        run("syncir", stage, *common)
    small = ["--train.unlabeled_batch_size", 16, "--train.triplet_batch_size", 8]
    assert run("train", *common, *small, "--train.steps", 0) == 0
    assert run("train", *common, *small, "--train.steps", 4) == 0
    _, hist = read_records(tmp_path / "history.jsonl", kind="loss_history")
    assert [h["step"] for h in hist] == [0, 1, 2, 3]
    # a different objective cannot continue this checkpoint
    assert run("train", *common, *small, "--train.steps", 6, "--train.objective", "zscir") == 3


def test_ablate_tokens_table_shape(tmp_path, clusters):
    common = ["--workdir", tmp_path, "--paths.embeddings", clusters / "embeddings.jsonl",
              "--log-level", "WARNING"]
    for stage in ("pairs", "captions", "queries", "filter"):
        run("syncir", stage, *common)
    assert run("ablate-tokens", *common, "--k", 1, "--train.steps", 2,
               "--train.unlabeled_batch_size", 16, "--train.triplet_batch_size", 8,
               "--paths.queries", clusters / "queries.jsonl",
               "--eval.recall_ks", 1, 5, 10) == 0
    lines = (tmp_path / "ablation.txt").read_text().splitlines()
    assert lines[0].split() == ["k", "R@1", "R@5", "R@10", "Avg"]
    assert len(lines) == 3 and lines[2].split()[0] == "1"
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert [r["k"] for r in rows] == [1]
