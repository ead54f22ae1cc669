"""
Command-line tests for the vgib subcommands.
Tests exit codes, output files, manifests, the run registry and replay.
"""

import csv
import json

import pytest

from vgib.app import file_digest, main
from vgib.database.database import get_db, init_db
from vgib.database.models import RunStatus
from vgib.services.bottleneck_service import select_subgraph
from vgib.services.graph_service import GraphService
from vgib.services.run_service import RunService
from vgib.utils import autodiff as ad

TRAIN_FLAGS = ["--epochs", "2", "--hidden-dim", "4", "--batch-size", "8", "--lr", "0.01"]


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def recorded_runs():
    init_db()
    sessions = get_db()
    db = next(sessions)
    try:
        return [(r.subcommand, r.status, r.exit_code) for r in RunService.list_runs(db)]
    finally:
        sessions.close()


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "graphs.jsonl"
    assert main(["gen-data", "--out", str(path), "--num-graphs", "24", "--seed", "3"]) == 0
    return path


@pytest.fixture
def checkpoint(tmp_path, dataset):
    out_dir = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out-dir", str(out_dir), "--seed", "1"] + TRAIN_FLAGS) == 0
    return out_dir / "checkpoint.json"


@pytest.fixture
def scores(tmp_path, dataset, checkpoint):
    path = tmp_path / "scores.jsonl"
    assert main(["explain", "--checkpoint", str(checkpoint), "--data", str(dataset), "--out", str(path)]) == 0
    return path


class TestGenData:
    """Test dataset generation."""

    def test_balanced_and_deterministic(self, tmp_path, dataset):
        """Test the same seed writes the same bytes with a 50/50 label split."""
        again = tmp_path / "again.jsonl"
        assert main(["gen-data", "--out", str(again), "--num-graphs", "24", "--seed", "3"]) == 0
        assert dataset.read_bytes() == again.read_bytes()
        graphs = GraphService.read_dataset(dataset)
        assert sum(g.label for g in graphs) == 12

    def test_manifest(self, dataset):
        """Test the manifest records argv, seed and the dataset hash."""
        manifest = json.loads(dataset.with_name("graphs.jsonl.manifest.json").read_text(encoding="utf-8"))
        assert manifest["subcommand"] == "gen-data"
        assert manifest["seed"] == 3
        assert manifest["exit_code"] == 0
        assert manifest["artifact_hashes"] == {str(dataset): file_digest(dataset)}

    def test_missing_out(self):
        """Test a missing required flag exits with 2."""
        assert main(["gen-data"]) == 2

    def test_unknown_motif(self, tmp_path):
        """Test an unknown motif is a usage error."""
        assert main(["gen-data", "--out", str(tmp_path / "x.jsonl"), "--motif", "star"]) == 2

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        """Test VGIB_SEED sets the default seed."""
        monkeypatch.setenv("VGIB_SEED", "7")
        path = tmp_path / "env.jsonl"
        assert main(["gen-data", "--out", str(path), "--num-graphs", "4"]) == 0
        manifest = json.loads(path.with_name("env.jsonl.manifest.json").read_text(encoding="utf-8"))
        assert manifest["seed"] == 7

    def test_bad_seed_environment(self, tmp_path, monkeypatch):
        """Test a malformed VGIB_SEED is rejected."""
        monkeypatch.setenv("VGIB_SEED", "abc")
        assert main(["gen-data", "--out", str(tmp_path / "x.jsonl")]) == 2


class TestTrain:
    """Test the train subcommand."""

    def test_zero_epochs(self, tmp_path, dataset):
        """Test zero epochs still write a checkpoint, a header-only metrics file and a manifest."""
        out_dir = tmp_path / "zero"
        assert main(["train", "--data", str(dataset), "--out-dir", str(out_dir), "--epochs", "0"]) == 0
        assert (out_dir / "checkpoint.json").is_file()
        assert (out_dir / "manifest.json").is_file()
        assert read_csv(out_dir / "metrics.csv") == []

    def test_metric_rows(self, checkpoint):
        """Test one metric row per epoch."""
        rows = read_csv(checkpoint.with_name("metrics.csv"))
        assert [r["epoch"] for r in rows] == ["1", "2"]

    def test_explain_needs_frozen_checkpoint(self, tmp_path, dataset):
        """Test explain mode without a frozen classifier is a usage error."""
        assert main(["train", "--data", str(dataset), "--out-dir", str(tmp_path / "e"), "--mode", "explain"]) == 2

    def test_no_gates_outside_classify(self, tmp_path, dataset):
        """Test gates can only be disabled for plain classifiers."""
        assert main(["train", "--data", str(dataset), "--out-dir", str(tmp_path / "g"), "--no-gates"]) == 2

    def test_missing_dataset(self, tmp_path, capsys):
        """Test an unreadable dataset exits with 2 and a one-line message."""
        assert main(["train", "--data", str(tmp_path / "absent.jsonl"), "--out-dir", str(tmp_path / "m")]) == 2
        assert "cannot read dataset" in capsys.readouterr().err

    def test_posthoc_pipeline(self, tmp_path, dataset):
        """Test a plain classifier can be explained post hoc and scored."""
        plain = tmp_path / "plain"
        assert main(
            ["train", "--data", str(dataset), "--out-dir", str(plain), "--mode", "classify", "--no-gates"] + TRAIN_FLAGS
        ) == 0
        explainer = tmp_path / "explainer"
        assert main([
            "train", "--data", str(dataset), "--out-dir", str(explainer), "--mode", "explain",
            "--frozen-checkpoint", str(plain / "checkpoint.json"),
        ] + TRAIN_FLAGS) == 0
        scores = tmp_path / "posthoc.jsonl"
        assert main([
            "explain", "--checkpoint", str(explainer / "checkpoint.json"), "--data", str(dataset), "--out", str(scores),
        ]) == 0

    def test_plain_classifier_has_no_scores(self, tmp_path, dataset):
        """Test explaining with an ungated classifier is rejected."""
        plain = tmp_path / "plain"
        assert main(
            ["train", "--data", str(dataset), "--out-dir", str(plain), "--mode", "classify", "--no-gates", "--epochs", "0"]
        ) == 0
        out = tmp_path / "s.jsonl"
        assert main(["explain", "--checkpoint", str(plain / "checkpoint.json"), "--data", str(dataset), "--out", str(out)]) == 2


class TestExplain:
    """Test node scoring."""

    def test_records_consistent(self, dataset, scores):
        """Test every graph gets one score per node and the selection those scores imply."""
        graphs = GraphService.read_dataset(dataset)
        lines = scores.read_text(encoding="utf-8").splitlines()
        assert len(lines) == len(graphs)
        for line in lines:
            record = json.loads(line)
            graph = graphs[record["graph_index"]]
            assert len(record["p"]) == graph.num_nodes
            assert all(0.0 <= v <= 1.0 for v in record["p"])
            expected = select_subgraph(graph, record["p"])
            assert tuple(record["selected_nodes"]) == expected.nodes
            assert record["empty"] == expected.empty

    def test_rerun_identical(self, tmp_path, dataset, checkpoint, scores):
        """Test scoring twice writes the same bytes."""
        again = tmp_path / "again.jsonl"
        assert main(["explain", "--checkpoint", str(checkpoint), "--data", str(dataset), "--out", str(again)]) == 0
        assert again.read_bytes() == scores.read_bytes()

    def test_truncated_checkpoint(self, tmp_path, dataset, checkpoint):
        """Test a damaged checkpoint exits with 2."""
        text = checkpoint.read_text(encoding="utf-8")
        checkpoint.write_text(text[:100], encoding="utf-8")
        out = tmp_path / "s.jsonl"
        assert main(["explain", "--checkpoint", str(checkpoint), "--data", str(dataset), "--out", str(out)]) == 2


class TestEval:
    """Test the fidelity sweep."""

    def test_full_selection(self, tmp_path, dataset, checkpoint, scores):
        """Test k = 1 keeps every node so Fidelity- is 0."""
        out = tmp_path / "fidelity.csv"
        args = ["eval", "--checkpoint", str(checkpoint), "--scores", str(scores), "--data", str(dataset)]
        assert main(args + ["--k-list", "1.0", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 1
        assert float(rows[0]["fidelity_minus"]) == 0.0

    def test_default_sweep_and_summary(self, tmp_path, dataset, checkpoint, scores):
        """Test the default grid gives seven rows and a summary with the extras asked for."""
        out = tmp_path / "fidelity.csv"
        assert main([
            "eval", "--checkpoint", str(checkpoint), "--scores", str(scores), "--data", str(dataset),
            "--out", str(out), "--random-baselines", "2",
        ]) == 0
        assert [r["k"] for r in read_csv(out)] == ["0.3", "0.35", "0.4", "0.45", "0.5", "0.55", "0.6"]
        summary = json.loads(out.with_suffix(".summary.json").read_text(encoding="utf-8"))
        assert len(summary["fidelity"]) == 7
        assert len(summary["random_baselines"]) == 7

    def test_missing_scores(self, tmp_path, dataset, checkpoint, capsys):
        """Test graphs without scores are listed and the run exits with 2."""
        partial = tmp_path / "test_only.jsonl"
        assert main([
            "explain", "--checkpoint", str(checkpoint), "--data", str(dataset), "--out", str(partial), "--split", "test",
        ]) == 0
        capsys.readouterr()
        out = tmp_path / "fidelity.csv"
        assert main([
            "eval", "--checkpoint", str(checkpoint), "--scores", str(partial), "--data", str(dataset), "--out", str(out),
        ]) == 2
        assert "no scores for graphs [" in capsys.readouterr().err

    def test_bad_k_list(self, tmp_path, dataset, checkpoint, scores):
        """Test a sparsity outside (0, 1] exits with 2."""
        assert main([
            "eval", "--checkpoint", str(checkpoint), "--scores", str(scores), "--data", str(dataset),
            "--out", str(tmp_path / "f.csv"), "--k-list", "1.5",
        ]) == 2

    def test_property_divergence(self, tmp_path, dataset, checkpoint):
        """Test selections covering whole graphs give zero triangle divergence."""
        graphs = GraphService.read_dataset(dataset)
        whole = tmp_path / "whole.jsonl"
        whole.write_text("".join(
            json.dumps({"graph_index": i, "p": [0.9] * g.num_nodes, "selected_nodes": list(range(g.num_nodes)), "empty": False})
            + "\n"
            for i, g in enumerate(graphs)
        ), encoding="utf-8")
        out = tmp_path / "fidelity.csv"
        assert main([
            "eval", "--checkpoint", str(checkpoint), "--scores", str(whole), "--data", str(dataset),
            "--out", str(out), "--k-list", "0.5", "--property", "triangles",
        ]) == 0
        summary = json.loads(out.with_suffix(".summary.json").read_text(encoding="utf-8"))
        divergence = summary["property_divergence"][0]
        assert divergence["property_name"] == "triangles"
        assert divergence["mean"] == 0.0
        assert divergence["n"] == len(graphs)


class TestChecks:
    """Test the theory and gradient checks."""

    def test_check_theory(self, capsys):
        """Test one trial prints a margin row and passes."""
        assert main(["check-theory", "--trials", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "trial,lemma1_margin,thm1_margin_a,thm1_margin_b"
        assert lines[1].startswith("0,")

    def test_check_theory_file(self, tmp_path):
        """Test margins can be written to a file with a manifest."""
        out = tmp_path / "margins.csv"
        assert main(["check-theory", "--trials", "3", "--out", str(out)]) == 0
        assert len(read_csv(out)) == 3
        assert out.with_name("margins.csv.manifest.json").is_file()

    def test_gradcheck_passes(self, tmp_path):
        """Test backward agrees with finite differences on random graphs of both backbones."""
        out = tmp_path / "errors.csv"
        assert main(["gradcheck", "--graphs", "2", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert [r["graph"] for r in rows] == ["0", "1"]
        assert all(float(r["max_rel_error"]) <= 1e-4 for r in rows)

    def test_gradcheck_catches_wrong_rule(self, monkeypatch, capsys):
        """Test a broken backward rule fails the check with exit code 1."""
        monkeypatch.setitem(ad.BACKWARD_RULES, "sigmoid", lambda node, g: (0.0 * g,))
        assert main(["gradcheck", "--graphs", "1", "--backbone", "gcn"]) == 1
        assert "FAILED" in capsys.readouterr().err


class TestRegistry:
    """Test run recording, listing and replay."""

    def test_runs_recorded(self, tmp_path, dataset):
        """Test successes and rejections are both recorded."""
        assert main(["train", "--data", str(tmp_path / "absent.jsonl"), "--out-dir", str(tmp_path / "x")]) == 2
        runs = recorded_runs()
        assert ("train", RunStatus.rejected, 2) in runs
        assert ("gen-data", RunStatus.succeeded, 0) in runs

    def test_runs_listing(self, dataset, capsys):
        """Test the runs subcommand prints one row per recorded run."""
        capsys.readouterr()
        assert main(["runs"]) == 0
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert [(r["subcommand"], r["status"], r["artifacts"]) for r in rows] == [("gen-data", "succeeded", "1")]

    def test_delete_run(self, dataset, capsys):
        """Test --delete removes a recorded run and its artifact rows."""
        capsys.readouterr()
        assert main(["runs"]) == 0
        run_id = list(csv.DictReader(capsys.readouterr().out.splitlines()))[0]["id"]
        assert main(["runs", "--delete", run_id]) == 0
        assert recorded_runs() == []

    def test_delete_unknown_run(self, dataset):
        """Test deleting an id that was never recorded exits with 2 and keeps the registry."""
        assert main(["runs", "--delete", "999"]) == 2
        assert recorded_runs() == [("gen-data", RunStatus.succeeded, 0)]

    def test_replay_reproduces_outputs(self, tmp_path, dataset):
        """Test replaying a manifest rewrites byte-identical outputs."""
        original = dataset.read_bytes()
        dataset.unlink()
        manifest = dataset.with_name("graphs.jsonl.manifest.json")
        assert main(["replay", "--manifest", str(manifest)]) == 0
        assert dataset.read_bytes() == original

    def test_replay_train(self, checkpoint):
        """Test a replayed training run writes the same checkpoint."""
        original = checkpoint.read_bytes()
        checkpoint.unlink()
        assert main(["replay", "--manifest", str(checkpoint.with_name("manifest.json"))]) == 0
        assert checkpoint.read_bytes() == original

    def test_replay_missing_manifest(self, tmp_path):
        """Test an unreadable manifest exits with 2."""
        assert main(["replay", "--manifest", str(tmp_path / "none.json")]) == 2
