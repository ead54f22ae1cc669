"""
Tests for the run registry.
"""

import pytest

from vgib.database.database import get_db, init_db
from vgib.database.models import Artifact, RunStatus
from vgib.services.run_service import RunService


@pytest.fixture
def db():
    init_db()
    sessions = get_db()
    session = next(sessions)
    yield session
    sessions.close()


class TestRunService:
    """Test recording, listing and deleting runs."""

    def test_start_run(self, db):
        """Test a new run is recorded as running with its argv."""
        run = RunService.start_run(db, "train", ["train", "--data", "d.jsonl"], config={"beta": 0.1}, seed=3)
        assert run.id is not None
        assert run.status == RunStatus.running
        assert run.argv == ["train", "--data", "d.jsonl"]
        assert run.seed == 3
        assert run.finished_at is None

    def test_finish_run(self, db):
        """Test finishing sets the outcome and attaches artifact hashes."""
        run = RunService.start_run(db, "gen-data", ["gen-data"])
        finished = RunService.finish_run(
            db, run.id, RunStatus.succeeded, 0,
            artifacts={"b.json": "2" * 64, "a.jsonl": "1" * 64},
            summary={"graphs": 10},
        )
        assert finished.status == RunStatus.succeeded
        assert finished.exit_code == 0
        assert finished.finished_at is not None
        assert finished.summary == {"graphs": 10}
        assert [a.path for a in finished.artifacts] == ["a.jsonl", "b.json"]

    def test_finish_missing_run(self, db):
        """Test finishing an unknown run returns None."""
        assert RunService.finish_run(db, 999, RunStatus.failed, 1) is None

    def test_list_newest_first(self, db):
        """Test runs are listed newest first."""
        first = RunService.start_run(db, "train", ["train"])
        second = RunService.start_run(db, "eval", ["eval"])
        assert [r.id for r in RunService.list_runs(db)] == [second.id, first.id]

    def test_list_filters(self, db):
        """Test status, subcommand and limit narrow the listing."""
        a = RunService.start_run(db, "train", ["train"])
        b = RunService.start_run(db, "train", ["train"])
        RunService.start_run(db, "eval", ["eval"])
        RunService.finish_run(db, a.id, RunStatus.rejected, 2, message="bad flag")

        assert [r.id for r in RunService.list_runs(db, status=RunStatus.rejected)] == [a.id]
        assert {r.id for r in RunService.list_runs(db, subcommand="train")} == {a.id, b.id}
        assert len(RunService.list_runs(db, limit=2)) == 2

    def test_sort_by_subcommand(self, db):
        """Test listings can be grouped by subcommand."""
        RunService.start_run(db, "train", ["train"])
        RunService.start_run(db, "eval", ["eval"])
        names = [r.subcommand for r in RunService.list_runs(db, sort_by="subcommand")]
        assert names == ["eval", "train"]

    def test_delete_run(self, db):
        """Test deleting a run removes its artifacts too."""
        run = RunService.start_run(db, "explain", ["explain"])
        RunService.finish_run(db, run.id, RunStatus.succeeded, 0, artifacts={"s.jsonl": "0" * 64})
        assert RunService.delete_run(db, run.id)
        assert RunService.get_run(db, run.id) is None
        assert db.query(Artifact).count() == 0
        assert not RunService.delete_run(db, run.id)
