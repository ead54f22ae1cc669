from sqlalchemy.orm import Session
from datetime import datetime
from typing import List, Optional, Dict, Any

from vgib.database.models import Run, RunStatus, Artifact


class RunService:
    """Service for run registry operations."""

    @staticmethod
    def start_run(
        db: Session,
        subcommand: str,
        argv: List[str],
        config: Optional[Dict[str, Any]] = None,
        seed: Optional[int] = None,
    ) -> Run:
        """Record a run that has just started."""
        run = Run(
            subcommand=subcommand,
            argv=list(argv),
            config=config,
            seed=seed,
            status=RunStatus.running,
        )
        db.add(run)
        db.commit()
        db.refresh(run)
        return run

    @staticmethod
    def get_run(db: Session, run_id: int) -> Optional[Run]:
        """Get a run by ID."""
        return db.query(Run).filter(Run.id == run_id).first()

    @staticmethod
    def finish_run(
        db: Session,
        run_id: int,
        status: RunStatus,
        exit_code: int,
        artifacts: Optional[Dict[str, str]] = None,
        summary: Optional[Dict[str, Any]] = None,
        message: Optional[str] = None,
    ) -> Optional[Run]:
        """Mark a run finished and attach its artifact hashes."""
        run = RunService.get_run(db, run_id)
        if not run:
            return None

        run.status = status
        run.exit_code = exit_code
        run.summary = summary
        run.message = message
        run.finished_at = datetime.utcnow()
        for path, sha in sorted((artifacts or {}).items()):
            run.artifacts.append(Artifact(path=path, sha256=sha))

        db.commit()
        db.refresh(run)
        return run

    @staticmethod
    def list_runs(
        db: Session,
        status: Optional[RunStatus] = None,
        subcommand: Optional[str] = None,
        sort_by: str = 'started_at',
        limit: Optional[int] = None,
    ) -> List[Run]:
        """Get runs with optional filtering and sorting."""
        query = db.query(Run)

        if status:
            query = query.filter(Run.status == status)
        if subcommand:
            query = query.filter(Run.subcommand == subcommand)

        if sort_by == 'subcommand':
            query = query.order_by(Run.subcommand, Run.started_at.desc(), Run.id.desc())
        else:
            # Newest first
            query = query.order_by(Run.started_at.desc(), Run.id.desc())

        if limit:
            query = query.limit(limit)
        return query.all()

    @staticmethod
    def delete_run(db: Session, run_id: int) -> bool:
        """Delete a run and its artifact rows."""
        run = RunService.get_run(db, run_id)
        if not run:
            return False

        db.delete(run)
        db.commit()
        return True
