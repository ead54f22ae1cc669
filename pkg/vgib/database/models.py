from sqlalchemy import Column, Integer, String, Text, DateTime, ForeignKey, Enum, JSON
from sqlalchemy.orm import declarative_base, relationship
from datetime import datetime
import enum

Base = declarative_base()


class RunStatus(str, enum.Enum):
    running = "running"
    succeeded = "succeeded"
    failed = "failed"
    rejected = "rejected"


class Run(Base):
    __tablename__ = 'run'

    id = Column(Integer, primary_key=True, index=True)
    subcommand = Column(String(32), nullable=False, index=True)
    status = Column(Enum(RunStatus), default=RunStatus.running, index=True)
    seed = Column(Integer, nullable=True)
    config = Column(JSON, nullable=True)
    argv = Column(JSON, nullable=False)
    summary = Column(JSON, nullable=True)
    message = Column(Text, nullable=True)  # error message for failed or rejected runs
    exit_code = Column(Integer, nullable=True)
    started_at = Column(DateTime, default=datetime.utcnow, index=True)
    finished_at = Column(DateTime, nullable=True)

    # Relationships
    artifacts = relationship(
        "Artifact",
        back_populates="run",
        cascade="all, delete-orphan",
        order_by="Artifact.path",
    )


class Artifact(Base):
    __tablename__ = 'artifact'

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey('run.id'), nullable=False, index=True)
    path = Column(String(1024), nullable=False)
    sha256 = Column(String(64), nullable=False)

    # Relationships
    run = relationship("Run", back_populates="artifacts")
