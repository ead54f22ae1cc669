from functools import lru_cache
from typing import Iterator, Optional
import os
import logging

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

logger = logging.getLogger(__name__)

# SQLite file in the working directory unless VGIB_DATABASE_URL says otherwise
DEFAULT_DATABASE_URL = "sqlite:///./vgib_runs.db"


def database_url() -> str:
    """Registry location, read at call time so tests and scripts can redirect it."""
    return os.getenv("VGIB_DATABASE_URL", DEFAULT_DATABASE_URL)


@lru_cache(maxsize=8)
def get_engine(url: str) -> Engine:
    connect_args = {}
    engine_kwargs = {}

    if "sqlite" in url:
        # One CLI process writes at a time; concurrent runs each open their own connection
        connect_args = {"check_same_thread": False, "timeout": 30}
    else:
        engine_kwargs["pool_pre_ping"] = True

    logger.debug(f"Opening run registry at {url}")
    return create_engine(url, connect_args=connect_args, **engine_kwargs)


def get_session_factory(url: Optional[str] = None) -> sessionmaker:
    return sessionmaker(autocommit=False, autoflush=False, bind=get_engine(url or database_url()))


def get_db(url: Optional[str] = None) -> Iterator[Session]:
    db = get_session_factory(url)()
    try:
        yield db
    finally:
        db.close()


def init_db(url: Optional[str] = None) -> None:
    """Create all registry tables"""
    from .models import Base
    Base.metadata.create_all(bind=get_engine(url or database_url()))
