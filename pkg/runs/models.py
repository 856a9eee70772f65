"""
SQLAlchemy models for the run history kept next to the artifacts.
"""
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from sqlalchemy import Column, DateTime, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()


class RunRecord(Base):
    """One executed command."""
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True, autoincrement=True)
    command = Column(String(32), nullable=False, index=True)
    config_hash = Column(String(64), nullable=False, index=True)
    seed = Column(String(24), nullable=False)  # 64-bit seeds overflow sqlite INTEGER
    exit_code = Column(Integer, nullable=True)
    message = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    def __repr__(self):
        return f"<RunRecord(id={self.id}, command={self.command}, exit={self.exit_code})>"


class ArtifactRecord(Base):
    """A file written by a run."""
    __tablename__ = 'artifacts'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey('runs.id'), nullable=False, index=True)
    path = Column(String(255), nullable=False)
    sha256 = Column(String(64), nullable=False)
    rows = Column(Integer, nullable=True)  # None for JSON artifacts
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    def __repr__(self):
        return f"<ArtifactRecord(run={self.run_id}, path={self.path}, rows={self.rows})>"


# Database setup; bound per output directory by init_db
DATABASE_NAME = "runs.db"
engine = None
SessionLocal = None


def database_url(output_dir) -> str:
    return f"sqlite:///{Path(output_dir) / DATABASE_NAME}"


def init_db(output_dir):
    """Bind the engine to <output_dir>/runs.db and create tables."""
    global engine, SessionLocal
    Path(output_dir).mkdir(parents=True, exist_ok=True)
    url = database_url(output_dir)
    if engine is not None and str(engine.url) == url:
        return
    if engine is not None:
        engine.dispose()
    engine = create_engine(
        url,
        connect_args={"check_same_thread": False},  # Needed for SQLite
        echo=False
    )
    SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    Base.metadata.create_all(bind=engine)
    logger.debug(f"Run history database ready at {url}")


def get_db():
    """Get database session."""
    if SessionLocal is None:
        raise RuntimeError("init_db must be called before get_db")
    session = SessionLocal()
    try:
        return session
    except Exception as e:
        session.close()
        logger.error(f"Failed to create database session: {e}")
        raise


def start_run(command: str, config_hash: str, seed: int) -> int:
    """Insert a RunRecord without an exit code and return its id."""
    session = get_db()
    try:
        record = RunRecord(command=command, config_hash=config_hash, seed=str(seed))
        session.add(record)
        session.commit()
        return int(record.id)
    finally:
        session.close()


def finish_run(run_id: int, exit_code: int, message: Optional[str] = None,
               artifacts: Optional[List[dict]] = None):
    """Stamp the exit code and register the artifacts of a run."""
    session = get_db()
    try:
        record = session.get(RunRecord, run_id)
        if record is None:
            logger.error(f"Run {run_id} not found in history")
            return
        record.exit_code = exit_code
        record.message = message
        for entry in artifacts or []:
            session.add(ArtifactRecord(run_id=run_id, path=entry["file"], sha256=entry["sha256"],
                                       rows=entry.get("rows")))
        session.commit()
    except Exception as e:
        session.rollback()
        logger.error(f"Failed to record run {run_id}: {e}")
    finally:
        session.close()


def artifact_hashes() -> Dict[str, dict]:
    """Latest record per artifact file, with the config hash of the run that wrote it."""
    session = get_db()
    try:
        rows = (session.query(ArtifactRecord, RunRecord)
                .join(RunRecord, ArtifactRecord.run_id == RunRecord.id)
                .order_by(ArtifactRecord.id).all())
        return {a.path: {"config_hash": r.config_hash, "run_id": r.id} for a, r in rows}
    finally:
        session.close()


def run_history() -> List[dict]:
    """All recorded runs ordered by id, without timestamps."""
    session = get_db()
    try:
        rows = session.query(RunRecord).order_by(RunRecord.id).all()
        return [{"id": r.id, "command": r.command, "config_hash": r.config_hash,
                 "seed": r.seed, "exit_code": r.exit_code} for r in rows]
    finally:
        session.close()
