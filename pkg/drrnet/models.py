"""Database models for the DRRNet run ledger."""

from datetime import datetime
from pathlib import Path
from typing import Optional

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

Base = declarative_base()


class TrainingRun(Base):
    """One invocation of `train`."""

    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    name = Column(String(200), nullable=False)
    profile = Column(String(20), nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    config_json = Column(Text, nullable=False)  # TrainConfig snapshot
    status = Column(String(20), default="running", nullable=False)  # running/finished/failed
    epochs_completed = Column(Integer, default=0, nullable=False)
    checkpoint_path = Column(String(1000), nullable=True)
    error = Column(Text, nullable=True)
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    losses = relationship("LossEntry", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<TrainingRun(id={self.id}, name='{self.name}', status='{self.status}')>"

    @property
    def duration_seconds(self) -> Optional[float]:
        """Wall-clock time of a finished run."""
        if self.started_at is None or self.finished_at is None:
            return None
        return (self.finished_at - self.started_at).total_seconds()


class LossEntry(Base):
    """Total loss at one optimizer step."""

    __tablename__ = "loss_entries"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), nullable=False, index=True)
    epoch = Column(Integer, nullable=False)
    step = Column(Integer, nullable=False)
    lr = Column(Float, nullable=False)
    loss = Column(Float, nullable=False)
    grad_norm = Column(Float, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("TrainingRun", back_populates="losses")

    def __repr__(self):
        return f"<LossEntry(run={self.run_id}, step={self.step}, loss={self.loss:.4f})>"


class EvalEntry(Base):
    """Scores of one image, or the dataset aggregate when name is AGGREGATE."""

    __tablename__ = "eval_entries"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), nullable=True, index=True)
    pred_dir = Column(String(1000), nullable=False)
    gt_dir = Column(String(1000), nullable=False)
    name = Column(String(500), nullable=False)
    mae = Column(Float, nullable=False)
    s_alpha = Column(Float, nullable=False)
    e_phi = Column(Float, nullable=False)
    f_beta_w = Column(Float, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)

    def __repr__(self):
        return f"<EvalEntry(name='{self.name}', mae={self.mae:.4f})>"


def get_database_path() -> Path:
    """Get the default ledger path in the user's data directory."""
    data_dir = Path.home() / ".local" / "share" / "drrnet"
    data_dir.mkdir(parents=True, exist_ok=True)
    return data_dir / "runs.db"


def get_engine(db_path: Optional[Path] = None):
    """Create and return a database engine for the ledger."""
    db_path = Path(db_path) if db_path is not None else get_database_path()
    db_path.parent.mkdir(parents=True, exist_ok=True)
    return create_engine(f"sqlite:///{db_path}", echo=False)


def get_session_factory(engine):
    return sessionmaker(bind=engine, expire_on_commit=False)


def init_db(engine) -> None:
    """Create the ledger tables if they do not exist."""
    Base.metadata.create_all(engine)
