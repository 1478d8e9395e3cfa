"""Run-ledger operations for DRRNet."""

import json
from datetime import datetime
from pathlib import Path
from typing import Optional

from .metrics import EvalRecord
from .models import EvalEntry, LossEntry, TrainingRun, get_engine, get_session_factory, init_db


class RunRepository:
    """Repository for training runs, their loss logs and evaluation records."""

    def __init__(self, db_path: Optional[Path] = None, engine=None):
        """Open (and create if needed) the ledger database."""
        self.engine = engine if engine is not None else get_engine(db_path)
        init_db(self.engine)
        self._session_factory = get_session_factory(self.engine)

    def get_session(self):
        return self._session_factory()

    def create_run(self, name: str, profile: str, seed: int, config: dict) -> TrainingRun:
        """Record the start of a training run."""
        session = self.get_session()
        try:
            run = TrainingRun(
                name=name,
                profile=profile,
                seed=seed,
                config_json=json.dumps(config, sort_keys=True, default=str),
            )
            session.add(run)
            session.commit()
            session.refresh(run)
            return run
        finally:
            session.close()

    def log_step(self, run_id: int, epoch: int, step: int, lr: float, loss: float, grad_norm: Optional[float]) -> None:
        """Append one loss entry."""
        session = self.get_session()
        try:
            session.add(LossEntry(run_id=run_id, epoch=epoch, step=step, lr=lr, loss=loss, grad_norm=grad_norm))
            session.commit()
        finally:
            session.close()

    def update_progress(self, run_id: int, epochs_completed: int, checkpoint_path: Optional[str]) -> bool:
        """Store the latest completed epoch and its checkpoint."""
        session = self.get_session()
        try:
            run = session.get(TrainingRun, run_id)
            if run is None:
                return False
            run.epochs_completed = epochs_completed
            run.checkpoint_path = checkpoint_path
            session.commit()
            return True
        finally:
            session.close()

    def finish_run(self, run_id: int, checkpoint_path: Optional[str] = None) -> bool:
        """Mark a run as finished."""
        return self._close_run(run_id, "finished", checkpoint_path=checkpoint_path)

    def fail_run(self, run_id: int, error: str) -> bool:
        """Mark a run as failed, keeping its partial loss log."""
        return self._close_run(run_id, "failed", error=error)

    def _close_run(self, run_id: int, status: str, checkpoint_path: Optional[str] = None, error: Optional[str] = None) -> bool:
        session = self.get_session()
        try:
            run = session.get(TrainingRun, run_id)
            if run is None:
                return False
            run.status = status
            run.finished_at = datetime.utcnow()
            if checkpoint_path is not None:
                run.checkpoint_path = checkpoint_path
            if error is not None:
                run.error = error
            session.commit()
            return True
        finally:
            session.close()

    def get_run(self, run_id: int) -> Optional[TrainingRun]:
        """Get a run by ID."""
        session = self.get_session()
        try:
            return session.get(TrainingRun, run_id)
        finally:
            session.close()

    def get_recent_runs(self, limit: int = 10) -> list[TrainingRun]:
        """Most recently started runs first."""
        session = self.get_session()
        try:
            return (
                session.query(TrainingRun)
                .order_by(TrainingRun.started_at.desc(), TrainingRun.id.desc())
                .limit(limit)
                .all()
            )
        finally:
            session.close()

    def get_loss_log(self, run_id: int) -> list[LossEntry]:
        """Loss entries of a run, ordered by step."""
        session = self.get_session()
        try:
            return session.query(LossEntry).filter(LossEntry.run_id == run_id).order_by(LossEntry.step).all()
        finally:
            session.close()

    def add_eval_record(self, record: EvalRecord, pred_dir: str, gt_dir: str, run_id: Optional[int] = None) -> int:
        """Store per-image scores and the aggregate; returns the number of rows written."""
        session = self.get_session()
        try:
            rows = [
                EvalEntry(
                    run_id=run_id,
                    pred_dir=str(pred_dir),
                    gt_dir=str(gt_dir),
                    name=s.name,
                    mae=s.mae,
                    s_alpha=s.s_alpha,
                    e_phi=s.e_phi,
                    f_beta_w=s.f_beta_w,
                )
                for s in [*record.per_image, record.aggregate]
            ]
            session.add_all(rows)
            session.commit()
            return len(rows)
        finally:
            session.close()

    def get_eval_entries(self, pred_dir: Optional[str] = None) -> list[EvalEntry]:
        """Evaluation rows, optionally for one prediction directory."""
        session = self.get_session()
        try:
            query = session.query(EvalEntry)
            if pred_dir is not None:
                query = query.filter(EvalEntry.pred_dir == str(pred_dir))
            return query.order_by(EvalEntry.id).all()
        finally:
            session.close()
