import logging
import math
from typing import List, Optional

from sqlalchemy.orm import Session

from mixant import models
from mixant.config import ModelConfig
from mixant.metrics import MoCReport

logger = logging.getLogger(__name__)


class RunManager:
    def __init__(self, db: Session):
        self.db = db

    def record_run(
        self,
        name: str,
        checkpoint_dir: str,
        config: ModelConfig,
        seed: int,
        final_rec_loss: float,
        final_lb_loss: float,
    ) -> models.TrainingRun:
        """
        Register a trained checkpoint. Re-using a name replaces the earlier record and
        drops its evaluations.
        """
        run = self.get_run_by_name(name)
        if run:
            logger.warning(f"Run {name!r} already registered, replacing it.")
            for evaluation in list(run.evaluations):
                self.db.delete(evaluation)
        else:
            run = models.TrainingRun(name=name)
            self.db.add(run)
        run.checkpoint_dir = str(checkpoint_dir)
        run.seed = seed
        run.n_experts = config.n_experts
        run.n_static_blocks = config.n_static_blocks
        run.router_mode = config.router_mode
        run.lambda_lb = config.lambda_lb
        run.final_rec_loss = final_rec_loss
        run.final_lb_loss = final_lb_loss
        run.epochs = config.epochs
        run.config_json = config.model_dump_json()
        self.db.commit()
        self.db.refresh(run)
        return run

    def record_evaluation(
        self, run_id: int, alpha: float, beta: float, samples: int, mean_moc: float, top1_moc: float
    ) -> Optional[models.Evaluation]:
        if not self.get_run(run_id):
            logger.warning(f"No run with ID {run_id}, evaluation not recorded.")
            return None
        evaluation = models.Evaluation(
            run_id=run_id, alpha=alpha, beta=beta, samples=samples, mean_moc=mean_moc, top1_moc=top1_moc
        )
        self.db.add(evaluation)
        self.db.commit()
        self.db.refresh(evaluation)
        return evaluation

    def record_report(self, run_id: int, report: MoCReport) -> List[models.Evaluation]:
        """One evaluation row per (alpha, beta) of the report."""
        recorded = []
        for result in report.results:
            evaluation = self.record_evaluation(
                run_id, result.alpha, result.beta, report.samples, result.mean_moc, result.top1_moc
            )
            if evaluation:
                recorded.append(evaluation)
        return recorded

    def get_run(self, run_id: int) -> Optional[models.TrainingRun]:
        return self.db.query(models.TrainingRun).filter(models.TrainingRun.id == run_id).first()

    def get_run_by_name(self, name: str) -> Optional[models.TrainingRun]:
        return self.db.query(models.TrainingRun).filter(models.TrainingRun.name == name).first()

    def list_runs(self) -> List[models.TrainingRun]:
        return self.db.query(models.TrainingRun).order_by(models.TrainingRun.id).all()

    def get_evaluations(self, run_id: int) -> List[models.Evaluation]:
        return (
            self.db.query(models.Evaluation)
            .filter(models.Evaluation.run_id == run_id)
            .order_by(models.Evaluation.id)
            .all()
        )

    def best_evaluation(self, alpha: float, beta: float) -> Optional[models.Evaluation]:
        """Highest Top-1 MoC recorded at (alpha, beta); ties keep the earliest record."""
        best = None
        for evaluation in self.db.query(models.Evaluation).order_by(models.Evaluation.id).all():
            if not (math.isclose(evaluation.alpha, alpha) and math.isclose(evaluation.beta, beta)):
                continue
            if best is None or evaluation.top1_moc > best.top1_moc:
                best = evaluation
        return best
