from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from mixant.database import Base


def _now():
    return datetime.now(timezone.utc)


class TrainingRun(Base):
    """A trained checkpoint with the hyperparameters that matter for comparisons and its final losses."""

    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, index=True)
    name = Column(String, unique=True, nullable=False)
    checkpoint_dir = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    n_experts = Column(Integer, nullable=False)
    n_static_blocks = Column(Integer, nullable=False)
    router_mode = Column(String, nullable=False)
    lambda_lb = Column(Float, nullable=False)
    final_rec_loss = Column(Float, nullable=False)
    final_lb_loss = Column(Float, nullable=False)
    epochs = Column(Integer, nullable=False)
    config_json = Column(Text, nullable=False)
    created_at = Column(DateTime, default=_now, nullable=False)

    # Relationship to Evaluation
    evaluations = relationship("Evaluation", order_by="Evaluation.id", back_populates="run")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "checkpoint_dir": self.checkpoint_dir,
            "seed": self.seed,
            "n_experts": self.n_experts,
            "n_static_blocks": self.n_static_blocks,
            "router_mode": self.router_mode,
            "lambda_lb": self.lambda_lb,
            "final_rec_loss": self.final_rec_loss,
            "final_lb_loss": self.final_lb_loss,
            "epochs": self.epochs,
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }


class Evaluation(Base):
    """Mean and Top-1 MoC of one run at one (alpha, beta)."""

    __tablename__ = "evaluations"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), nullable=False)
    alpha = Column(Float, nullable=False)
    beta = Column(Float, nullable=False)
    samples = Column(Integer, nullable=False)
    mean_moc = Column(Float, nullable=False)
    top1_moc = Column(Float, nullable=False)
    created_at = Column(DateTime, default=_now, nullable=False)

    # Relationship to TrainingRun
    run = relationship("TrainingRun", back_populates="evaluations")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "run_id": self.run_id,
            "alpha": self.alpha,
            "beta": self.beta,
            "samples": self.samples,
            "mean_moc": self.mean_moc,
            "top1_moc": self.top1_moc,
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }
