"""
Dense anticipation evaluation: Mean over Classes accuracy on the anticipated frames,
the alpha/beta protocol with Mean and Top-1 MoC over S samples, and the per-sequence
expert-selection export with its nearest-centroid activity classifier.
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel
from sklearn.metrics import accuracy_score
from sklearn.model_selection import train_test_split
from sklearn.neighbors import NearestCentroid

from mixant.config import EvalConfig
from mixant.corpus import Video
from mixant.diffusion import Anticipation, ConditioningTensor, build_conditioning
from mixant.errors import EvaluationError, ShapeError
from mixant.numerics import Rng
from mixant.router import hard_usage, record_selection, usage_kl

logger = logging.getLogger(__name__)

# Guards floor(alpha * n) against products like 0.3 * 60 = 17.999999999999996.
_RATIO_EPS = 1e-9


def moc(predicted: Sequence[int], ground_truth: Sequence[int]) -> float:
    """Mean over the classes present in `ground_truth` of per-class frame accuracy, in percent."""
    predicted, ground_truth = np.asarray(predicted), np.asarray(ground_truth)
    if predicted.shape != ground_truth.shape:
        raise ShapeError(f"prediction has {predicted.shape} frames, ground truth {ground_truth.shape}")
    if ground_truth.size == 0:
        raise EvaluationError("cannot score an empty anticipation window")
    accuracies = [np.mean(predicted[ground_truth == c] == c) for c in np.unique(ground_truth)]
    return float(np.mean(accuracies) * 100.0)


def class_tallies(predicted: np.ndarray, ground_truth: np.ndarray) -> Dict[int, Tuple[int, int]]:
    return {
        int(c): (int(np.sum(predicted[ground_truth == c] == c)), int(np.sum(ground_truth == c)))
        for c in np.unique(ground_truth)
    }


def window(n_frames: int, alpha: float, beta: float) -> Tuple[int, int]:
    """P = floor(alpha n_v), F = floor(beta n_v) for one video."""
    observed = int(math.floor(alpha * n_frames + _RATIO_EPS))
    horizon = int(math.floor(beta * n_frames + _RATIO_EPS))
    if observed < 1 or horizon < 1 or observed + horizon > n_frames:
        raise EvaluationError(
            f"video of {n_frames} frames cannot hold alpha={alpha}, beta={beta} (P={observed}, F={horizon})"
        )
    return observed, horizon


class Anticipator(Protocol):
    def sample(self, cond: ConditioningTensor, rng: Rng) -> Anticipation:
        ...


def sample_rng(seed: int, video_index: int, sample_index: int) -> Rng:
    return Rng(seed, ("sample", video_index, sample_index))


class VideoScore(BaseModel):
    video_id: str
    mean_moc: float
    top1_moc: float
    best_sample: int


class RatioResult(BaseModel):
    alpha: float
    beta: float
    mean_moc: float
    top1_moc: float
    n_videos: int
    per_class_accuracy: Dict[str, float]
    videos: List[VideoScore]


class MoCReport(BaseModel):
    samples: int
    seed: int
    results: List[RatioResult]
    expert_usage: List[List[int]]
    usage_kl: float

    def result(self, alpha: float, beta: float) -> RatioResult:
        for entry in self.results:
            if math.isclose(entry.alpha, alpha) and math.isclose(entry.beta, beta):
                return entry
        raise EvaluationError(f"report holds no entry for alpha={alpha}, beta={beta}")


@dataclass
class _VideoOutcome:
    mocs: List[float]
    tallies: Dict[int, Tuple[int, int]]
    selections: List[List[int]]


def _score_video(
    anticipator: Anticipator, video: Video, video_index: int, alpha: float, beta: float, samples: int, seed: int
) -> _VideoOutcome:
    observed, horizon = window(video.n_frames, alpha, beta)
    cond = build_conditioning(video.features[:observed], horizon)
    future = video.labels[observed: observed + horizon]
    mocs, selections = [], []
    tallies: Dict[int, List[int]] = defaultdict(lambda: [0, 0])
    for s in range(samples):
        result = anticipator.sample(cond, sample_rng(seed, video_index, s))
        predicted = np.argmax(result.scores[observed: observed + horizon], axis=1)
        mocs.append(moc(predicted, future))
        for c, (correct, total) in class_tallies(predicted, future).items():
            tallies[c][0] += correct
            tallies[c][1] += total
        selections.append(list(result.selections))
    return _VideoOutcome(mocs, {c: (v[0], v[1]) for c, v in tallies.items()}, selections)


def evaluate(anticipator: Anticipator, videos: List[Video], config: EvalConfig, n_experts: int = 1) -> MoCReport:
    """
    S samples per video and (alpha, beta). A video's Mean MoC averages its S per-sample
    scores and its Top-1 MoC takes the best one; both are then averaged over videos.
    """
    if not videos:
        raise EvaluationError("no videos to evaluate")
    results, all_selections = [], []
    for alpha in config.alphas:
        for beta in config.betas:
            jobs = (
                delayed(_score_video)(anticipator, video, i, alpha, beta, config.samples, config.seed)
                for i, video in enumerate(videos)
            )
            outcomes = Parallel(n_jobs=config.n_jobs)(jobs)
            scores, class_totals = [], defaultdict(lambda: [0, 0])
            for video, outcome in zip(videos, outcomes):
                best = int(np.argmax(outcome.mocs))
                scores.append(VideoScore(
                    video_id=video.video_id,
                    mean_moc=float(np.mean(outcome.mocs)),
                    top1_moc=float(outcome.mocs[best]),
                    best_sample=best,
                ))
                for c, (correct, total) in outcome.tallies.items():
                    class_totals[c][0] += correct
                    class_totals[c][1] += total
                all_selections.extend(s for s in outcome.selections if s)
            result = RatioResult(
                alpha=alpha,
                beta=beta,
                mean_moc=float(np.mean([s.mean_moc for s in scores])),
                top1_moc=float(np.mean([s.top1_moc for s in scores])),
                n_videos=len(scores),
                per_class_accuracy={str(c): 100.0 * v[0] / v[1] for c, v in sorted(class_totals.items())},
                videos=scores,
            )
            logger.info(
                f"alpha={alpha} beta={beta}: mean MoC {result.mean_moc:.2f}, top-1 MoC {result.top1_moc:.2f} "
                f"over {result.n_videos} videos"
            )
            results.append(result)
    counts = hard_usage(all_selections, n_experts) if all_selections else np.zeros((0, n_experts), dtype=np.int64)
    return MoCReport(
        samples=config.samples,
        seed=config.seed,
        results=results,
        expert_usage=counts.tolist(),
        usage_kl=usage_kl(counts),
    )


def collect_selections(
    anticipator: Anticipator, videos: List[Video], n_experts: int, alpha: float = 0.2, beta: float = 0.1, seed: int = 0
) -> pd.DataFrame:
    """
    One row per video: id, activity and the flattened selection matrix of the final
    denoising call of its first sample.
    """
    rows = []
    for i, video in enumerate(videos):
        observed, horizon = window(video.n_frames, alpha, beta)
        result = anticipator.sample(build_conditioning(video.features[:observed], horizon), sample_rng(seed, i, 0))
        if not result.selections:
            raise EvaluationError("model has no mixture blocks; nothing to inspect")
        matrix = record_selection(result.selections, n_experts)
        row = {"sequence_id": video.video_id, "activity_label": video.activity}
        for k in range(matrix.n_blocks):
            for e in range(matrix.n_experts):
                row[f"s_{k}_{e}"] = int(matrix.matrix[k, e])
        rows.append(row)
    return pd.DataFrame(rows)


def probe_selections(selections: pd.DataFrame, test_fraction: float = 0.3, seed: int = 42) -> Dict[str, float]:
    """Held-out nearest-centroid accuracy of the activity label from selection vectors."""
    columns = [c for c in selections.columns if c.startswith("s_")]
    if not columns:
        raise EvaluationError("selection table has no s_<block>_<expert> columns")
    labels = selections["activity_label"].astype(str).to_numpy()
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise EvaluationError("the selection classifier needs at least two activity labels")
    X = selections[columns].to_numpy(dtype=np.float64)
    stratify = labels if counts.min() >= 2 else None
    try:
        X_train, X_test, y_train, y_test = train_test_split(
            X, labels, test_size=test_fraction, random_state=seed, stratify=stratify
        )
    except ValueError as e:
        raise EvaluationError(f"cannot split {len(labels)} selections: {e}") from e
    classifier = NearestCentroid()
    classifier.fit(X_train, y_train)
    accuracy = float(accuracy_score(y_test, classifier.predict(X_test)) * 100.0)
    chance = 100.0 / classes.size
    logger.info(f"Selection classifier: {accuracy:.1f}% held-out accuracy, chance {chance:.1f}%")
    return {"accuracy": accuracy, "chance": chance, "n_train": int(len(y_train)), "n_test": int(len(y_test))}
