"""
Synthetic procedural-activity corpus.

Each activity is an ordered script of atomic action segments drawn from a class set
shared across activities. Frame features are a per-class embedding plus Gaussian
noise, so the class of a frame is recoverable but the activity only shows in context.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator
from sklearn.model_selection import train_test_split

from mixant.errors import GrammarError
from mixant.numerics import Rng
from mixant.tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)


class SegmentSpec(BaseModel):
    action: int = Field(..., ge=0)
    min_frames: int = Field(..., ge=1)
    max_frames: int = Field(..., ge=1)
    skip_prob: float = Field(0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _check_range(self):
        if self.min_frames > self.max_frames:
            raise ValueError(f"segment duration range [{self.min_frames}, {self.max_frames}] is empty")
        return self


class ActivitySpec(BaseModel):
    name: str
    segments: List[SegmentSpec] = Field(..., min_length=1)

    @property
    def actions(self) -> List[int]:
        return [segment.action for segment in self.segments]


class ActivityGrammar(BaseModel):
    n_classes: int = Field(..., ge=1)
    n_features: int = Field(..., ge=1)
    feature_noise: float = Field(0.5, ge=0)
    embedding_seed: int = Field(0, ge=0)
    class_names: Optional[List[str]] = None
    activities: List[ActivitySpec]

    @model_validator(mode="after")
    def _check_grammar(self):
        if not self.activities:
            raise ValueError("grammar defines no activities")
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ValueError(f"{len(self.class_names)} class names for {self.n_classes} classes")
        for activity in self.activities:
            if any(action >= self.n_classes for action in activity.actions):
                raise ValueError(f"activity {activity.name!r} uses a class outside [0, {self.n_classes})")
            if len(set(activity.actions)) < 3:
                raise ValueError(f"activity {activity.name!r} needs at least 3 distinct classes")
            if all(segment.skip_prob > 0 for segment in activity.segments):
                raise ValueError(f"activity {activity.name!r} has no mandatory segment")
        if len(self.activities) > 1:
            seen = [set(activity.actions) for activity in self.activities]
            shared = any(seen[i] & seen[j] for i in range(len(seen)) for j in range(i + 1, len(seen)))
            if not shared:
                raise ValueError("no action class is shared between activities")
        return self

    @property
    def n_activities(self) -> int:
        return len(self.activities)

    def class_embeddings(self) -> np.ndarray:
        return Rng(self.embedding_seed, ("class-embeddings",)).normal((self.n_classes, self.n_features))


def build_grammar(payload: dict) -> ActivityGrammar:
    try:
        return ActivityGrammar(**payload)
    except ValidationError as e:
        raise GrammarError(str(e)) from e


def load_grammar(path: Union[str, Path]) -> ActivityGrammar:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise GrammarError(f"cannot read grammar {path}: {e}") from e
    return build_grammar(payload)


def default_grammar(n_features: int = 16, feature_noise: float = 0.5) -> ActivityGrammar:
    """Four kitchen activities over eight shared atomic actions."""
    take, cut, pour, stir, fry, spread, crack, serve = range(8)

    def seg(action, optional=False):
        if optional:
            return {"action": action, "min_frames": 10, "max_frames": 24, "skip_prob": 0.5}
        return {"action": action, "min_frames": 15, "max_frames": 24}

    return build_grammar(
        {
            "n_classes": 8,
            "n_features": n_features,
            "feature_noise": feature_noise,
            "class_names": ["take", "cut", "pour", "stir", "fry", "spread", "crack", "serve"],
            "activities": [
                {"name": "salad", "segments": [seg(take), seg(cut), seg(pour, True), seg(stir), seg(serve)]},
                {"name": "pancake", "segments": [seg(pour), seg(stir), seg(fry), seg(spread, True), seg(serve)]},
                {"name": "sandwich", "segments": [seg(cut), seg(spread), seg(take), seg(fry, True), seg(serve)]},
                {"name": "omelette", "segments": [seg(crack), seg(stir), seg(fry), seg(cut, True), seg(serve)]},
            ],
        }
    )


@dataclass
class Video:
    video_id: str
    activity_id: int
    activity: str
    features: np.ndarray
    labels: np.ndarray

    @property
    def n_frames(self) -> int:
        return int(self.labels.shape[0])

    def transcript(self) -> List[int]:
        """Segment classes in order, one entry per run of equal labels."""
        if self.n_frames == 0:
            return []
        starts = np.flatnonzero(np.diff(self.labels)) + 1
        return [int(self.labels[0])] + [int(self.labels[s]) for s in starts]


def generate_corpus(grammar: ActivityGrammar, n_videos: int, seed: int) -> List[Video]:
    if not grammar.activities:
        raise GrammarError("grammar defines no activities")
    if n_videos < 1:
        raise GrammarError(f"need at least one video, got {n_videos}")
    embeddings = grammar.class_embeddings()
    rng = Rng(seed, ("corpus",))
    videos = []
    for i in range(n_videos):
        video_rng = rng.child(i)
        activity_id = int(video_rng.integers(0, grammar.n_activities))
        activity = grammar.activities[activity_id]
        labels = []
        for segment in activity.segments:
            if segment.skip_prob > 0 and video_rng.random() < segment.skip_prob:
                continue
            labels.extend([segment.action] * int(video_rng.integers(segment.min_frames, segment.max_frames + 1)))
        labels = np.asarray(labels, dtype=np.int64)
        features = embeddings[labels] + grammar.feature_noise * video_rng.normal((labels.size, grammar.n_features))
        videos.append(Video(f"video_{i:04d}", activity_id, activity.name, features, labels))
    logger.info(f"Generated {n_videos} videos over {grammar.n_activities} activities")
    return videos


def save_corpus(videos: List[Video], grammar: ActivityGrammar, out_dir: Union[str, Path]) -> Path:
    """Writes grammar.json, index.csv and one features/labels tensor pair per video."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "grammar.json").write_text(grammar.model_dump_json(indent=2))
    rows = []
    for video in videos:
        save_tensor(out / "features" / f"{video.video_id}.mxt", video.features)
        rows.append(
            {
                "video_id": video.video_id,
                "activity_id": video.activity_id,
                "activity": video.activity,
                "n_frames": video.n_frames,
                "labels": " ".join(str(int(label)) for label in video.labels),
            }
        )
    pd.DataFrame(rows).to_csv(out / "index.csv", index=False)
    logger.info(f"Saved {len(videos)} videos to {out}")
    return out


def load_corpus(data_dir: Union[str, Path]) -> Tuple[ActivityGrammar, List[Video]]:
    data = Path(data_dir)
    index_path = data / "index.csv"
    if not index_path.exists():
        raise GrammarError(f"no corpus index at {index_path}")
    grammar = load_grammar(data / "grammar.json")
    index = pd.read_csv(index_path, dtype={"video_id": str, "labels": str})
    videos = []
    for row in index.itertuples(index=False):
        labels = np.asarray([int(v) for v in row.labels.split()], dtype=np.int64)
        features = load_tensor(data / "features" / f"{row.video_id}.mxt")
        if features.shape[0] != labels.size:
            raise GrammarError(f"{row.video_id}: {features.shape[0]} feature rows for {labels.size} labels")
        videos.append(Video(row.video_id, int(row.activity_id), row.activity, features, labels))
    return grammar, videos


def split_corpus(videos: List[Video], test_fraction: float = 0.2, seed: int = 42) -> Tuple[List[Video], List[Video]]:
    """Held-out split, stratified by activity when every activity has at least two videos."""
    if len(videos) < 2:
        raise GrammarError("need at least two videos to split")
    activity_ids = [video.activity_id for video in videos]
    counts = np.bincount(activity_ids)
    stratify = activity_ids if counts[counts > 0].min() >= 2 else None
    if stratify is None:
        logger.warning("Some activity has a single video; splitting without stratification")
    try:
        train, test = train_test_split(videos, test_size=test_fraction, random_state=seed, stratify=stratify)
    except ValueError:
        logger.warning("Stratified split impossible at this size; splitting without stratification")
        train, test = train_test_split(videos, test_size=test_fraction, random_state=seed)
    return list(train), list(test)
