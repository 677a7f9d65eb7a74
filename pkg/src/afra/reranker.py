"""From scores to recommendation lists: availability filter, serving modes,
top-k with id tie-break, and age-decay re-ranking."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import Context, DataError, Interaction
from .embedder import CatalogIndex

DEFAULT_HALF_LIFE = 21.0
RERANK_MODES = ("none", "decay", "age-feature")


class ServingMode(str, enum.Enum):
    RT = "rt"
    BATCH = "batch"


@dataclass
class RecommendationList:
    items: np.ndarray     # catalog ids, best first
    scores: np.ndarray
    ages: np.ndarray      # whole days since creation, at the serving day
    creators: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def top(self, k: int) -> "RecommendationList":
        return RecommendationList(self.items[:k], self.scores[:k], self.ages[:k], self.creators[:k])

    def to_json(self) -> list[dict]:
        return [{"id": int(i), "score": float(s), "age_days": int(a), "creator": int(c)}
                for i, s, a, c in zip(self.items, self.scores, self.ages, self.creators)]


def fed_history(history: Sequence[Interaction], mode: ServingMode | str, serving_day: int) -> list[Interaction]:
    """RT sees everything before the visit; Batch only what happened before the serving day."""
    if ServingMode(mode) is ServingMode.BATCH:
        return [x for x in history if x.day < serving_day]
    return list(history)


def item_ages(index: CatalogIndex, item_ids, serving_day: int) -> np.ndarray:
    age = serving_day - index.created_day[np.asarray(item_ids, dtype=np.int64)]
    if np.any(age < 0):
        raise DataError("item created after the serving day")
    return age


def decay_weights(ages, half_life: float) -> np.ndarray:
    if not half_life > 0:
        raise ValueError("half_life must be positive")
    ages = np.asarray(ages, dtype=np.float64)
    if np.any(ages < 0):
        raise DataError("negative item age")
    return 0.5 ** (ages / half_life)


def _ordering(scores: np.ndarray, ids: np.ndarray, secondary: np.ndarray | None) -> np.ndarray:
    """Row-wise order: score desc, then secondary desc, then id asc."""
    keys = [np.broadcast_to(ids, scores.shape)]
    if secondary is not None:
        keys.append(-np.broadcast_to(secondary, scores.shape))
    keys.append(-scores)
    return np.lexsort(keys, axis=-1)


def rank_scores(scores: np.ndarray, index: CatalogIndex, serving_day: int, k: int,
                half_life: float | None = None, exclude: np.ndarray | None = None,
                secondary: np.ndarray | None = None) -> list[RecommendationList]:
    """Top-k lists from (B, n_targets) scores over the target vocabulary.

    Only available target items are eligible; ``exclude`` is an optional (B,
    n_targets) boolean mask of further ineligible items. Decay, when set, weights
    every candidate before the cut."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    ids = index.target_items
    ages = item_ages(index, ids, serving_day)
    if half_life is not None:
        scores = scores * decay_weights(ages, half_life)
    eligible = np.broadcast_to(index.available[ids], scores.shape)
    if exclude is not None:
        eligible = eligible & ~exclude
    order = _ordering(np.where(eligible, scores, -np.inf), ids, secondary)
    out = []
    for row in range(scores.shape[0]):
        o = order[row]
        o = o[eligible[row, o]][:k]
        out.append(RecommendationList(ids[o], scores[row, o], ages[o], index.creator[ids[o]]))
    return out


def age_decay_rerank(lst: RecommendationList, ages, half_life_days: float = DEFAULT_HALF_LIFE) -> RecommendationList:
    """score' = score * 0.5**(age / half_life), re-sorted (ties by ascending id)."""
    ages = np.asarray(ages)
    new = lst.scores * decay_weights(ages, half_life_days)
    o = np.lexsort((lst.items, -new))
    return RecommendationList(lst.items[o], new[o], lst.ages[o], lst.creators[o])


def recommend(history: Sequence[Interaction], context: Context, model, mode: ServingMode | str, k: int,
              serving_day: int, half_life: float | None = None) -> RecommendationList:
    """Top-k available target items for one user visit."""
    fed = fed_history(history, mode, serving_day)
    probs = model.predict_next([fed], [context], serving_day)
    return rank_scores(probs, model.index, serving_day, k, half_life)[0]


def write_recommendations(path: str | Path, rows: Iterable[tuple[int, int, str, RecommendationList]]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for user, day, mode, lst in rows:
            f.write(json.dumps({"user": int(user), "day": int(day), "mode": str(ServingMode(mode).value),
                                "items": lst.to_json()}) + "\n")
    tmp.replace(path)


class ModelRecommender:
    """Evaluation adapter: a trained model under a serving mode and re-rank policy."""

    def __init__(self, model, mode: ServingMode | str = ServingMode.RT, rerank: str = "none",
                 half_life: float = DEFAULT_HALF_LIFE, batch_size: int = 256):
        if rerank not in RERANK_MODES:
            raise ValueError(f"unknown rerank {rerank!r}; expected one of {', '.join(RERANK_MODES)}")
        if rerank == "age-feature" and not model.config.embedder.age_feature:
            raise ValueError("rerank 'age-feature' needs a model trained with the age feature")
        self.model = model
        self.mode = ServingMode(mode)
        self.half_life = half_life if rerank == "decay" else None
        self.batch_size = batch_size

    def recommend_cases(self, cases, k: int) -> list[RecommendationList]:
        out: list[RecommendationList | None] = [None] * len(cases)
        order = sorted(range(len(cases)), key=lambda i: cases[i].day)
        for lo in range(0, len(order), self.batch_size):
            idx = order[lo:lo + self.batch_size]
            for day in sorted({cases[i].day for i in idx}):
                sel = [i for i in idx if cases[i].day == day]
                hist = [fed_history(cases[i].history, self.mode, day) for i in sel]
                probs = self.model.predict_next(hist, [cases[i].context for i in sel], day)
                for i, lst in zip(sel, rank_scores(probs, self.model.index, day, k, self.half_life)):
                    out[i] = lst
        return out
