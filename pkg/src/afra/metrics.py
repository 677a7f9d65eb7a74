"""Offline evaluation: relevance at k, freshness, inter-list and temporal diversity."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .datamodel import SEGMENTS, Context, EntityType, Interaction, TestView, segment_of
from .reranker import RecommendationList

DEFAULT_KS = (5, 15, 30)
RELEVANCE = ("recall", "precision", "hitrate", "ndcg", "map")
METRICS = RELEVANCE + ("freshness", "inter_list_diversity", "temporal_diversity")
ALL = "all"


# ---------------------------------------------------------------------------
# per-list measures


def _hits(items, targets, k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    targets = set(int(t) for t in targets)
    if not targets:
        raise ValueError("empty target set")
    return np.array([int(i) in targets for i in list(items)[:k]], dtype=bool)


def recall_at_k(items, targets, k: int) -> float:
    return float(_hits(items, targets, k).sum()) / len(set(targets))


def precision_at_k(items, targets, k: int) -> float:
    return float(_hits(items, targets, k).sum()) / k


def hitrate_at_k(items, targets, k: int) -> float:
    return float(_hits(items, targets, k).any())


def ndcg_at_k(items, targets, k: int) -> float:
    """Binary gains, log2 discount; ideal DCG over min(|T|, k) hits."""
    hits = _hits(items, targets, k)
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    ideal = disc[:min(len(set(targets)), k)].sum()
    return float(disc[:len(hits)][hits].sum() / ideal)


def map_at_k(items, targets, k: int) -> float:
    """Mean of precision@rank over hit ranks, normalized by min(|T|, k)."""
    hits = _hits(items, targets, k)
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(prec[hits].sum() / min(len(set(targets)), k))


RELEVANCE_FNS = {"recall": recall_at_k, "precision": precision_at_k, "hitrate": hitrate_at_k,
                 "ndcg": ndcg_at_k, "map": map_at_k}


def freshness_at_k(ages, k: int) -> float:
    """Mean age in days over the first min(k, len) items."""
    a = np.asarray(ages, dtype=np.float64)[:k]
    return float(a.mean()) if len(a) else math.nan


def inter_list_diversity(creators, k: int) -> int:
    """Longest run of equal consecutive creators within the top k."""
    c = np.asarray(creators)[:k]
    if len(c) == 0:
        return 0
    starts = np.flatnonzero(np.concatenate([[True], c[1:] != c[:-1], [True]]))
    return int(np.diff(starts).max())


def temporal_diversity(items_a, items_b, k: int) -> float:
    """1 - |top-k(a) & top-k(b)| / k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    a = set(int(i) for i in list(items_a)[:k])
    b = set(int(i) for i in list(items_b)[:k])
    return 1.0 - len(a & b) / k


# ---------------------------------------------------------------------------
# evaluation protocol


@dataclass(frozen=True)
class EvalCase:
    user: int
    context: Context
    history: tuple[Interaction, ...]   # everything before this visit; modes filter it
    targets: tuple[int, ...]
    segment: str
    day: int
    visit: int


def build_eval_cases(view: TestView, target_entity: str = "outfit") -> list[EvalCase]:
    """One case per test-period target-entity event, history advanced past earlier events."""
    target = EntityType(target_entity)
    cases = []
    for tu in view.users:
        segment = segment_of(tu.history, view.catalog)
        seen = list(tu.history)
        visit = 0
        for x in tu.targets:
            item = view.catalog[x.item]
            if item.entity is target and item.available:
                cases.append(EvalCase(tu.user, tu.context, tuple(seen), (x.item,), segment, x.day, visit))
                visit += 1
            seen.append(x)
    return cases


class Recommender(Protocol):
    def recommend_cases(self, cases: Sequence[EvalCase], k: int) -> list[RecommendationList]: ...


@dataclass
class MetricReport:
    ks: tuple[int, ...]
    values: dict[tuple[str, int, str], float]
    counts: dict[str, int]
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def get(self, metric: str, k: int, segment: str = ALL) -> float:
        return self.values[(metric, k, segment)]

    def rows(self) -> list[tuple[str, int, str, float]]:
        segs = (ALL,) + SEGMENTS
        return [(m, k, s, self.values[(m, k, s)]) for m in METRICS for k in self.ks for s in segs]

    def to_json(self) -> dict:
        return {
            "ks": list(self.ks),
            "counts": self.counts,
            "skipped": self.skipped,
            "meta": self.meta,
            "metrics": [{"metric": m, "k": k, "segment": s, "value": None if math.isnan(v) else v}
                        for m, k, s, v in self.rows()],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "k", "segment", "value"])
        for m, k, s, v in self.rows():
            w.writerow([m, k, s, "" if math.isnan(v) else repr(v)])
        return buf.getvalue()

    def write(self, path: str | Path) -> tuple[Path, Path]:
        """Writes ``path`` (JSON) and the same stem with .csv, atomically."""
        path = Path(path)
        js = path if path.suffix == ".json" else path.with_suffix(".json")
        cs = js.with_suffix(".csv")
        for p, text in ((js, json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"), (cs, self.to_csv())):
            tmp = p.with_name(p.name + ".tmp")
            tmp.write_text(text, encoding="utf-8")
            tmp.replace(p)
        return js, cs

    @classmethod
    def from_json(cls, doc: dict) -> "MetricReport":
        values = {(r["metric"], r["k"], r["segment"]): math.nan if r["value"] is None else r["value"]
                  for r in doc["metrics"]}
        return cls(tuple(doc["ks"]), values, doc["counts"], doc.get("skipped", 0), doc.get("meta", {}))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("AFRA_THREADS", "1")))
    except ValueError:
        return 1


def run_recommender(rec: Recommender, cases: Sequence[EvalCase], k: int, chunk: int = 512) -> list[RecommendationList]:
    parts = [cases[i:i + chunk] for i in range(0, len(cases), chunk)]
    n = _threads()
    if n == 1 or len(parts) < 2:
        results = [rec.recommend_cases(p, k) for p in parts]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(lambda p: rec.recommend_cases(p, k), parts))
    return [lst for r in results for lst in r]


def evaluate(rec: Recommender, cases: Sequence[EvalCase], ks: Sequence[int] = DEFAULT_KS,
             meta: dict | None = None) -> MetricReport:
    """Per-segment and overall means of every metric at every k."""
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive")
    kept = [c for c in cases if c.targets]
    skipped = len(cases) - len(kept)
    lists = run_recommender(rec, kept, max(ks))
    segs = (ALL,) + SEGMENTS
    sums: dict[tuple[str, int, str], list[float]] = defaultdict(list)
    for case, lst in zip(kept, lists):
        for k in ks:
            vals = {name: fn(lst.items, case.targets, k) for name, fn in RELEVANCE_FNS.items()}
            vals["freshness"] = freshness_at_k(lst.ages, k)
            vals["inter_list_diversity"] = float(inter_list_diversity(lst.creators, k))
            for name, v in vals.items():
                if not math.isnan(v):
                    sums[(name, k, ALL)].append(v)
                    sums[(name, k, case.segment)].append(v)
    # consecutive visits of one user form the temporal-diversity pairs
    by_user: dict[int, list[tuple[int, RecommendationList, str]]] = defaultdict(list)
    for case, lst in zip(kept, lists):
        by_user[case.user].append((case.visit, lst, case.segment))
    for user in sorted(by_user):
        visits = sorted(by_user[user], key=lambda v: v[0])
        for (_, a, seg), (_, b, _) in zip(visits, visits[1:]):
            if len(a) and len(b):
                for k in ks:
                    v = temporal_diversity(a.items, b.items, k)
                    sums[("temporal_diversity", k, ALL)].append(v)
                    sums[("temporal_diversity", k, seg)].append(v)
    values = {}
    for m in METRICS:
        for k in ks:
            for s in segs:
                xs = sums.get((m, k, s))
                values[(m, k, s)] = math.fsum(xs) / len(xs) if xs else math.nan
    counts = {s: 0 for s in segs}
    for c in kept:
        counts[ALL] += 1
        counts[c.segment] += 1
    return MetricReport(ks, values, counts, skipped, dict(meta or {}))
