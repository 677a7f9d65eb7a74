"""Comparison rankers: popularity, item-based CF-kNN, article-embedding kNN,
and the IDs-only transformer configuration."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .datamodel import ARTICLE_FEATURES, EntityType, Item, TrainView
from .embedder import CatalogIndex, embed_items
from .encoder import sasrec_config  # re-exported: the IDs-only variant
from .reranker import RecommendationList, ServingMode, fed_history, rank_scores

BASELINES = ("popularity", "cf-knn", "embedding-knn")


def popularity_counts(view: TrainView, index: CatalogIndex) -> np.ndarray:
    """Training-window interaction count per target item."""
    counts = np.zeros(index.n_targets)
    for s in view.sequences:
        for x in s.interactions:
            t = index.target_index[x.item]
            if t >= 0:
                counts[t] += 1
    return counts


def popularity_rank(view: TrainView, index: CatalogIndex, k: int, serving_day: int) -> RecommendationList:
    return rank_scores(popularity_counts(view, index)[None, :], index, serving_day, k)[0]


class _CaseRecommender:
    mode = ServingMode.RT

    def _by_day(self, cases, k, score_fn) -> list[RecommendationList]:
        out: list[RecommendationList | None] = [None] * len(cases)
        for day in sorted({c.day for c in cases}):
            sel = [i for i, c in enumerate(cases) if c.day == day]
            hists = [fed_history(cases[i].history, self.mode, day) for i in sel]
            for i, lst in zip(sel, score_fn(hists, day, k)):
                out[i] = lst
        return out


class PopularityRecommender(_CaseRecommender):
    def __init__(self, view: TrainView, index: CatalogIndex, mode: ServingMode | str = ServingMode.RT):
        self.index = index
        self.mode = ServingMode(mode)
        self.counts = popularity_counts(view, index)

    def recommend_cases(self, cases, k: int) -> list[RecommendationList]:
        def score(hists, day, k):
            lst = rank_scores(self.counts[None, :], self.index, day, k)[0]
            return [lst] * len(hists)
        return self._by_day(cases, k, score)


class InteractionMatrix:
    """Sparse user x target-item counts from the training window (COO triplets)."""

    def __init__(self, view: TrainView, index: CatalogIndex):
        cells: dict[tuple[int, int], float] = {}
        users = sorted({s.user for s in view.sequences})
        self.user_row = {u: r for r, u in enumerate(users)}
        for s in view.sequences:
            r = self.user_row[s.user]
            for x in s.interactions:
                t = int(index.target_index[x.item])
                if t >= 0:
                    cells[(r, t)] = cells.get((r, t), 0.0) + 1.0
        keys = sorted(cells)
        self.rows = np.array([k[0] for k in keys], dtype=np.int64)
        self.cols = np.array([k[1] for k in keys], dtype=np.int64)
        self.vals = np.array([cells[k] for k in keys])
        self.shape = (len(users), index.n_targets)

    def dense(self) -> np.ndarray:
        x = np.zeros(self.shape)
        x[self.rows, self.cols] = self.vals
        return x

    def item_cosine(self, chunk: int = 2048) -> np.ndarray:
        """(V, V) cosine similarity between item columns; zero columns give 0."""
        v = self.shape[1]
        gram = np.zeros((v, v))
        order = np.argsort(self.rows, kind="stable")
        rows, cols, vals = self.rows[order], self.cols[order], self.vals[order]
        bounds = np.searchsorted(rows, np.arange(0, self.shape[0] + chunk, chunk))
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi <= lo:
                continue
            r = rows[lo:hi] - rows[lo]
            x = np.zeros((int(r[-1]) + 1, v))
            x[r, cols[lo:hi]] = vals[lo:hi]
            gram += x.T @ x
        norm = np.sqrt(np.diag(gram))
        safe = np.where(norm > 0, norm, 1.0)
        cos = gram / safe[:, None] / safe[None, :]
        cos[norm == 0, :] = 0.0
        cos[:, norm == 0] = 0.0
        return cos


def cf_knn_scores(user_items: Sequence[int], cosine: np.ndarray) -> np.ndarray:
    """score(o) = sum over the user's distinct items o' of cos(o, o')."""
    seen = np.unique(np.asarray(user_items, dtype=np.int64))
    if len(seen) == 0:
        return np.zeros(cosine.shape[0])
    return cosine[seen].sum(axis=0)


def cf_knn_recommend(user_items: Sequence[int], cosine: np.ndarray, index: CatalogIndex, k: int,
                     serving_day: int, popularity: np.ndarray | None = None) -> RecommendationList:
    """Top-k by CF score, excluding already-seen items; zero-score ties fall back
    to popularity order, then id."""
    seen = np.unique(np.asarray(user_items, dtype=np.int64))
    exclude = np.zeros((1, index.n_targets), dtype=bool)
    exclude[0, seen] = True
    scores = cf_knn_scores(seen, cosine)[None, :]
    return rank_scores(scores, index, serving_day, k, exclude=exclude, secondary=popularity)[0]


class CFKNNRecommender(_CaseRecommender):
    def __init__(self, view: TrainView, index: CatalogIndex, mode: ServingMode | str = ServingMode.RT):
        self.index = index
        self.mode = ServingMode(mode)
        self.cosine = InteractionMatrix(view, index).item_cosine()
        self.popularity = popularity_counts(view, index)

    def recommend_cases(self, cases, k: int) -> list[RecommendationList]:
        def score(hists, day, k):
            out = []
            for h in hists:
                t = self.index.target_index[[x.item for x in h]] if h else np.zeros(0, np.int64)
                out.append(cf_knn_recommend(t[t >= 0], self.cosine, self.index, k, day, self.popularity))
            return out
        return self._by_day(cases, k, score)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def embedding_knn_scores(recent_articles: Sequence[int], outfits: Sequence[Item], vectors: np.ndarray) -> np.ndarray:
    """Per outfit: mean over its member articles of the best cosine to any recent article."""
    hist = _unit_rows(vectors[np.asarray(recent_articles, dtype=np.int64)])
    out = np.zeros(len(outfits))
    for j, o in enumerate(outfits):
        members = _unit_rows(vectors[np.asarray(o.members, dtype=np.int64)])
        out[j] = (members @ hist.T).max(axis=1).mean()
    return out


def newest_outfits(index: CatalogIndex, n: int = 200) -> np.ndarray:
    """Target-vocab indices of the n most recently created available items (ties: lower id first)."""
    ids = index.target_items
    cand = np.flatnonzero(index.available[ids])
    order = np.lexsort((ids[cand], -index.created_day[ids[cand]]))
    return cand[order[:n]]


def embedding_knn_recommend(recent_articles: Sequence[int], index: CatalogIndex, vectors: np.ndarray, k: int,
                            serving_day: int, popularity: np.ndarray, n_candidates: int = 200,
                            candidates: np.ndarray | None = None) -> RecommendationList:
    if len(recent_articles) == 0:
        return rank_scores(popularity[None, :], index, serving_day, k)[0]
    cand = newest_outfits(index, n_candidates) if candidates is None else candidates
    scores = np.zeros((1, index.n_targets))
    items = [index.catalog[i] for i in index.target_items[cand]]
    scores[0, cand] = embedding_knn_scores(recent_articles, items, vectors)
    exclude = np.ones((1, index.n_targets), dtype=bool)
    exclude[0, cand] = False
    return rank_scores(scores, index, serving_day, k, exclude=exclude, secondary=popularity)[0]


def onehot_article_vectors(catalog: Sequence[Item], vocab: dict[str, int]) -> np.ndarray:
    """Fallback article representation: concatenated one-hot categorical features."""
    offs = np.cumsum([0] + [vocab[f] for f in ARTICLE_FEATURES])
    x = np.zeros((len(catalog), offs[-1]))
    for it in catalog:
        if it.entity is EntityType.ARTICLE:
            for j, f in enumerate(ARTICLE_FEATURES):
                if f in it.features:
                    x[it.id, offs[j] + it.features[f]] = 1.0
    return x


def model_article_vectors(model) -> np.ndarray:
    """Learned feature-concatenation embedding of every catalog item."""
    return embed_items(model.params, model.index, model.spec, np.arange(model.index.n_items)).data


class EmbeddingKNNRecommender(_CaseRecommender):
    def __init__(self, view: TrainView, index: CatalogIndex, vectors: np.ndarray, n_recent: int = 10,
                 n_candidates: int = 200, mode: ServingMode | str = ServingMode.RT):
        self.index = index
        self.mode = ServingMode(mode)
        self.vectors = vectors
        self.n_recent = n_recent
        self.candidates = newest_outfits(index, n_candidates)
        self.popularity = popularity_counts(view, index)

    def recommend_cases(self, cases, k: int) -> list[RecommendationList]:
        article = list(EntityType).index(EntityType.ARTICLE)

        def score(hists, day, k):
            out = []
            for h in hists:
                recent = [x.item for x in h if self.index.entity[x.item] == article][-self.n_recent:]
                out.append(embedding_knn_recommend(recent, self.index, self.vectors, k, day, self.popularity,
                                                   candidates=self.candidates))
            return out
        return self._by_day(cases, k, score)


__all__ = ["BASELINES", "PopularityRecommender", "CFKNNRecommender", "EmbeddingKNNRecommender", "InteractionMatrix",
           "popularity_counts", "popularity_rank", "cf_knn_scores", "cf_knn_recommend", "embedding_knn_scores",
           "embedding_knn_recommend", "newest_outfits", "onehot_article_vectors", "model_article_vectors",
           "sasrec_config"]
