import math

import numpy as np

from afra.baselines import (CFKNNRecommender, EmbeddingKNNRecommender, InteractionMatrix, PopularityRecommender,
                            cf_knn_recommend, embedding_knn_scores, model_article_vectors, newest_outfits,
                            onehot_article_vectors, popularity_counts, sasrec_config)
from afra.datamodel import EntityType
from afra.metrics import build_eval_cases, evaluate


def test_popularity_counts_match_a_direct_count(tiny_model, tiny_split):
    tr, _ = tiny_split
    index = tiny_model.index
    counts = popularity_counts(tr, index)
    for t, item in enumerate(index.target_items[:20]):
        assert counts[t] == sum(1 for s in tr.sequences for x in s.interactions if x.item == item)


def test_popularity_gives_everyone_the_same_list(tiny_model, tiny_split):
    cases = build_eval_cases(tiny_split[1])[:30]
    lists = PopularityRecommender(tiny_split[0], tiny_model.index).recommend_cases(cases, 10)
    assert len({tuple(l.items.tolist()) for l in lists}) == 1
    assert np.all(np.diff(lists[0].scores) <= 0)


def test_item_cosine_matches_brute_force(tiny_model, tiny_split):
    m = InteractionMatrix(tiny_split[0], tiny_model.index)
    cos = m.item_cosine(chunk=7)
    x = m.dense()
    for a in range(0, x.shape[1], 5):
        for b in range(0, x.shape[1], 3):
            na, nb = math.sqrt(sum(v * v for v in x[:, a])), math.sqrt(sum(v * v for v in x[:, b]))
            want = 0.0 if na == 0 or nb == 0 else sum(x[:, a] * x[:, b]) / (na * nb)
            assert abs(cos[a, b] - want) < 1e-12
    assert np.allclose(cos, cos.T)


def test_cf_knn_excludes_seen_and_ranks_by_summed_similarity(tiny_model, tiny_split):
    index = tiny_model.index
    cos = InteractionMatrix(tiny_split[0], index).item_cosine()
    day = tiny_split[1].split_day
    seen = [0, 3]
    out = cf_knn_recommend(seen, cos, index, 10, day)
    tidx = index.target_index[out.items]
    assert not set(tidx.tolist()) & set(seen)
    want = cos[0] + cos[3]
    assert np.allclose(out.scores, want[tidx])
    assert np.all(np.diff(out.scores) <= 0)


def test_embedding_knn_scores_match_loops():
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(6, 4))

    class O:
        def __init__(self, members):
            self.members = members
    outfits = [O((0, 1)), O((2,)), O((3, 4, 5))]
    got = embedding_knn_scores([1, 5], outfits, vectors)

    def cos(a, b):
        return float(a @ b / np.sqrt((a @ a) * (b @ b)))
    for j, o in enumerate(outfits):
        want = np.mean([max(cos(vectors[m], vectors[h]) for h in (1, 5)) for m in o.members])
        assert abs(got[j] - want) < 1e-12


def test_newest_outfits(tiny_model):
    index = tiny_model.index
    picks = newest_outfits(index, 10)
    created = index.created_day[index.target_items[picks]]
    assert np.all(np.diff(created) <= 0) and np.all(index.available[index.target_items[picks]])
    rest = np.setdiff1d(np.flatnonzero(index.available[index.target_items]), picks)
    assert created.min() >= index.created_day[index.target_items[rest]].max()


def test_onehot_vectors(tiny_ds):
    x = onehot_article_vectors(tiny_ds.catalog, tiny_ds.vocab)
    for it in tiny_ds.catalog[:50]:
        if it.entity is EntityType.ARTICLE:
            assert x[it.id].sum() == len(it.features)
    assert np.all(x[[it.id for it in tiny_ds.catalog if it.entity is not EntityType.ARTICLE]] == 0)


def test_baselines_run_end_to_end(tiny_ds, tiny_model, tiny_split):
    tr, te = tiny_split
    cases = build_eval_cases(te)
    index = tiny_model.index
    recs = [PopularityRecommender(tr, index), CFKNNRecommender(tr, index, "batch"),
            EmbeddingKNNRecommender(tr, index, model_article_vectors(tiny_model), n_candidates=30),
            EmbeddingKNNRecommender(tr, index, onehot_article_vectors(tiny_ds.catalog, tiny_ds.vocab))]
    for rec in recs:
        rep = evaluate(rec, cases, ks=(5, 15))
        assert 0.0 <= rep.get("recall", 15) <= 1.0
        assert rep.get("recall", 5) <= rep.get("recall", 15)


def test_sasrec_config_is_reexported():
    cfg = sasrec_config()
    assert cfg.embedder.features == () and not cfg.embedder.use_context
    assert cfg.embedder.item_id_width == cfg.encoder.d_model
