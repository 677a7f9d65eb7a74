"""Per-position model inputs: item features, session (recency / gap) and action
encodings, context tokens and the input projection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .datamodel import (ACTIONS, ARTICLE_FEATURES, CONTEXT_FIELDS, Action, Context, DataError, EntityType,
                        Interaction, Item)
from .numkit import Tensor

N_ACTIONS = len(ACTIONS)
_ACTION_INDEX = {a: i for i, a in enumerate(ACTIONS)}


@dataclass
class EmbedderConfig:
    features: tuple[str, ...] = ("brand", "color", "category", "material", "fit", "pattern",
                                 "price_bucket", "influencer", "style")
    one_hot: tuple[str, ...] = ("price_bucket", "style")
    feature_width: int = 8
    # >0 adds a learned per-item id embedding (the IDs-only configuration)
    item_id_width: int = 0
    recency_width: int = 4
    gap_width: int = 4
    age_width: int = 4
    # days per item-age bucket; bucket 0 (fed at inference) must be common in training
    age_bucket_days: int = 7
    max_bucket: int = 60
    max_len: int = 100
    use_context: bool = True
    use_session: bool = True
    use_action: bool = True
    use_positional: bool = True
    age_feature: bool = False
    input_entities: str = "all"
    target_entity: str = "outfit"

    def __post_init__(self):
        self.features = tuple(self.features)
        self.one_hot = tuple(self.one_hot)
        if self.input_entities not in ("all", "outfits"):
            raise ValueError(f"input_entities must be 'all' or 'outfits', got {self.input_entities!r}")
        EntityType(self.target_entity)
        if self.age_bucket_days < 1:
            raise ValueError("age_bucket_days must be >= 1")

    @property
    def n_age_buckets(self) -> int:
        return self.max_bucket // self.age_bucket_days + 1

    @property
    def n_context(self) -> int:
        return len(CONTEXT_FIELDS) if self.use_context else 0


@dataclass(frozen=True)
class FeatureSlot:
    name: str
    vocab: int
    width: int
    one_hot: bool
    # averaged over member articles for composite items
    composite: bool


@dataclass
class FeatureSpec:
    """Fixed, ordered layout of the feature-concatenation block."""

    slots: list[FeatureSlot]

    @classmethod
    def build(cls, vocab: dict[str, int], cfg: EmbedderConfig, n_items: int) -> "FeatureSpec":
        slots = []
        for name in cfg.features:
            if name not in vocab:
                raise DataError(f"feature {name!r} missing from vocabulary")
            oh = name in cfg.one_hot
            slots.append(FeatureSlot(name, vocab[name], vocab[name] if oh else cfg.feature_width, oh,
                                     name in ARTICLE_FEATURES))
        if cfg.item_id_width > 0:
            slots.append(FeatureSlot("item_id", n_items, cfg.item_id_width, False, False))
        for s in slots:
            if s.width <= 0:
                raise ValueError(f"feature {s.name!r} needs a positive width")
        return cls(slots)

    @property
    def width(self) -> int:
        return sum(s.width for s in self.slots)

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, lo = {}, 0
        for s in self.slots:
            out[s.name] = (lo, lo + s.width)
            lo += s.width
        return out

    def to_json(self) -> list[dict]:
        return [vars(s).copy() for s in self.slots]


class CatalogIndex:
    """Dense per-item arrays derived from the catalog."""

    def __init__(self, catalog: Sequence[Item], spec: FeatureSpec, target_entity: str = "outfit"):
        n = len(catalog)
        self.n_items = n
        self.catalog = catalog
        target = EntityType(target_entity)
        self.entity = np.array([list(EntityType).index(it.entity) for it in catalog], dtype=np.int8)
        self.available = np.array([it.available for it in catalog], dtype=bool)
        self.created_day = np.array([it.created_day for it in catalog], dtype=np.int64)
        self.creator = np.array([-1 if it.creator is None else it.creator for it in catalog], dtype=np.int64)
        self.is_outfit = self.entity == list(EntityType).index(EntityType.OUTFIT)
        self.is_target = self.entity == list(EntityType).index(target)
        self.target_items = np.flatnonzero(self.is_target)
        self.target_index = np.full(n, -1, dtype=np.int64)
        self.target_index[self.target_items] = np.arange(len(self.target_items))
        self.n_targets = len(self.target_items)

        self.slot_ids: dict[str, np.ndarray] = {}
        self.slot_weights: dict[str, np.ndarray] = {}
        self.slot_dense: dict[str, np.ndarray] = {}
        for slot in spec.slots:
            ids, w = self._slot_arrays(catalog, slot)
            if slot.one_hot:
                dense = np.zeros((n, slot.vocab))
                rows = np.repeat(np.arange(n), ids.shape[1])
                np.add.at(dense, (rows, ids.ravel()), w.ravel())
                self.slot_dense[slot.name] = dense
            else:
                self.slot_ids[slot.name] = ids
                self.slot_weights[slot.name] = w

    @staticmethod
    def _slot_arrays(catalog, slot: FeatureSlot) -> tuple[np.ndarray, np.ndarray]:
        n = len(catalog)
        if slot.name == "item_id":
            return np.arange(n)[:, None], np.ones((n, 1))
        rows: list[list[int]] = []
        weights: list[list[float]] = []
        for it in catalog:
            if slot.composite and it.entity is EntityType.OUTFIT:
                if not it.members:
                    raise DataError(f"outfit {it.id} has no members")
                w = 1.0 / len(it.members)
                r, ws = [], []
                for m in it.members:
                    cat = catalog[m].features.get(slot.name)
                    if cat is not None:
                        r.append(cat)
                        ws.append(w)
            else:
                cat = it.features.get(slot.name)
                r, ws = ([cat], [1.0]) if cat is not None else ([], [])
            for c in r:
                if not 0 <= c < slot.vocab:
                    raise IndexError(f"item {it.id}: {slot.name} category {c} outside [0, {slot.vocab})")
            rows.append(r)
            weights.append(ws)
        k = max(1, max(len(r) for r in rows))
        ids = np.zeros((n, k), dtype=np.int64)
        w = np.zeros((n, k))
        for i, (r, ws) in enumerate(zip(rows, weights)):
            ids[i, :len(r)] = r
            w[i, :len(ws)] = ws
        return ids, w

    def ages(self, item_ids, day: int) -> np.ndarray:
        return np.maximum(0, day - self.created_day[np.asarray(item_ids)])


# ---------------------------------------------------------------------------
# parameters


def init_params(rng: np.random.Generator, spec: FeatureSpec, cfg: EmbedderConfig, vocab: dict[str, int],
                d_model: int, max_positions: int) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}

    def param(name, arr):
        p[name] = Tensor(arr, requires_grad=True, name=name)

    for slot in spec.slots:
        if not slot.one_hot:
            param(f"feat.{slot.name}", rng.normal(0.0, 0.1, size=(slot.vocab, slot.width)))
    nb = cfg.max_bucket + 1
    if cfg.use_session:
        param("session.recency", rng.normal(0.0, 0.1, size=(nb, cfg.recency_width)))
        param("session.gap", rng.normal(0.0, 0.1, size=(nb, cfg.gap_width)))
    if cfg.age_feature:
        param("age", rng.normal(0.0, 0.1, size=(cfg.n_age_buckets, cfg.age_width)))
    d_in = input_width(spec, cfg)
    param("in_proj.w", rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_model)))
    param("in_proj.b", np.zeros(d_model))
    if cfg.use_context:
        for fname in CONTEXT_FIELDS:
            param(f"ctx.{fname}", rng.normal(0.0, 0.1, size=(vocab[fname], d_model)))
    if cfg.use_positional:
        param("pos", rng.normal(0.0, 0.02, size=(max_positions, d_model)))
    return p


def input_width(spec: FeatureSpec, cfg: EmbedderConfig) -> int:
    w = spec.width
    if cfg.use_session:
        w += cfg.recency_width + cfg.gap_width
    if cfg.use_action:
        w += N_ACTIONS
    if cfg.age_feature:
        w += cfg.age_width
    return w


# ---------------------------------------------------------------------------
# single-item encodings


def action_encoding(action: Action | str) -> np.ndarray:
    try:
        i = _ACTION_INDEX[Action(action)]
    except ValueError:
        raise IndexError(f"unknown action {action!r}") from None
    out = np.zeros(N_ACTIONS)
    out[i] = 1.0
    return out


def bucket(days, max_bucket: int = 60) -> np.ndarray:
    return np.clip(np.asarray(days, dtype=np.int64), 0, max_bucket)


def session_buckets(day: int, reference_day: int, next_day: int | None, max_bucket: int = 60) -> tuple[int, int]:
    """(recency bucket, gap bucket) of one interaction; ``next_day=None`` means
    there is no known next action (last position / inference) and gives gap 0."""
    recency = reference_day - day
    if recency < 0:
        raise DataError(f"interaction on day {day} lies after the reference day {reference_day}")
    gap = 0 if next_day is None else next_day - day
    if gap < 0:
        raise DataError("next action precedes the current one")
    return int(min(recency, max_bucket)), int(min(gap, max_bucket))


def embed_items(params: dict[str, Tensor], index: CatalogIndex, spec: FeatureSpec, item_ids) -> Tensor:
    """Feature-concatenation block for arbitrary-shaped ``item_ids``."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    shape = item_ids.shape
    flat = item_ids.reshape(-1)
    blocks = []
    for slot in spec.slots:
        if slot.one_hot:
            blocks.append(Tensor(index.slot_dense[slot.name][flat]))
            continue
        ids = index.slot_ids[slot.name][flat]
        w = index.slot_weights[slot.name][flat]
        emb = nk.embedding_lookup(params[f"feat.{slot.name}"], ids)  # (n, K, width)
        if ids.shape[1] == 1:
            blocks.append(nk.mul(nk.reshape(emb, (len(flat), slot.width)),
                                 Tensor(np.repeat(w, slot.width, axis=1))))
        else:
            pooled = nk.matmul(Tensor(w[:, None, :]), emb)  # (n, 1, width)
            blocks.append(nk.reshape(pooled, (len(flat), slot.width)))
    out = nk.concat(blocks, axis=-1) if len(blocks) > 1 else blocks[0]
    return nk.reshape(out, shape + (spec.width,))


def embed_item(params, index: CatalogIndex, spec: FeatureSpec, item: Item | int) -> np.ndarray:
    item_id = item.id if isinstance(item, Item) else int(item)
    with nk.no_grad():
        return embed_items(params, index, spec, [item_id]).data[0].copy()


def embed_composite_feature(params, catalog: Sequence[Item], item: Item, feature: str,
                            vocab: int | None = None) -> np.ndarray:
    """Mean of the members' ``feature`` embeddings; a plain article is its own
    single member."""
    members = item.members if item.entity is EntityType.OUTFIT else (item.id,)
    if not members:
        raise DataError(f"item {item.id} has no member articles")
    table = params[f"feat.{feature}"].data
    rows = []
    for m in members:
        cat = catalog[m].features.get(feature)
        rows.append(np.zeros(table.shape[1]) if cat is None else table[cat])
    return np.mean(rows, axis=0)


def context_ids(context: Context) -> np.ndarray:
    return np.array([getattr(context, f) for f in CONTEXT_FIELDS], dtype=np.int64)


def context_tokens(params: dict[str, Tensor], contexts: np.ndarray) -> Tensor:
    """(B, 5) context ids -> (B, 5, d_model), fields in CONTEXT_FIELDS order."""
    contexts = np.asarray(contexts, dtype=np.int64)
    b = contexts.shape[0]
    toks = []
    for j, fname in enumerate(CONTEXT_FIELDS):
        e = nk.embedding_lookup(params[f"ctx.{fname}"], contexts[:, j])
        toks.append(nk.reshape(e, (b, 1, e.shape[-1])))
    return nk.concat(toks, axis=1)


# ---------------------------------------------------------------------------
# batches


@dataclass
class SequenceBatch:
    items: np.ndarray      # (B, L) item ids, 0 at padding
    actions: np.ndarray    # (B, L)
    recency: np.ndarray    # (B, L) buckets
    gap: np.ndarray        # (B, L) buckets
    age: np.ndarray        # (B, L) buckets
    lengths: np.ndarray    # (B,)
    contexts: np.ndarray   # (B, 5)
    n_context: int
    target_index: np.ndarray = field(default=None)  # (B, T) index into target vocab, -1 = none
    target_mask: np.ndarray = field(default=None)   # (B, T) {0, 1}

    @property
    def n_positions(self) -> int:
        return self.n_context + self.items.shape[1]

    def last_positions(self) -> np.ndarray:
        return self.n_context + self.lengths - 1


def filter_inputs(history: Sequence[Interaction], index: CatalogIndex, cfg: EmbedderConfig) -> list[Interaction]:
    if cfg.input_entities == "outfits":
        return [x for x in history if index.is_outfit[x.item]]
    return list(history)


def make_batch(histories: Sequence[Sequence[Interaction]], contexts: Sequence[Context], reference_days,
               index: CatalogIndex, cfg: EmbedderConfig, inference: bool) -> SequenceBatch:
    """Pad, truncate and encode a list of chronological histories.

    Training: true gaps, item age at interaction time, shifted targets.
    Inference: the last gap is 0 and every age bucket is 0.
    """
    b = len(histories)
    hs = [filter_inputs(h, index, cfg)[-cfg.max_len:] for h in histories]
    lengths = np.array([len(h) for h in hs], dtype=np.int64)
    width = max(1, int(lengths.max(initial=0)))
    items = np.zeros((b, width), dtype=np.int64)
    actions = np.zeros((b, width), dtype=np.int64)
    days = np.zeros((b, width), dtype=np.int64)
    for i, h in enumerate(hs):
        n = len(h)
        if n:
            items[i, :n] = [x.item for x in h]
            actions[i, :n] = [_ACTION_INDEX[x.action] for x in h]
            days[i, :n] = [x.day for x in h]
    ref = np.broadcast_to(np.asarray(reference_days, dtype=np.int64), (b,))[:, None]
    valid = np.arange(width)[None, :] < lengths[:, None]
    rec = ref - days
    if np.any(rec[valid] < 0):
        raise DataError("history contains interactions after the reference day")
    recency = np.where(valid, bucket(rec, cfg.max_bucket), 0)
    nxt = np.concatenate([days[:, 1:], days[:, -1:]], axis=1)
    has_next = np.arange(width)[None, :] < (lengths[:, None] - 1)
    gap = np.where(has_next, bucket(nxt - days, cfg.max_bucket), 0)
    if inference:
        age = np.zeros_like(items)
    else:
        age_days = bucket(days - index.created_day[items], cfg.max_bucket)
        age = np.where(valid, age_days // cfg.age_bucket_days, 0)
    ctx = np.stack([context_ids(c) for c in contexts]) if b else np.zeros((0, len(CONTEXT_FIELDS)), np.int64)
    batch = SequenceBatch(items, actions, recency, gap, age, lengths, ctx, cfg.n_context)
    batch.target_index, batch.target_mask = shifted_targets(batch, index)
    return batch


def shifted_targets(batch: SequenceBatch, index: CatalogIndex) -> tuple[np.ndarray, np.ndarray]:
    """Target at a position is the next interaction's item; the mask is 1 only
    when that item is an available target-entity item. Context positions and
    the final interaction carry mask 0."""
    b, width = batch.items.shape
    t = batch.n_context + width
    tidx = np.full((b, t), -1, dtype=np.int64)
    mask = np.zeros((b, t))
    nxt = batch.items[:, 1:]
    has_next = np.arange(width - 1)[None, :] < (batch.lengths[:, None] - 1)
    ok = has_next & index.is_target[nxt] & index.available[nxt]
    pos = slice(batch.n_context, batch.n_context + width - 1)
    tidx[:, pos] = np.where(ok, index.target_index[nxt], -1)
    mask[:, pos] = ok
    return tidx, mask


def compose_batch(params: dict[str, Tensor], index: CatalogIndex, spec: FeatureSpec, cfg: EmbedderConfig,
                  batch: SequenceBatch) -> Tensor:
    """(B, T, d_model): context tokens followed by projected E (+) T (+) A, plus positions."""
    b, width = batch.items.shape
    parts = [embed_items(params, index, spec, batch.items)]
    if cfg.use_session:
        parts.append(nk.embedding_lookup(params["session.recency"], batch.recency))
        parts.append(nk.embedding_lookup(params["session.gap"], batch.gap))
    if cfg.use_action:
        parts.append(Tensor(np.eye(N_ACTIONS)[batch.actions]))
    if cfg.age_feature:
        parts.append(nk.embedding_lookup(params["age"], batch.age))
    x = nk.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    x = nk.add(nk.matmul(x, params["in_proj.w"]), params["in_proj.b"])
    if cfg.use_context:
        x = nk.concat([context_tokens(params, batch.contexts), x], axis=1)
    if cfg.use_positional:
        t = batch.n_positions
        x = nk.add(x, nk.embedding_lookup(params["pos"], np.arange(t)))
    return x


@dataclass
class ComposedInput:
    vectors: Tensor           # (positions, d_model)
    item_ids: np.ndarray      # (positions,), -1 at context positions
    target_ids: np.ndarray    # (positions,), target-vocab index or -1
    target_mask: np.ndarray   # (positions,)
    recency: np.ndarray       # (positions,)
    time_gap: np.ndarray      # (positions,)


def compose(sequence: Sequence[Interaction], context: Context, params, index: CatalogIndex, spec: FeatureSpec,
            cfg: EmbedderConfig, reference_day: int, inference: bool = False) -> ComposedInput:
    batch = make_batch([sequence], [context], reference_day, index, cfg, inference)
    n = int(batch.lengths[0])
    x = compose_batch(params, index, spec, cfg, batch)
    t = cfg.n_context + n
    vec = nk.reshape(x, x.shape[1:])
    if n == 0:
        # a length-1 pad slot was added for an empty history; drop it
        vec = nk.embedding_lookup(vec, np.arange(t)) if t else Tensor(np.zeros((0, x.shape[-1])))
    pad = np.zeros(cfg.n_context, dtype=np.int64)
    return ComposedInput(
        vectors=vec,
        item_ids=np.concatenate([pad - 1, batch.items[0, :n]]),
        target_ids=batch.target_index[0, :t],
        target_mask=batch.target_mask[0, :t],
        recency=np.concatenate([pad, batch.recency[0, :n]]),
        time_gap=np.concatenate([pad, batch.gap[0, :n]]),
    )
