"""Catalog / interaction schema, time-based split, sequence building, the
synthetic generator and the line-delimited file format."""

from __future__ import annotations

import enum
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .numkit import ConfigError  # noqa: F401  (shared by every module)

SECONDS_PER_DAY = 86400

ARTICLE_FEATURES = ("brand", "color", "category", "material", "fit", "pattern", "price_bucket")
OUTFIT_FEATURES = ("influencer", "style")
REGISTERED_FEATURES = ARTICLE_FEATURES + OUTFIT_FEATURES
CONTEXT_FIELDS = ("country", "device", "language", "market", "premise")


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class EntityType(str, enum.Enum):
    ARTICLE = "article"
    OUTFIT = "outfit"
    INFLUENCER = "influencer"


class Action(str, enum.Enum):
    CLICK = "click"
    WISHLIST = "wishlist"
    ADD_TO_CART = "add-to-cart"
    PURCHASE = "purchase"


ACTIONS = tuple(Action)


@dataclass(frozen=True)
class Item:
    id: int
    entity: EntityType
    features: dict[str, int]
    members: tuple[int, ...] = ()
    creator: int | None = None
    created_day: int = 0
    available: bool = True


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    action: Action
    timestamp: int
    day: int

    @classmethod
    def at(cls, user: int, item: int, timestamp: int, action: Action = Action.CLICK) -> "Interaction":
        return cls(user, item, Action(action), int(timestamp), int(timestamp) // SECONDS_PER_DAY)


@dataclass(frozen=True)
class Context:
    market: int = 0
    device: int = 0
    premise: int = 0
    language: int = 0
    country: int = 0


@dataclass
class UserSequence:
    user: int
    context: Context
    interactions: list[Interaction]


@dataclass
class Dataset:
    catalog: list[Item]
    sequences: list[UserSequence]
    horizon_days: int
    vocab: dict[str, int]
    # generator ground truth; never serialised and ignored by equality
    truth: dict | None = field(default=None, compare=False, repr=False)

    def item(self, item_id: int) -> Item:
        return self.catalog[item_id]

    def interactions(self) -> list[Interaction]:
        return [x for s in self.sequences for x in s.interactions]

    def validate(self) -> None:
        for i, it in enumerate(self.catalog):
            if it.id != i:
                raise SchemaError(f"catalog ids must be contiguous from 0; found {it.id} at row {i}")
            for name, cat in it.features.items():
                if name not in self.vocab:
                    raise SchemaError(f"unknown feature {name!r} on item {it.id}")
                if not 0 <= cat < self.vocab[name]:
                    raise SchemaError(f"feature {name!r} of item {it.id} out of vocab: {cat}")
            if it.entity is EntityType.OUTFIT and not it.members:
                raise SchemaError(f"outfit {it.id} has no member articles")
            for m in it.members:
                if not 0 <= m < len(self.catalog):
                    raise SchemaError(f"item {it.id} references unknown member {m}")
        n = len(self.catalog)
        for s in self.sequences:
            for fname in CONTEXT_FIELDS:
                v = getattr(s.context, fname)
                if not 0 <= v < self.vocab.get(fname, 0):
                    raise SchemaError(f"context {fname}={v} of user {s.user} out of vocab")
            prev = -math.inf
            for x in s.interactions:
                if not 0 <= x.item < n:
                    raise SchemaError(f"interaction of user {s.user} references unknown item {x.item}")
                if x.day != x.timestamp // SECONDS_PER_DAY:
                    raise SchemaError(f"interaction day {x.day} inconsistent with timestamp {x.timestamp}")
                if x.timestamp < prev:
                    raise SchemaError(f"interactions of user {s.user} are not chronological")
                prev = x.timestamp


def segment_of(history: Iterable[Interaction], catalog: list[Item]) -> str:
    """fully-cold / article-only / outfit-history, from the pre-split history."""
    seen_any = False
    for x in history:
        seen_any = True
        if catalog[x.item].entity is EntityType.OUTFIT:
            return "outfit-history"
    return "article-only" if seen_any else "fully-cold"


SEGMENTS = ("fully-cold", "article-only", "outfit-history")


# ---------------------------------------------------------------------------
# split and sequences


@dataclass
class TrainView:
    catalog: list[Item]
    vocab: dict[str, int]
    split_day: int
    sequences: list[UserSequence]


@dataclass
class TestUser:
    user: int
    context: Context
    history: list[Interaction]
    targets: list[Interaction]


@dataclass
class TestView:
    catalog: list[Item]
    vocab: dict[str, int]
    split_day: int
    users: list[TestUser]


def time_split(dataset: Dataset, split_day: int) -> tuple[TrainView, TestView]:
    """Interactions before ``split_day`` train; later ones are test targets whose
    input history is everything before the split."""
    if not 0 < split_day < dataset.horizon_days:
        raise ConfigError(f"split_day must lie in (0, {dataset.horizon_days}), got {split_day}")
    train, test = [], []
    for s in dataset.sequences:
        before = [x for x in s.interactions if x.day < split_day]
        after = [x for x in s.interactions if x.day >= split_day]
        if before:
            train.append(UserSequence(s.user, s.context, before))
        if after:
            test.append(TestUser(s.user, s.context, before, after))
    return (TrainView(dataset.catalog, dataset.vocab, split_day, train),
            TestView(dataset.catalog, dataset.vocab, split_day, test))


def build_sequences(interactions: Iterable[Interaction], catalog: list[Item],
                    contexts: dict[int, Context], max_len: int,
                    require_entity: EntityType | None = EntityType.OUTFIT) -> list[UserSequence]:
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    per_user: dict[int, list[Interaction]] = defaultdict(list)
    for x in interactions:
        per_user[x.user].append(x)
    out = []
    for user in sorted(per_user):
        xs = sorted(per_user[user], key=lambda x: x.timestamp)[-max_len:]
        if require_entity is not None and not any(catalog[x.item].entity is require_entity for x in xs):
            continue
        out.append(UserSequence(user, contexts.get(user, Context()), xs))
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    n_users: int = 10_000
    n_articles: int = 20_000
    n_outfits: int = 2_000
    n_influencers: int = 50
    horizon_days: int = 60
    n_styles: int = 8
    vocab: dict[str, int] = field(default_factory=lambda: {
        "brand": 96, "color": 16, "category": 24, "material": 12, "fit": 6, "pattern": 12,
        "price_bucket": 6, "country": 12, "device": 3, "language": 6, "market": 12, "premise": 4,
    })
    # probability that an article feature is drawn from its style's preferred values
    feature_purity: dict[str, float] = field(default_factory=lambda: {
        "brand": 0.9, "color": 0.75, "category": 0.7, "material": 0.5, "fit": 0.3,
        "pattern": 0.5, "price_bucket": 0.3,
    })
    segment_shares: tuple[float, float, float] = (0.23, 0.31, 0.46)
    outfit_size: tuple[int, int] = (2, 7)
    outfit_member_purity: float = 0.9
    creator_style_purity: float = 0.8
    context_style_strength: float = 0.7
    primary_affinity: float = 0.65
    session_coherence: float = 0.9
    sessions_mean: float = 5.0
    session_len: tuple[int, int] = (2, 8)
    outfit_share: float = 0.4
    influencer_share: float = 0.03
    test_lead_prob: float = 0.85
    test_lead_articles: tuple[int, int] = (1, 3)
    test_outfits: tuple[int, int] = (1, 4)
    popularity_exponent: float = 0.8
    created_day_min: int = -30
    trend_seeker_share: float = 0.5
    trend_half_life_days: float = 7.0
    unavailable_share: float = 0.03
    action_mix: tuple[float, float, float, float] = (0.7, 0.15, 0.1, 0.05)
    # within-style taste: brands split into groups; users favour one group and
    # outfits are assembled mostly from one group (visible through features only)
    taste_groups: int = 3
    taste_strength: float = 0.7
    outfit_taste_purity: float = 0.85

    def check(self) -> None:
        lo, hi = self.outfit_size
        if not 1 <= lo <= hi:
            raise ConfigError("outfit_size must satisfy 1 <= min <= max")
        if hi > self.n_articles:
            raise ConfigError("outfit members exceed article vocabulary")
        if min(self.n_users, self.n_articles, self.n_outfits, self.n_influencers, self.n_styles) < 1:
            raise ConfigError("entity counts must be positive")
        if self.horizon_days < 2:
            raise ConfigError("horizon_days must be >= 2")
        if abs(sum(self.segment_shares) - 1.0) > 1e-9 or min(self.segment_shares) < 0:
            raise ConfigError("segment_shares must be non-negative and sum to 1")
        if abs(sum(self.action_mix) - 1.0) > 1e-9:
            raise ConfigError("action_mix must sum to 1")
        missing = [k for k in ARTICLE_FEATURES + CONTEXT_FIELDS if k not in self.vocab]
        if missing:
            raise ConfigError(f"vocab lacks {missing}")
        if self.taste_groups < 1 or not 0 <= self.taste_strength <= 1:
            raise ConfigError("taste_groups >= 1 and taste_strength in [0, 1] are required")
        if self.created_day_min > self.horizon_days - 2:
            raise ConfigError("created_day_min leaves no room before the test day")


class _Picker:
    """Cached popularity/novelty-weighted draws of alive items per (key, day)."""

    def __init__(self, ids, styles, created, pop, n_styles, half_life, rng, available=None):
        self.rng = rng
        self.pop = pop
        self.half_life = half_life
        avail = np.ones(len(ids)) if available is None else np.asarray(available, dtype=float)

        def arrays(sel):
            order = sel[np.argsort(created[sel], kind="stable")]
            return ids[order], created[order], pop[order], avail[order]

        self.everything = arrays(np.arange(len(ids)))
        self.by_style = [arrays(np.flatnonzero(styles == s)) for s in range(n_styles)]
        self._cache: dict = {}

    def _cdf(self, arrays, day, trend, only_available):
        ids, created, pop, avail = arrays
        n = int(np.searchsorted(created, day, side="right"))
        w = pop[:n].copy()
        if trend:
            w *= 0.5 ** ((day - created[:n]) / self.half_life)
        if only_available:
            w *= avail[:n]
        if n == 0 or w.sum() <= 0:
            return None
        cdf = np.cumsum(w)
        return ids[:n], cdf / cdf[-1]

    def draw(self, style: int, day: int, trend: bool, only_available: bool = False) -> int:
        key = (style, day, trend, only_available)
        hit = self._cache.get(key)
        if hit is None:
            # nothing alive under this key yet: any alive item, else the oldest ones
            hit = (self._cdf(self.by_style[style], day, trend, only_available)
                   or self._cdf(self.everything, day, trend, only_available)
                   or (self.everything[0][:5], np.arange(1, 6)[:len(self.everything[0])] / min(5, len(self.everything[0]))))
            self._cache[key] = hit
        ids, cdf = hit
        return int(ids[min(int(np.searchsorted(cdf, self.rng.random(), side="right")), len(ids) - 1)])


def generate_synthetic(config: SyntheticConfig, seed: int) -> Dataset:
    """Deterministic dataset with planted style affinities, coherent day
    sessions, context-conditioned taste, staggered outfit creation and a
    novelty-seeking user trait (the age/popularity confound)."""
    config.check()
    c = config
    rng = np.random.default_rng(seed)
    V = dict(c.vocab)
    V["influencer"] = c.n_influencers
    V["style"] = c.n_styles
    test_day = c.horizon_days - 1
    created_hi = test_day - 1

    def pop_weights(n):
        return (1.0 + rng.permutation(n)) ** -c.popularity_exponent

    preferred = {
        name: [[v for v in range(V[name]) if v % c.n_styles == s % V[name]] or [s % V[name]]
               for s in range(c.n_styles)]
        for name in ARTICLE_FEATURES
    }

    def styled_value(name, style):
        if rng.random() < c.feature_purity.get(name, 0.0):
            pref = preferred[name][style]
            return int(pref[rng.integers(len(pref))])
        return int(rng.integers(V[name]))

    catalog: list[Item] = []
    a_style = rng.integers(c.n_styles, size=c.n_articles)
    a_created = rng.integers(c.created_day_min, created_hi + 1, size=c.n_articles)
    for i in range(c.n_articles):
        feats = {name: styled_value(name, int(a_style[i])) for name in ARTICLE_FEATURES}
        catalog.append(Item(i, EntityType.ARTICLE, feats, created_day=int(a_created[i])))
    articles_by_style = [np.flatnonzero(a_style == s) for s in range(c.n_styles)]
    G = c.taste_groups
    a_group = np.array([(it.features["brand"] // c.n_styles) % G for it in catalog], dtype=np.int64)
    a_key = a_style * G + a_group
    articles_by_key = [np.flatnonzero(a_key == q) for q in range(c.n_styles * G)]

    inf_style = rng.integers(c.n_styles, size=c.n_influencers)
    o_base = c.n_articles
    o_style = np.empty(c.n_outfits, dtype=np.int64)
    o_creator = rng.integers(c.n_influencers, size=c.n_outfits)
    o_created = rng.integers(c.created_day_min, created_hi + 1, size=c.n_outfits)
    o_avail = rng.random(c.n_outfits) >= c.unavailable_share
    o_group = rng.integers(G, size=c.n_outfits)
    lo, hi = c.outfit_size
    for j in range(c.n_outfits):
        cr = int(o_creator[j])
        s = int(inf_style[cr]) if rng.random() < c.creator_style_purity else int(rng.integers(c.n_styles))
        o_style[j] = s
        size = int(rng.integers(lo, hi + 1))
        members: list[int] = []
        while len(members) < size:
            pool = None
            if rng.random() < c.outfit_member_purity:
                keyed = articles_by_key[s * G + int(o_group[j])]
                pool = keyed if rng.random() < c.outfit_taste_purity and len(keyed) else articles_by_style[s]
                pool = pool if len(pool) else None
            a = int(pool[rng.integers(len(pool))]) if pool is not None else int(rng.integers(c.n_articles))
            if a not in members:
                members.append(a)
        catalog.append(Item(o_base + j, EntityType.OUTFIT, {"influencer": cr, "style": s},
                            tuple(members), cr, int(o_created[j]), bool(o_avail[j])))
    i_base = o_base + c.n_outfits
    for k in range(c.n_influencers):
        outfits = tuple(int(o_base + j) for j in np.flatnonzero(o_creator == k))
        catalog.append(Item(i_base + k, EntityType.INFLUENCER, {"influencer": k, "style": int(inf_style[k])},
                            outfits, k, c.created_day_min, True))

    ids_a = np.arange(c.n_articles)
    pick_article = _Picker(ids_a, a_style, a_created, pop_weights(c.n_articles), c.n_styles,
                           c.trend_half_life_days, rng)
    o_pop = pop_weights(c.n_outfits)
    pick_outfit = _Picker(o_base + np.arange(c.n_outfits), o_style, o_created, o_pop,
                          c.n_styles, c.trend_half_life_days, rng, available=o_avail.astype(float))
    a_pop = pick_article.pop
    pick_article_t = _Picker(ids_a, a_key, a_created, a_pop, c.n_styles * G, c.trend_half_life_days, rng)
    pick_outfit_t = _Picker(o_base + np.arange(c.n_outfits), o_style * G + o_group, o_created, o_pop,
                            c.n_styles * G, c.trend_half_life_days, rng, available=o_avail.astype(float))
    pick_infl = _Picker(i_base + np.arange(c.n_influencers), inf_style,
                        np.full(c.n_influencers, c.created_day_min), pop_weights(c.n_influencers),
                        c.n_styles, c.trend_half_life_days, rng)

    market_style = rng.integers(c.n_styles, size=V["market"])
    counts = np.floor(np.asarray(c.segment_shares) * c.n_users).astype(int)
    counts[2] = c.n_users - counts[0] - counts[1]
    segments = rng.permutation(np.repeat(np.arange(3), counts))

    action_cdf = np.cumsum(c.action_mix)

    def draw_action():
        return ACTIONS[min(int(np.searchsorted(action_cdf, rng.random(), side="right")), 3)]

    truth = {"primary": [], "secondary": [], "trend": [], "segment": [], "taste": [],
             "market_style": market_style.tolist(), "outfit_taste": o_group.tolist()}
    sequences = []
    for u in range(c.n_users):
        market = int(rng.integers(V["market"]))
        ctx = Context(
            market=market,
            device=int(rng.integers(V["device"])),
            premise=int(rng.integers(V["premise"])),
            language=market % V["language"] if rng.random() < 0.9 else int(rng.integers(V["language"])),
            country=market % V["country"] if rng.random() < 0.9 else int(rng.integers(V["country"])),
        )
        primary = int(market_style[market]) if rng.random() < c.context_style_strength else int(rng.integers(c.n_styles))
        secondary = int((primary + 1 + rng.integers(c.n_styles - 1)) % c.n_styles) if c.n_styles > 1 else primary
        trend = bool(rng.random() < c.trend_seeker_share)
        taste = int(rng.integers(G))
        seg = int(segments[u])
        for key, val in (("primary", primary), ("secondary", secondary), ("trend", trend), ("segment", SEGMENTS[seg]), ("taste", taste)):
            truth[key].append(val)

        def session_style():
            return primary if rng.random() < c.primary_affinity else secondary

        def item_style(s):
            return s if rng.random() < c.session_coherence else int(rng.integers(c.n_styles))

        xs: list[Interaction] = []

        def emit(day, kinds, s, clock):
            for kind in kinds:
                st = item_style(s)
                tasteful = rng.random() < c.taste_strength
                if kind == "outfit":
                    picker, key = (pick_outfit_t, st * G + taste) if tasteful else (pick_outfit, st)
                    it = picker.draw(key, day, trend, only_available=(day == test_day))
                    act = draw_action()
                elif kind == "influencer":
                    it, act = pick_infl.draw(st, day, False), Action.CLICK
                else:
                    picker, key = (pick_article_t, st * G + taste) if tasteful else (pick_article, st)
                    it, act = picker.draw(key, day, trend), draw_action()
                clock += int(rng.integers(20, 900))
                xs.append(Interaction(u, it, act, clock, clock // SECONDS_PER_DAY))
            return clock

        if seg > 0:
            n_sessions = min(test_day, 1 + int(rng.poisson(c.sessions_mean - 1)))
            days = np.sort(rng.choice(test_day, size=n_sessions, replace=False))
            kinds_all = []
            for _ in days:
                n = int(rng.integers(c.session_len[0], c.session_len[1] + 1))
                kinds = []
                for _ in range(n):
                    r = rng.random()
                    if seg == 2 and r < c.outfit_share:
                        kinds.append("outfit")
                    elif seg == 2 and r < c.outfit_share + c.influencer_share:
                        kinds.append("influencer")
                    else:
                        kinds.append("article")
                kinds_all.append(kinds)
            if seg == 2 and not any("outfit" in k for k in kinds_all):
                kinds_all[-1][-1] = "outfit"
            for day, kinds in zip(days, kinds_all):
                clock = int(day) * SECONDS_PER_DAY + int(rng.integers(6 * 3600, 20 * 3600))
                emit(int(day), kinds, session_style(), clock)

        kinds = []
        if rng.random() < c.test_lead_prob:
            kinds += ["article"] * int(rng.integers(c.test_lead_articles[0], c.test_lead_articles[1] + 1))
        for _ in range(int(rng.integers(c.test_outfits[0], c.test_outfits[1] + 1))):
            kinds.append("outfit")
            if rng.random() < 0.3:
                kinds.append("article")
        clock = test_day * SECONDS_PER_DAY + int(rng.integers(6 * 3600, 20 * 3600))
        emit(test_day, kinds, session_style(), clock)
        sequences.append(UserSequence(u, ctx, xs))

    ds = Dataset(catalog, sequences, c.horizon_days, V, truth)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# files


def _item_to_json(it: Item) -> dict:
    return {"id": it.id, "entity": it.entity.value, "features": it.features, "members": list(it.members),
            "creator": it.creator, "created_day": it.created_day, "available": it.available}


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "featurespec.json", "w", encoding="utf-8") as f:
        json.dump(ds.vocab, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(out / "catalog.jsonl", "w", encoding="utf-8") as f:
        for it in ds.catalog:
            f.write(json.dumps(_item_to_json(it), sort_keys=True) + "\n")
    with open(out / "contexts.jsonl", "w", encoding="utf-8") as f:
        for s in ds.sequences:
            f.write(json.dumps({"user": s.user, **asdict(s.context)}, sort_keys=True) + "\n")
    with open(out / "interactions.jsonl", "w", encoding="utf-8") as f:
        for x in sorted(ds.interactions(), key=lambda x: (x.timestamp, x.user)):
            f.write(json.dumps({"user": x.user, "item": x.item, "action": x.action.value,
                                "timestamp": x.timestamp, "day": x.day}, sort_keys=True) + "\n")


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, n, f"malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(path, n, "expected a JSON object")
            yield n, obj


def load_dataset(data_dir: str | Path) -> Dataset:
    d = Path(data_dir)
    try:
        vocab = json.loads((d / "featurespec.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(d / "featurespec.json", exc.lineno, exc.msg) from None
    known = set(REGISTERED_FEATURES) | set(CONTEXT_FIELDS)
    for name, size in vocab.items():
        if name not in known:
            raise SchemaError(f"unknown feature {name!r} in featurespec.json")
        if not isinstance(size, int) or size < 1:
            raise SchemaError(f"feature {name!r} needs a positive integer vocab size")

    catalog: list[Item] = []
    path = d / "catalog.jsonl"
    for n, o in _read_jsonl(path):
        try:
            feats = {str(k): int(v) for k, v in o["features"].items()}
            for k in feats:
                if k not in vocab:
                    raise SchemaError(f"{path}:{n}: unknown feature {k!r}")
            catalog.append(Item(int(o["id"]), EntityType(o["entity"]), feats, tuple(int(m) for m in o["members"]),
                                None if o["creator"] is None else int(o["creator"]), int(o["created_day"]),
                                bool(o["available"])))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise ParseError(path, n, f"bad item record ({exc!r})") from None

    contexts: dict[int, Context] = {}
    path = d / "contexts.jsonl"
    for n, o in _read_jsonl(path):
        try:
            contexts[int(o["user"])] = Context(**{k: int(o[k]) for k in CONTEXT_FIELDS})
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, n, f"bad context record ({exc!r})") from None

    per_user: dict[int, list[Interaction]] = defaultdict(list)
    path = d / "interactions.jsonl"
    max_day = 0
    for n, o in _read_jsonl(path):
        try:
            x = Interaction(int(o["user"]), int(o["item"]), Action(o["action"]), int(o["timestamp"]), int(o["day"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, n, f"bad interaction record ({exc!r})") from None
        if x.day != x.timestamp // SECONDS_PER_DAY:
            raise ParseError(path, n, f"day {x.day} inconsistent with timestamp {x.timestamp}")
        per_user[x.user].append(x)
        max_day = max(max_day, x.day)
    sequences = []
    for user in contexts:
        xs = per_user.get(user)
        if xs:
            sequences.append(UserSequence(user, contexts[user], sorted(xs, key=lambda x: x.timestamp)))
    unknown = set(per_user) - set(contexts)
    if unknown:
        raise SchemaError(f"interactions reference users without context: {sorted(unknown)[:5]}")
    ds = Dataset(catalog, sequences, max_day + 1, vocab)
    ds.validate()
    return ds
