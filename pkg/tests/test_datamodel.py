import json

import pytest
from hypothesis import given, settings, strategies as st

from afra.datamodel import (SEGMENTS, Action, ConfigError, Context, Dataset, EntityType, Interaction, Item,
                            ParseError, SchemaError, SyntheticConfig, UserSequence, build_sequences,
                            generate_synthetic, load_dataset, save_dataset, segment_of, time_split)

from conftest import TINY_DATA

DAY = 86400


def toy_catalog():
    arts = [Item(i, EntityType.ARTICLE, {"brand": i}, created_day=0) for i in range(3)]
    outs = [Item(3, EntityType.OUTFIT, {"influencer": 0}, (0, 1), 0, 0, True),
            Item(4, EntityType.OUTFIT, {"influencer": 0}, (1, 2), 0, 0, False)]
    return arts + outs


def test_interaction_day_from_timestamp():
    x = Interaction.at(1, 2, 3 * DAY + 5)
    assert x.day == 3 and x.action is Action.CLICK


def test_segment_of():
    cat = toy_catalog()
    assert segment_of([], cat) == "fully-cold"
    assert segment_of([Interaction.at(0, 1, 0)], cat) == "article-only"
    assert segment_of([Interaction.at(0, 1, 0), Interaction.at(0, 3, 9)], cat) == "outfit-history"


def test_time_split_partitions_without_leakage(tiny_ds):
    split = 40
    tr, te = time_split(tiny_ds, split)
    assert all(x.day < split for s in tr.sequences for x in s.interactions)
    assert all(x.day >= split for u in te.users for x in u.targets)
    assert all(x.day < split for u in te.users for x in u.history)
    n_train = sum(len(s.interactions) for s in tr.sequences)
    n_test = sum(len(u.targets) for u in te.users)
    assert n_train + n_test == len(tiny_ds.interactions())


def test_time_split_rejects_bad_day(tiny_ds):
    with pytest.raises(ConfigError):
        time_split(tiny_ds, 0)
    with pytest.raises(ConfigError):
        time_split(tiny_ds, tiny_ds.horizon_days)


def test_build_sequences_truncates_and_filters():
    cat = toy_catalog()
    xs = [Interaction.at(0, i % 3, 10 * i) for i in range(6)] + [Interaction.at(0, 3, 100)]
    xs += [Interaction.at(1, 0, 5)]  # article-only user is dropped
    seqs = build_sequences(reversed(xs), cat, {0: Context(market=2)}, max_len=3)
    assert [s.user for s in seqs] == [0]
    assert [x.timestamp for x in seqs[0].interactions] == [40, 50, 100]
    assert seqs[0].context.market == 2


def test_build_sequences_rejects_bad_max_len():
    with pytest.raises(ConfigError):
        build_sequences([], toy_catalog(), {}, max_len=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4), st.integers(0, 10 * DAY)), max_size=40),
       st.integers(1, 6))
def test_build_sequences_properties(raw, max_len):
    cat = toy_catalog()
    xs = [Interaction.at(u, i, t) for u, i, t in raw]
    for s in build_sequences(xs, cat, {}, max_len):
        ts = [x.timestamp for x in s.interactions]
        assert ts == sorted(ts) and 1 <= len(ts) <= max_len
        assert any(cat[x.item].entity is EntityType.OUTFIT for x in s.interactions)
        mine = sorted((x for x in xs if x.user == s.user), key=lambda x: x.timestamp)
        assert [x.timestamp for x in mine[-max_len:]] == ts


# generator -------------------------------------------------------------------

def test_generator_is_deterministic(tiny_ds):
    again = generate_synthetic(TINY_DATA, seed=3)
    assert again == tiny_ds
    other = generate_synthetic(TINY_DATA, seed=4)
    assert other.interactions() != tiny_ds.interactions()


def test_generator_catalog_layout(tiny_ds):
    c = TINY_DATA
    ents = [it.entity for it in tiny_ds.catalog]
    assert ents.count(EntityType.ARTICLE) == c.n_articles
    assert ents.count(EntityType.OUTFIT) == c.n_outfits
    assert ents.count(EntityType.INFLUENCER) == c.n_influencers
    assert [it.id for it in tiny_ds.catalog] == list(range(len(tiny_ds.catalog)))
    test_day = tiny_ds.horizon_days - 1
    for it in tiny_ds.catalog:
        assert c.created_day_min <= it.created_day < test_day
        if it.entity is EntityType.OUTFIT:
            lo, hi = c.outfit_size
            assert lo <= len(it.members) <= hi and len(set(it.members)) == len(it.members)
            assert all(tiny_ds.catalog[m].entity is EntityType.ARTICLE for m in it.members)
    tiny_ds.validate()


def test_generator_segments_match_shares():
    ds = generate_synthetic(SyntheticConfig(n_users=1000, n_articles=300, n_outfits=40, n_influencers=5), seed=1)
    _, te = time_split(ds, ds.horizon_days - 1)
    counts = {s: 0 for s in SEGMENTS}
    for u in te.users:
        counts[segment_of(u.history, ds.catalog)] += 1
    assert counts == {"fully-cold": 230, "article-only": 310, "outfit-history": 460}
    assert counts == {s: ds.truth["segment"].count(s) for s in SEGMENTS}


def test_every_user_is_active_on_the_test_day(tiny_ds):
    last = tiny_ds.horizon_days - 1
    assert len(tiny_ds.sequences) == TINY_DATA.n_users
    for s in tiny_ds.sequences:
        targets = [x for x in s.interactions if x.day == last]
        assert any(tiny_ds.catalog[x.item].entity is EntityType.OUTFIT for x in targets)
        assert all(tiny_ds.catalog[x.item].available for x in targets
                   if tiny_ds.catalog[x.item].entity is EntityType.OUTFIT)


def test_items_are_never_used_before_creation(tiny_ds):
    for x in tiny_ds.interactions():
        it = tiny_ds.catalog[x.item]
        assert x.day >= it.created_day


def test_generator_rejects_bad_config():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(segment_shares=(0.5, 0.5, 0.5)), seed=0)
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(n_users=0), seed=0)


# files -----------------------------------------------------------------------

def test_round_trip(tiny_ds, tmp_path):
    save_dataset(tiny_ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back == tiny_ds
    lines = (tmp_path / "interactions.jsonl").read_text().splitlines()
    assert len(lines) == len(tiny_ds.interactions())
    assert len((tmp_path / "contexts.jsonl").read_text().splitlines()) == TINY_DATA.n_users
    spec = json.loads((tmp_path / "featurespec.json").read_text())
    assert spec["influencer"] == TINY_DATA.n_influencers and spec["style"] == TINY_DATA.n_styles


def test_malformed_line_reports_line_number(tiny_ds, tmp_path):
    save_dataset(tiny_ds, tmp_path)
    path = tmp_path / "interactions.jsonl"
    lines = path.read_text().splitlines()
    lines[4] = lines[4][:-3]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        load_dataset(tmp_path)
    assert err.value.line_no == 5


def test_unknown_feature_is_schema_error(tiny_ds, tmp_path):
    save_dataset(tiny_ds, tmp_path)
    spec = json.loads((tmp_path / "featurespec.json").read_text())
    spec["sleeve"] = 4
    (tmp_path / "featurespec.json").write_text(json.dumps(spec))
    with pytest.raises(SchemaError):
        load_dataset(tmp_path)


def test_dataset_validate_rejects_unknown_item():
    cat = toy_catalog()
    vocab = {"brand": 3, "influencer": 1, "country": 1, "device": 1, "language": 1, "market": 1, "premise": 1}
    ds = Dataset(cat, [UserSequence(0, Context(), [Interaction.at(0, 9, 0)])], 1, vocab)
    with pytest.raises(SchemaError, match="unknown item"):
        ds.validate()
