import json

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from afra import numkit as nk
from afra.encoder import AfraModel
from afra.numkit import Tensor
from afra.trainer import (LOSSES, SAMPLED_LOSSES, TrainConfig, TrainingDiverged, batch_loss, loss_full_ce,
                          loss_sampled_ce, make_batches, sample_negatives, sample_negatives_batch, train,
                          training_reference_day, training_sequences)

import oracles
from conftest import tiny_model_config


@pytest.mark.parametrize("scale", [0.1, 3.0, 20.0])
def test_full_ce_matches_oracle(scale):
    rng = np.random.default_rng(int(scale * 10))
    z = rng.normal(size=(7, 11)) * scale
    t = rng.integers(0, 11, size=7)
    mask = (rng.random(7) < 0.7).astype(float)
    got = loss_full_ce(Tensor(z), t, mask).item()
    want = oracles.masked_mean([oracles.full_ce([mp.mpf(v) for v in z[i]], t[i]) for i in range(7)], mask)
    assert abs(got - float(want)) < 1e-10


@pytest.mark.parametrize("name", sorted(SAMPLED_LOSSES))
@pytest.mark.parametrize("scale", [0.1, 3.0, 20.0])
def test_sampled_losses_match_oracles(name, scale):
    fn, oracle = SAMPLED_LOSSES[name], oracles.SAMPLED[name]
    rng = np.random.default_rng(len(name) + int(scale))
    pos = rng.normal(size=6) * scale
    neg = rng.normal(size=(6, 9)) * scale
    mask = np.array([1, 0, 1, 1, 0, 1], dtype=float)
    got = fn(Tensor(pos), Tensor(neg), mask).item()
    want = oracles.masked_mean([oracle(mp.mpf(pos[i]), [mp.mpf(v) for v in neg[i]]) for i in range(6)], mask)
    assert abs(got - float(want)) < 1e-10


def test_sampled_ce_with_all_negatives_equals_full_ce_exactly():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 8)) * 4
    t = rng.integers(0, 8, size=5)
    mask = np.ones(5)
    others = np.array([[j for j in range(8) if j != t[i]] for i in range(5)])
    pos = Tensor(z[np.arange(5), t])
    neg = Tensor(np.take_along_axis(z, others, axis=1))
    assert loss_sampled_ce(pos, neg, mask).item() == loss_full_ce(Tensor(z), t, mask).item()


def test_sampled_ce_with_all_negatives_matches_full_ce_through_the_model(tiny_ds, tiny_split):
    model = AfraModel(tiny_model_config(), tiny_ds.catalog, tiny_ds.vocab, seed=1)
    seqs = tiny_split[0].sequences[:6]
    b = model.batch([s.interactions for s in seqs], [s.context for s in seqs], tiny_split[0].split_day - 1,
                    inference=False)
    full = batch_loss(model, b, TrainConfig(), None, training=False, step=0)[0].item()
    cfg = TrainConfig(loss="sampled-ce", n_negatives=model.n_targets - 1)
    sampled = batch_loss(model, b, cfg, np.random.default_rng(0), training=False, step=0)[0].item()
    assert abs(full - sampled) < 1e-12


# masks -------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["full-ce"] + sorted(SAMPLED_LOSSES))
def test_masked_positions_have_zero_loss_and_gradient(name):
    rng = np.random.default_rng(4)
    mask = np.array([1, 0, 0, 1, 0, 1], dtype=float)
    off = mask == 0

    def run(a, b):
        x, y = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        if name == "full-ce":
            loss = loss_full_ce(x, y.data.astype(int)[:, 0], mask)
        else:
            loss = SAMPLED_LOSSES[name](x, y, mask)
        loss.backward()
        return loss.item(), x.grad, y.grad

    if name == "full-ce":
        a, b = rng.normal(size=(6, 10)), rng.integers(0, 10, size=(6, 1)).astype(float)
    else:
        a, b = rng.normal(size=6), rng.normal(size=(6, 4))
    value, ga, gb = run(a, b)
    assert np.array_equal(ga[off], np.zeros_like(ga[off]))
    if name != "full-ce":
        assert np.array_equal(gb[off], np.zeros_like(gb[off]))
    # arbitrary values at masked positions leave the loss bitwise unchanged
    a2, b2 = a.copy(), b.copy()
    a2[off] = rng.normal(size=a2[off].shape) * 100
    if name == "full-ce":
        b2[off] = (b2[off] + 3) % 10
    else:
        b2[off] = rng.normal(size=b2[off].shape) * 100
    assert run(a2, b2)[0] == value


def test_masked_positions_give_zero_gradient_through_the_model(tiny_ds, tiny_split):
    model = AfraModel(tiny_model_config(), tiny_ds.catalog, tiny_ds.vocab, seed=1)
    seqs = tiny_split[0].sequences[:5]
    b = model.batch([s.interactions for s in seqs], [s.context for s in seqs], tiny_split[0].split_day - 1,
                    inference=False)
    h = model.hidden(b)
    bsz, t, d = h.shape
    logits = model.logits(nk.reshape(h, (bsz * t, d)))
    leaf = Tensor(logits.data, requires_grad=True)
    mask = b.target_mask.reshape(-1)
    targets = np.where(mask > 0, b.target_index.reshape(-1), 0)
    loss = loss_full_ce(leaf, targets, mask)
    loss.backward()
    assert np.array_equal(leaf.grad[mask == 0], np.zeros_like(leaf.grad[mask == 0]))
    assert np.any(leaf.grad[mask > 0] != 0)
    # the trainer only ever touches masked-in rows, and agrees with the dense form
    got = batch_loss(model, b, TrainConfig(), None, training=False, step=0)[0].item()
    assert abs(got - loss.item()) < 1e-12


# negatives ---------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.data())
def test_negatives_are_distinct_and_exclude_target(n_targets, data):
    t = data.draw(st.integers(0, n_targets - 1))
    n = data.draw(st.integers(1, n_targets - 1))
    negs = sample_negatives(t, n, n_targets, np.random.default_rng(data.draw(st.integers(0, 99))))
    assert len(negs) == n == len(set(negs.tolist()))
    assert t not in negs and negs.min() >= 0 and negs.max() < n_targets


def test_negatives_are_uniform():
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    trials = 20000
    for row in sample_negatives_batch(np.full(trials, 3), 4, 10, rng):
        counts[row] += 1
    assert counts[3] == 0
    expected = trials * 4 / 9
    others = np.delete(counts, 3)
    chi2 = float(((others - expected) ** 2 / expected).sum())
    assert chi2 < 27.9  # 8 dof, p = 0.0005


def test_too_many_negatives_is_an_error():
    with pytest.raises(ValueError):
        sample_negatives(0, 10, 10, np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")
    with pytest.raises(ValueError):
        TrainConfig(loss="bpr", n_negatives=0)
    assert set(LOSSES) == {"full-ce", "sampled-ce", "bce", "bpr", "top1"}


# loop --------------------------------------------------------------------------

def test_batches_cover_every_sequence_once():
    class S:
        def __init__(self, n):
            self.interactions = [0] * n
    seqs = [S(n) for n in np.random.default_rng(0).integers(1, 30, size=157)]
    batches = make_batches(seqs, TrainConfig(batch_size=10, bucket_batches=3), np.random.default_rng(1))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(157))
    assert max(len(b) for b in batches) <= 10


def test_training_reference_day(tiny_split):
    assert training_reference_day(tiny_split[0]) == tiny_split[0].split_day - 1


@pytest.mark.parametrize("loss", ["full-ce", "bpr"])
def test_training_reduces_loss_and_is_deterministic(tiny_ds, tiny_split, tmp_path, loss):
    cfg = TrainConfig(loss=loss, n_negatives=5, epochs=3, batch_size=32, seed=5)

    def fit(tag):
        model = AfraModel(tiny_model_config(), tiny_ds.catalog, tiny_ds.vocab, seed=5)
        res = train(tiny_split[0], model, cfg, log_path=tmp_path / f"{tag}.jsonl",
                    checkpoint_path=tmp_path / f"{tag}.ckpt", track_loss=True)
        return res

    a, b = fit("a"), fit("b")
    assert a.final_loss < a.initial_loss
    assert a.epoch_losses == b.epoch_losses
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    lines = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [x["epoch"] for x in lines] == [0, 1, 2]
    assert all(set(x) == {"epoch", "loss", "wall_ms"} for x in lines)


def test_nan_parameters_raise_training_diverged(tiny_ds, tiny_split):
    model = AfraModel(tiny_model_config(), tiny_ds.catalog, tiny_ds.vocab)
    model.params["out.b"].data[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(tiny_split[0], model, TrainConfig(epochs=1))


def test_training_sequences_keep_only_target_users(tiny_ds, tiny_split):
    model = AfraModel(tiny_model_config(input_entities="outfits"), tiny_ds.catalog, tiny_ds.vocab)
    seqs = training_sequences(tiny_split[0], model)
    assert seqs
    for s in seqs:
        assert all(model.index.is_outfit[x.item] for x in s.interactions)
        assert len(s.interactions) <= model.config.embedder.max_len
