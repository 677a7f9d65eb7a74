"""Causal next-item training with target-entity masking and the ranking losses."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .datamodel import EntityType, TrainView, UserSequence, build_sequences
from .embedder import CatalogIndex, ComposedInput, SequenceBatch, filter_inputs
from .encoder import AfraModel
from .numkit import Tensor

log = logging.getLogger(__name__)

LOSSES = ("full-ce", "sampled-ce", "bce", "bpr", "top1")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: str = "full-ce"
    n_negatives: int = 30
    batch_size: int = 64
    lr: float = 0.01
    epochs: int = 10
    seed: int = 0
    clip_norm: float | None = 1.0
    bucket_batches: int = 20

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {', '.join(LOSSES)}")
        if self.loss != "full-ce" and self.n_negatives < 1:
            raise ValueError("sampled losses need n_negatives >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 are required")


# ---------------------------------------------------------------------------
# targets


def build_targets(composed: ComposedInput, index: CatalogIndex) -> tuple[np.ndarray, np.ndarray]:
    """Shifted next-item targets and their mask for one composed sequence."""
    ids = composed.item_ids
    n = len(ids)
    tidx = np.full(n, -1, dtype=np.int64)
    mask = np.zeros(n)
    for p in range(n - 1):
        cur, nxt = ids[p], ids[p + 1]
        if cur < 0 or nxt < 0:
            continue
        if index.is_target[nxt] and index.available[nxt]:
            tidx[p] = index.target_index[nxt]
            mask[p] = 1.0
    return tidx, mask


# ---------------------------------------------------------------------------
# losses


def _masked_mean(per_pos: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    denom = max(1.0, float(mask.sum()))
    return nk.mul(nk.sum(nk.mul(per_pos, Tensor(mask))), 1.0 / denom)


def loss_full_ce(logits: Tensor, targets, mask) -> Tensor:
    """Mean over masked positions of -log softmax(logits)[target]."""
    targets = np.where(np.asarray(mask) > 0, targets, 0)
    per = nk.sub(nk.logsumexp(logits, axis=-1), nk.pick(logits, targets))
    return _masked_mean(per, mask)


def loss_sampled_ce(pos: Tensor, neg: Tensor, mask) -> Tensor:
    p = pos.shape[0]
    scores = nk.concat([nk.reshape(pos, (p, 1)), neg], axis=-1)
    return _masked_mean(nk.sub(nk.logsumexp(scores, axis=-1), pos), mask)


def loss_bce(pos: Tensor, neg: Tensor, mask) -> Tensor:
    # -log sig(r+) - sum log(1 - sig(r-)) = softplus(-r+) + sum softplus(r-)
    per = nk.add(nk.softplus(nk.neg(pos)), nk.sum(nk.softplus(neg), axis=-1))
    return _masked_mean(per, mask)


def _pairwise_diff(pos: Tensor, neg: Tensor) -> Tensor:
    p, n = neg.shape
    return nk.sub(neg, nk.broadcast_to(nk.reshape(pos, (p, 1)), (p, n)))


def loss_bpr(pos: Tensor, neg: Tensor, mask) -> Tensor:
    # -(1/n) sum log sig(r+ - r-)
    return _masked_mean(nk.mean(nk.softplus(_pairwise_diff(pos, neg)), axis=-1), mask)


def loss_top1(pos: Tensor, neg: Tensor, mask) -> Tensor:
    per = nk.mean(nk.add(nk.sigmoid(_pairwise_diff(pos, neg)), nk.sigmoid(nk.square(neg))), axis=-1)
    return _masked_mean(per, mask)


SAMPLED_LOSSES = {"sampled-ce": loss_sampled_ce, "bce": loss_bce, "bpr": loss_bpr, "top1": loss_top1}


def sample_negatives(target_id: int, n: int, n_targets: int, rng: np.random.Generator) -> np.ndarray:
    """n distinct target-vocab ids, uniformly, excluding ``target_id``."""
    return sample_negatives_batch(np.array([target_id]), n, n_targets, rng)[0]


def sample_negatives_batch(targets: np.ndarray, n: int, n_targets: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1 or n > n_targets - 1:
        raise ValueError(f"cannot draw {n} distinct negatives from {n_targets - 1} candidates")
    targets = np.asarray(targets, dtype=np.int64)
    keys = rng.random((len(targets), n_targets - 1))
    # the n smallest uniform keys form a uniform subset without replacement
    idx = np.argpartition(keys, n - 1, axis=1)[:, :n] if n < n_targets - 1 else np.argsort(keys, axis=1)
    idx = np.sort(idx, axis=1)
    return idx + (idx >= targets[:, None])


def batch_loss(model: AfraModel, batch: SequenceBatch, cfg: TrainConfig, rng: np.random.Generator | None,
               training: bool, step: int) -> tuple[Tensor, int]:
    """Loss over the masked positions of a batch (and their count)."""
    h = model.hidden(batch, training=training, step=step)
    b, t, d = h.shape
    flat_mask = batch.target_mask.reshape(-1)
    sel = np.flatnonzero(flat_mask > 0)
    if len(sel) == 0:
        return nk.mul(nk.sum(h), 0.0), 0
    rows = model.gather_rows(h, sel)
    tgt = batch.target_index.reshape(-1)[sel]
    ones = np.ones(len(sel))
    if cfg.loss == "full-ce":
        return loss_full_ce(model.logits(rows), tgt, ones), len(sel)
    negs = sample_negatives_batch(tgt, cfg.n_negatives, model.n_targets, rng)
    w, bias = model.params["out.w"], model.params["out.b"]
    pos = nk.add(nk.sum(nk.mul(rows, nk.embedding_lookup(w, tgt)), axis=-1), nk.embedding_lookup(bias, tgt))
    wn = nk.embedding_lookup(w, negs)                           # (P, n, d)
    neg = nk.matmul(wn, nk.reshape(rows, (len(sel), d, 1)))     # (P, n, 1)
    neg = nk.add(nk.reshape(neg, negs.shape), nk.embedding_lookup(bias, negs))
    return SAMPLED_LOSSES[cfg.loss](pos, neg, ones), len(sel)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: AfraModel
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None


def training_reference_day(view: TrainView) -> int:
    """Recency anchor while training: the last day of the training window, so
    its events sit in bucket 0 just as same-day events do at serving."""
    return view.split_day - 1


def training_sequences(view: TrainView, model: AfraModel) -> list[UserSequence]:
    emb = model.config.embedder
    xs = []
    contexts = {}
    for s in view.sequences:
        contexts[s.user] = s.context
        xs.extend(filter_inputs(s.interactions, model.index, emb))
    return build_sequences(xs, view.catalog, contexts, emb.max_len, EntityType(emb.target_entity))


def make_batches(seqs: Sequence[UserSequence], cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of similar length: shuffle, sort chunks of
    ``bucket_batches`` batches by length, split, shuffle batch order."""
    order = rng.permutation(len(seqs))
    chunk = cfg.batch_size * cfg.bucket_batches
    batches = []
    for lo in range(0, len(order), chunk):
        part = order[lo:lo + chunk]
        part = part[np.argsort([len(seqs[i].interactions) for i in part], kind="stable")]
        batches.extend(part[j:j + cfg.batch_size] for j in range(0, len(part), cfg.batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def dataset_loss(model: AfraModel, seqs: Sequence[UserSequence], reference_day: int, cfg: TrainConfig) -> float:
    """Inference-mode full loss over ``seqs`` (weighted by masked positions)."""
    total, count = 0.0, 0
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 99])
    with nk.no_grad():
        for lo in range(0, len(seqs), 256):
            chunk = seqs[lo:lo + 256]
            batch = model.batch([s.interactions for s in chunk], [s.context for s in chunk], reference_day, False)
            loss, n = batch_loss(model, batch, cfg, rng, training=False, step=0)
            total += loss.item() * n
            count += n
    return total / max(count, 1)


def train(view: TrainView, model: AfraModel, cfg: TrainConfig, log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None, track_loss: bool = False) -> TrainResult:
    seqs = training_sequences(view, model)
    if not seqs:
        raise ValueError("no training sequences contain a target-entity interaction")
    ref = training_reference_day(view)
    params = model.parameters()
    opt = nk.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 1])
    neg_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 2])
    result = TrainResult(model)
    if track_loss:
        result.initial_loss = dataset_loss(model, seqs, ref, cfg)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            total, count = 0.0, 0
            for idx in make_batches(seqs, cfg, rng):
                chunk = [seqs[i] for i in idx]
                batch = model.batch([s.interactions for s in chunk], [s.context for s in chunk], ref, False)
                opt.zero_grad()
                loss, n = batch_loss(model, batch, cfg, neg_rng, training=True, step=step)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; "
                                           f"grad norm {nk.grad_norm(params):.3g}")
                if n:
                    loss.backward()
                    if cfg.clip_norm:
                        nk.clip_grad_norm(params, cfg.clip_norm)
                    opt.step()
                total += value * n
                count += n
                step += 1
            mean = total / max(count, 1)
            result.epoch_losses.append(mean)
            wall_ms = int(1000 * (time.perf_counter() - t0))
            log.info("epoch %d loss %.5f (%d ms)", epoch, mean, wall_ms)
            if log_file:
                log_file.write(json.dumps({"epoch": epoch, "loss": mean, "wall_ms": wall_ms}) + "\n")
                log_file.flush()
    except nk.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite values at epoch {epoch} step {step}: {exc}") from exc
    finally:
        if log_file:
            log_file.close()
    if track_loss:
        result.final_loss = dataset_loss(model, seqs, ref, cfg)
    if checkpoint_path:
        model.save(checkpoint_path)
    return result
