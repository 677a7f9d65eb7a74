"""Causal self-attention encoder with a softmax head over the target items."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .datamodel import Context, Interaction, Item
from .embedder import (CatalogIndex, EmbedderConfig, FeatureSpec, SequenceBatch, compose_batch, init_params,
                       make_batch)
from .numkit import DimensionError, Tensor

CHECKPOINT_MAGIC = b"AFRACKPT"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_ff: int = 128
    dropout_rate: float = 0.1
    max_positions: int = 105

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    ln_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.embedder, dict):
            self.embedder = EmbedderConfig(**self.embedder)
        need = self.embedder.n_context + self.embedder.max_len
        if self.encoder.max_positions < need:
            raise ValueError(f"max_positions {self.encoder.max_positions} < context + max_len = {need}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def causal_mask(n: int) -> np.ndarray:
    """allowed[i, j] is True iff position i may attend to j (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


def _encoder_params(rng: np.random.Generator, cfg: EncoderConfig, n_targets: int) -> dict[str, Tensor]:
    d, f = cfg.d_model, cfg.d_ff
    p: dict[str, Tensor] = {}

    def param(name, arr):
        p[name] = Tensor(arr, requires_grad=True, name=name)

    for l in range(cfg.n_layers):
        pre = f"layer{l}."
        param(pre + "ln1.g", np.ones(d))
        param(pre + "ln1.b", np.zeros(d))
        for m in "qkvo":
            param(pre + f"attn.w{m}", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))
            param(pre + f"attn.b{m}", np.zeros(d))
        param(pre + "ln2.g", np.ones(d))
        param(pre + "ln2.b", np.zeros(d))
        param(pre + "ff.w1", rng.normal(0.0, np.sqrt(2.0 / d), size=(d, f)))
        param(pre + "ff.b1", np.zeros(f))
        param(pre + "ff.w2", rng.normal(0.0, 1.0 / np.sqrt(f), size=(f, d)))
        param(pre + "ff.b2", np.zeros(d))
    param("ln_f.g", np.ones(d))
    param("ln_f.b", np.zeros(d))
    param("out.w", rng.normal(0.0, 0.5 / np.sqrt(d), size=(n_targets, d)))
    param("out.b", np.zeros(n_targets))
    return p


class AfraModel:
    """Parameters plus the catalog index they are tied to."""

    def __init__(self, config: ModelConfig, catalog: Sequence[Item], vocab: dict[str, int], seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.catalog = catalog
        self.vocab = dict(vocab)
        emb = config.embedder
        self.spec = FeatureSpec.build(self.vocab, emb, len(catalog))
        self.index = CatalogIndex(catalog, self.spec, emb.target_entity)
        if params is None:
            rng = np.random.default_rng([seed & 0xFFFFFFFF, 7])
            params = init_params(rng, self.spec, emb, self.vocab, config.encoder.d_model,
                                 config.encoder.max_positions)
            params.update(_encoder_params(rng, config.encoder, self.index.n_targets))
        self.params = params
        self.dropout_seed = seed

    @property
    def n_targets(self) -> int:
        return self.index.n_targets

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- forward ------------------------------------------------------------

    def batch(self, histories, contexts, reference_days, inference: bool) -> SequenceBatch:
        return make_batch(histories, contexts, reference_days, self.index, self.config.embedder, inference)

    def hidden(self, batch: SequenceBatch, training: bool = False, step: int = 0) -> Tensor:
        """Final-layer states (B, T, d_model)."""
        cfg = self.config.encoder
        t = batch.n_positions
        if t > cfg.max_positions:
            raise DimensionError(f"{t} positions exceed max_positions={cfg.max_positions}")
        x = compose_batch(self.params, self.index, self.spec, self.config.embedder, batch)
        return encode(x, self.params, cfg, self.config.ln_eps, training, self.dropout_seed, step)

    def logits(self, rows: Tensor) -> Tensor:
        """(P, d_model) hidden rows -> (P, n_targets)."""
        w = self.params["out.w"]
        return nk.add(nk.matmul(rows, nk.transpose(w, (1, 0))), self.params["out.b"])

    def gather_rows(self, h: Tensor, flat_positions: np.ndarray) -> Tensor:
        b, t, d = h.shape
        return nk.embedding_lookup(nk.reshape(h, (b * t, d)), flat_positions)

    def forward(self, batch: SequenceBatch, training: bool = False, step: int = 0) -> Tensor:
        """Per-position logits (B, T, n_targets)."""
        h = self.hidden(batch, training, step)
        b, t, d = h.shape
        out = self.logits(nk.reshape(h, (b * t, d)))
        return nk.reshape(out, (b, t, self.n_targets))

    def last_position_logits(self, batch: SequenceBatch) -> np.ndarray:
        with nk.no_grad():
            if batch.n_positions == 0:
                return np.zeros((len(batch.lengths), self.n_targets))
            h = self.hidden(batch, training=False)
            b, t, _ = h.shape
            last = batch.last_positions()
            empty = last < 0
            flat = np.arange(b) * t + np.maximum(last, 0)
            out = self.logits(self.gather_rows(h, flat)).data.copy()
            # nothing to condition on (no context tokens, no history)
            out[empty] = 0.0
            return out

    def predict_next(self, histories: Sequence[Sequence[Interaction]], contexts: Sequence[Context],
                     serving_day: int) -> np.ndarray:
        """(B, n_targets) next-item distribution; unavailable targets get 0."""
        batch = self.batch(histories, contexts, serving_day, inference=True)
        z = self.last_position_logits(batch)
        allowed = np.broadcast_to(self.index.available[self.index.target_items], z.shape)
        with nk.no_grad():
            return nk.softmax(Tensor(z), axis=-1, where=allowed).data

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        names = list(self.params)
        header = {
            "model_config": self.config.to_json(),
            "feature_spec": self.spec.to_json(),
            "vocab": self.vocab,
            "n_items": len(self.catalog),
            "target_items": self.index.target_items.tolist(),
            "dropout_seed": self.dropout_seed,
            "arrays": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
            f.write(hb)
            for n in names:
                f.write(self.params[n].data.astype("<f4").tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path, catalog: Sequence[Item]) -> "AfraModel":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        if header["n_items"] != len(catalog):
            raise ValueError("checkpoint was trained on a different catalog")
        off = 16 + hlen
        params = {}
        for a in header["arrays"]:
            n = int(np.prod(a["shape"]))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(a["shape"])
            off += 4 * n
            params[a["name"]] = Tensor(arr, requires_grad=True, name=a["name"])
        if off != len(raw):
            raise ValueError(f"{path}: trailing bytes after parameter arrays")
        cfg = header["model_config"]
        mc = ModelConfig(EncoderConfig(**cfg["encoder"]), EmbedderConfig(**cfg["embedder"]), cfg["ln_eps"])
        model = cls(mc, catalog, header["vocab"], seed=header["dropout_seed"], params=params)
        if model.index.target_items.tolist() != header["target_items"]:
            raise ValueError("checkpoint target items do not match the catalog")
        return model


def encode(x: Tensor, params: dict[str, Tensor], cfg: EncoderConfig, eps: float, training: bool,
           seed: int, step: int) -> Tensor:
    """Pre-norm transformer stack over (B, T, d) inputs with a causal mask."""
    b, t, d = x.shape
    h_, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    allowed = causal_mask(t)
    scale = 1.0 / np.sqrt(dh)
    rate = cfg.dropout_rate

    def drop(z, layer_id):
        return nk.dropout(z, rate, training, nk.dropout_rng(seed, layer_id, step) if training else None)

    def heads(z):
        return nk.transpose(nk.reshape(z, (b, t, h_, dh)), (0, 2, 1, 3))

    h = drop(x, 0)
    for l in range(cfg.n_layers):
        pre = f"layer{l}."
        a = nk.layer_norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"], eps)
        q = heads(nk.add(nk.matmul(a, params[pre + "attn.wq"]), params[pre + "attn.bq"]))
        k = heads(nk.add(nk.matmul(a, params[pre + "attn.wk"]), params[pre + "attn.bk"]))
        v = heads(nk.add(nk.matmul(a, params[pre + "attn.wv"]), params[pre + "attn.bv"]))
        scores = nk.mul(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), scale)
        att = nk.softmax(scores, axis=-1, where=allowed)
        ctx = nk.reshape(nk.transpose(nk.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        o = nk.add(nk.matmul(ctx, params[pre + "attn.wo"]), params[pre + "attn.bo"])
        h = nk.add(h, drop(o, 1 + 2 * l))
        f = nk.layer_norm(h, params[pre + "ln2.g"], params[pre + "ln2.b"], eps)
        f = nk.relu(nk.add(nk.matmul(f, params[pre + "ff.w1"]), params[pre + "ff.b1"]))
        f = nk.add(nk.matmul(f, params[pre + "ff.w2"]), params[pre + "ff.b2"])
        h = nk.add(h, drop(f, 2 + 2 * l))
    return nk.layer_norm(h, params["ln_f.g"], params["ln_f.b"], eps)


def sasrec_config(base: ModelConfig | None = None) -> ModelConfig:
    """IDs-only variant: item-id embedding input, no context tokens, no session
    or action encodings; same encoder and target masking."""
    base = base or ModelConfig()
    emb = dataclasses.replace(base.embedder, features=(), one_hot=(), item_id_width=base.encoder.d_model,
                              use_context=False, use_session=False, use_action=False, age_feature=False)
    return ModelConfig(dataclasses.replace(base.encoder), emb, base.ln_eps)
