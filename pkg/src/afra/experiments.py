"""Desk-scale experiment drivers: relevance table, loss comparison, freshness
strategies and diversity, each emitting a report of the ordinal claims checked."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import (CFKNNRecommender, EmbeddingKNNRecommender, PopularityRecommender, model_article_vectors,
                        sasrec_config)
from .config import RunConfig, derive_seed
from .datamodel import Dataset, TestView, TrainView, generate_synthetic, time_split
from .embedder import CatalogIndex, FeatureSpec
from .encoder import AfraModel, ModelConfig
from .metrics import ALL, EvalCase, MetricReport, build_eval_cases, evaluate
from .reranker import ModelRecommender
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("table1", "table2", "table3", "diversity")
MIN_MARGIN = 0.10


@dataclass
class Prepared:
    dataset: Dataset
    train_view: TrainView
    test_view: TestView
    cases: list[EvalCase]
    index: CatalogIndex


def prepare(cfg: RunConfig, seed: int) -> Prepared:
    ds = generate_synthetic(cfg.data, derive_seed(seed, "data"))
    tr, te = time_split(ds, cfg.split_day())
    spec = FeatureSpec.build(ds.vocab, cfg.model.embedder, len(ds.catalog))
    return Prepared(ds, tr, te, build_eval_cases(te, cfg.model.embedder.target_entity),
                    CatalogIndex(ds.catalog, spec, cfg.model.embedder.target_entity))


def model_variant(base: ModelConfig, name: str) -> ModelConfig:
    emb = base.embedder
    if name == "afra":
        return base
    if name == "outfits-only":
        return ModelConfig(base.encoder, dataclasses.replace(emb, input_entities="outfits"), base.ln_eps)
    if name == "age-feature":
        return ModelConfig(base.encoder, dataclasses.replace(emb, age_feature=True), base.ln_eps)
    if name == "sasrec":
        return sasrec_config(base)
    if name == "sasrec-outfits-only":
        s = sasrec_config(base)
        return ModelConfig(s.encoder, dataclasses.replace(s.embedder, input_entities="outfits"), s.ln_eps)
    raise ValueError(f"unknown model variant {name!r}")


def fit(prep: Prepared, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int) -> AfraModel:
    model = AfraModel(model_cfg, prep.dataset.catalog, prep.dataset.vocab, seed=derive_seed(seed, "init"))
    t0 = time.perf_counter()
    tc = dataclasses.replace(train_cfg, seed=derive_seed(seed, "train"))
    res = train(prep.train_view, model, tc)
    log.info("trained %s in %.1fs, losses %s", model_cfg.embedder.input_entities, time.perf_counter() - t0,
             [round(x, 4) for x in res.epoch_losses])
    return model


def same_day_share(cases: Sequence[EvalCase]) -> float:
    """Share of cases whose latest fed interaction happened on the serving day."""
    if not cases:
        return math.nan
    return float(np.mean([bool(c.history) and c.history[-1].day == c.day for c in cases]))


def relative_margin(a: float, b: float) -> float:
    return (a - b) / b if b > 0 else (math.inf if a > 0 else 0.0)


def _claim(name: str, lhs: str, rhs: str, a: float, b: float, min_margin: float | None, direction: str = ">") -> dict:
    margin = relative_margin(a, b)
    if direction == ">":
        ok = a > b and (min_margin is None or margin >= min_margin)
    else:
        ok = a < b
    return {"claim": name, "lhs": lhs, "rhs": rhs, "lhs_value": a, "rhs_value": b,
            "relative_margin": None if math.isinf(margin) else margin, "required_margin": min_margin,
            "passed": bool(ok)}


# ---------------------------------------------------------------------------
# experiments (one seed each; ``run`` aggregates seeds)


def table1_seed(cfg: RunConfig, seed: int, prep: Prepared | None = None,
                models: dict[str, AfraModel] | None = None) -> dict:
    prep = prep or prepare(cfg, seed)
    models = {} if models is None else models
    ks = cfg.eval.ks
    for name in ("afra", "outfits-only", "sasrec", "sasrec-outfits-only"):
        if name not in models:
            models[name] = fit(prep, model_variant(cfg.model, name), cfg.train, seed)
    rows: dict[str, MetricReport] = {
        "AFRA-RT": evaluate(ModelRecommender(models["afra"], "rt"), prep.cases, ks),
        "AFRA-Batch": evaluate(ModelRecommender(models["afra"], "batch"), prep.cases, ks),
        "AFRA-RT (outfits only)": evaluate(ModelRecommender(models["outfits-only"], "rt"), prep.cases, ks),
        "AFRA-Batch (outfits only)": evaluate(ModelRecommender(models["outfits-only"], "batch"), prep.cases, ks),
        "SASRec": evaluate(ModelRecommender(models["sasrec"], "rt"), prep.cases, ks),
        "SASRec (outfits only)": evaluate(ModelRecommender(models["sasrec-outfits-only"], "rt"), prep.cases, ks),
        "Popularity": evaluate(PopularityRecommender(prep.train_view, prep.index), prep.cases, ks),
        "IB-CF-kNN": evaluate(CFKNNRecommender(prep.train_view, prep.index, "rt"), prep.cases, ks),
        "IB-Emb-kNN": evaluate(EmbeddingKNNRecommender(prep.train_view, prep.index,
                                                      model_article_vectors(models["afra"]), mode="rt"),
                               prep.cases, ks),
    }
    k5, k15 = min(ks, key=lambda k: abs(k - 5)), min(ks, key=lambda k: abs(k - 15))
    r = {name: rep.get("recall", k5) for name, rep in rows.items()}
    claims = [
        _claim("rt_beats_batch", "AFRA-RT", "AFRA-Batch", r["AFRA-RT"], r["AFRA-Batch"], MIN_MARGIN),
        _claim("features_beat_outfits_only", "AFRA-RT", "AFRA-RT (outfits only)", r["AFRA-RT"],
               r["AFRA-RT (outfits only)"], MIN_MARGIN),
        _claim("features_beat_ids_only", "AFRA-RT", "SASRec", r["AFRA-RT"], r["SASRec"], MIN_MARGIN),
        _claim("context_beats_popularity_cold", "AFRA-RT", "Popularity",
               rows["AFRA-RT"].get("recall", k15, "fully-cold"), rows["Popularity"].get("recall", k15, "fully-cold"),
               None),
    ]
    return {"rows": rows, "claims": claims, "same_day_share": same_day_share(prep.cases)}


def table2_seed(cfg: RunConfig, seed: int, prep: Prepared | None = None, negatives: Sequence[int] = (30, 100),
                losses: Sequence[str] = ("sampled-ce", "bce", "bpr", "top1")) -> dict:
    prep = prep or prepare(cfg, seed)
    ks = cfg.eval.ks
    full = fit(prep, cfg.model, dataclasses.replace(cfg.train, loss="full-ce"), seed)
    rows = {"full-ce": evaluate(ModelRecommender(full, cfg.eval.mode), prep.cases, ks)}
    for loss in losses:
        for n in negatives:
            m = fit(prep, cfg.model, dataclasses.replace(cfg.train, loss=loss, n_negatives=n), seed)
            rows[f"{loss} (n={n})"] = evaluate(ModelRecommender(m, cfg.eval.mode), prep.cases, ks)
    base = rows["full-ce"]
    claims = []
    for name, rep in rows.items():
        if name == "full-ce":
            continue
        for k in ks:
            claims.append({"claim": f"delta_recall@{k}", "lhs": name, "rhs": "full-ce",
                           "relative_margin": relative_margin(rep.get("recall", k), base.get("recall", k)),
                           "lhs_value": rep.get("recall", k), "rhs_value": base.get("recall", k),
                           "required_margin": None, "passed": None})
    return {"rows": rows, "claims": claims}


def table3_seed(cfg: RunConfig, seed: int, prep: Prepared | None = None,
                models: dict[str, AfraModel] | None = None) -> dict:
    prep = prep or prepare(cfg, seed)
    models = {} if models is None else models
    ks = tuple(sorted(set(cfg.eval.ks) | {30}))
    for name in ("afra", "age-feature"):
        if name not in models:
            models[name] = fit(prep, model_variant(cfg.model, name), cfg.train, seed)
    mode = cfg.eval.mode
    hl = cfg.rerank.half_life
    rows = {
        "AFRA": evaluate(ModelRecommender(models["afra"], mode), prep.cases, ks),
        "+ age feature": evaluate(ModelRecommender(models["age-feature"], mode, "age-feature"), prep.cases, ks),
        "+ age decay": evaluate(ModelRecommender(models["afra"], mode, "decay", hl), prep.cases, ks),
    }
    f = {n: rep.get("freshness", 30) for n, rep in rows.items()}
    rec = {n: rep.get("recall", 30) for n, rep in rows.items()}
    drop = -relative_margin(rec["+ age decay"], rec["AFRA"])
    claims = [
        _claim("decay_is_fresher", "+ age decay", "AFRA", f["+ age decay"], f["AFRA"], None, "<"),
        {"claim": "decay_recall_drop_below_20pct", "lhs": "+ age decay", "rhs": "AFRA",
         "lhs_value": rec["+ age decay"], "rhs_value": rec["AFRA"], "relative_margin": -drop,
         "required_margin": -0.2, "passed": bool(drop < 0.2)},
        _claim("age_feature_is_fresher", "+ age feature", "AFRA", f["+ age feature"], f["AFRA"], None, "<"),
    ]
    return {"rows": rows, "claims": claims}


def diversity_seed(cfg: RunConfig, seed: int, prep: Prepared | None = None,
                   models: dict[str, AfraModel] | None = None) -> dict:
    prep = prep or prepare(cfg, seed)
    models = {} if models is None else models
    ks = cfg.eval.ks
    if "afra" not in models:
        models["afra"] = fit(prep, cfg.model, cfg.train, seed)
    rows = {
        "AFRA-RT": evaluate(ModelRecommender(models["afra"], "rt"), prep.cases, ks),
        "AFRA-Batch": evaluate(ModelRecommender(models["afra"], "batch"), prep.cases, ks),
        "Popularity": evaluate(PopularityRecommender(prep.train_view, prep.index), prep.cases, ks),
        "IB-CF-kNN": evaluate(CFKNNRecommender(prep.train_view, prep.index, "rt"), prep.cases, ks),
        "IB-Emb-kNN": evaluate(EmbeddingKNNRecommender(prep.train_view, prep.index,
                                                      model_article_vectors(models["afra"]), mode="rt"),
                               prep.cases, ks),
    }
    k = max(ks)
    ild = {n: rep.get("inter_list_diversity", k) for n, rep in rows.items()}
    claims = [
        {"claim": f"afra_inter_list_diversity@{k}_below_2", "lhs": "AFRA-RT", "rhs": None,
         "lhs_value": ild["AFRA-RT"], "rhs_value": 2.0, "relative_margin": None, "required_margin": None,
         "passed": bool(ild["AFRA-RT"] < 2.0)},
        _claim(f"afra_more_diverse_than_popularity@{k}", "AFRA-RT", "Popularity", ild["AFRA-RT"],
               ild["Popularity"], None, "<"),
    ]
    return {"rows": rows, "claims": claims}


SEED_RUNNERS: dict[str, Callable[..., dict]] = {
    "table1": table1_seed, "table2": table2_seed, "table3": table3_seed, "diversity": diversity_seed,
}

REPORTED_METRICS = {
    "table1": ("recall",),
    "table2": ("recall",),
    "table3": ("freshness", "recall"),
    "diversity": ("inter_list_diversity", "temporal_diversity"),
}


# ---------------------------------------------------------------------------
# aggregation and reports


def _round(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(np.round(v, 12))


def run(experiment: str, cfg: RunConfig, seeds: Sequence[int]) -> dict:
    if experiment not in SEED_RUNNERS:
        raise ValueError(f"unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
    per_seed = []
    for seed in seeds:
        t0 = time.perf_counter()
        per_seed.append(SEED_RUNNERS[experiment](cfg, seed))
        log.info("%s seed %d done in %.1fs", experiment, seed, time.perf_counter() - t0)
    metrics = REPORTED_METRICS[experiment]
    ks = per_seed[0]["rows"][next(iter(per_seed[0]["rows"]))].ks
    segments = (ALL, "fully-cold", "article-only", "outfit-history")
    table = []
    for name in per_seed[0]["rows"]:
        for m in metrics:
            for k in ks:
                for s in segments:
                    vals = [res["rows"][name].get(m, k, s) for res in per_seed]
                    table.append({"row": name, "metric": m, "k": k, "segment": s,
                                  "per_seed": [_round(v) for v in vals],
                                  "mean": _round(float(np.mean(vals)))})
    claims = []
    for seed, res in zip(seeds, per_seed):
        for c in res["claims"]:
            claims.append({"seed": seed, **{k: (_round(v) if isinstance(v, float) else v) for k, v in c.items()}})
    out = {"experiment": experiment, "seeds": list(seeds), "config": cfg.to_json(), "table": table,
           "claims": claims}
    if experiment == "table1":
        out["same_day_share"] = [_round(r["same_day_share"]) for r in per_seed]
    checked = [c["passed"] for c in claims if c["passed"] is not None]
    out["all_claims_passed"] = bool(all(checked)) if checked else None
    return out


def summary_markdown(report: dict) -> str:
    lines = [f"# {report['experiment']} (seeds {', '.join(map(str, report['seeds']))})", ""]
    rows = sorted({t["row"] for t in report["table"]}, key=[t["row"] for t in report["table"]].index)
    cols = [(t["metric"], t["k"]) for t in report["table"] if t["row"] == rows[0] and t["segment"] == ALL]
    for seg in (ALL, "fully-cold"):
        lines.append(f"## segment: {seg}")
        lines.append("| row | " + " | ".join(f"{m}@{k}" for m, k in cols) + " |")
        lines.append("|---" * (len(cols) + 1) + "|")
        for r in rows:
            vals = {(t["metric"], t["k"]): t["mean"] for t in report["table"] if t["row"] == r and t["segment"] == seg}
            lines.append(f"| {r} | " + " | ".join("-" if vals[c] is None else f"{vals[c]:.4f}" for c in cols) + " |")
        lines.append("")
    lines.append("## claims")
    for c in report["claims"]:
        status = {True: "PASS", False: "FAIL", None: "info"}[c["passed"]]
        margin = "" if c["relative_margin"] is None else f" (relative {c['relative_margin']:+.1%})"
        lines.append(f"- [{status}] seed {c['seed']} {c['claim']}: {c['lhs']} {c['lhs_value']:.4f} vs "
                     f"{c['rhs']} {c['rhs_value']:.4f}{margin}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / f"{report['experiment']}_report.json"
    md = out_dir / f"{report['experiment']}_report.md"
    for p, text in ((js, json.dumps(report, indent=1, sort_keys=True) + "\n"), (md, summary_markdown(report))):
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(p)
    return js, md
