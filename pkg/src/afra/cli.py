"""afra command line: gen-data, train, evaluate, reproduce.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .baselines import (BASELINES, CFKNNRecommender, EmbeddingKNNRecommender, PopularityRecommender,
                        model_article_vectors, onehot_article_vectors)
from .config import RunConfig, derive_seed, shipped_config
from .datamodel import ConfigError, DataError, generate_synthetic, load_dataset, save_dataset, time_split
from .encoder import AfraModel
from .experiments import EXPERIMENTS, model_variant, run, write_report
from .embedder import CatalogIndex, FeatureSpec
from .metrics import build_eval_cases, evaluate
from .reranker import RERANK_MODES, ModelRecommender, write_recommendations
from .trainer import LOSSES, TrainingDiverged, train

log = logging.getLogger("afra")

SHIPPED_CONFIGS = ("desk", "mid", "paper")
VARIANTS = ("afra", "outfits-only", "age-feature", "sasrec", "sasrec-outfits-only")


class UsageError(Exception):
    pass


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afra", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run config JSON, or a bundled one: desk, mid, paper")
        sp.add_argument("--seed", type=int, help="run seed (overrides the config)")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    with_config(g)
    g.add_argument("--out-dir", required=True)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    with_config(t)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--loss", choices=LOSSES)
    t.add_argument("--negatives", type=int, help="negatives per position for sampled losses")
    t.add_argument("--epochs", type=int)
    t.add_argument("--variant", choices=VARIANTS, default="afra")
    t.add_argument("--log", help="epoch log path (default: <checkpoint>.log.jsonl)")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint or a baseline on the test day")
    with_config(e)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--baseline", choices=BASELINES)
    e.add_argument("--embeddings-from", help="checkpoint whose article embeddings the embedding-knn baseline uses")
    e.add_argument("--data-dir", required=True)
    e.add_argument("--mode", choices=("rt", "batch"))
    e.add_argument("--k", type=_ks, help="comma-separated cutoffs, e.g. 5,15,30")
    e.add_argument("--rerank", choices=RERANK_MODES)
    e.add_argument("--half-life", type=float)
    e.add_argument("--report", required=True, help="report path (.json; a .csv is written alongside)")
    e.add_argument("--dump", help="write recommendation lists as JSONL")

    r = sub.add_parser("reproduce", help="run an experiment end to end on generated data")
    with_config(r)
    r.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--seeds", type=_seeds, help="comma-separated seeds (default: the run seed)")
    return p


def load_config(args) -> RunConfig:
    if args.config is None:
        cfg = RunConfig()
    elif args.config in SHIPPED_CONFIGS and not Path(args.config).exists():
        cfg = shipped_config(args.config)
    else:
        cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    ds = generate_synthetic(cfg.data, derive_seed(cfg.seed, "data"))
    save_dataset(ds, args.out_dir)
    log.info("wrote %d items, %d users to %s", len(ds.catalog), len(ds.sequences), args.out_dir)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    tc = cfg.train
    over = {k: v for k, v in (("loss", args.loss), ("n_negatives", args.negatives), ("epochs", args.epochs))
            if v is not None}
    try:
        tc = dataclasses.replace(tc, **over, seed=derive_seed(cfg.seed, "train"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = load_dataset(args.data_dir)
    tr, _ = time_split(ds, cfg.eval.split_day if cfg.eval.split_day is not None else ds.horizon_days - 1)
    model = AfraModel(model_variant(cfg.model, args.variant), ds.catalog, ds.vocab, seed=derive_seed(cfg.seed, "init"))
    if tc.loss != "full-ce" and tc.n_negatives > model.n_targets - 1:
        raise UsageError(f"--negatives {tc.n_negatives} exceeds the {model.n_targets - 1} available negatives")
    ckpt = Path(args.out_checkpoint)
    log_path = args.log or str(ckpt) + ".log.jsonl"
    res = train(tr, model, tc, log_path=log_path, checkpoint_path=ckpt)
    log.info("final epoch loss %.5f; checkpoint %s", res.epoch_losses[-1] if res.epoch_losses else float("nan"), ckpt)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    mode = args.mode or cfg.eval.mode
    ks = args.k or cfg.eval.ks
    rerank = args.rerank or cfg.rerank.mode
    half_life = args.half_life if args.half_life is not None else cfg.rerank.half_life
    if half_life <= 0:
        raise UsageError("--half-life must be positive")
    ds = load_dataset(args.data_dir)
    _, te = time_split(ds, cfg.eval.split_day if cfg.eval.split_day is not None else ds.horizon_days - 1)
    tr, _ = time_split(ds, te.split_day)
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        model = AfraModel.load(args.checkpoint, ds.catalog)
        rec = ModelRecommender(model, mode, rerank, half_life)
        name = f"checkpoint:{Path(args.checkpoint).name}"
    else:
        if rerank != "none":
            raise UsageError("--rerank applies to model checkpoints only")
        emb = cfg.model.embedder
        index = CatalogIndex(ds.catalog, FeatureSpec.build(ds.vocab, emb, len(ds.catalog)), emb.target_entity)
        if args.baseline == "popularity":
            rec = PopularityRecommender(tr, index, mode)
        elif args.baseline == "cf-knn":
            rec = CFKNNRecommender(tr, index, mode)
        else:
            if args.embeddings_from:
                vectors = model_article_vectors(AfraModel.load(args.embeddings_from, ds.catalog))
            else:
                vectors = onehot_article_vectors(ds.catalog, ds.vocab)
            rec = EmbeddingKNNRecommender(tr, index, vectors, mode=mode)
        name = f"baseline:{args.baseline}"
    cases = build_eval_cases(te, cfg.model.embedder.target_entity)
    report = evaluate(rec, cases, ks, meta={"recommender": name, "mode": mode, "rerank": rerank,
                                            "half_life": half_life if rerank == "decay" else None})
    js, cs = report.write(args.report)
    if args.dump:
        from .metrics import run_recommender
        lists = run_recommender(rec, cases, max(ks))
        write_recommendations(args.dump, ((c.user, c.day, mode, lst) for c, lst in zip(cases, lists)))
    log.info("wrote %s and %s (%d cases)", js, cs, report.counts["all"])
    return 0


def cmd_reproduce(args) -> int:
    cfg = load_config(args)
    seeds = args.seeds or (cfg.seed,)
    report = run(args.experiment, cfg, seeds)
    js, md = write_report(report, args.out_dir)
    sys.stdout.write(Path(md).read_text(encoding="utf-8"))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"afra {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"afra {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except (OSError, DataError, ValueError) as exc:
        print(f"afra {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
