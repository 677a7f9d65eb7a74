"""Run every experiment on one config and seed list, writing reports to an output directory.

    python3 scripts/reproduce_all.py --config mid --seeds 0,1,2 --out-dir results/mid
"""

import argparse
import logging
import time
from pathlib import Path

from afra.cli import SHIPPED_CONFIGS
from afra.config import RunConfig, shipped_config
from afra.experiments import EXPERIMENTS, run, write_report


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="mid", help="config JSON or one of: " + ", ".join(SHIPPED_CONFIGS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--experiments", default=",".join(EXPERIMENTS))
    p.add_argument("--out-dir", default="results")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = shipped_config(args.config) if args.config in SHIPPED_CONFIGS else RunConfig.load(args.config)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    out = Path(args.out_dir)
    for name in args.experiments.split(","):
        t0 = time.perf_counter()
        report = run(name, cfg, seeds)
        _, md = write_report(report, out)
        print(md.read_text(), end="")
        print(f"{name}: {time.perf_counter() - t0:.0f}s, all claims passed: {report['all_claims_passed']}\n")


if __name__ == "__main__":
    main()
