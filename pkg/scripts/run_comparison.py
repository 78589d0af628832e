"""Full policy comparison on the default scenario, with the PHL ablation.

    python3 scripts/run_comparison.py --out results/comparison --seeds 100 --days 365
"""

import argparse
import json
import logging
import sys
import time

from safety_risk.experiment import POLICY_NAMES, ExperimentConfig, run_policy_experiment
from safety_risk.simulator import default_scenario


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/comparison")
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--days", type=int, default=365)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--no-ablation", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    last = {}

    def progress(label, day):
        if day % 73 == 0 and last.get(label) != day:
            last[label] = day
            logging.info("%s: day %d", label, day)

    t0 = time.time()
    summary = run_policy_experiment(default_scenario(), list(POLICY_NAMES), args.days, args.seeds,
                                    args.out, ExperimentConfig(first_seed=args.first_seed),
                                    phl_ablation=not args.no_ablation, progress=progress)
    summary.pop("runs")
    summary["wall_seconds"] = time.time() - t0
    json.dump(summary, sys.stdout, indent=1, sort_keys=True)
    print()


if __name__ == "__main__":
    main()
