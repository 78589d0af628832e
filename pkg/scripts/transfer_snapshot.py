"""Turn the final snapshot of one project into the starting snapshot of the next.

The calibrated hyperparameters are kept and the day counter is reset so the
new project's record file can start at day 1:

    safety-risk calibrate project1.csv --out p1
    python scripts/transfer_snapshot.py p1/snapshot.json p2_start.json
    safety-risk calibrate project2.csv --snapshot p2_start.json --out p2

Vulnerabilities missing from the old project can be added with --add; they
start from the default prior.
"""

import argparse
from dataclasses import replace

from safety_risk.fileio import load_snapshot, save_snapshot
from safety_risk.model import initial_state


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("snapshot")
    ap.add_argument("out")
    ap.add_argument("--add", default="", help="comma-separated new vulnerability ids")
    args = ap.parse_args()
    snap = load_snapshot(args.snapshot)
    state = snap.state
    new = [v for v in args.add.split(",") if v and v not in state.vulns]
    vulns = dict(state.vulns)
    if new:
        vulns.update(initial_state(new, list(state.obs_types)).vulns)
    state = replace(state, vulns=vulns, day=0)
    save_snapshot(state, args.out, {**snap.meta, "transferred_from_day": snap.created_day})
    print(f"wrote {args.out}: {len(vulns)} vulnerabilities, day reset from {snap.created_day} to 0")


if __name__ == "__main__":
    main()
