#!/usr/bin/env python3
"""Multi-seed desk experiments: single-target, all-to-all, multi-trigger,
stability against the naive baseline, 100 clean samples and the norm-bound
ablation. Writes one JSON file per experiment into --out.

    python3 scripts/desk_experiments.py all --out results/
    python3 scripts/desk_experiments.py norm_bound --seeds 3 --set unlearn.rounds=3
"""

import argparse
import json
import time
from pathlib import Path

from ibau import experiments as ex
from ibau.formats import write_json

RUNNERS = {
    "single_target": lambda seeds, o: ex.single_target(range(seeds or 5), *o),
    "all_to_all": lambda seeds, o: ex.all_to_all(range(seeds or 5), 20, *o),
    "multi_trigger": lambda seeds, o: ex.multi_trigger(range(seeds or 5), 30, *o),
    "stability": lambda seeds, o: ex.stability(range(seeds or 10), *o),
    "clean_size": lambda seeds, o: ex.clean_size(100, range(seeds or 5), 10, 0.25, *o),
    "norm_bound": lambda seeds, o: ex.norm_bound(range(seeds or 5), (0.25, 1.0, 4.0), *o),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("experiment", choices=[*RUNNERS, "all"])
    ap.add_argument("--seeds", type=int, default=0, help="number of seeds (0: the experiment's default)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    names = list(RUNNERS) if args.experiment == "all" else [args.experiment]
    for name in names:
        start = time.perf_counter()
        res = RUNNERS[name](args.seeds, args.overrides)
        res["wall_seconds"] = time.perf_counter() - start
        write_json(args.out / f"{name}.json", res)
        headline = {k: v for k, v in res.items() if k.startswith("median") or k in ("std", "tau")}
        print(f"{name} ({res['wall_seconds']:.0f}s): {json.dumps(headline)}")


if __name__ == "__main__":
    main()
