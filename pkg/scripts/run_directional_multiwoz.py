#!/usr/bin/env python3
"""Reduced-scale booking-corpus comparison of ITA against the history-only
baseline, at package-default model sizes. Prints the report and leaves all
artifacts in --out.
"""

import argparse
import json

from turntaking.experiments import directional_experiment


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/directional")
    ap.add_argument("--n-dialogues", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    report = directional_experiment(args.out, n_dialogues=args.n_dialogues,
                                    seed=args.seed, epochs=args.epochs)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
