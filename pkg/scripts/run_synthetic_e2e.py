#!/usr/bin/env python3
"""Train imaginators and both arbitrator variants on the scripted corpus.

Minutes on a laptop CPU; prints the report and leaves checkpoints, metrics,
and report.json in --out.
"""

import argparse
import json

from turntaking.experiments import synthetic_experiment


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--n-dialogues", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--imaginator-epochs", type=int, default=10)
    ap.add_argument("--arbitrator-epochs", type=int, default=8)
    args = ap.parse_args()
    report = synthetic_experiment(args.out, n_dialogues=args.n_dialogues,
                                  seed=args.seed,
                                  imaginator_epochs=args.imaginator_epochs,
                                  arbitrator_epochs=args.arbitrator_epochs)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
