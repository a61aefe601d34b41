#!/usr/bin/env python3
"""Write a raw booking-style corpus file for the `turntaking preprocess`
command, e.g. to walk the whole CLI pipeline by hand."""

import argparse

from turntaking.synthetic import make_multiwoz_like, write_multiwoz_like


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="raw_corpus.json")
    ap.add_argument("--n-dialogues", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    write_multiwoz_like(make_multiwoz_like(args.n_dialogues, args.seed), args.out)
    print(f"wrote {args.n_dialogues} dialogues to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
