#!/usr/bin/env python3
"""Desk-scale analogue of the FRR comparison across the six model variants.

Trains every variant on a seeded synthetic corpus per seed, evaluates FRR at
1 FA / 100 hours and checks the expected orderings on the medians.

    python3 scripts/compare_variants.py --work runs/compare --seeds 0 1 2
"""

import argparse
import sys

from vtrigger import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/compare")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(experiments.VARIANTS),
                    choices=list(experiments.VARIANTS))
    ap.add_argument("--n-train", type=int, default=experiments.TOY_SPEC["n_train"])
    ap.add_argument("--operating-point", default="0.01/hr",
                    help="summary key, e.g. 0.01/hr (default) or 10/hr")
    ap.add_argument("train_args", nargs=argparse.REMAINDER,
                    help="extra flags passed to 'vtrigger train' after '--'")
    args = ap.parse_args()
    extra = [a for a in args.train_args if a != "--"]
    if args.operating_point != "0.01/hr":
        raise SystemExit("only the 0.01/hr operating point is written by 'vtrigger eval' by default")

    spec = dict(experiments.TOY_SPEC, n_train=args.n_train)
    res = experiments.run_comparison(args.work, args.seeds, args.variants, spec, tuple(extra),
                                 args.operating_point, log=lambda s: print(s, flush=True))
    print()
    for name, frr in res.medians().items():
        print(f"{name:<16s} median FRR {frr:.3f}  per seed {res.frr[name]}")
    ok = True
    for c in res.checks():
        ok &= c.ok
        print(f"{c.better:<16s} <= {c.worse:<12s} {c.better_frr:.3f} vs {c.worse_frr:.3f}  "
              f"{'ok' if c.ok else 'INVERTED'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
