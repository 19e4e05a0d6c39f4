#!/usr/bin/env python3
"""Train one model on a fresh toy corpus and print its validation-loss curve.

    python3 scripts/trainability.py --arch sa-encoder --lr 5e-5 --epochs 100
"""

import argparse
import json
import tempfile
from pathlib import Path

from vtrigger import cli, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="sa-encoder", choices=list(cli.VALID_MODES))
    ap.add_argument("--mode", default="ctc")
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--lr", type=float, default=5e-5)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--work", help="keep artifacts here (default: a temporary directory)")
    args = ap.parse_args()

    work = Path(args.work or tempfile.mkdtemp(prefix="vtrigger-"))
    work.mkdir(parents=True, exist_ok=True)
    spec = dict(experiments.TOY_SPEC, n_train=args.n_train, seed=args.seed)
    (work / "spec.json").write_text(json.dumps(spec))
    if cli.main(["gen-data", "--spec", str(work / "spec.json"), "--out", str(work / "data")]):
        raise SystemExit(1)
    rc = cli.main(["train", "--arch", args.arch, "--mode", args.mode, "--data", str(work / "data"),
                   "--out", str(work / "run"), "--lr", str(args.lr), "--epochs", str(args.epochs),
                   "--seed", str(args.seed)])
    if rc:
        raise SystemExit(rc)
    rows = [json.loads(line) for line in (work / "run" / "trainlog.jsonl").read_text().splitlines()]
    first = rows[0]["val_loss"]
    for r in rows:
        print(f"epoch {r['epoch']:3d}  train {r['train_loss']:8.3f}  val {r['val_loss']:8.3f}  "
              f"({r['val_loss'] / first:5.1%} of epoch 1)")
    print(f"artifacts in {work}")


if __name__ == "__main__":
    main()
