#!/usr/bin/env python3
"""Forward-pass timing and model size, encoder vs BiLSTM (float32 and int8).

    python3 scripts/bench.py --frames 60 --runs 50 --threads 1
"""

import argparse
import json

from vtrigger import models, quantbench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--runs", type=int, default=30)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--json", help="write all reports to this file")
    args = ap.parse_args()

    reports = []
    for arch in ("sa-encoder", "bilstm"):
        m = models.build_model(arch, seed=0)
        for tag, model in ((f"{arch}:float", m), (f"{arch}:int8", quantbench.quantize_model(m))):
            rep = quantbench.bench_forward(model, args.frames, args.runs, args.threads, tag=tag)
            reports.append(rep)
            print(f"{tag:<18s} median {rep.median_ms:7.2f} ms  p90 {rep.p90_ms:7.2f} ms  "
                  f"params {rep.n_params:>9,d}  float32 {rep.float_bytes:>11,d} B  int8 {rep.quantized_bytes:>10,d} B")
    enc, lstm = reports[0], reports[2]
    print(f"bilstm / encoder median time: {lstm.median_ms / enc.median_ms:.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump([json.loads(r.to_json()) for r in reports], f, indent=2)


if __name__ == "__main__":
    main()
