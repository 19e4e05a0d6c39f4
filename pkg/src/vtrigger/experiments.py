"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance tests.

Everything runs through :func:`vtrigger.cli.main`, so an experiment is a
sequence of reproducible CLI invocations whose artifacts stay on disk.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cli

# (arch, mode) per variant name
VARIANTS = {
    "bilstm": ("bilstm", "ctc"),
    "bilstm+mtl": ("bilstm", "mtl"),
    "sa-encoder": ("sa-encoder", "ctc"),
    "sa-encoder+mtl": ("sa-encoder", "mtl"),
    "tf-encoder": ("tf-encoder", "ctc+dec"),
    "tf-encoder+mtl": ("tf-encoder", "mtl"),
}

# (better-or-equal, worse-or-equal) pairs expected at the operating point
ORDERINGS = [
    ("tf-encoder", "sa-encoder"),
    ("sa-encoder", "bilstm"),
    ("bilstm+mtl", "bilstm"),
    ("sa-encoder+mtl", "sa-encoder"),
    ("tf-encoder+mtl", "tf-encoder"),
]

TOY_SPEC = {
    "n_train": 2000,
    "n_val": 200,
    "n_phones": 8,
    "bayes_error": 0.2,
}


def _run(argv: list[str]) -> None:
    code = cli.main(argv)
    if code != 0:
        raise RuntimeError(f"vtrigger {' '.join(argv)} exited with {code}")


@dataclass
class OrderingCheck:
    better: str
    worse: str
    better_frr: float
    worse_frr: float
    tolerance: float

    @property
    def inversion(self) -> float:
        return self.better_frr - self.worse_frr

    @property
    def ok(self) -> bool:
        return self.inversion <= self.tolerance + 1e-12


@dataclass
class ComparisonResult:
    operating_point: float
    seeds: list[int]
    frr: dict[str, list[float]]  # variant -> FRR per seed
    seconds: dict[str, list[float]] = field(default_factory=dict)

    def medians(self) -> dict[str, float]:
        return {k: float(np.median(v)) for k, v in self.frr.items()}

    def checks(self, tolerance: float = 0.02) -> list[OrderingCheck]:
        med = self.medians()
        return [OrderingCheck(a, b, med[a], med[b], tolerance) for a, b in ORDERINGS if a in med and b in med]

    def to_json(self) -> str:
        d = asdict(self)
        d["medians"] = self.medians()
        d["checks"] = [dict(asdict(c), ok=c.ok, inversion=c.inversion) for c in self.checks()]
        return json.dumps(d, indent=2, sort_keys=True)


def run_comparison(work_dir, seeds=(0, 1, 2), variants=tuple(VARIANTS), spec: dict | None = None,
               train_args: tuple[str, ...] = (), operating_point: str = "0.01/hr", log=print) -> ComparisonResult:
    """Train and evaluate every variant for every seed; corpus and model share the seed."""
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    spec = dict(TOY_SPEC if spec is None else spec)
    res = ComparisonResult(float(operating_point.split("/")[0]), list(seeds), {v: [] for v in variants},
                       {v: [] for v in variants})
    for seed in seeds:
        data = work / f"data-s{seed}"
        spec_path = work / f"spec-s{seed}.json"
        spec_path.write_text(json.dumps(dict(spec, seed=seed)))
        if not (data / "corpus.json").exists():
            _run(["gen-data", "--spec", str(spec_path), "--out", str(data)])
        for name in variants:
            arch, mode = VARIANTS[name]
            run = work / f"{name}-s{seed}"
            t0 = time.perf_counter()
            _run(["train", "--arch", arch, "--mode", mode, "--data", str(data), "--out", str(run),
                  "--seed", str(seed), *train_args])
            _run(["eval", "--ckpt", str(run / "inference.vtck"), "--data", str(data), "--out", str(run / "eval")])
            summary = json.loads((run / "eval" / "summary.json").read_text())
            frr = summary["frr_at"][operating_point]
            frr = 1.0 if frr is None else frr
            res.frr[name].append(frr)
            res.seconds[name].append(time.perf_counter() - t0)
            log(f"seed {seed} {name:<15s} FRR@{operating_point} = {frr:.3f} ({res.seconds[name][-1]:.0f}s)")
    (work / "comparison.json").write_text(res.to_json() + "\n")
    return res
