"""Command-line entry point: gen-data, featurize, train, eval, count-params, quantize, bench.

Every command writes its outputs, plus a ``manifest.json`` run record,
into the directory given by ``--out``. Exit codes: 0 ok, 2 usage,
3 data/format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, evaluation, frontend, models, pipeline, quantbench, synthdata, training
from .errors import DataError, NumericError

log = logging.getLogger("vtrigger")

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

PRESETS = {
    "full": {
        "encoder": asdict(models.EncoderConfig()),
        "bilstm": asdict(models.BiLstmConfig()),
        "train": {},
    },
    "desk": {
        "encoder": dict(n_layers=2, d_model=64, n_heads=4, d_head=16, d_ff=256),
        "bilstm": dict(n_layers=2, units_per_direction=48),
        "train": dict(lr=1e-3, max_epochs=40),
    },
}

# arch -> modes it supports; the decoder exists only on tf-encoder
VALID_MODES = {
    "bilstm": ("ctc", "mtl"),
    "sa-encoder": ("ctc", "mtl"),
    "tf-encoder": ("ctc+dec", "mtl"),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_hash(path) -> str:
    """sha256 of a file, or of a directory's sorted (relative path, file hash) listing."""
    p = Path(path)
    if p.is_file():
        return sha256_file(p)
    if not p.is_dir():
        raise DataError(f"{p}: no such file or directory")
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json"):
        h.update(f"{f.relative_to(p).as_posix()}\0{sha256_file(f)}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    seconds: float = 0.0

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _manifest(args, config: dict, inputs=(), seed=None) -> RunManifest:
    return RunManifest(command=args.command, argv=list(args.argv), seed=seed, config=config,
                       inputs={str(p): content_hash(p) for p in inputs})


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# config resolution


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: config file not found") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None


def _merge(*layers: dict) -> dict:
    out: dict = {}
    for layer in layers:
        out.update({k: v for k, v in layer.items() if v is not None})
    return out


def resolve_train_config(args, n_outputs: int) -> dict:
    """Flags > config file > preset defaults, for both the model and training configs."""
    preset = PRESETS[args.preset]
    file_cfg = _load_json(args.config) if args.config else {}
    unknown = set(file_cfg) - {"model", "train"}
    if unknown:
        raise UsageError(f"config file: unknown sections {sorted(unknown)} (expected 'model', 'train')")
    family = "bilstm" if args.arch == "bilstm" else "encoder"
    model_cfg = _merge(preset[family], file_cfg.get("model", {}), {"n_outputs": n_outputs})
    flags = {"seed": args.seed, "max_epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
             "patience_epochs": args.patience, "mode": args.mode}
    train_cfg = _merge(preset["train"], file_cfg.get("train", {}), flags)
    known = {f.name for f in fields(training.TrainConfig)}
    bad = set(train_cfg) - known
    if bad:
        raise UsageError(f"unknown training options {sorted(bad)}")
    return {"preset": args.preset, "config_file": args.config, "model": model_cfg, "train": train_cfg}


def _model_config(arch: str, cfg: dict):
    try:
        return models.BiLstmConfig(**cfg) if arch == "bilstm" else models.EncoderConfig(**cfg)
    except TypeError as e:
        raise UsageError(f"bad model config: {e}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    spec = synthdata.SynthCorpusSpec.from_json(args.spec) if args.spec else synthdata.SynthCorpusSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = _out_dir(args.out)
    corpus = synthdata.gen_corpus(spec)
    synthdata.write_corpus(corpus, out)
    man = _manifest(args, {"spec": asdict(spec), "noise_level": corpus.noise_level},
                    inputs=[args.spec] if args.spec else [], seed=spec.seed)
    man.outputs = ["corpus.json", "manifest.jsonl", "features/"]
    man.write(out)
    counts = {s: len(corpus.split(s)) for s in synthdata.SPLITS}
    print(json.dumps({"out": str(out), "trigger_phones": corpus.trigger, "counts": counts}))
    return 0


def cmd_featurize(args) -> int:
    out = _out_dir(args.out)
    audio = frontend.read_wav(args.wav)
    mel = frontend.compute_melfb(audio)
    name = Path(args.wav).stem + ".vtfe"
    frontend.write_features(out / name, mel.frames)
    man = _manifest(args, {"frontend": asdict(frontend.FrontendConfig())}, inputs=[args.wav])
    man.outputs = [name]
    man.write(out)
    print(json.dumps({"frames": int(mel.frames.shape[0]), "out": str(out / name)}))
    return 0


def cmd_train(args) -> int:
    if args.mode not in VALID_MODES[args.arch]:
        raise UsageError(f"--arch {args.arch} does not support --mode {args.mode} "
                         f"(supported: {', '.join(VALID_MODES[args.arch])}); "
                         "the decoder is defined on the self-attention trunk only (tf-encoder)")
    corpus = synthdata.load_corpus(args.data)
    resolved = resolve_train_config(args, corpus.inventory.n_phones + 1)
    cfg = training.TrainConfig(**resolved["train"])
    mcfg = _model_config(args.arch, resolved["model"])
    m = models.build_model(args.arch, mcfg, mtl=cfg.mode == "mtl", seed=cfg.seed)
    pipeline.attach_norm(m, corpus)
    sets = pipeline.training_sets(m, corpus)
    out = _out_dir(args.out)
    t0 = time.perf_counter()
    best, tlog = training.train(m, sets["train"], sets["val"], cfg, sets["disc_train"], sets["disc_val"])
    tlog.meta.update(n_params=models.count_params(best))
    best.meta.update(trigger_phones=corpus.trigger)
    models.save_checkpoint(best, out / "model.vtck")
    inference = models.export_inference(best)
    models.save_checkpoint(inference, out / "inference.vtck")
    tlog.write(out / "trainlog.jsonl")
    (out / "trainlog_meta.json").write_text(json.dumps(tlog.meta, indent=2, sort_keys=True, default=float) + "\n")
    man = _manifest(args, resolved, inputs=[args.data] + ([args.config] if args.config else []), seed=cfg.seed)
    man.outputs = ["model.vtck", "inference.vtck", "trainlog.jsonl", "trainlog_meta.json"]
    man.seconds = time.perf_counter() - t0
    man.write(out)
    print(json.dumps({"best_epoch": tlog.meta["best_epoch"], "stopped_epoch": tlog.meta["stopped_epoch"],
                      "best_val_loss": tlog.meta["best_val_loss"],
                      "inference_params": models.count_params(inference)}))
    return 0


def _parse_phones(text: str) -> list[int]:
    try:
        phones = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--trigger must be a list of phone indices, got {text!r}") from None
    if not phones:
        raise UsageError("--trigger is empty")
    return phones


def load_any_checkpoint(path):
    """Float or int8 checkpoint -> (graph used for inference, forward callable, kind)."""
    from . import checkpoint
    header, _ = checkpoint.read(path)
    if header.get("kind") == "int8":
        qm = quantbench.load_quantized(path)
        return qm.dequantized(), (lambda x, lengths=None: quantbench.quantized_forward(qm, x, lengths)), "int8"
    m = models.load_checkpoint(path)
    return m, None, "float"


def cmd_eval(args) -> int:
    m, fwd, kind = load_any_checkpoint(args.ckpt)
    corpus = synthdata.load_corpus(args.data)
    if args.trigger:
        trigger = _parse_phones(args.trigger)
    elif corpus.trigger:
        trigger = list(corpus.trigger)
    else:
        raise UsageError("no trigger phones: pass --trigger or use a corpus that records them")
    if not corpus.split("eval", "positive"):
        raise DataError(f"{args.data}: evaluation split has no positive segments")
    out = _out_dir(args.out)
    scored = evaluation.score_corpus(m, corpus, trigger, args.length_normalize, fwd)
    curve = evaluation.det_curve(scored, evaluation.negative_hours(scored))
    targets = sorted(set([evaluation.DEFAULT_FA_PER_HOUR] + list(args.fa_targets or [])))
    summary = evaluation.summarize(curve, targets, args.fa_count or ())
    summary.update(checkpoint_kind=kind, trigger_phones=trigger, length_normalize=args.length_normalize)
    curve.write_csv(out / "det.csv")
    evaluation.write_scores(out / "scores.csv", scored)
    evaluation.write_summary(out / "summary.json", summary)
    man = _manifest(args, {"trigger": trigger, "fa_targets": targets, "fa_counts": args.fa_count or [],
                           "length_normalize": args.length_normalize}, inputs=[args.ckpt, args.data])
    man.outputs = ["det.csv", "scores.csv", "summary.json"]
    man.write(out)
    print(json.dumps(summary["frr_at"]))
    return 0


def cmd_count_params(args) -> int:
    if args.ckpt:
        m, _, _ = load_any_checkpoint(args.ckpt)
    else:
        preset = PRESETS[args.preset]
        family = "bilstm" if args.arch == "bilstm" else "encoder"
        mcfg = _model_config(args.arch, preset[family])
        m = models.build_model(args.arch, mcfg)
        if args.arch == "tf-encoder" and not args.with_decoder:
            m = models.export_inference(m)
    table = models.param_table(m)
    total = models.count_params(m)
    if args.json:
        print(json.dumps({"total": total, "tensors": [{"name": n, "shape": s, "size": k} for n, s, k in table]}))
    else:
        for name, shape, size in table:
            print(f"{name:<28s} {str(shape):<16s} {size:>10,d}")
        print(f"{'total':<45s}{total:>10,d}")
    if args.out:
        out = _out_dir(args.out)
        (out / "params.json").write_text(json.dumps({"total": total, "tensors": table}, indent=2) + "\n")
        man = _manifest(args, {"arch": args.arch, "preset": args.preset},
                        inputs=[args.ckpt] if args.ckpt else [])
        man.outputs = ["params.json"]
        man.write(out)
    return 0


def cmd_quantize(args) -> int:
    m, _, kind = load_any_checkpoint(args.ckpt)
    if kind == "int8":
        raise UsageError(f"{args.ckpt} is already quantized")
    if not args.keep_training_heads:
        m = models.export_inference(m)
    qm = quantbench.quantize_model(m)
    out = _out_dir(args.out)
    n = quantbench.save_quantized(qm, out / "model.int8.vtck")
    rep = quantbench.size_report((out / "model.int8.vtck").read_bytes())
    float_bytes = len(models.checkpoint_bytes(m, np.float32))
    info = dict(asdict(rep), float32_bytes=float_bytes, ratio=n / float_bytes,
                max_abs_error={k: float(np.max(np.abs(quantbench.dequantize(t) - m.params[k])))
                               for k, t in qm.qtensors.items()})
    (out / "size.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    man = _manifest(args, {"scheme": "int8 per-tensor symmetric, weight-only"}, inputs=[args.ckpt])
    man.outputs = ["model.int8.vtck", "size.json"]
    man.write(out)
    print(json.dumps({k: info[k] for k in ("total_bytes", "int8_payload_bytes", "float_payload_bytes",
                                           "float32_bytes", "ratio")}))
    return 0


def cmd_bench(args) -> int:
    if args.ckpt:
        m, _, kind = load_any_checkpoint(args.ckpt)
        model = quantbench.load_quantized(args.ckpt) if kind == "int8" else models.export_inference(m)
        tag = f"{m.arch}:{kind}"
    else:
        preset = PRESETS[args.preset]
        family = "bilstm" if args.arch == "bilstm" else "encoder"
        model = models.export_inference(models.build_model(args.arch, _model_config(args.arch, preset[family])))
        tag = f"{args.arch}:random"
    rep = quantbench.bench_forward(model, frames=args.frames, runs=args.runs, threads=args.threads, tag=tag)
    text = rep.to_json()
    if args.out:
        out = _out_dir(args.out)
        (out / "bench.json").write_text(text + "\n")
        man = _manifest(args, {"frames": args.frames, "runs": args.runs, "threads": args.threads},
                        inputs=[args.ckpt] if args.ckpt else [])
        man.outputs = ["bench.json"]
        man.write(out)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="vtrigger", description="Voice-trigger second-pass re-scorer toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--spec", help="JSON corpus spec (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("featurize", parents=[common], help="16 kHz WAV -> log-mel VTFE file")
    f.add_argument("--wav", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", parents=[common], help="train a model on a generated corpus")
    t.add_argument("--arch", required=True, choices=models.ARCHS)
    t.add_argument("--mode", required=True, choices=training.MODES)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="max epochs")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score the evaluation split, write DET curve and summary")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--trigger", help="trigger phone indices, e.g. '5,4,3' (default: the corpus trigger)")
    e.add_argument("--out", required=True)
    e.add_argument("--fa-targets", type=float, nargs="*", help="extra FA/hr operating points")
    e.add_argument("--fa-count", type=int, nargs="*", help="count-based operating points (total FAs)")
    e.add_argument("--length-normalize", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count-params", parents=[common], help="itemized trainable parameter count")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--arch", choices=models.ARCHS)
    src.add_argument("--ckpt")
    c.add_argument("--preset", choices=sorted(PRESETS), default="full")
    c.add_argument("--with-decoder", action="store_true", help="tf-encoder: include the training-only decoder")
    c.add_argument("--json", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_count_params)

    q = sub.add_parser("quantize", parents=[common], help="int8 weight-only quantization")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--keep-training-heads", action="store_true")
    q.set_defaults(func=cmd_quantize)

    b = sub.add_parser("bench", parents=[common], help="forward-pass timing")
    bs = b.add_mutually_exclusive_group(required=True)
    bs.add_argument("--ckpt")
    bs.add_argument("--arch", choices=models.ARCHS)
    b.add_argument("--preset", choices=sorted(PRESETS), default="full")
    b.add_argument("--frames", type=int, default=60)
    b.add_argument("--runs", type=int, default=30)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"vtrigger: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"vtrigger: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"vtrigger: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
