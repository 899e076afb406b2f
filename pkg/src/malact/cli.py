"""Command line entry point: ``malact <subcommand> ...``.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import corpus as C
from . import experiments as E
from . import probe
from . import shap
from .cluster import embedding_outliers
from .errors import InputError, MalactError
from .model import (
    ModelConfig,
    TrainConfig,
    evaluate,
    load_model,
    preprocess,
    save_model,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (MalactError, OSError, json.JSONDecodeError, UnicodeDecodeError)

logger = logging.getLogger("malact")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which we reserve for data errors
        raise UsageError(f"{self.prog}: {message}")


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text)
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three fractions: train,validation,test")
    return parts


def _select_split(samples, split: str, fractions):
    if split == "all":
        return list(samples)
    tr, va, te = C.split_by_order(samples, fractions)
    return {"train": tr, "validation": va, "test": te}[split]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args) -> None:
    spec = C.CorpusSpec()
    if args.spec:
        spec = C.CorpusSpec.from_dict(json.loads(Path(args.spec).read_text()))
    overrides = {k: v for k, v in (("n_samples", args.n_samples), ("seed", args.seed)) if v is not None}
    if overrides:
        spec = C.CorpusSpec.from_dict({**spec.to_dict(), **overrides})
    manifest = C.generate_corpus(spec, args.out)
    print(f"wrote {len(manifest.entries)} files to {args.out}")


def cmd_train(args) -> None:
    samples, _ = C.load_corpus(args.corpus)
    tr, va, _ = C.split_by_order(samples, args.fractions)
    tc = TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size, seed=args.seed,
        precision=args.precision,
    )
    arch = ModelConfig.from_dict(json.loads(Path(args.arch).read_text())) if args.arch else None
    model = E.train_regime(args.regime, tr, va, tc, arch, model_seed=args.seed)
    save_model(model, args.model)
    if args.out:
        _write(Path(args.out), "history.json", _dump(model.metadata.get("history", {})))
    print(f"saved {args.regime} model to {args.model}")


def cmd_eval(args) -> None:
    model = load_model(args.model)
    samples, _ = C.load_corpus(args.corpus)
    data = _select_split(samples, args.split, args.fractions)
    metrics = evaluate(model, data)
    _write(Path(args.out), "metrics.json", _dump({"split": args.split, "n": len(data), **metrics}))
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))


def cmd_analyze_embedding(args) -> None:
    model = load_model(args.model)
    rep = embedding_outliers(model, args.min_cluster_size, args.min_samples, seed=args.seed)
    out = Path(args.out)
    _write(out, "embedding.csv", rep.to_csv())
    _write(out, "embedding.svg", rep.to_svg())
    summary = {
        "n_clusters": rep.clusters.n_clusters,
        "outliers": rep.outliers(),
        "padding_is_outlier": rep.points[-1].is_outlier,
        "mds_stress": rep.mds.final_stress,
        "warnings": rep.warnings,
    }
    _write(out, "embedding.json", _dump(summary))
    print(f"{len(rep.outliers())} outlier bytes: " + " ".join(f"0x{b:02x}" for b in rep.outliers()))


def cmd_analyze_filters(args) -> None:
    model = load_model(args.model)
    samples, _ = C.load_corpus(args.corpus)
    data = _select_split(samples, args.split, args.fractions)
    if args.limit:
        data = data[: args.limit]
    records = []
    for s in data:
        records += probe.top_k_activations(model, preprocess(s.data, model.config.input_len), args.k, s.id, s.label)
    out = Path(args.out)
    _write(out, "activations.csv", probe.records_to_csv(records))
    n_filters = model.config.layers[0].filters
    by_filter = probe.aggregate_by_filter(records, n_filters)
    by_offset = probe.aggregate_by_offset(records, args.bucket_size)
    _write(out, "filters.csv", by_filter.to_csv())
    _write(out, "filters.svg", by_filter.to_svg("top activations by first-layer filter"))
    _write(out, "offsets.csv", by_offset.to_csv())
    _write(out, "offsets.svg", by_offset.to_svg("top activations by file offset"))
    print(f"{len(records)} records from {len(data)} samples")


def _background_files(path: Path, limit: Optional[int]) -> list[Path]:
    root = path / "samples" if (path / "samples").is_dir() else path
    if not root.is_dir():
        raise InputError(f"background {path} is not a directory")
    files = sorted(p for p in root.iterdir() if p.is_file())
    if limit:
        files = files[:limit]
    if not files:
        raise InputError(f"no background files in {root}")
    return files


def cmd_explain(args) -> None:
    model = load_model(args.model)
    L = model.config.input_len
    data = Path(args.file).read_bytes()
    bg = np.stack([preprocess(p.read_bytes(), L) for p in _background_files(Path(args.background), args.background_limit)])
    cfg = shap.AttributionConfig(n_samples=args.n_samples, seed=args.seed, batch_size=args.batch_size)
    name = Path(args.file).stem
    attr = shap.gradient_shap(model, preprocess(data, L), bg, cfg, sample=name)
    report = shap.top_segments(shap.segment(attr), data, n=args.top, include_padding=args.include_padding,
                               attribution=attr, sample=name)
    out = Path(args.out)
    _write(out, f"{name}.shap.json", report.to_json())
    _write(out, f"{name}.shap.svg", report.to_svg())
    print(f"f(x)={attr.output:.4f} E[f(b)]={attr.expected_output:.4f} segments={report.n_segments}")


def cmd_annotate(args) -> None:
    data = Path(args.file).read_bytes()
    ann = probe.annotate_offset(data, args.offset, args.length)
    if args.out:
        _write(Path(args.out), f"{Path(args.file).stem}.{args.offset}.json", _dump(ann.to_dict()))
    print(f"offset 0x{args.offset:x}: {ann.region}" + (f" ({ann.detail})" if ann.detail else ""))
    for line in ann.string_view + [""] + ann.instruction_view:
        print(line)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="malact", description="Byte-level CNN malware classifier analysis toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common_split(sp):
        sp.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
        sp.add_argument("--fractions", type=_fractions, default=(0.6, 0.2, 0.2),
                        help="train,validation,test fractions by generation order")

    sp = sub.add_parser("gen-corpus", help="generate a synthetic PE corpus with a manifest")
    sp.add_argument("--spec", help="JSON corpus spec (defaults used when omitted)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("train", help="train one regime on the corpus training split")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--regime", choices=E.REGIMES, default="baseline")
    sp.add_argument("--model", required=True, help="output model file")
    sp.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    sp.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    sp.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fractions", type=_fractions, default=(0.6, 0.2, 0.2))
    sp.add_argument("--arch", help="JSON model config (input length, layers); desk default when omitted")
    sp.add_argument("--precision", choices=("float64", "float32"), default="float64")
    sp.add_argument("--out", help="directory for the loss history")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a model on a corpus split")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", default="reports")
    common_split(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze-embedding", help="cluster and project the byte embedding")
    sp.add_argument("--model", required=True)
    sp.add_argument("--min-cluster-size", type=int, default=2)
    sp.add_argument("--min-samples", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="reports")
    sp.set_defaults(func=cmd_analyze_embedding)

    sp = sub.add_parser("analyze-filters", help="top-k first-layer activations and histograms")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--bucket-size", type=int)
    sp.add_argument("--limit", type=int, help="analyze at most this many samples")
    sp.add_argument("--out", default="reports")
    common_split(sp)
    sp.set_defaults(func=cmd_analyze_filters, split="all")

    sp = sub.add_parser("explain", help="GradientSHAP segment report for one file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--file", required=True)
    sp.add_argument("--background", required=True, help="corpus directory or directory of files")
    sp.add_argument("--background-limit", type=int)
    sp.add_argument("--n-samples", type=int, default=1000)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--top", type=int, default=10, help="segments reported per sign")
    sp.add_argument("--include-padding", action="store_true")
    sp.add_argument("--out", default="reports")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("annotate", help="region, strings and disassembly at a file offset")
    sp.add_argument("--file", required=True)
    sp.add_argument("--offset", type=lambda s: int(s, 0), required=True)
    sp.add_argument("--length", type=int, default=11)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_annotate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
