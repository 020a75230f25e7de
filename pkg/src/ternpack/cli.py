"""Command-line entry point.

Exit codes: 0 ok, 1 malformed input, 2 constraint violation (including bad
flags), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from . import bitpack, fileio, lut, pipeline
from .errors import ConstraintError, FormatError
from .quant import Granularity
from .train import FAMILIES, Schedule, TrainConfig, export_student, train

EXIT_OK, EXIT_FORMAT, EXIT_CONSTRAINT, EXIT_IO = 0, 1, 2, 3


def _granularity(args) -> Granularity:
    kind = args.granularity
    if kind == "group":
        return Granularity("per_group", args.group_size)
    return Granularity("per_" + kind)


def _csv_list(text: str, cast=str) -> list:
    return [cast(v) for v in text.split(",") if v.strip()]


def _write_csv(path, header, rows) -> None:
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)

    fileio.atomic_write(path, emit, text=True)


def cmd_quantize(args) -> int:
    tensors = fileio.read_weights(args.input)
    packed, reports = pipeline.quantize_tensors(tensors, args.scheme, _granularity(args), args.pack)
    fileio.write_model(args.output, packed)
    for name, r in reports.items():
        print(
            f"{name}: {r.scheme} payload_bits={r.payload_bits} payload_bytes={r.payload_bytes} "
            f"scale_bits={r.scale_bits} bits_per_weight={r.bits_per_weight:.4f}"
        )
    return EXIT_OK


def _read_vector(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        x = np.loadtxt(io.StringIO(text), ndmin=1, dtype=np.float64)
    except ValueError as e:
        raise FormatError(f"input vector file: {e}") from None
    if x.size == 0:
        raise FormatError("input vector file is empty")
    return x


def cmd_infer(args) -> int:
    model = fileio.read_model(args.model)
    if not model:
        raise FormatError("model file holds no tensors")
    name = args.tensor or next(iter(model))
    if name not in model:
        raise ConstraintError(f"tensor {name!r} not in model")
    x = _read_vector(args.input)
    y = pipeline.infer(model[name], x, args.engine, lut.EngineConfig(args.precision, args.threads))
    for row in np.atleast_2d(y):
        print(" ".join(repr(float(v)) for v in row))
    return EXIT_OK


def cmd_bench(args) -> int:
    g = Granularity.parse(args.granularity)
    schemes = _csv_list(args.schemes)
    unknown = set(schemes) - set(bitpack.SCHEMES)
    if unknown:
        raise ConstraintError(f"unknown schemes {sorted(unknown)}")
    try:
        sizes = _csv_list(args.sizes, int)
    except ValueError:
        raise ConstraintError(f"bad --sizes {args.sizes!r}") from None
    rows = lut.bench(schemes, sizes, args.repeats, g, lut.EngineConfig(args.precision, args.threads), args.seed)
    lut.write_bench_csv(rows, args.out)
    for r in rows:
        print(f"{r.scheme:>9} {r.rows}x{r.cols} median {r.median_ns / 1e6:.3f} ms payload {r.payload_bytes} B")
    return EXIT_OK


def _train_one(args, arenas: bool, trace_path: str, export_path: str | None) -> None:
    sched = Schedule(args.schedule, args.warmup, args.steps)
    cfg = TrainConfig(
        steps=args.steps, lr=args.lr, seed=args.seed, scheme=args.scheme,
        arenas=arenas, schedule=sched, log_every=args.log_every,
    )
    tr = train(cfg)
    fileio.write_trace(trace_path, tr.records)
    print(f"{'arenas' if arenas else 'naive'}: final_loss={tr.final_loss:.6f} trace={trace_path}")
    if export_path:
        export_student(tr.layers, export_path, final_lambda=tr.final_lambda if arenas else 0.0)
        print(f"exported {export_path}")


def _suffixed(path: str, tag: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}.{tag}{ext or '.jsonl'}"


def cmd_train_toy(args) -> int:
    if args.arenas == "both":
        for tag, on in (("arenas", True), ("naive", False)):
            export = _suffixed(args.export, tag) if args.export else None
            _train_one(args, on, _suffixed(args.trace, tag), export)
    else:
        _train_one(args, args.arenas == "on", args.trace, args.export)
    return EXIT_OK


def cmd_analyze(args) -> int:
    records = fileio.read_trace(args.trace)
    if not records:
        raise FormatError(f"trace {args.trace} has no records")
    if args.emit == "er-csv":
        n = len(records[0]["er_per_layer"])
        _write_csv(args.out, ["step", *[f"er_layer{i}" for i in range(n)]], pipeline.er_rows(records))
    elif args.emit == "hist-csv":
        _write_csv(args.out, ["step", "layer", "bin_lo", "bin_hi", "count"], pipeline.hist_rows(records))
    else:
        rows = pipeline.trap_rows(records, args.eps)
        _write_csv(args.out, ["step", "layer", "score", "mode1", "mode2"], rows)
        for step, layer, score, m1, m2 in rows:
            print(f"layer {layer}: trap score {score:.4f} modes ({m1:+.3f}, {m2:+.3f})")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONSTRAINT)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ternpack", description="3:4 sparse ternary quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="quantize and pack a WF32 weight file")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--scheme", choices=("sparse34", "absmean", "twn"), default="sparse34")
    q.add_argument("--granularity", choices=("tensor", "channel", "group"), default="group")
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--pack", choices=bitpack.SCHEMES, default=None,
                   help="packing layout (default: sherry125 for sparse34, dense2bit otherwise)")
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("infer", help="run a packed tensor on an activation vector")
    i.add_argument("model")
    i.add_argument("--input", required=True, help="whitespace-separated activations, one row per line")
    i.add_argument("--tensor", default=None)
    i.add_argument("--engine", choices=("lut", "ref"), default="lut")
    i.add_argument("--precision", choices=("single", "double"), default="single")
    i.add_argument("--threads", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="time matvec for each packing layout")
    b.add_argument("--schemes", default=",".join(bitpack.SCHEMES))
    b.add_argument("--sizes", default="512,1024,4096")
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--granularity", default="group:128")
    b.add_argument("--precision", choices=("single", "double"), default="single")
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train-toy", help="teacher-student QAT run with optional annealed bypass")
    t.add_argument("--scheme", choices=("sparse34", "absmean", "binary"), default="sparse34")
    t.add_argument("--arenas", choices=("on", "off", "both"), default="on")
    t.add_argument("--schedule", choices=FAMILIES, default="cosine")
    t.add_argument("--warmup", type=float, default=0.1)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--trace", required=True)
    t.add_argument("--export", default=None, help="write the final student as a packed model")
    t.set_defaults(func=cmd_train_toy)

    a = sub.add_parser("analyze", help="export ER, histograms or trap summary from a trace")
    a.add_argument("--trace", required=True)
    a.add_argument("--emit", choices=("er-csv", "hist-csv", "trap-summary"), required=True)
    a.add_argument("--eps", type=float, default=0.0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except ConstraintError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
