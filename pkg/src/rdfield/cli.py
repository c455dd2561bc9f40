"""Command-line entry point: ``rdfield {train,export,eval,hist,sweep}``.

Exit codes: 0 ok, 2 usage, 3 I/O or format, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

from . import codec_io
from .codec_io import FormatError, IndexOverflowError
from .entropy_model import QuantSpec, Quantizer
from .field_core import ContractError, InputDomainError
from .report import rd_csv, rd_svg
from .tasks import TaskDataError
from .trainer import (CheckpointError, Model, NumericalError, TrainConfig, build_task, checkpoint_bytes,
                      evaluate, load_checkpoint_bytes, metrics_csv, quantized_table, train)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("rdfield")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def write_atomic(path, data) -> None:
    if isinstance(data, str):
        data = data.encode()
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(command: str, config: TrainConfig, inputs: dict, outputs: dict, extra: dict | None = None) -> str:
    """JSON run manifest; ``content_hash`` covers the config and every input file."""
    digests = {name: file_digest(path) for name, path in sorted(inputs.items()) if path}
    h = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode())
    for name in sorted(digests):
        h.update(f"{name}:{digests[name]}".encode())
    doc = {
        "command": command,
        "config": config.to_dict(),
        "seed": config.seed,
        "inputs": {name: {"path": os.fspath(inputs[name]), "sha256": d} for name, d in digests.items()},
        "content_hash": h.hexdigest(),
        "outputs": {k: os.fspath(v) for k, v in sorted(outputs.items())},
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


_FLAG_TYPES = {"quantizer": str, "lambda_bar": float, "hybrid_threshold": float, "batch_size": int}


def _field_type(f: dataclasses.Field):
    if f.name in _FLAG_TYPES:
        return _FLAG_TYPES[f.name]
    return type(f.default)


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides")
    g.add_argument("--config", help="JSON config document (keys as TrainConfig fields)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "rate_lambda":
            g.add_argument("--lambda", "--rate-lambda", dest=f.name, type=float, default=None)
            continue
        g.add_argument(flag, dest=f.name, type=_field_type(f), default=None)


def config_from_args(args) -> TrainConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise TaskDataError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config {args.config} must be a JSON object")
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return TrainConfig.from_dict(data)


def _load_checkpoint(path) -> tuple[TrainConfig, Model]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise TaskDataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    try:
        return load_checkpoint_bytes(raw)
    except CheckpointError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _check_grid_matches(config: TrainConfig, table) -> None:
    grid, other = config.grid, table.config
    fields = [name for name, a, b in (("d", grid.dims, other.dims), ("L", grid.levels, other.levels),
                                      ("F", grid.features_per_entry, other.features_per_entry),
                                      ("log2T", grid.log2_table_size, other.log2_table_size),
                                      ("n_min", grid.n_min, other.n_min), ("n_max", grid.n_max, other.n_max))
              if a != b]
    if fields:
        raise ContractError(f"compressed grid does not match checkpoint: {', '.join(fields)} differ")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = config_from_args(args)
    if args.task_input is None and config.task == "image" and args.require_input:
        raise UsageError("--input is required for the image task")
    task = build_task(config, args.task_input)
    result = train(task, config)
    out = args.out
    paths = {"checkpoint": os.path.join(out, "checkpoint.bin"),
             "metrics": os.path.join(out, "metrics.csv"),
             "manifest": os.path.join(out, "manifest.json")}
    write_atomic(paths["checkpoint"], checkpoint_bytes(result.model, config))
    write_atomic(paths["metrics"], metrics_csv(result.metrics))
    write_atomic(paths["manifest"], manifest("train", config, {"input": args.task_input}, paths))
    print(f"final psnr {result.final_psnr:.4f} dB, rate {result.metrics[-1].rate_bits:.4f} bits/feature")
    return EXIT_OK


def cmd_export(args) -> int:
    config, model = _load_checkpoint(args.checkpoint)
    quant = config.quant
    if args.delta is not None or args.quantizer is not None:
        quant = QuantSpec(args.delta if args.delta is not None else quant.delta,
                          Quantizer.parse(args.quantizer) if args.quantizer else quant.quantizer)
    blob, report = codec_io.encode_container(model.table, quant, model.dist, clamp=args.clamp,
                                             override=args.quantizer is not None)
    write_atomic(args.out, blob)
    msg = f"wrote {report.bytes_written} bytes ({report.payload_bytes} payload)"
    if report.clamped:
        msg += f", {report.clamped} indices clamped"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    config, model = _load_checkpoint(args.checkpoint)
    if args.task is not None and args.task != config.task:
        raise ContractError(f"checkpoint was trained on the {config.task} task, not {args.task}")
    task = build_task(config, args.task_input)
    if task.dims != config.dims:
        raise ContractError(f"task dimension {task.dims} != checkpoint dimension {config.dims}")
    split = args.split
    table, source = None, "checkpoint"
    if args.grid:
        table, _, _ = codec_io.import_grid(args.grid)
        _check_grid_matches(config, table)
        source = "compressed grid"
    elif args.quantized:
        table, source = quantized_table(model.table, config.quant), "quantized checkpoint"
    value = evaluate(model, config, task, split, table)
    report = {"psnr_db": value, "split": split, "source": source}
    print(f"{split} psnr {value:.6f} dB ({source})")
    if args.report:
        write_atomic(args.report, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_hist(args) -> int:
    if args.delta is not None and not args.delta > 0:
        raise UsageError(f"--delta must be positive, got {args.delta}")
    config, model = _load_checkpoint(args.checkpoint)
    quant = QuantSpec(args.delta if args.delta is not None else config.delta,
                      Quantizer.parse(args.quantizer) if args.quantizer else config.quant.quantizer)
    text = codec_io.histogram_csv(codec_io.histogram(model.table, quant))
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _csv_list(text: str, cast=str) -> list:
    return [cast(v.strip()) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    from .sweep import sweep

    lambdas = _csv_list(args.lambdas, float)
    if not lambdas:
        raise UsageError("--lambdas needs at least one value")
    modes = _csv_list(args.modes)
    dists = _csv_list(args.dists)
    for m in modes:
        if m not in ("fixed", "adaptive", "hybrid"):
            raise UsageError(f"unknown mode {m!r}")
    for d in dists:
        if d not in ("laplace", "cauchy"):
            raise UsageError(f"unknown distribution {d!r}")
    base = config_from_args(args)
    build_task(base, args.task_input)  # fail early on unreadable input
    rows = sweep(base, lambdas, modes, dists, args.task_input, parallel=args.parallel)
    paths = {"csv": os.path.join(args.out, "rd.csv"), "svg": os.path.join(args.out, "rd.svg"),
             "manifest": os.path.join(args.out, "manifest.json")}
    write_atomic(paths["csv"], rd_csv(rows, timing=not args.omit_timing))
    write_atomic(paths["svg"], rd_svg(rows))
    write_atomic(paths["manifest"], manifest("sweep", base, {"input": args.task_input}, paths,
                                             {"lambdas": lambdas, "modes": modes, "dists": dists}))
    failed = sum(r.failed for r in rows)
    print(f"{len(rows)} runs, {failed} failed -> {paths['csv']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdfield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a field and write checkpoint, metrics and manifest")
    p.add_argument("--input", dest="task_input", help="PPM image for the image task")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--require-input", action="store_true", help="refuse to fall back to the built-in image")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="quantize and DEFLATE the feature table of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--quantizer", choices=["mid_rise", "mid_tread"])
    p.add_argument("--clamp", action="store_true", help="clamp indices outside int16 instead of failing")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="PSNR of a checkpoint, optionally with a compressed grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", help="compressed grid replacing the checkpoint's feature table")
    p.add_argument("--quantized", action="store_true", help="quantize the checkpoint table in memory")
    p.add_argument("--input", dest="task_input")
    p.add_argument("--task", choices=["image", "volume"])
    p.add_argument("--split", choices=["heldout", "train"], default="heldout")
    p.add_argument("--report", help="write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hist", help="histogram of quantized feature indices as CSV k,count")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--quantizer", choices=["mid_rise", "mid_tread"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("sweep", help="rate-distortion sweep over lambda, modes and distributions")
    p.add_argument("--lambdas", required=True, help="comma-separated lambda (or lambda-bar) values")
    p.add_argument("--modes", default="fixed")
    p.add_argument("--dists", default="cauchy")
    p.add_argument("--input", dest="task_input")
    p.add_argument("--out", default="sweep")
    p.add_argument("--parallel", action="store_true", help="run points concurrently (CAWA_THREADS caps workers)")
    p.add_argument("--omit-timing", action="store_true", help="write 0 for train_seconds")
    add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IndexOverflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ContractError, InputDomainError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}; snapshot {json.dumps(exc.snapshot, sort_keys=True)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
