"""powshift command line.

Machine-readable output goes to stdout (or files under --out); logs and the
one-line summaries go to stderr. Exit codes: 0 success, 1 user error,
2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from powshift import bench, event_io, model_fmt, toytrain
from powshift.errors import PowshiftError

log = logging.getLogger("powshift")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
EVENT_SUFFIXES = (".evt8", ".csv")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_events(path, fmt: str = "auto") -> event_io.EventStream:
    data = _read_bytes(path)
    if fmt == "evt8":
        return event_io.parse_evt8(data)
    if fmt == "csv":
        return event_io.parse_event_csv(data.decode("utf-8"))
    return event_io.sniff_events(data)


def _load_frame(path, window_us: int) -> np.ndarray:
    """A PGM frame, or the first window of an event file."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return event_io.read_pgm_frame(_read_bytes(path)).values
    stream = _load_events(path)
    first = next(event_io.window_iter(stream, window_us), None)
    return first.values if first is not None else np.zeros((stream.height, stream.width), np.int8)


def _load_model(path):
    data = _read_bytes(path)
    if data[:4] == model_fmt.PWRQ_MAGIC:
        return model_fmt.load_pwrq(data)
    if data[:4] == model_fmt.PWRF_MAGIC:
        return model_fmt.load_pwrf(data)
    raise UserError(f"{path}: not a PWRQ or PWRF model (magic {data[:4]!r})")


def _load_quant_model(path) -> model_fmt.QuantModel:
    m = _load_model(path)
    if not isinstance(m, model_fmt.QuantModel):
        raise UserError(f"{path}: expected a quantized PWRQ model")
    return m


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _metric_lines(pairs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "value"))
    for k, v in pairs:
        w.writerow((k, _fmt_value(v)))
    return buf.getvalue()


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def _stats_pairs(stats: dict):
    for k, v in stats.items():
        if k != "layers":
            yield k, v
    for row in stats.get("layers", []):
        prefix = f"layer{row['index']}.{row['kind']}"
        for k, v in row.items():
            if k not in ("index", "kind"):
                yield f"{prefix}.{k}", v


# -- commands ---------------------------------------------------------------------

def cmd_frames(args) -> int:
    stream = _load_events(args.input, args.input_format)
    tau = int(round(args.window_ms * 1000))
    if tau <= 0:
        raise UserError("--window-ms must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = event_io.window_count(stream, tau)
    digits = max(5, len(str(max(n - 1, 0))))
    for k, frame in enumerate(event_io.window_iter(stream, tau)):
        name = f"frame_{k:0{digits}d}"
        if args.format == "pgm":
            (out / f"{name}.pgm").write_bytes(event_io.write_pgm(frame))
        else:
            (out / f"{name}.csv").write_text(event_io.serialize_event_csv(event_io.window_slice(stream, k, tau)))
    log.info("frames: %d events -> %d %s files in %s", len(stream), n, args.format, out)
    return EXIT_OK


def _parse_direction(text: Optional[str]) -> Optional[int]:
    if text is None:
        return None
    if text.upper() in event_io.DIRECTION_NAMES:
        return event_io.DIRECTION_NAMES.index(text.upper())
    try:
        d = int(text)
    except ValueError:
        raise UserError(f"unknown direction {text!r}; use 0-7 or one of {', '.join(event_io.DIRECTION_NAMES)}") from None
    if not 0 <= d < 8:
        raise UserError(f"direction must be in 0..7, got {d}")
    return d


def cmd_gen(args) -> int:
    if args.task != "moving-bar":
        raise UserError(f"unknown task {args.task!r}")
    if args.count < 1:
        raise UserError("--count must be at least 1")
    direction = _parse_direction(args.direction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = ["file,label,direction"]
    for i in range(args.count):
        # without a fixed direction, 8*k samples reproduce the training set layout
        d = direction if direction is not None else i % 8
        sample_seed = args.seed * 1_000_003 + (i if direction is not None else i // 8)
        stream, label = event_io.gen_synthetic_bar(d, sample_seed)
        name = f"bar_{i:05d}"
        if args.format == "evt8":
            (out / f"{name}.evt8").write_bytes(event_io.serialize_evt8(stream))
        else:
            (out / f"{name}.csv").write_text(event_io.serialize_event_csv(stream))
        if args.frames:
            frame = event_io.EventFrame(event_io.bar_frame(d, sample_seed), 0, event_io.BarConfig().duration_us)
            (out / f"{name}.pgm").write_bytes(event_io.write_pgm(frame))
        labels.append(f"{name},{label},{event_io.DIRECTION_NAMES[label]}")
    (out / "labels.csv").write_text("\n".join(labels) + "\n")
    log.info("gen: %d moving-bar samples (seed %d) in %s", args.count, args.seed, out)
    return EXIT_OK


def _calib_frames(directory, window_us: int) -> np.ndarray:
    d = Path(directory)
    if not d.is_dir():
        raise UserError(f"calibration directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".pgm",) + EVENT_SUFFIXES and p.name != "labels.csv")
    frames = [_load_frame(p, window_us) for p in files]
    return np.stack(frames)[:, None].astype(np.float64) if frames else np.zeros((0, 1, 1, 1))


def cmd_quantize(args) -> int:
    fm = _load_model(args.model)
    if not isinstance(fm, model_fmt.FloatModel):
        raise UserError(f"{args.model}: expected a float PWRF model")
    calib = _calib_frames(args.calib, fm.window_us) if args.calib else None
    qm = model_fmt.quantize_model(fm, calib, args.scheme, args.exempt_first_last, args.calib_mode, args.percentile)
    data = model_fmt.save_pwrq(qm)
    Path(args.out).write_bytes(data)
    stats = model_fmt.model_stats(qm)
    sys.stdout.write(_metric_lines(_stats_pairs(stats)))
    log.info("quantize: %s -> %s (%s, %d bytes, weight compression %.3fx)", args.model, args.out, args.scheme, len(data), stats["compression_ratio"])
    return EXIT_OK


def cmd_infer(args) -> int:
    qm = _load_quant_model(args.model)
    frame = _load_frame(args.input, qm.window_us)
    res = model_fmt.run(qm, frame, args.engine, keep_taps=bool(args.taps))
    logits = res.logits[0]
    header = ["argmax"] + [f"logit_{i}" for i in range(logits.size)]
    row = [str(int(res.argmax[0]))] + [f"{v:.8g}" for v in logits]
    sys.stdout.write(",".join(header) + "\n" + ",".join(row) + "\n")
    if args.taps:
        taps = Path(args.taps)
        taps.mkdir(parents=True, exist_ok=True)
        np.save(taps / "tap_input.npy", res.input)
        for i, t in enumerate(res.taps):
            np.save(taps / f"tap_{i:02d}_{qm.layers[i].kind}.npy", t)
    log.info("infer: engine %s -> class %d", args.engine, int(res.argmax[0]))
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.n < 1:
        raise UserError("--n must be at least 1")
    qm = _load_quant_model(args.model)
    frames = model_fmt.random_frames(qm, args.n, args.seed)
    rep = model_fmt.verify_model(qm, frames)
    pairs = [
        ("frames", rep.n_frames),
        ("mac_equals_bac", rep.mac_equals_bac),
        ("worst_deviation_lsb", rep.worst_deviation),
        ("first_failing_layer", rep.first_failing_layer),
        ("passed", rep.passed),
    ]
    pairs += [(f"layer{i}.deviation_lsb", d) for i, d in enumerate(rep.per_layer_worst)]
    sys.stdout.write(_metric_lines(pairs))
    if not rep.passed:
        log.error("verify: FAILED at layer %d (mac==bac: %s, worst deviation %d LSB)", rep.first_failing_layer, rep.mac_equals_bac, rep.worst_deviation)
        return EXIT_USER
    log.info("verify: passed on %d frames, worst deviation %d LSB", rep.n_frames, rep.worst_deviation)
    return EXIT_OK


def cmd_train(args) -> int:
    from powshift.plotting import plot_training

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kwargs = {"mode": args.mode, "seed": args.seed, "exempt_first_last": args.exempt_first_last}
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs
    if args.no_ema:
        kwargs["ema"] = False
    cfg = toytrain.TrainConfig(**kwargs)
    baseline = None
    if cfg.mode != "baseline":
        path = Path(args.baseline) if args.baseline else out / "baseline.pwrf"
        if path.exists():
            baseline = model_fmt.load_pwrf(path.read_bytes())
    result = toytrain.train(cfg, baseline)
    if cfg.mode == "baseline":
        (out / "baseline.pwrf").write_bytes(model_fmt.save_pwrf(result.float_model))
    else:
        (out / f"{cfg.mode}.pwrf").write_bytes(model_fmt.save_pwrf(result.float_model))
        (out / f"{cfg.mode}.pwrq").write_bytes(model_fmt.save_pwrq(result.quant_model))
    metrics = out / "metrics.csv"
    history = toytrain.read_metrics_csv(metrics.read_text()) if metrics.exists() else []
    history = [h for h in history if h["mode"] != cfg.mode] + result.history
    metrics.write_text(toytrain.metrics_csv(history))
    plot_training(history, out / "metrics.png")
    last = result.history[-1] if result.history else {"test_acc": math.nan, "train_acc": math.nan}
    log.info("train: %s, %d epochs, test accuracy %.4f (metrics in %s)", cfg.mode, len(result.history), last["test_acc"], metrics)
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = model_fmt.model_stats(_load_model(args.model))
    _emit(_metric_lines(_stats_pairs(stats)), None)
    log.info("stats: %d parameters, conv-weight fraction %.4f", stats["params_total"], stats["conv_weight_fraction"])
    return EXIT_OK


def cmd_bench(args) -> int:
    cases = bench.parse_cases(_read_bytes(args.cases).decode()) if args.cases else bench.default_cases()
    if not cases:
        raise UserError("no benchmark cases")
    if args.threads is not None:
        cases = [bench.BenchCase(**{**c.__dict__, "threads": args.threads}) for c in cases]
    report = bench.run_bench(cases)
    text = bench.emit_report(report, args.format)
    if args.out:
        from powshift.plotting import plot_bench

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_bytes(bench.emit_report(report, "csv"))
        if args.format == "markdown":
            (out / "bench.md").write_bytes(text)
        plot_bench(report, out / "bench.png")
    else:
        sys.stdout.write(text.decode())
    ratios = [r.ratio for r in report.rows if r.engine == "bac"]
    log.info("bench: %d cases, bac/mac median ratio %.3f", len(cases), float(np.median(ratios)))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="powshift", description="Event-frame PoT quantization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("frames", help="slice an event stream into frames")
    s.add_argument("--input", required=True)
    s.add_argument("--window-ms", type=float, default=10.0)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("pgm", "evtcsv"), default="pgm")
    s.add_argument("--input-format", choices=("auto", "evt8", "csv"), default="auto")
    s.set_defaults(func=cmd_frames)

    s = sub.add_parser("gen", help="generate synthetic event streams")
    s.add_argument("--task", default="moving-bar")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--direction")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("evt8", "csv"), default="evt8")
    s.add_argument("--frames", action="store_true", help="also write one PGM frame per sample")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("quantize", help="quantize a PWRF model to PWRQ")
    s.add_argument("--model", required=True)
    s.add_argument("--scheme", choices=model_fmt.SCHEMES, required=True)
    s.add_argument("--calib")
    s.add_argument("--out", required=True)
    s.add_argument("--exempt-first-last", action="store_true")
    s.add_argument("--calib-mode", choices=("minmax", "percentile"), default="minmax")
    s.add_argument("--percentile", type=float, default=99.9)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("infer", help="run one frame through a PWRQ model")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--engine", choices=model_fmt.ENGINES, default="bac")
    s.add_argument("--taps")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("verify", help="cross-check mac, bac and float engines")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("train", help="train ToyNet on the moving-bar task")
    s.add_argument("--mode", choices=toytrain.MODES, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--baseline", help="baseline PWRF (default: OUT/baseline.pwrf)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--exempt-first-last", action="store_true")
    s.add_argument("--no-ema", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("stats", help="parameter and memory statistics")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("bench", help="MAC vs BAC convolution benchmark")
    s.add_argument("--cases")
    s.add_argument("--format", choices=("csv", "markdown"), default="csv")
    s.add_argument("--out", help="directory for bench.csv (plus bench.md) and bench.png")
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except (UserError, PowshiftError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_USER
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
