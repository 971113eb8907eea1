"""MAC vs BAC convolution microbenchmark.

Every case is cross-checked (BAC output must equal MAC output bitwise) before
anything is timed. Reports carry the median and interquartile range of the
per-repetition wall time and each engine's ratio to MAC.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from powshift.errors import CorrectnessMismatch
from powshift.kernels import MAX_INT32_TERMS, conv2d_int_bac, conv2d_int_mac
from powshift.quantize import PotTensor

REPORT_COLUMNS = ("case_id", "engine", "median_ns", "iqr_ns", "ratio")
CASE_FIELDS = ("c_in", "c_out", "h", "w", "k", "stride", "reps", "warmup")

# an engine takes (x_q, pot_w, z_x, stride, pad, threads) and returns the accumulator
Engine = Callable[..., np.ndarray]


def _mac(x_q, pot_w, z_x, stride, pad, threads):
    return conv2d_int_mac(x_q, pot_w.int_weights(), z_x, stride, pad, threads=threads)


def _bac(x_q, pot_w, z_x, stride, pad, threads):
    return conv2d_int_bac(x_q, pot_w, z_x, stride, pad, threads=threads)


DEFAULT_ENGINES: Dict[str, Engine] = {"mac": _mac, "bac": _bac}


@dataclass(frozen=True)
class BenchCase:
    c_in: int
    c_out: int
    h: int
    w: int
    k: int = 3
    stride: int = 1
    reps: int = 5
    warmup: int = 1
    batch: int = 1
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.reps < 3:
            raise ValueError("a benchmark case needs at least 3 repetitions")
        if self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if min(self.c_in, self.c_out, self.h, self.w, self.k, self.stride, self.batch) < 1:
            raise ValueError("geometry values must be positive")
        if self.k * self.k * self.c_in > MAX_INT32_TERMS:
            raise ValueError(f"k*k*C_in = {self.k * self.k * self.c_in} exceeds the 32-bit accumulator bound")

    @property
    def case_id(self) -> str:
        return f"c{self.c_in}x{self.c_out}_{self.h}x{self.w}_k{self.k}s{self.stride}"

    @property
    def pad(self) -> int:
        return self.k // 2

    @property
    def out_hw(self):
        return ((self.h + 2 * self.pad - self.k) // self.stride + 1, (self.w + 2 * self.pad - self.k) // self.stride + 1)

    @property
    def ops(self) -> int:
        """Multiply-or-shift accumulate terms per forward pass."""
        ho, wo = self.out_hw
        return self.batch * ho * wo * self.c_out * self.c_in * self.k * self.k

    def inputs(self):
        rng = np.random.default_rng(self.seed)
        x_q = rng.integers(-128, 128, size=(self.batch, self.c_in, self.h, self.w)).astype(np.int8)
        codes = rng.integers(0, 16, size=(self.c_out, self.c_in, self.k, self.k)).astype(np.uint8)
        z_x = int(rng.integers(-128, 128))
        return x_q, PotTensor.from_codes(codes, 1.0), z_x


@dataclass
class BenchRow:
    case_id: str
    engine: str
    median_ns: float
    iqr_ns: float
    ratio: float
    ops_per_s: float = float("nan")
    samples_ns: List[int] = field(default_factory=list)


@dataclass
class BenchReport:
    rows: List[BenchRow]

    def __len__(self) -> int:
        return len(self.rows)

    def ratio(self, case_id: str, engine: str = "bac") -> float:
        for r in self.rows:
            if r.case_id == case_id and r.engine == engine:
                return r.ratio
        raise KeyError((case_id, engine))


def summarize(samples: Mapping[str, Mapping[str, Sequence[int]]], ops: Optional[Mapping[str, int]] = None, reference: str = "mac") -> BenchReport:
    """Build a report from raw samples {case_id: {engine: [ns, ...]}}; pure."""
    rows = []
    for case_id, per_engine in samples.items():
        medians = {e: float(np.median(s)) for e, s in per_engine.items()}
        ref = medians.get(reference)
        for engine, s in per_engine.items():
            q1, q3 = np.percentile(s, [25, 75])
            med = medians[engine]
            n_ops = ops.get(case_id) if ops else None
            rows.append(BenchRow(
                case_id,
                engine,
                med,
                float(q3 - q1),
                med / ref if ref else float("nan"),
                n_ops / (med * 1e-9) if n_ops and med > 0 else float("nan"),
                [int(v) for v in s],
            ))
    return BenchReport(rows)


def cross_check(case: BenchCase, engines: Mapping[str, Engine] = DEFAULT_ENGINES, reference: str = "mac"):
    x_q, pot_w, z_x = case.inputs()
    ref = engines[reference](x_q, pot_w, z_x, case.stride, case.pad, case.threads)
    for name, fn in engines.items():
        if name == reference:
            continue
        out = fn(x_q, pot_w, z_x, case.stride, case.pad, case.threads)
        if out.shape != ref.shape or not np.array_equal(out, ref):
            raise CorrectnessMismatch(f"case {case.case_id}: engine {name!r} disagrees with {reference!r}; refusing to time it")
    return x_q, pot_w, z_x


def run_bench(
    cases: Sequence[BenchCase],
    engines: Optional[Mapping[str, Engine]] = None,
    timer: Callable[[], int] = time.perf_counter_ns,
) -> BenchReport:
    engines = dict(DEFAULT_ENGINES if engines is None else engines)
    if "mac" not in engines:
        raise ValueError("the engine set must include the 'mac' reference")
    samples: Dict[str, Dict[str, List[int]]] = {}
    ops = {}
    for case in cases:
        x_q, pot_w, z_x = cross_check(case, engines)
        args = (x_q, pot_w, z_x, case.stride, case.pad, case.threads)
        for _ in range(case.warmup):
            for fn in engines.values():
                fn(*args)
        per = {name: [] for name in engines}
        for _ in range(case.reps):
            # interleave engines so slow drift hits both equally
            for name, fn in engines.items():
                t0 = timer()
                fn(*args)
                per[name].append(timer() - t0)
        samples[case.case_id] = per
        ops[case.case_id] = case.ops
    return summarize(samples, ops)


def emit_report(report: BenchReport, fmt: str = "csv") -> bytes:
    if not report.rows:
        raise ValueError("empty benchmark report")
    cells = [[r.case_id, r.engine, f"{r.median_ns:.1f}", f"{r.iqr_ns:.1f}", f"{r.ratio:.4f}"] for r in report.rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(cells)
        return buf.getvalue().encode()
    if fmt == "markdown":
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
        lines += ["| " + " | ".join(c) + " |" for c in cells]
        return ("\n".join(lines) + "\n").encode()
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(data) -> List[dict]:
    text = data.decode() if isinstance(data, bytes) else data
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({
            "case_id": r["case_id"],
            "engine": r["engine"],
            "median_ns": float(r["median_ns"]),
            "iqr_ns": float(r["iqr_ns"]),
            "ratio": float(r["ratio"]),
        })
    return rows


def parse_cases(text: str) -> List[BenchCase]:
    """Cases file: CSV with a header naming a subset of c_in,c_out,h,w,k,stride,reps,warmup."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    unknown = set(reader.fieldnames) - set(CASE_FIELDS) - {"batch", "seed", "threads"}
    if unknown:
        raise ValueError(f"unknown case columns: {sorted(unknown)}")
    cases = []
    for line_no, row in enumerate(reader, start=2):
        try:
            cases.append(BenchCase(**{k: int(v) for k, v in row.items() if v not in (None, "")}))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"cases line {line_no}: {exc}") from None
    return cases


def default_cases() -> List[BenchCase]:
    return [
        BenchCase(8, 16, 32, 32),
        BenchCase(16, 32, 16, 16),
        BenchCase(64, 64, 56, 56, reps=3),
    ]
