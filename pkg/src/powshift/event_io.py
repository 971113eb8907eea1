"""Event streams, event-frame pseudo-images and the synthetic moving-bar task.

Events are kept as parallel numpy columns (t, x, y, p) rather than a list of
objects; every operation here is a pure function of its inputs.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Tuple

import numpy as np

from powshift.errors import (
    BadDirection,
    BadMagic,
    CorruptRecord,
    MalformedRow,
    NonMonotoneTimestamp,
    OutOfBounds,
    TruncatedRecord,
    VersionUnsupported,
)

EVT8_MAGIC = b"EVT8"
EVT8_VERSION = 1
EVT8_HEADER = struct.Struct("<4sIHH")
_RECORD = np.dtype([("t", "<u4"), ("w", "<u4")])
_COORD_MASK = (1 << 14) - 1

GEN1_WIDTH, GEN1_HEIGHT = 304, 240
DEFAULT_WINDOW_US = 10_000


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(eq=False)
class EventStream:
    width: int
    height: int
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.p = np.asarray(self.p, dtype=np.int8)

    @classmethod
    def from_events(cls, width, height, events) -> "EventStream":
        events = list(events)
        cols = list(zip(*events)) if events else [[], [], [], []]
        stream = cls(width, height, *cols)
        validate_stream(stream)
        return stream

    def __len__(self):
        return int(self.t.size)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @property
    def t_max(self):
        return int(self.t[-1]) if len(self) else None


@dataclass(eq=False)
class EventFrame:
    values: np.ndarray
    window_start: int
    window_length: int

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EventFrame):
            return NotImplemented
        return (
            self.window_start == other.window_start
            and self.window_length == other.window_length
            and np.array_equal(self.values, other.values)
        )


def validate_stream(stream: EventStream) -> None:
    """Raise if events leave the sensor, go back in time or carry bad polarity."""
    n = len(stream)
    if n == 0:
        return
    bad = (stream.x < 0) | (stream.x >= stream.width) | (stream.y < 0) | (stream.y >= stream.height)
    if bad.any():
        i = int(np.argmax(bad))
        raise OutOfBounds(int(stream.x[i]), int(stream.y[i]), stream.width, stream.height, f"event {i}")
    if ((stream.t < 0) | (stream.t > 0xFFFFFFFF)).any():
        raise ValueError("timestamps must fit in an unsigned 32-bit range")
    if not np.isin(stream.p, (-1, 1)).all():
        raise ValueError("polarity must be -1 or +1")
    back = np.flatnonzero(np.diff(stream.t) < 0)
    if back.size:
        i = int(back[0]) + 1
        raise NonMonotoneTimestamp(i, int(stream.t[i - 1]), int(stream.t[i]))


# -- EVT8 -------------------------------------------------------------------

def parse_evt8(data: bytes) -> EventStream:
    data = bytes(data)
    if len(data) < 4 or data[:4] != EVT8_MAGIC:
        raise BadMagic(EVT8_MAGIC, data[:4])
    if len(data) < EVT8_HEADER.size:
        raise TruncatedRecord(len(data))
    _, version, width, height = EVT8_HEADER.unpack_from(data)
    if version != EVT8_VERSION:
        raise VersionUnsupported(f"EVT8 version {version} (supported: {EVT8_VERSION})")
    payload = data[EVT8_HEADER.size:]
    if len(payload) % _RECORD.itemsize:
        whole = len(payload) // _RECORD.itemsize
        raise TruncatedRecord(EVT8_HEADER.size + whole * _RECORD.itemsize)
    rec = np.frombuffer(payload, dtype=_RECORD)
    word = rec["w"]
    reserved = np.flatnonzero(word >> 29)
    if reserved.size:
        i = int(reserved[0])
        raise CorruptRecord(EVT8_HEADER.size + i * 8, "reserved bits 29-31 set")
    stream = EventStream(
        width,
        height,
        rec["t"].astype(np.int64),
        (word & _COORD_MASK).astype(np.int32),
        ((word >> 14) & _COORD_MASK).astype(np.int32),
        np.where((word >> 28) & 1, 1, -1).astype(np.int8),
    )
    validate_stream(stream)
    return stream


def serialize_evt8(stream: EventStream) -> bytes:
    validate_stream(stream)
    rec = np.empty(len(stream), dtype=_RECORD)
    rec["t"] = stream.t.astype(np.uint32)
    pol = (stream.p > 0).astype(np.uint32)
    rec["w"] = stream.x.astype(np.uint32) | (stream.y.astype(np.uint32) << 14) | (pol << 28)
    header = EVT8_HEADER.pack(EVT8_MAGIC, EVT8_VERSION, stream.width, stream.height)
    return header + rec.tobytes()


# -- CSV --------------------------------------------------------------------

CSV_HEADER = "t_us,x,y,p"


def parse_event_csv(text: str, width: int = GEN1_WIDTH, height: int = GEN1_HEIGHT) -> EventStream:
    """Parse ``t_us,x,y,p`` rows; polarity 0 and -1 both mean negative.

    The CSV carries no geometry, so the sensor size defaults to GEN1's 304x240.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise MalformedRow(1, f"expected header {CSV_HEADER!r}")
    cols: List[Tuple[int, int, int, int]] = []
    prev_t = None
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedRow(line_no, "expected 4 fields")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise MalformedRow(line_no, "non-integer field") from None
        if p not in (-1, 0, 1):
            raise MalformedRow(line_no, f"invalid polarity {p}")
        if t < 0 or t > 0xFFFFFFFF:
            raise MalformedRow(line_no, f"timestamp {t} out of range")
        if not (0 <= x < width and 0 <= y < height):
            raise OutOfBounds(x, y, width, height, f"line {line_no}")
        if prev_t is not None and t < prev_t:
            raise NonMonotoneTimestamp(len(cols), prev_t, t)
        prev_t = t
        cols.append((t, x, y, 1 if p == 1 else -1))
    return EventStream.from_events(width, height, cols)


def serialize_event_csv(stream: EventStream) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for ev in stream:
        buf.write(f"{ev.t},{ev.x},{ev.y},{ev.p}\n")
    return buf.getvalue()


def sniff_events(data: bytes, width: int = GEN1_WIDTH, height: int = GEN1_HEIGHT) -> EventStream:
    """EVT8 when the magic matches, CSV otherwise."""
    if data[:4] == EVT8_MAGIC:
        return parse_evt8(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise BadMagic(EVT8_MAGIC, data[:4]) from None
    if not text.startswith("t_us"):
        raise BadMagic(EVT8_MAGIC, data[:4])
    return parse_event_csv(text, width, height)


# -- frames -----------------------------------------------------------------

def _frame_from_range(stream: EventStream, lo: int, hi: int) -> np.ndarray:
    # lo inclusive, hi exclusive; the last event per pixel wins
    values = np.zeros((stream.height, stream.width), dtype=np.int8)
    if not len(stream):
        return values
    a = int(np.searchsorted(stream.t, lo, side="left"))
    b = int(np.searchsorted(stream.t, hi, side="left"))
    if a >= b:
        return values
    flat = stream.y[a:b].astype(np.int64) * stream.width + stream.x[a:b]
    rev = flat[::-1]
    pix, first_in_rev = np.unique(rev, return_index=True)
    last = (b - a - 1) - first_in_rev
    values.reshape(-1)[pix] = stream.p[a:b][last]
    return values


def build_event_frame(stream: EventStream, window_start: int, tau: int) -> EventFrame:
    """Pixel (x, y) takes the polarity of its last event with start < t <= start + tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    values = _frame_from_range(stream, window_start + 1, window_start + tau + 1)
    return EventFrame(values, window_start, tau)


def window_count(stream: EventStream, tau: int) -> int:
    if not len(stream):
        return 0
    return math.ceil((stream.t_max + 1) / tau)


def window_iter(stream: EventStream, tau: int = DEFAULT_WINDOW_US) -> Iterator[EventFrame]:
    """Frames for consecutive half-open windows [k*tau, (k+1)*tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    for k in range(window_count(stream, tau)):
        yield EventFrame(_frame_from_range(stream, k * tau, (k + 1) * tau), k * tau, tau)


def window_slice(stream: EventStream, k: int, tau: int) -> EventStream:
    """Events of window k as their own stream (used by the evtcsv frame format)."""
    a = int(np.searchsorted(stream.t, k * tau, side="left"))
    b = int(np.searchsorted(stream.t, (k + 1) * tau, side="left"))
    return EventStream(stream.width, stream.height, stream.t[a:b], stream.x[a:b], stream.y[a:b], stream.p[a:b])


# -- PGM --------------------------------------------------------------------

_GRAY_LEVELS = np.array([0, 128, 255], dtype=np.uint8)


def frame_to_gray(values: np.ndarray) -> np.ndarray:
    return _GRAY_LEVELS[values.astype(np.int64) + 1]


def write_pgm(frame: EventFrame) -> bytes:
    gray = frame_to_gray(frame.values)
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    return header + gray.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Decode a binary P5 PGM (maxval < 256) into a uint8 array."""
    if data[:2] != b"P5":
        raise BadMagic(b"P5", data[:2])
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedRecord(pos)
        tokens.append(int(data[start:pos]))
    pos += 1
    width, height, maxval = tokens
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    if len(data) < pos + width * height:
        raise TruncatedRecord(len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).copy()


def gray_to_frame(gray: np.ndarray) -> np.ndarray:
    """Inverse of the -1/0/+1 -> 0/128/255 mapping, thresholded at the midpoints."""
    out = np.zeros(gray.shape, dtype=np.int8)
    out[gray < 64] = -1
    out[gray >= 192] = 1
    return out


def read_pgm_frame(data: bytes) -> EventFrame:
    return EventFrame(gray_to_frame(read_pgm(data)), 0, 0)


# -- synthetic moving-bar task ------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        return (self.next_u64() * n) >> 64


# compass order, image coordinates (y grows downward)
DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1))
DIRECTION_NAMES = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")


@dataclass(frozen=True)
class BarConfig:
    width: int = 32
    height: int = 32
    bar_length_min: int = 8
    bar_length_max: int = 16
    thickness: int = 3
    step_us: int = 500
    duration_us: int = 10_000
    noise_rate: float = 4.0  # noise events per millisecond over the whole sensor
    jitter: int = 4


def gen_synthetic_bar(direction: int, seed: int, cfg: BarConfig = BarConfig()) -> Tuple[EventStream, int]:
    """A bar sweeping in one of 8 compass directions, plus uniform noise.

    The leading edge fires +1 and the vacated trailing row fires -1 at every
    step; pixels falling off the sensor are dropped.
    """
    if not isinstance(direction, (int, np.integer)) or not 0 <= direction < 8:
        raise BadDirection(f"direction must be in 0..7, got {direction!r}")
    rng = SplitMix64(seed * 8 + direction)
    dx, dy = DIRECTIONS[direction]
    nx, ny = -dy, dx
    length = cfg.bar_length_min + rng.below(cfg.bar_length_max - cfg.bar_length_min + 1)
    n_steps = cfg.duration_us // cfg.step_us
    span = n_steps - 1 + cfg.thickness - 1
    jx = rng.below(2 * cfg.jitter + 1) - cfg.jitter
    jy = rng.below(2 * cfg.jitter + 1) - cfg.jitter
    cx = cfg.width // 2 - (dx * span) // 2 + jx
    cy = cfg.height // 2 - (dy * span) // 2 + jy
    offsets = range(-(length // 2), length - length // 2)

    ts, xs, ys, ps = [], [], [], []

    def emit_row(t, row, pol):
        ox, oy = cx + row * dx, cy + row * dy
        for k in offsets:
            px, py = ox + k * nx, oy + k * ny
            if 0 <= px < cfg.width and 0 <= py < cfg.height:
                ts.append(t)
                xs.append(px)
                ys.append(py)
                ps.append(pol)

    for j in range(cfg.thickness):
        emit_row(0, j, 1)
    for s in range(1, n_steps):
        t = s * cfg.step_us
        emit_row(t, s - 1, -1)
        emit_row(t, s + cfg.thickness - 1, 1)

    n_noise = int(round(cfg.noise_rate * cfg.duration_us / 1000))
    for _ in range(n_noise):
        ts.append(rng.below(cfg.duration_us))
        xs.append(rng.below(cfg.width))
        ys.append(rng.below(cfg.height))
        ps.append(1 if rng.below(2) else -1)

    t = np.asarray(ts, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    stream = EventStream(cfg.width, cfg.height, t[order], np.asarray(xs)[order], np.asarray(ys)[order], np.asarray(ps)[order])
    return stream, int(direction)


def bar_frame(direction: int, seed: int, cfg: BarConfig = BarConfig()) -> np.ndarray:
    """Single frame covering the whole sample, shape (height, width)."""
    stream, _ = gen_synthetic_bar(direction, seed, cfg)
    return _frame_from_range(stream, 0, cfg.duration_us)


def bar_dataset(n_per_class: int, seed: int, cfg: BarConfig = BarConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Frames (N, 1, H, W) float64 and labels (N,), classes interleaved."""
    frames, labels = [], []
    for i in range(n_per_class):
        for d in range(8):
            frames.append(bar_frame(d, seed * 1_000_003 + i, cfg))
            labels.append(d)
    x = np.stack(frames).astype(np.float64)[:, None]
    return x, np.asarray(labels, dtype=np.int64)
