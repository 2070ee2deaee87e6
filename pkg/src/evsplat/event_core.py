"""Event streams: integration, intensity warping and simulation.

Events carry (t, x, y, p) with p in {+1, -1}.  Log-intensity changes use
sign-dependent contrast thresholds: a positive accumulated count is scaled
by ``c_pos``, a negative one by ``c_neg``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

EPS = 1e-6


class Event(NamedTuple):
    t: float
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class Thresholds:
    c_pos: float = 0.25
    c_neg: float = 0.25

    def __post_init__(self):
        if not (self.c_pos > 0 and self.c_neg > 0):
            raise ValueError("contrast thresholds must be positive")

    @property
    def max(self) -> float:
        return max(self.c_pos, self.c_neg)

    def scale(self, counts):
        """Per-pixel log-intensity change c_eff * counts."""
        if torch.is_tensor(counts):
            return torch.where(counts >= 0, self.c_pos * counts, self.c_neg * counts)
        counts = np.asarray(counts, dtype=np.float64)
        return np.where(counts >= 0, self.c_pos * counts, self.c_neg * counts)


class EventStream:
    """Time-ordered events on a ``width`` x ``height`` sensor.

    Stored as parallel arrays sorted by (t, y, x, p).
    """

    def __init__(self, t, x, y, p, width: int, height: int, thresholds: Thresholds | None = None,
                 presorted: bool = False):
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("event field arrays differ in length")
        if len(t):
            if x.min() < 0 or x.max() >= width or y.min() < 0 or y.max() >= height:
                raise ValueError("event outside sensor bounds")
            if not np.all(np.abs(p) == 1):
                raise ValueError("polarity must be +1 or -1")
        if not presorted:
            idx = np.lexsort((p, x, y, t))
            t, x, y, p = t[idx], x[idx], y[idx], p[idx]
        elif len(t) > 1 and np.any(np.diff(t) < 0):
            raise ValueError("timestamps must be non-decreasing")
        self.t, self.x, self.y, self.p = t, x, y, p
        self.width, self.height = int(width), int(height)
        self.thresholds = thresholds or Thresholds()

    @classmethod
    def from_events(cls, events: Sequence, width: int, height: int, thresholds=None) -> "EventStream":
        arr = np.array([tuple(e) for e in events], dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, thresholds)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def slice(self, t0: float, t1: float) -> "EventStream":
        """Events with t0 <= t < t1."""
        i0, i1 = np.searchsorted(self.t, [t0, t1], side="left")
        return EventStream(self.t[i0:i1], self.x[i0:i1], self.y[i0:i1], self.p[i0:i1],
                           self.width, self.height, self.thresholds, presorted=True)

    def equals(self, other: "EventStream") -> bool:
        return (self.width, self.height) == (other.width, other.height) and all(
            np.array_equal(a, b) for a, b in
            ((self.t, other.t), (self.x, other.x), (self.y, other.y), (self.p, other.p)))


@dataclass
class EventMap:
    counts: np.ndarray  # (H, W) signed
    t_start: float
    t_end: float

    def __post_init__(self):
        if self.t_start > self.t_end:
            raise ValueError("event map interval reversed")


def integrate_events(stream: EventStream, t0: float, t1: float) -> EventMap:
    """Per-pixel signed event count over [t0, t1)."""
    if t0 > t1:
        raise ValueError(f"reversed interval [{t0}, {t1})")
    s = stream.slice(t0, t1)
    counts = np.zeros(stream.height * stream.width, dtype=np.float64)
    np.add.at(counts, s.y * stream.width + s.x, s.p)
    return EventMap(counts.reshape(stream.height, stream.width), t0, t1)


def warp_intensity(base, emap: EventMap | np.ndarray, th: Thresholds):
    """Brightness at the end of ``emap``'s interval given brightness at its start.

    ``base`` may be (H, W) or (H, W, C); the map applies to every channel.
    """
    counts = emap.counts if isinstance(emap, EventMap) else emap
    counts = np.asarray(counts, dtype=np.float64)
    base = np.maximum(np.asarray(base, dtype=np.float64), EPS)
    if base.shape[:2] != counts.shape:
        raise ValueError(f"event map {counts.shape} does not match image {base.shape[:2]}")
    gain = np.exp(th.scale(counts))
    if base.ndim == 3:
        gain = gain[..., None]
    return np.clip(base * gain, EPS, 1.0)


def simulate_events(frames: Sequence[np.ndarray], times: Sequence[float], th: Thresholds) -> EventStream:
    """Ideal threshold-crossing simulator over a sampled grayscale sequence.

    Log intensity is linear in time between samples; every time a pixel's
    log intensity moves one threshold away from its reference an event fires
    at the interpolated crossing time and the reference steps by that
    threshold.  No refractory period, no noise.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    times = np.asarray(times, dtype=np.float64)
    if len(times) != len(frames):
        raise ValueError("one timestamp per frame required")
    if np.any(np.diff(times) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    H, W = np.shape(frames[0])[:2]
    logs = [np.log(np.asarray(f, dtype=np.float64) + EPS) for f in frames]
    if any(l.shape != (H, W) for l in logs):
        raise ValueError("frames must be grayscale and share a size")
    ref = logs[0].copy()
    chunks = []
    for k in range(1, len(logs)):
        prev, cur = logs[k - 1], logs[k]
        t_a, t_b = times[k - 1], times[k]
        span = cur - prev
        for sign, c in ((1, th.c_pos), (-1, th.c_neg)):
            n = np.floor(sign * (cur - ref) / c).astype(np.int64)
            n = np.maximum(n, 0)
            iy, ix = np.nonzero(n)
            if len(iy) == 0:
                continue
            cnt = n[iy, ix]
            pix = np.repeat(np.arange(len(iy)), cnt)
            j = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt) + 1
            level = ref[iy, ix][pix] + sign * c * j
            frac = (level - prev[iy, ix][pix]) / span[iy, ix][pix]
            t = t_a + np.clip(frac, 0.0, 1.0) * (t_b - t_a)
            chunks.append((t, ix[pix], iy[pix], np.full(len(t), sign)))
            ref[iy, ix] += sign * c * cnt
    if not chunks:
        return EventStream([], [], [], [], W, H, th)
    t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
    return EventStream(t, x, y, p, W, H, th)


def soft_event_map(img_a, img_b, th: Thresholds):
    """Differentiable event map: log change divided by the sign-selected threshold.

    Accepts numpy arrays or torch tensors; returns the same kind.
    """
    if tuple(img_a.shape) != tuple(img_b.shape):
        raise ValueError(f"image shapes differ: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    if torch.is_tensor(img_a) or torch.is_tensor(img_b):
        diff = torch.log(img_b + EPS) - torch.log(img_a + EPS)
        return torch.where(diff >= 0, diff / th.c_pos, diff / th.c_neg)
    diff = np.log(np.asarray(img_b, dtype=np.float64) + EPS) - np.log(np.asarray(img_a, dtype=np.float64) + EPS)
    return np.where(diff >= 0, diff / th.c_pos, diff / th.c_neg)


_BT601 = (0.299, 0.587, 0.114)


def rgb_to_gray(img):
    """BT.601 luma of an (..., 3) image; numpy or torch."""
    return img[..., 0] * _BT601[0] + img[..., 1] * _BT601[1] + img[..., 2] * _BT601[2]


# --- EVT1 / CSV I/O ---------------------------------------------------------

_HEADER = struct.Struct("<4sIII")
_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])


class EventFileError(ValueError):
    pass


def write_evt1(stream: EventStream, path) -> None:
    rec = np.zeros(len(stream), dtype=_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"EVT1", stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())


def read_evt1(path, thresholds: Thresholds | None = None) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EventFileError(f"{path}: truncated header at offset {len(raw)}")
    magic, width, height, count = _HEADER.unpack_from(raw, 0)
    if magic != b"EVT1":
        raise EventFileError(f"{path}: bad magic {magic!r} at offset 0")
    need = _HEADER.size + count * _RECORD.itemsize
    if len(raw) != need:
        raise EventFileError(f"{path}: expected {need} bytes for {count} events, found {len(raw)} "
                             f"(mismatch at offset {min(len(raw), need)})")
    rec = np.frombuffer(raw, dtype=_RECORD, offset=_HEADER.size, count=count)
    return EventStream(rec["t"], rec["x"], rec["y"], rec["p"], width, height, thresholds, presorted=True)


def read_events_csv(path, width: int, height: int, thresholds: Thresholds | None = None) -> EventStream:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return EventStream([float(r["t"]) for r in rows], [int(r["x"]) for r in rows],
                       [int(r["y"]) for r in rows], [int(r["p"]) for r in rows],
                       width, height, thresholds)


def write_events_csv(stream: EventStream, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "p"])
        for e in stream:
            w.writerow([repr(e.t), e.x, e.y, e.p])
