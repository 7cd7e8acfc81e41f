"""Event camera simulation, accumulation queries and the ``.evs`` file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

DEFAULT_C = 0.2
DEFAULT_B = 20.0

EVENT_DTYPE = np.dtype([("u", "<u2"), ("v", "<u2"), ("t", "<u8"), ("p", "i1")])
EVS_MAGIC = b"EVS\x00"
EVS_VERSION = 1
_HEADER = struct.Struct("<4sHHIIII")  # magic, version, reserved, W, H, C*1e6, B*1e6
HEADER_SIZE = _HEADER.size
RECORD_SIZE = EVENT_DTYPE.itemsize
# floor() guard so exact lattice crossings are not lost to rounding
_CROSSING_EPS = 1e-9


class EventFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class EventRecord(NamedTuple):
    u: int
    v: int
    t: int
    p: int


def linlog(intensity, B: float = DEFAULT_B):
    """Linear below ``B``, natural log above; continuous at ``B``."""
    I = np.asarray(intensity, dtype=float)
    if np.any(I < 0):
        raise ValueError("intensity must be non-negative")
    if B <= 0:
        raise ValueError("B must be positive")
    out = np.where(I < B, I * np.log(B) / B, np.log(np.maximum(I, B)))
    return out if out.ndim else float(out)


def linlog_grad(intensity, B: float = DEFAULT_B):
    I = np.asarray(intensity, dtype=float)
    return np.where(I < B, np.log(B) / B, 1.0 / np.maximum(I, B))


@dataclass
class PixelMemory:
    last_log_level: np.ndarray
    last_event_time: np.ndarray

    @classmethod
    def from_frame(cls, log_frame: np.ndarray, t0: int = 0) -> "PixelMemory":
        L = np.array(log_frame, dtype=float)
        return cls(L, np.full(L.shape, int(t0), dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.last_log_level.shape


@dataclass(frozen=True)
class EventStream:
    records: np.ndarray
    resolution: tuple[int, int]  # (W, H)
    threshold_C: float = DEFAULT_C
    linlog_B: float = DEFAULT_B

    def __post_init__(self):
        rec = np.asarray(self.records, dtype=EVENT_DTYPE)
        if rec.size and np.any(np.diff(rec["t"].astype(np.int64)) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if self.threshold_C <= 0 or self.linlog_B <= 0:
            raise ValueError("threshold_C and linlog_B must be positive")
        W, H = self.resolution
        if rec.size and (rec["u"].max() >= W or rec["v"].max() >= H):
            raise ValueError("event outside sensor resolution")
        if rec.size and not np.all(np.abs(rec["p"]) == 1):
            raise ValueError("polarity must be +1 or -1")
        rec = rec.copy()
        rec.flags.writeable = False
        object.__setattr__(self, "records", rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EventRecord]:
        for r in self.records:
            yield EventRecord(int(r["u"]), int(r["v"]), int(r["t"]), int(r["p"]))


def generate_events(log_frames: Sequence[tuple[int, np.ndarray]], C: float,
                    memory: PixelMemory, linlog_B: float = DEFAULT_B) -> EventStream:
    """Emit events from a sequence of ``(timestamp_ns, log_intensity)`` frames.

    ``memory`` is advanced in place. Crossing times are interpolated linearly
    between the bracketing frames; a crossing at fraction f of an interval
    ``(t0, t1]`` gets timestamp ``t0 + ceil(f * (t1 - t0))``.
    """
    if C <= 0:
        raise ValueError("C must be positive")
    H, W = memory.shape
    chunks = []
    prev_t, prev_L = None, None
    for t, L in log_frames:
        t = int(t)
        L = np.asarray(L, dtype=float)
        if L.shape != (H, W):
            raise ValueError(f"frame shape {L.shape} does not match memory {(H, W)}")
        if prev_t is not None and t <= prev_t:
            raise ValueError("frame timestamps must be strictly increasing")
        delta = L - memory.last_log_level
        n = np.floor(np.abs(delta) / C + _CROSSING_EPS).astype(np.int64)
        if n.any():
            vs, us = np.nonzero(n)
            counts = n[vs, us]
            sign = np.sign(delta[vs, us])
            rep = np.repeat(np.arange(len(counts)), counts)
            j = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            if prev_t is None:
                ts = np.full(rep.shape, t, dtype=np.int64)
            else:
                level = memory.last_log_level[vs, us][rep] + sign[rep] * j * C
                L0, L1 = prev_L[vs, us][rep], L[vs, us][rep]
                span = L1 - L0
                frac = np.where(span != 0, (level - L0) / np.where(span != 0, span, 1.0), 1.0)
                dt = t - prev_t
                off = np.clip(np.ceil(np.clip(frac, 0.0, 1.0) * dt - 1e-6), 1, dt).astype(np.int64)
                ts = prev_t + off
            rec = np.empty(len(rep), dtype=EVENT_DTYPE)
            rec["u"], rec["v"], rec["t"] = us[rep], vs[rep], ts
            rec["p"] = sign[rep].astype(np.int8)
            rec = rec[np.argsort(rec["t"], kind="stable")]
            chunks.append(rec)
            memory.last_log_level[vs, us] += sign * counts * C
            np.maximum.at(memory.last_event_time, (rec["v"], rec["u"]), rec["t"].astype(np.int64))
        prev_t, prev_L = t, L
    records = np.concatenate(chunks) if chunks else np.empty(0, dtype=EVENT_DTYPE)
    return EventStream(records, (W, H), C, linlog_B)


def accumulate(stream: EventStream, pixel: tuple[int, int], t_a: int, t_b: int) -> int:
    """Signed event count of one pixel over ``(t_a, t_b]``."""
    u, v = pixel
    W, H = stream.resolution
    if not (0 <= u < W and 0 <= v < H):
        raise IndexError(f"pixel {pixel} outside {W}x{H}")
    if t_a > t_b:
        raise ValueError("t_a must not exceed t_b")
    r = stream.records
    sel = (r["u"] == u) & (r["v"] == v) & (r["t"] > t_a) & (r["t"] <= t_b)
    return int(r["p"][sel].astype(np.int64).sum())


class EventIndex:
    """Per-pixel sorted index for vectorised window sums."""

    def __init__(self, stream: EventStream):
        self.stream = stream
        W, H = stream.resolution
        r = stream.records
        self._span = int(r["t"].max()) + 2 if len(r) else 2
        pid = r["v"].astype(np.int64) * W + r["u"].astype(np.int64)
        keys = pid * self._span + r["t"].astype(np.int64)
        order = np.argsort(keys, kind="stable")
        self._keys = keys[order]
        self._cum = np.concatenate([[0], np.cumsum(r["p"][order].astype(np.int64))])

    def _upto(self, pid, t):
        t = np.clip(np.asarray(t, dtype=np.int64), -1, self._span - 1)
        return self._cum[np.searchsorted(self._keys, pid * self._span + t, side="right")]

    def accumulate(self, u, v, t_a, t_b) -> np.ndarray:
        W, H = self.stream.resolution
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        if np.any((u < 0) | (u >= W) | (v < 0) | (v >= H)):
            raise IndexError("pixel out of bounds")
        if np.any(np.asarray(t_a) > np.asarray(t_b)):
            raise ValueError("t_a must not exceed t_b")
        pid = v * W + u
        return self._upto(pid, t_b) - self._upto(pid, t_a)


def write_stream(stream: EventStream, path) -> None:
    W, H = stream.resolution
    header = _HEADER.pack(EVS_MAGIC, EVS_VERSION, 0, W, H,
                          int(round(stream.threshold_C * 1e6)), int(round(stream.linlog_B * 1e6)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(stream.records, dtype=EVENT_DTYPE).tobytes())


def read_stream(path) -> EventStream:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise EventFormatError("truncated header", len(data))
    magic, version, _, W, H, c_micro, b_micro = _HEADER.unpack_from(data, 0)
    if magic != EVS_MAGIC:
        raise EventFormatError("bad magic", 0)
    if version != EVS_VERSION:
        raise EventFormatError(f"unsupported version {version}", 4)
    if W == 0 or H == 0 or c_micro == 0 or b_micro == 0:
        raise EventFormatError("malformed header field", 8)
    body = len(data) - HEADER_SIZE
    n_full, rem = divmod(body, RECORD_SIZE)
    if rem:
        raise EventFormatError("truncated record", HEADER_SIZE + n_full * RECORD_SIZE)
    rec = np.frombuffer(data, dtype=EVENT_DTYPE, count=n_full, offset=HEADER_SIZE)
    if n_full:
        bad = np.flatnonzero((rec["u"] >= W) | (rec["v"] >= H) | (np.abs(rec["p"]) != 1))
        if bad.size:
            raise EventFormatError("invalid record", HEADER_SIZE + int(bad[0]) * RECORD_SIZE)
        back = np.flatnonzero(np.diff(rec["t"].astype(np.int64)) < 0)
        if back.size:
            raise EventFormatError("timestamp out of order", HEADER_SIZE + int(back[0] + 1) * RECORD_SIZE)
    return EventStream(rec.copy(), (int(W), int(H)), c_micro / 1e6, b_micro / 1e6)


class EventSimulator(TransformerMixin, BaseEstimator):
    """Turn an intensity video into an event stream.

    ``fit`` records the sensor resolution from ``X`` of shape (T, H, W) and
    ``transform`` runs the generation model with fresh pixel memory seeded
    from the first frame.
    """

    def __init__(self, C: float = DEFAULT_C, B: float = DEFAULT_B):
        self.C = C
        self.B = B

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 3:
            raise ValueError("expected intensity frames of shape (T, H, W)")
        self.resolution_ = (X.shape[2], X.shape[1])
        return self

    def transform(self, X, timestamps=None) -> EventStream:
        check_is_fitted(self, "resolution_")
        X = np.asarray(X, dtype=float)
        if (X.shape[2], X.shape[1]) != self.resolution_:
            raise ValueError("frame resolution differs from the fitted one")
        if timestamps is None:
            timestamps = np.arange(len(X), dtype=np.int64)
        logs = [linlog(f, self.B) for f in X]
        memory = PixelMemory.from_frame(logs[0], int(timestamps[0]))
        return generate_events(list(zip(timestamps, logs)), self.C, memory, self.B)
