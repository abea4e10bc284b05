"""Approximate running counts of a {-1, 0, 1} stream.

The encoder only logs a step when its maintained count drifts ``r`` away
from the true prefix sum, so a stream with few nonzero symbols compresses to
a handful of ``(step, sign)`` events.
"""
from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import BitReader, BitWriter, Message, field_width

PLUS = 1
MINUS = -1

COUNT_FIELD_BITS = 32


@dataclass(frozen=True)
class CounterTranscript:
    updates: tuple[tuple[int, int], ...]
    r: int
    horizon: int

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("refinement r must be a positive integer")
        if not self.updates:
            return
        steps, signs = _update_arrays(self.updates)
        if steps[0] < 1 or (np.diff(steps) <= 0).any():
            raise ValueError("update steps must be strictly increasing and >= 1")
        if steps[-1] > self.horizon:
            raise ValueError(f"update step {int(steps[-1])} exceeds horizon {self.horizon}")
        bad = ~np.isin(signs, (PLUS, MINUS))
        if bad.any():
            raise ValueError(f"bad update direction {int(signs[bad][0])!r}")

    def __len__(self) -> int:
        return len(self.updates)


class StreamingCounter:
    """Online form of the compressor: feed symbols one at a time.

    ``count`` is the maintained approximate count after the last symbol and
    ``history`` (if kept) holds it for every position.
    """

    def __init__(self, r: int, horizon: int, keep_history: bool = False):
        if int(r) != r or r < 1:
            raise ValueError("refinement r must be a positive integer")
        self.r = int(r)
        self.horizon = int(horizon)
        self.t = 0
        self.prefix = 0
        self.count = 0
        self.updates: list[tuple[int, int]] = []
        self.history: list[int] | None = [] if keep_history else None

    def push(self, symbol: int) -> int | None:
        if symbol not in (-1, 0, 1):
            raise ValueError(f"stream symbol {symbol!r} not in {{-1, 0, 1}}")
        symbol = int(symbol)
        if self.t >= self.horizon:
            raise ValueError(f"stream longer than horizon {self.horizon}")
        self.t += 1
        self.prefix += symbol
        event = None
        if abs(self.count - self.prefix) >= self.r:
            event = PLUS if self.count < self.prefix else MINUS
            self.count += event * self.r
            self.updates.append((self.t, event))
        if self.history is not None:
            self.history.append(self.count)
        return event

    def transcript(self) -> CounterTranscript:
        return CounterTranscript(tuple(self.updates), self.r, self.horizon)


def _compress(stream: Iterable[int], r: int, T: int) -> tuple[list[tuple[int, int]], list[int]]:
    """Batch form of :class:`StreamingCounter`: (updates, count after every step)."""
    if int(r) != r or r < 1:
        raise ValueError("refinement r must be a positive integer")
    r = int(r)
    symbols = np.asarray(list(stream) if not isinstance(stream, np.ndarray) else stream)
    if symbols.size and not np.isin(symbols, (-1, 0, 1)).all():
        bad = symbols[~np.isin(symbols, (-1, 0, 1))][0]
        raise ValueError(f"stream symbol {bad!r} not in {{-1, 0, 1}}")
    if symbols.size > T:
        raise ValueError(f"stream longer than horizon {T}")
    updates, counts, c = [], [], 0
    for t, prefix in enumerate(np.cumsum(symbols, dtype=np.int64).tolist(), start=1):
        d = prefix - c
        if d >= r:
            c += r
            updates.append((t, PLUS))
        elif -d >= r:
            c -= r
            updates.append((t, MINUS))
        counts.append(c)
    return updates, counts


def approx_count(stream: Iterable[int], r: int, T: int) -> CounterTranscript:
    updates, _ = _compress(stream, r, T)
    return CounterTranscript(tuple(updates), int(r), int(T))


def approx_count_traced(stream: Iterable[int], r: int, T: int) -> tuple[CounterTranscript, np.ndarray]:
    """Transcript plus the count the encoder maintained after each symbol."""
    updates, counts = _compress(stream, r, T)
    return CounterTranscript(tuple(updates), int(r), int(T)), np.array(counts, dtype=np.int64)


def _update_arrays(updates: Sequence[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    flat = np.fromiter(itertools.chain.from_iterable(updates), dtype=np.int64, count=2 * len(updates))
    return flat[0::2], flat[1::2]


def extract_count(t: CounterTranscript) -> np.ndarray:
    """Approximate count after each step 1..T, as an int64 array of length T."""
    deltas = np.zeros(t.horizon + 1, dtype=np.int64)
    if t.updates:
        steps, signs = _update_arrays(t.updates)
        if steps.max() > t.horizon:
            raise ValueError(f"update step {int(steps.max())} exceeds horizon {t.horizon}")
        deltas[steps] = signs * t.r
    return np.cumsum(deltas)[1:]


@dataclass
class CountQuery:
    """Random access to the reconstructed count without materializing it."""

    transcript: CounterTranscript
    _steps: list[int] = field(init=False, repr=False)
    _cum: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        self._steps = [s for s, _ in self.transcript.updates]
        cum, c = [], 0
        for _, sign in self.transcript.updates:
            c += sign * self.transcript.r
            cum.append(c)
        self._cum = cum

    def __call__(self, position: int) -> int:
        """Count after ``position`` symbols (position 0 is the empty prefix)."""
        if position < 0 or position > self.transcript.horizon:
            raise IndexError(f"position {position} outside 0..{self.transcript.horizon}")
        idx = bisect.bisect_right(self._steps, position)
        return self._cum[idx - 1] if idx else 0


def step_width(horizon: int) -> int:
    return field_width(horizon)


def transcript_bits(n_events: int, horizon: int) -> int:
    return COUNT_FIELD_BITS + n_events * (step_width(horizon) + 1)


def encode_transcript(t: CounterTranscript, writer: BitWriter | None = None) -> Message:
    w = writer if writer is not None else BitWriter()
    width = step_width(t.horizon)
    w.write(len(t.updates), COUNT_FIELD_BITS)
    if t.updates:
        # step (width bits) then the sign bit is one (width + 1)-bit field
        steps, signs = _update_arrays(t.updates)
        w.write_array(steps | ((signs == PLUS).astype(np.int64) << width), width + 1)
    return w.message()


def decode_transcript(reader: BitReader | Message, r: int, horizon: int) -> CounterTranscript:
    if isinstance(reader, Message):
        reader = BitReader(reader)
    width = step_width(horizon)
    n_events = reader.read(COUNT_FIELD_BITS)
    fields = reader.read_array(n_events, width + 1)
    steps = (fields & ((1 << width) - 1)).tolist()
    signs = np.where(fields >> width, PLUS, MINUS).tolist()
    return CounterTranscript(tuple(zip(steps, signs)), r, horizon)


def nonzero_count(stream: Sequence[int]) -> int:
    return sum(1 for s in stream if s)
