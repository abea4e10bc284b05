"""Many-to-one stable matching coordinated by k admission thresholds.

Schools lower their admission thresholds one step at a time (deferred
acceptance driven by scores).  Broadcasting the final thresholds is enough
for every student to find her own school.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .core import BitReader, BitWriter, MalformedMessage, Message, Protocol, field_width

STABLE_SCHEMA = "coordc.stable/1"
UNMATCHED = -1


@dataclass
class StableInstance:
    """``preferences[i]`` lists school indices best first; ``scores[j][i]`` is
    student i's score at school j (a permutation of 1..n per school)."""

    capacities: np.ndarray
    preferences: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.capacities = np.asarray(self.capacities, dtype=np.int64)
        self.preferences = np.asarray(self.preferences, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.int64)
        k, n = self.k, self.n
        if k < 1 or n < 1:
            raise ValueError("need at least one school and one student")
        if (self.capacities < 1).any():
            raise ValueError("capacities must be >= 1")
        if self.preferences.shape != (n, k):
            raise ValueError(f"preferences must be {n}x{k}")
        if self.scores.shape != (k, n):
            raise ValueError(f"scores must be {k}x{n}")
        if not (np.sort(self.preferences, axis=1) == np.arange(k)).all():
            raise ValueError("each preference list must be a permutation of the schools")
        if not (np.sort(self.scores, axis=1) == np.arange(1, n + 1)).all():
            raise ValueError("each school's scores must be a permutation of 1..n")
        # rank[i, j] = position of school j in student i's list (0 = favourite)
        self.rank = np.argsort(self.preferences, axis=1)

    @property
    def k(self) -> int:
        return len(self.capacities)

    @property
    def n(self) -> int:
        return self.scores.shape[1] if self.scores.ndim == 2 else 0

    def student_slice(self, i: int) -> StudentSlice:
        return StudentSlice(tuple(int(j) for j in self.preferences[i]), tuple(int(s) for s in self.scores[:, i]))

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": STABLE_SCHEMA,
            "capacities": self.capacities.tolist(),
            "preferences": self.preferences.tolist(),
            "scores": self.scores.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> StableInstance:
        if doc.get("schema") != STABLE_SCHEMA:
            raise ValueError(f"not a stable-matching instance (schema {doc.get('schema')!r})")
        return cls(doc["capacities"], doc["preferences"], doc["scores"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass(frozen=True)
class StudentSlice:
    """What a single student knows: her preference list and her own scores."""

    preferences: tuple[int, ...]
    scores: tuple[int, ...]


def random_stable_instance(n: int, k: int, capacity: int | Sequence[int], seed: int) -> StableInstance:
    rng = np.random.default_rng(seed)
    caps = np.full(k, capacity) if np.isscalar(capacity) else np.asarray(capacity)
    prefs = np.array([rng.permutation(k) for _ in range(n)]).reshape(n, k)
    scores = np.array([rng.permutation(n) + 1 for _ in range(k)]).reshape(k, n)
    return StableInstance(caps, prefs, scores)


def _enrollment(inst: StableInstance, admit: np.ndarray) -> np.ndarray:
    qualifies = inst.scores.T >= admit  # n x k
    ranks = np.where(qualifies, inst.rank, inst.k)
    best = ranks.argmin(axis=1)
    return np.where(qualifies[np.arange(inst.n), best], best, UNMATCHED)


def stab(inst: StableInstance) -> np.ndarray:
    """Final admission thresholds, one per school.

    Each pass lowers the threshold of the lowest-index school that is below
    capacity and still has admit > 1, then re-derives every enrollment.
    """
    admit = np.full(inst.k, inst.n, dtype=np.int64)
    enrolled = _enrollment(inst, admit)
    while True:
        counts = np.bincount(enrolled[enrolled >= 0], minlength=inst.k)
        open_ = np.flatnonzero((counts < inst.capacities) & (admit > 1))
        if not len(open_):
            return admit
        admit[open_[0]] -= 1
        enrolled = _enrollment(inst, admit)


def decode_enrollment(student: StudentSlice, admit: Sequence[int]) -> int:
    for j in student.preferences:
        if student.scores[j] >= admit[j]:
            return j
    return UNMATCHED


def score_width(n: int) -> int:
    return field_width(n + 1)


def encode_scores(admit: Sequence[int], n: int) -> Message:
    w = BitWriter()
    width = score_width(n)
    for a in admit:
        if not 1 <= a <= n + 1:
            raise ValueError(f"admission score {a} outside 1..{n + 1}")
        w.write(a, width)
    return w.message()


def decode_scores(msg: Message, n: int, k: int) -> tuple[int, ...]:
    reader = BitReader(msg)
    width = score_width(n)
    admit = tuple(reader.read(width) for _ in range(k))
    reader.expect_end()
    for a in admit:
        if not 1 <= a <= n + 1:
            raise MalformedMessage(f"admission score {a} outside 1..{n + 1}")
    return admit


@dataclass(frozen=True)
class Violation:
    kind: str  # "capacity", "filled-seat", "empty-seat"
    student: int | None
    school: int


def verify_stability(matching: Sequence[int], inst: StableInstance) -> tuple[bool, list[Violation]]:
    """Exhaustive check of feasibility and both blocking-pair conditions."""
    mu = np.asarray(matching, dtype=np.int64)
    if mu.shape != (inst.n,):
        raise ValueError(f"matching must assign each of the {inst.n} students")
    counts = np.bincount(mu[mu >= 0], minlength=inst.k)
    violations = [Violation("capacity", None, int(j)) for j in np.flatnonzero(counts > inst.capacities)]
    # weakest admitted score per school (n + 1 if nobody is enrolled)
    weakest = np.full(inst.k, inst.n + 1, dtype=np.int64)
    for i, j in enumerate(mu):
        if j >= 0:
            weakest[j] = min(weakest[j], inst.scores[j, i])
    for i in range(inst.n):
        own = inst.rank[i, mu[i]] if mu[i] >= 0 else inst.k
        for j in inst.preferences[i][:own]:
            if counts[j] < inst.capacities[j]:
                violations.append(Violation("empty-seat", i, int(j)))
            elif inst.scores[j, i] > weakest[j]:
                violations.append(Violation("filled-seat", i, int(j)))
    return not violations, violations


def stable_protocol() -> Protocol:
    def encode(inst, rng):
        return encode_scores(stab(inst), inst.n)

    def decode(private, msg, rng):
        student, n, k = private
        return decode_enrollment(student, decode_scores(msg, n, k))

    def objective(inst, actions):
        return float(verify_stability(actions, inst)[0])

    return Protocol(
        name="stab",
        encode=encode,
        decode=decode,
        private_slices=lambda inst: [(inst.student_slice(i), inst.n, inst.k) for i in range(inst.n)],
        objective=objective,
        size=lambda inst: (inst.n, inst.k),
    )
