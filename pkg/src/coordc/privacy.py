"""Private coordination: pick the broadcast with the exponential mechanism.

Given a finite space of candidate messages and a quality score for each one
(the expected welfare the agents reach when they decode it), the
coordinator samples a message with probability proportional to
``exp(eps * q / (2 * sensitivity))``.  Each agent then decodes locally, so
the outputs of the other agents are jointly private in agent i's data.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .convex import (
    MatchingInstance,
    best_response_rows,
    capped_welfare,
    decode_dual,
    encode_multiples,
    round_row,
)
from .core import (
    Message,
    ParameterError,
    Protocol,
    ProtocolReport,
    coordinator_rng,
    decode_all,
)

log = logging.getLogger(__name__)

EXACT_LIMIT = 10_000
MC_DRAWS = 1000
DP_SLACK = 1e-9


@dataclass
class CandidateMessageSpace:
    messages: list[Message]
    note: str = ""

    def __post_init__(self):
        unique = list(dict.fromkeys(self.messages))
        if not unique:
            raise ValueError("candidate message space is empty")
        self.messages = unique

    def __len__(self) -> int:
        return len(self.messages)

    def __getitem__(self, idx: int) -> Message:
        return self.messages[idx]

    def index(self, m: Message) -> int:
        return self.messages.index(m)

    @property
    def log_size(self) -> float:
        """log2 |R|, the description length of a candidate."""
        return math.log2(len(self.messages))

    def to_json(self) -> list[str]:
        return [m.to_hex() for m in self.messages]

    @classmethod
    def from_json(cls, doc: list[str] | dict[str, Any]) -> CandidateMessageSpace:
        if isinstance(doc, dict):
            return cls([Message.from_hex(h) for h in doc["messages"]], doc.get("note", ""))
        return cls([Message.from_hex(h) for h in doc])

    def dumps(self) -> str:
        return json.dumps(self.to_json())


@dataclass
class QualityTable:
    values: np.ndarray
    sensitivity: float = 1.0
    std_errors: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or not len(self.values):
            raise ValueError("quality table must be a non-empty vector")
        if not np.isfinite(self.values).all():
            raise ValueError("qualities must be finite")
        if not 0 < self.sensitivity <= 1:
            raise ValueError("sensitivity must lie in (0, 1]; rescale the quality otherwise")


def mechanism_probabilities(q: QualityTable, eps: float) -> np.ndarray:
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    logits = eps * q.values / (2.0 * q.sensitivity)
    logits -= logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def exponential_mechanism(q: QualityTable, eps: float, seed: int) -> tuple[int, np.ndarray]:
    """Sample an index; also return the exact selection probabilities."""
    probs = mechanism_probabilities(q, eps)
    u = coordinator_rng(seed).random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1), probs


# ---------------------------------------------------------------------------
# expected capped welfare


def expected_capped_min(p: np.ndarray, cap: int) -> float:
    """E[min(X, cap)] for X a sum of independent Bernoulli(p_i)."""
    dist = np.zeros(cap + 1)
    dist[0] = 1.0
    for pi in p[p > 0]:
        shifted = np.empty_like(dist)
        shifted[0] = 0.0
        shifted[1:] = dist[:-1]
        shifted[cap] += dist[cap]  # mass already at the cap stays there
        dist = (1 - pi) * dist + pi * shifted
    return float(dist @ np.arange(cap + 1))


def expected_capped_welfare(x: np.ndarray, inst: MatchingInstance) -> float:
    probs = np.asarray(x, dtype=float) * inst.valuations
    return sum(expected_capped_min(probs[:, j], int(b)) for j, b in enumerate(inst.supplies))


def sampled_capped_welfare(x: np.ndarray, inst: MatchingInstance, seed: int, draws: int = MC_DRAWS) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the rounded capped welfare."""
    rng = coordinator_rng(seed)
    vals = np.array(
        [capped_welfare([round_row(row, rng) for row in x], inst) for _ in range(draws)], dtype=float
    )
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(draws)) if draws > 1 else 0.0


def dual_message_quality(inst: MatchingInstance, msg: Message, alpha: float, eta: float, seed: int = 0) -> tuple[float, float]:
    """(expected capped welfare, standard error) of the agents' play under ``msg``."""
    lam = decode_dual(msg, inst.k, alpha)
    x = best_response_rows(inst.valuations, lam, eta)
    if inst.n * inst.k <= EXACT_LIMIT:
        return expected_capped_welfare(x, inst), 0.0
    value, se = sampled_capped_welfare(x, inst, seed)
    log.info("quality estimated by Monte Carlo: %.4f +/- %.4f", value, se)
    return value, se


def quality_table(
    inst: Any, candidates: CandidateMessageSpace, quality: Callable[[Any, Message], float | tuple[float, float]]
) -> QualityTable:
    vals, errs = [], []
    for m in candidates.messages:
        q = quality(inst, m)
        v, e = q if isinstance(q, tuple) else (q, 0.0)
        vals.append(v)
        errs.append(e)
    return QualityTable(np.array(vals), 1.0, np.array(errs))


def dual_quality(alpha: float, eta: float, seed: int = 0) -> Callable[[MatchingInstance, Message], tuple[float, float]]:
    return lambda inst, msg: dual_message_quality(inst, msg, alpha, eta, seed)


def dual_grid_candidates(k: int, levels: Sequence[Sequence[int]], note: str = "") -> CandidateMessageSpace:
    """All dual messages whose multiples range over the product of ``levels``."""
    if len(levels) != k:
        raise ValueError(f"need one level list per good ({k})")
    msgs = [encode_multiples(ms) for ms in itertools.product(*levels)]
    return CandidateMessageSpace(msgs, note or f"dual grid {[list(l) for l in levels]}")


# ---------------------------------------------------------------------------
# the private protocol


def rec_decoder(alpha: float, eta: float) -> Protocol:
    """Decoder half of ReC as a Protocol; private slice = (valuation row, k)."""

    def decode(private, msg, rng):
        row, k = private
        lam = decode_dual(msg, k, alpha)
        x = best_response_rows(np.asarray(row, dtype=float)[None, :], lam, eta)[0]
        return round_row(x, rng)

    return Protocol(
        name="pricoor-rec",
        encode=lambda inst, rng: Message(),
        decode=decode,
        private_slices=lambda inst: [(inst.valuations[i], inst.k) for i in range(inst.n)],
        objective=lambda inst, actions: capped_welfare(actions, inst),
        size=lambda inst: (inst.n, inst.k),
    )


def pri_coor(
    protocol: Protocol,
    inst: Any,
    candidates: CandidateMessageSpace,
    eps: float,
    seed: int,
    quality: Callable[[Any, Message], float | tuple[float, float]],
) -> tuple[Message, list[Any], ProtocolReport]:
    """Select a candidate by the exponential mechanism and let the agents decode it."""
    table = quality_table(inst, candidates, quality)
    idx, probs = exponential_mechanism(table, eps, seed)
    message = candidates[idx]
    actions = decode_all(protocol, inst, message, seed)
    n, k = protocol.size(inst) if protocol.size else (len(actions), 0)
    objective = float(protocol.objective(inst, actions)) if protocol.objective else float(table.values[idx])
    report = ProtocolReport(
        protocol="pri-coor",
        n=n,
        k_or_m=k,
        seed=int(seed),
        message_bits=len(message),
        objective_value=objective,
        opt_value=float(protocol.opt(inst)) if protocol.opt else None,
        extra={
            "selected": idx,
            "selected_quality": float(table.values[idx]),
            "max_quality": float(table.values.max()),
            "probabilities": probs.tolist(),
            "candidates": len(candidates),
        },
    )
    return message, actions, report


def utility_bound(num_candidates: int, eps: float, beta: float) -> float:
    """Quality shortfall the mechanism exceeds with probability at most beta."""
    return 2.0 * (math.log2(num_candidates) + math.log(1.0 / beta)) / eps


def success_probability(q: QualityTable, eps: float, beta: float) -> float:
    """Exact probability that the selected quality is within the utility bound."""
    probs = mechanism_probabilities(q, eps)
    ok = q.values >= q.values.max() - utility_bound(len(q.values), eps, beta)
    return float(probs[ok].sum())


# ---------------------------------------------------------------------------
# privacy verification


def matching_neighbors(a: MatchingInstance, b: MatchingInstance) -> bool:
    """True when the instances have the same shape and supplies and differ in at most one row."""
    if a.valuations.shape != b.valuations.shape or not np.array_equal(a.supplies, b.supplies):
        return False
    return int((a.valuations != b.valuations).any(axis=1).sum()) <= 1


def neighboring_pairs(family: Sequence[MatchingInstance]) -> list[tuple[int, int]]:
    return [(a, b) for a, b in itertools.combinations(range(len(family)), 2) if matching_neighbors(family[a], family[b])]


def verify_dp(
    family: Sequence[Any],
    candidates: CandidateMessageSpace,
    eps: float,
    quality: Callable[[Any, Message], float | tuple[float, float]],
    pairs: Sequence[tuple[int, int]] | None = None,
    neighbors: Callable[[Any, Any], bool] = matching_neighbors,
) -> float:
    """Max |log p(r | D) - log p(r | D')| over declared neighboring pairs and candidates."""
    if pairs is None:
        pairs = list(itertools.combinations(range(len(family)), 2))
    for a, b in pairs:
        if not neighbors(family[a], family[b]):
            raise ValueError(f"instances {a} and {b} are declared neighbors but differ in more than one agent")
    logp = {}
    for idx in sorted({i for pair in pairs for i in pair}):
        probs = mechanism_probabilities(quality_table(family[idx], candidates, quality), eps)
        logp[idx] = np.log(probs)
    worst = 0.0
    for a, b in pairs:
        worst = max(worst, float(np.max(np.abs(logp[a] - logp[b]))))
    return worst


def dp_holds(max_log_ratio: float, eps: float) -> bool:
    return max_log_ratio <= eps + DP_SLACK
