"""Hard-instance generators and reduction oracles for the matching lower bounds.

``rang`` builds the random bipartite graph in which each vertex hides its
one valuable neighbour among 2*rho decoys.  ``lift_many_to_one`` and
``sample_reduce`` move between one-to-one and many-to-one instances, and
``gen_multiple_index`` draws instances of the two-party indexing game for
empirical message-length experiments.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .convex import MatchingInstance
from .core import BitWriter, Message, ParameterError, agent_rng, coordinator_rng, field_width

RANG_SCHEMA = "coordc.rang/1"


@dataclass
class OneToOneInstance:
    """Bipartite graph on V = W = {0..n-1}; ``adjacency[v]`` lists v's neighbours in W.

    ``v_order[i]`` / ``w_order[i]`` are the vertices v_{i+1} / w_{i+1} of the
    random orderings; ``designated[v]`` is v's unique neighbour in W_2.
    """

    n: int
    adjacency: list[tuple[int, ...]]
    rho: int | None = None
    seed: int | None = None
    v_order: list[int] = field(default_factory=list)
    w_order: list[int] = field(default_factory=list)
    designated: list[int] = field(default_factory=list)

    @property
    def kappa(self) -> int:
        return self.n // (8 * self.rho)

    @property
    def block_size(self) -> int:
        return self.n // (16 * self.rho**2)

    @property
    def w1(self) -> set[int]:
        return set(self.w_order[: self.kappa])

    def blocks(self) -> list[list[int]]:
        a = self.block_size
        return [self.v_order[s : s + a] for s in range(0, self.n, a)]

    def num_edges(self) -> int:
        return sum(len(a) for a in self.adjacency)

    def to_json(self) -> dict[str, Any]:
        doc = {
            "schema": RANG_SCHEMA,
            "n": self.n,
            "edges": [[v, w] for v, ws in enumerate(self.adjacency) for w in ws],
        }
        if self.rho is not None:
            doc["generator"] = {
                "name": "rang",
                "rho": self.rho,
                "seed": self.seed,
                "kappa": self.kappa,
                "block_size": self.block_size,
                "v_order": self.v_order,
                "w_order": self.w_order,
                "designated": self.designated,
            }
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> OneToOneInstance:
        if doc.get("schema") != RANG_SCHEMA:
            raise ValueError(f"not a one-to-one instance (schema {doc.get('schema')!r})")
        n = int(doc["n"])
        adj: list[list[int]] = [[] for _ in range(n)]
        for v, w in doc["edges"]:
            adj[v].append(w)
        gen = doc.get("generator", {})
        return cls(
            n,
            [tuple(sorted(a)) for a in adj],
            gen.get("rho"),
            gen.get("seed"),
            list(gen.get("v_order", [])),
            list(gen.get("w_order", [])),
            list(gen.get("designated", [])),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def check_rang_parameters(rho: int, n: int) -> None:
    if int(rho) != rho or rho < 1:
        raise ParameterError(f"rho must be a positive integer, got {rho}")
    if n < 1 or n % (16 * rho * rho) or n % (8 * rho):
        raise ParameterError(
            f"n = {n} must be a positive multiple of 16*rho^2 = {16 * rho * rho} (and of 8*rho = {8 * rho})"
        )


def rang(rho: int, n: int, seed: int) -> OneToOneInstance:
    check_rang_parameters(rho, n)
    rng = coordinator_rng(seed)
    kappa, a = n // (8 * rho), n // (16 * rho * rho)
    w_order = [int(w) for w in rng.permutation(n)]
    v_order = [int(v) for v in rng.permutation(n)]
    w1 = w_order[:kappa]
    adjacency: list[tuple[int, ...]] = [()] * n
    designated = [0] * n
    for start in range(0, n, a):
        parts = rng.permutation(w1).reshape(a, 2 * rho)
        for offset, v in enumerate(v_order[start : start + a]):
            i = start + offset + 1  # 1-based position of v in the ordering
            u = w_order[kappa + (i - 1) % (n - kappa)]
            designated[v] = u
            adjacency[v] = tuple(sorted([int(w) for w in parts[offset]] + [u]))
    return OneToOneInstance(n, adjacency, int(rho), int(seed), v_order, w_order, designated)


def validate_rang(g: OneToOneInstance) -> list[str]:
    """Every structural property a RanG output must have; returns the failures."""
    problems = []
    n, rho = g.n, g.rho
    if rho is None:
        return ["no generator metadata"]
    kappa, a = g.kappa, g.block_size
    if kappa * 8 * rho != n or a * 16 * rho * rho != n:
        problems.append("kappa or block size not integral")
    if sorted(g.v_order) != list(range(n)) or sorted(g.w_order) != list(range(n)):
        problems.append("orderings are not permutations")
        return problems
    w1 = g.w1
    w2 = set(g.w_order[kappa:])
    for v in range(n):
        nbrs = g.adjacency[v]
        if len(set(nbrs)) != len(nbrs):
            problems.append(f"v{v}: repeated neighbour")
        in_w1 = [w for w in nbrs if w in w1]
        in_w2 = [w for w in nbrs if w in w2]
        if len(in_w1) != 2 * rho:
            problems.append(f"v{v}: {len(in_w1)} neighbours in W1, expected {2 * rho}")
        if in_w2 != [g.designated[v]]:
            problems.append(f"v{v}: W2 neighbours {in_w2}, expected exactly [{g.designated[v]}]")
    for b, block in enumerate(g.blocks()):
        seen: set[int] = set()
        for v in block:
            t_v = {w for w in g.adjacency[v] if w in w1}
            if seen & t_v:
                problems.append(f"block {b}: overlapping W1 neighbourhoods")
            seen |= t_v
        if len(block) != a:
            problems.append(f"block {b}: size {len(block)} != {a}")
    for i, v in enumerate(g.v_order, start=1):
        expected = g.w_order[kappa + (i - 1) % (n - kappa)]
        if g.designated[v] != expected:
            problems.append(f"v{v}: W2 neighbour is not the round-robin choice")
    return problems


def _biadjacency(adjacency: Sequence[Sequence[int]], num_right: int) -> csr_matrix:
    rows = [v for v, ws in enumerate(adjacency) for _ in ws]
    cols = [w for ws in adjacency for w in ws]
    return csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(adjacency), num_right))


def max_matching(g: OneToOneInstance | Sequence[Sequence[int]], num_right: int | None = None) -> int:
    """Maximum-cardinality matching size (Hopcroft-Karp)."""
    adjacency = g.adjacency if isinstance(g, OneToOneInstance) else g
    if num_right is None:
        num_right = g.n if isinstance(g, OneToOneInstance) else 1 + max((w for ws in adjacency for w in ws), default=-1)
    if not len(adjacency) or num_right == 0:
        return 0
    match = maximum_bipartite_matching(_biadjacency(adjacency, num_right), perm_type="column")
    return int((match >= 0).sum())


def lift_many_to_one(g: OneToOneInstance, b: int) -> MatchingInstance:
    """b copies of every left vertex; copy c of v is player v*b + c; each good has supply b."""
    if int(b) != b or b < 1:
        raise ParameterError(f"b must be a positive integer, got {b}")
    vals = np.zeros((g.n * b, g.n), dtype=np.int8)
    for v, ws in enumerate(g.adjacency):
        vals[v * b : (v + 1) * b, list(ws)] = 1
    meta = {"name": "lift", "b": int(b), "rho": g.rho, "seed": g.seed}
    return MatchingInstance(vals, np.full(g.n, b, dtype=np.int64), generator=meta)


def sample_reduce(
    matching: Sequence[tuple[int, int]] | np.ndarray, g: OneToOneInstance, b: int, seed: int
) -> list[tuple[int, int]]:
    """Project a lifted matching back onto g by sampling one copy per vertex.

    ``matching`` lists (player copy, good) pairs; if two sampled copies hold
    the same good, the lower-index original vertex keeps it.
    """
    good_of = {int(p): int(j) for p, j in matching}
    picks = coordinator_rng(seed).integers(0, b, size=g.n)
    out, taken = [], set()
    for v in range(g.n):
        j = good_of.get(v * b + int(picks[v]))
        if j is None or j in taken:
            continue
        taken.add(j)
        out.append((v, j))
    return out


def assignment_pairs(assignment: Sequence[int]) -> list[tuple[int, int]]:
    return [(i, int(j)) for i, j in enumerate(assignment) if j >= 0]


def is_matching(pairs: Sequence[tuple[int, int]], g: OneToOneInstance) -> bool:
    lefts = [v for v, _ in pairs]
    rights = [w for _, w in pairs]
    if len(set(lefts)) != len(lefts) or len(set(rights)) != len(rights):
        return False
    return all(w in g.adjacency[v] for v, w in pairs)


# ---------------------------------------------------------------------------
# MULTIPLE-INDEX


@dataclass
class MultipleIndexInstance:
    """t disjoint k-sets (rows of ``sets``) with one marked element each, and a query j."""

    sets: np.ndarray
    marked: np.ndarray
    query: int

    @property
    def t(self) -> int:
        return self.sets.shape[0]

    @property
    def k(self) -> int:
        return self.sets.shape[1]

    @property
    def answer(self) -> int:
        return int(self.marked[self.query])


def gen_multiple_index(t: int, k: int, seed: int) -> MultipleIndexInstance:
    if t < 1 or k < 1:
        raise ParameterError("t and k must be at least 1")
    rng = coordinator_rng(seed)
    sets = rng.permutation(t * k).reshape(t, k)
    marked = sets[np.arange(t), rng.integers(0, k, size=t)]
    return MultipleIndexInstance(sets, marked, int(rng.integers(0, t)))


def index_width(k: int) -> int:
    return field_width(k - 1)


def prefix_broadcast_message(inst: MultipleIndexInstance, blocks: int) -> Message:
    """Alice sends the position of u_i inside S_i for the first ``blocks`` sets."""
    w = BitWriter()
    for i in range(min(blocks, inst.t)):
        w.write(int(np.flatnonzero(inst.sets[i] == inst.marked[i])[0]), index_width(inst.k))
    return w.message()


def prefix_broadcast_answer(
    query_set: np.ndarray, j: int, msg: Message, k: int, rng: np.random.Generator
) -> int:
    """Bob reads slot j if it was sent and guesses uniformly otherwise."""
    width = index_width(k)
    if width == 0:
        return int(query_set[0])
    if (j + 1) * width <= len(msg):
        pos = sum(msg.bits[j * width + b] << b for b in range(width))
        return int(query_set[pos])
    return int(query_set[rng.integers(0, k)])


def multiple_index_success(t: int, k: int, blocks: int, trials: int, seed: int) -> tuple[float, int]:
    """Empirical success rate and message length of the prefix-broadcast protocol.

    ``blocks = 0`` is the random-guess baseline, ``blocks = t`` full broadcast.
    """
    wins, bits = 0, 0
    for s in range(trials):
        inst = gen_multiple_index(t, k, seed + s)
        msg = prefix_broadcast_message(inst, blocks)
        bits = max(bits, len(msg))
        guess = prefix_broadcast_answer(inst.sets[inst.query], inst.query, msg, k, agent_rng(seed + s, 0))
        wins += guess == inst.answer
    return wins / trials, bits

