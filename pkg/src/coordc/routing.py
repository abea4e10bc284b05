"""Atomic routing games coordinated by a compressed best-response transcript.

The coordinator simulates best-response dynamics in which players react to
approximate edge counts, logs every edge's load stream through an
approximate counter and broadcasts the counter transcripts.  Each player
replays its own moves from the transcripts alone.

Stream schedule shared by both sides (positions are 1-based):

* position ``i`` (1..n): player i forms its initial path;
* position ``n*t + i``: player i's turn in round t.

Every edge counter receives exactly one symbol per position.  Before its
turn in round t, player i sees the counts after position ``n*t + i - 1``.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core import (
    BitReader,
    BitWriter,
    CoordinationError,
    MalformedMessage,
    Message,
    ParameterError,
    PreconditionError,
    Protocol,
    field_width,
)
from .counters import CountQuery, StreamingCounter, decode_transcript, encode_transcript

ROUTING_SCHEMA = "coordc.routing/1"
Path = tuple[int, ...]


class UnreachableError(CoordinationError):
    pass


@dataclass
class CostFunction:
    """Nondecreasing edge cost on [0, n] with values in [0, 1].

    ``kind`` is ``"linear"`` (slope * x + intercept) or ``"table"`` (values at
    the integers 0..len-1, linearly interpolated, constant past the end).
    """

    kind: str
    slope: float = 0.0
    intercept: float = 0.0
    values: tuple[float, ...] = ()

    def __call__(self, x: float) -> float:
        if self.kind == "linear":
            return self.slope * x + self.intercept
        if x <= 0:
            return self.values[0]
        last = len(self.values) - 1
        if x >= last:
            return self.values[last]
        lo = int(math.floor(x))
        frac = x - lo
        return self.values[lo] + frac * (self.values[lo + 1] - self.values[lo]) if frac else self.values[lo]

    def lipschitz(self) -> float:
        if self.kind == "linear":
            return abs(self.slope)
        return max((abs(b - a) for a, b in zip(self.values, self.values[1:])), default=0.0)

    def to_json(self) -> dict[str, Any]:
        if self.kind == "linear":
            return {"kind": "linear", "slope": self.slope, "intercept": self.intercept}
        return {"kind": "table", "values": list(self.values)}

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> CostFunction:
        kind = doc.get("kind")
        if kind == "linear":
            return cls("linear", slope=float(doc["slope"]), intercept=float(doc.get("intercept", 0.0)))
        if kind == "table":
            values = tuple(float(v) for v in doc["values"])
            if not values:
                raise ValueError("table cost needs at least one value")
            return cls("table", values=values)
        raise ValueError(f"unknown cost kind {kind!r}")


def linear_cost(slope: float, intercept: float = 0.0) -> CostFunction:
    return CostFunction("linear", slope=slope, intercept=intercept)


@dataclass
class RoutingGame:
    num_nodes: int
    edges: list[tuple[int, int]]
    costs: list[CostFunction]
    pairs: list[tuple[int, int]]
    lipschitz: float

    def __post_init__(self):
        self.edges = [(int(u), int(v)) for u, v in self.edges]
        self.pairs = [(int(s), int(d)) for s, d in self.pairs]
        if len(self.costs) != len(self.edges):
            raise ValueError("need one cost function per edge")
        for u, v in self.edges:
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise ValueError(f"edge {(u, v)} references a missing node")
        self._out: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for e, (u, _) in enumerate(self.edges):
            self._out[u].append(e)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def n(self) -> int:
        return len(self.pairs)

    def out_edges(self, node: int) -> list[int]:
        return self._out[node]

    def cost(self, e: int, load: float) -> float:
        return self.costs[e](load)

    def validate(self, grid_points: int = 101) -> None:
        """Connectivity, and sampled range/monotonicity/Lipschitz checks."""
        for i, (s, d) in enumerate(self.pairs):
            if fewest_edge_path(self, s, d) is None:
                raise ValueError(f"player {i}: no path from {s} to {d}")
        grid = np.linspace(0.0, float(self.n), grid_points)
        for e, c in enumerate(self.costs):
            vals = np.array([c(x) for x in grid])
            if (vals < -1e-12).any() or (vals > 1 + 1e-12).any():
                raise ValueError(f"edge {e}: cost leaves [0, 1] on [0, n]")
            if (np.diff(vals) < -1e-12).any():
                raise ValueError(f"edge {e}: cost is not nondecreasing")
            slopes = np.abs(np.diff(vals)) / np.diff(grid) if grid_points > 1 else np.zeros(0)
            if (slopes > self.lipschitz + 1e-9).any():
                raise ValueError(f"edge {e}: cost is steeper than the declared Lipschitz constant")

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": ROUTING_SCHEMA,
            "nodes": self.num_nodes,
            "edges": [
                {"tail": u, "head": v, "cost": c.to_json()} for (u, v), c in zip(self.edges, self.costs)
            ],
            "players": [list(p) for p in self.pairs],
            "lipschitz": self.lipschitz,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> RoutingGame:
        if doc.get("schema") != ROUTING_SCHEMA:
            raise ValueError(f"not a routing game (schema {doc.get('schema')!r})")
        return cls(
            num_nodes=int(doc["nodes"]),
            edges=[(e["tail"], e["head"]) for e in doc["edges"]],
            costs=[CostFunction.from_json(e["cost"]) for e in doc["edges"]],
            pairs=[tuple(p) for p in doc["players"]],
            lipschitz=float(doc["lipschitz"]),
        )


# ---------------------------------------------------------------------------
# flows and paths


@dataclass
class FlowState:
    paths: list[Path]
    loads: np.ndarray

    @classmethod
    def from_paths(cls, paths: Sequence[Sequence[int]], m: int) -> FlowState:
        loads = np.zeros(m, dtype=np.int64)
        for p in paths:
            for e in p:
                loads[e] += 1
        return cls([tuple(p) for p in paths], loads)

    def check(self, g: RoutingGame) -> None:
        expected = FlowState.from_paths(self.paths, g.m).loads
        if not np.array_equal(expected, self.loads):
            raise ValueError("edge loads do not match the player paths")
        for i, (p, (s, d)) in enumerate(zip(self.paths, g.pairs)):
            if not is_simple_path(g, p, s, d):
                raise ValueError(f"player {i}: {p} is not a simple {s}->{d} path")


def is_simple_path(g: RoutingGame, path: Sequence[int], s: int, d: int) -> bool:
    node, seen = s, {s}
    for e in path:
        u, v = g.edges[e]
        if u != node or v in seen:
            return False
        seen.add(v)
        node = v
    return node == d


def shortest_path(g: RoutingGame, s: int, d: int, weight: Callable[[int], float]) -> tuple[float, Path] | None:
    """Least-weight s->d path; ties go to the lexicographically smaller edge sequence.

    Dijkstra over labels ``(cost, edge sequence)``; weights must be >= 0.
    """
    best: dict[int, tuple[float, Path]] = {s: (0.0, ())}
    heap: list[tuple[float, Path, int]] = [(0.0, (), s)]
    done: set[int] = set()
    while heap:
        cost, path, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == d:
            return cost, path
        for e in g.out_edges(u):
            v = g.edges[e][1]
            if v in done:
                continue
            label = (cost + weight(e), path + (e,))
            if v not in best or label < best[v]:
                best[v] = label
                heapq.heappush(heap, (label[0], label[1], v))
    return None


def fewest_edge_path(g: RoutingGame, s: int, d: int) -> Path | None:
    found = shortest_path(g, s, d, lambda e: 1.0)
    return None if found is None else found[1]


def path_cost(g: RoutingGame, path: Sequence[int], loads) -> float:
    return float(sum(g.cost(e, loads[e]) for e in path))


def clamp_counts(counts, n: int) -> np.ndarray:
    return np.clip(np.asarray(counts, dtype=float), 0.0, float(n))


def best_response_path(i: int, counts, g: RoutingGame) -> Path:
    s, d = g.pairs[i]
    return _best_response(g, s, d, clamp_counts(counts, g.n))[1]


def _best_response(g: RoutingGame, s: int, d: int, clamped: np.ndarray) -> tuple[float, Path]:
    found = shortest_path(g, s, d, lambda e: g.cost(e, clamped[e]))
    if found is None:
        raise UnreachableError(f"no path from {s} to {d}")
    return found


def potential(f: FlowState, g: RoutingGame) -> float:
    return float(sum(g.cost(e, j) for e in range(g.m) for j in range(1, int(f.loads[e]) + 1)))


def verify_equilibrium(f: FlowState, g: RoutingGame, eps: float) -> tuple[bool, float]:
    """Max over players of (current cost - best unilateral deviation cost)."""
    worst = 0.0
    for i, (path, (s, d)) in enumerate(zip(f.paths, g.pairs)):
        mine = set(path)
        current = path_cost(g, path, f.loads)
        found = shortest_path(g, s, d, lambda e: g.cost(e, f.loads[e] - (e in mine) + 1))
        if found is None:
            raise UnreachableError(f"player {i}: no path from {s} to {d}")
        worst = max(worst, current - found[0])
    return worst <= eps + 1e-12, worst


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class BRParameters:
    alpha: float
    r: int
    lipschitz: float
    m: int
    n: int

    @property
    def step_gain(self) -> float:
        """Guaranteed potential drop per deviation: alpha - 2*lam*m*r - lam*m."""
        return self.alpha - 2 * self.lipschitz * self.m * self.r - self.lipschitz * self.m

    @property
    def rounds(self) -> int:
        # mn/l is often an integer in exact arithmetic; don't let float noise add a round
        return math.ceil(self.m * self.n / self.step_gain - 1e-9)

    @property
    def horizon(self) -> int:
        return (self.rounds + 1) * self.n

    @property
    def equilibrium_eps(self) -> float:
        return self.alpha + self.lipschitz * self.m * self.r + self.lipschitz * self.m

    def check(self) -> None:
        if int(self.r) != self.r or self.r < 1:
            raise ParameterError(f"r must be a positive integer, got {self.r}")
        need = 2 * self.lipschitz * self.m * (self.r + 1)
        if not self.alpha > need:
            raise PreconditionError(
                f"alpha must exceed 2*lambda*m*(r+1) = {need:.6g} (got alpha = {self.alpha:.6g}); "
                "raise alpha or lower r"
            )
        if not self.step_gain > 0:
            raise PreconditionError(f"alpha - 2*lambda*m*r - lambda*m = {self.step_gain:.6g} must be positive")


def br_parameters(g: RoutingGame, alpha: float, r: int) -> BRParameters:
    p = BRParameters(float(alpha), int(r) if int(r) == r else r, float(g.lipschitz), g.m, g.n)
    p.check()
    return p


def flowmain_parameters(g: RoutingGame, eps: float) -> tuple[float, int]:
    """(alpha, r) targeting an eps-equilibrium; needs eps > 2*lambda*m."""
    lm = g.lipschitz * g.m
    if not eps > 2 * lm:
        raise PreconditionError(f"target eps must exceed 2*lambda*m = {2 * lm:.6g}")
    r = max(1, int(math.floor((eps - 2 * lm) / (6 * lm)))) if lm > 0 else 1
    alpha = eps - lm * r - lm
    return alpha, r


# ---------------------------------------------------------------------------
# coordinator


@dataclass
class SimulationTrace:
    """Diagnostics from the coordinator's run, not part of the message."""

    deviations: int = 0
    potentials: list[float] = field(default_factory=list)
    max_counter_error: int = 0


@dataclass
class BRSimResult:
    message: Message
    flow: FlowState
    halt_round: int
    params: BRParameters
    trace: SimulationTrace


class _BestResponseCache:
    """Memoizes best responses per (s, d) for the current count vector."""

    def __init__(self, g: RoutingGame):
        self.g = g
        self.version = -1
        self.table: dict[tuple[int, int], tuple[float, Path]] = {}
        self.clamped = None

    def get(self, s: int, d: int, counts: np.ndarray, version: int) -> tuple[float, Path]:
        if version != self.version:
            self.version = version
            self.table = {}
            self.clamped = clamp_counts(counts, self.g.n)
        key = (s, d)
        if key not in self.table:
            self.table[key] = _best_response(self.g, s, d, self.clamped)
        return self.table[key]


def _needs_switch(g: RoutingGame, path: Path, best: tuple[float, Path], clamped, alpha: float) -> bool:
    return path_cost(g, path, clamped) - alpha > best[0]


def br_sim(g: RoutingGame, alpha: float, r: int, check_invariants: bool = True) -> BRSimResult:
    params = br_parameters(g, alpha, r)
    n, m = g.n, g.m
    counters = [StreamingCounter(params.r, params.horizon) for _ in range(m)]
    counts = np.zeros(m, dtype=np.int64)
    version = 0
    cache = _BestResponseCache(g)
    trace = SimulationTrace()

    def feed(add: set[int], remove: set[int]) -> None:
        nonlocal version
        for e, counter in enumerate(counters):
            event = counter.push(1 if e in add else -1 if e in remove else 0)
            if event is not None:
                counts[e] = counter.count
                version += 1

    paths: list[Path] = []
    for i, (s, d) in enumerate(g.pairs):
        p = fewest_edge_path(g, s, d)
        if p is None:
            raise UnreachableError(f"player {i}: no path from {s} to {d}")
        paths.append(p)
        feed(set(p), set())
    loads = FlowState.from_paths(paths, m).loads

    def counter_error() -> int:
        return int(np.max(np.abs(counts - loads))) if m else 0

    if check_invariants:
        trace.potentials.append(potential(FlowState(paths, loads), g))
        trace.max_counter_error = counter_error()

    halt = params.rounds
    for t in range(1, params.rounds + 1):
        if all(
            not _needs_switch(g, paths[i], cache.get(s, d, counts, version), cache.clamped, params.alpha)
            for i, (s, d) in enumerate(g.pairs)
        ):
            halt = t - 1
            break
        for i, (s, d) in enumerate(g.pairs):
            best = cache.get(s, d, counts, version)
            if _needs_switch(g, paths[i], best, cache.clamped, params.alpha):
                old, new = set(paths[i]), set(best[1])
                before = trace.potentials[-1] if check_invariants else 0.0
                for e in old - new:
                    loads[e] -= 1
                for e in new - old:
                    loads[e] += 1
                paths[i] = best[1]
                feed(new - old, old - new)
                trace.deviations += 1
                if check_invariants:
                    after = potential(FlowState(paths, loads), g)
                    if before - after < params.step_gain - 1e-9:
                        raise AssertionError(
                            f"potential dropped by {before - after:.6g} < {params.step_gain:.6g} "
                            f"(round {t}, player {i})"
                        )
                    trace.potentials.append(after)
            else:
                feed(set(), set())
            if check_invariants:
                trace.max_counter_error = max(trace.max_counter_error, counter_error())
    if trace.deviations > m * n / params.step_gain + 1e-9:
        raise AssertionError(f"{trace.deviations} deviations exceed mn/l = {m * n / params.step_gain:.6g}")

    w = BitWriter()
    w.write(halt, field_width(params.rounds))
    for counter in counters:
        encode_transcript(counter.transcript(), w)
    return BRSimResult(w.message(), FlowState(paths, loads), halt, params, trace)


# ---------------------------------------------------------------------------
# players


@dataclass
class DecodedTranscripts:
    halt_round: int
    queries: list[CountQuery]

    def counts_at(self, position: int) -> np.ndarray:
        return np.array([q(position) for q in self.queries], dtype=np.int64)


def decode_routing_message(msg: Message, params: BRParameters) -> DecodedTranscripts:
    reader = BitReader(msg)
    halt = reader.read(field_width(params.rounds))
    if halt > params.rounds:
        raise MalformedMessage(f"halt round {halt} exceeds {params.rounds}")
    queries = [CountQuery(decode_transcript(reader, params.r, params.horizon)) for _ in range(params.m)]
    reader.expect_end()
    return DecodedTranscripts(halt, queries)


def routing_message_bits(event_counts: Sequence[int], params: BRParameters) -> int:
    from .counters import transcript_bits

    return field_width(params.rounds) + sum(transcript_bits(c, params.horizon) for c in event_counts)


def extract_path(
    i: int,
    msg: Message | DecodedTranscripts,
    g: RoutingGame,
    alpha: float,
    r: int,
) -> Path:
    """Player i's final path: replay the message against the public game from its own (s_i, d_i)."""
    params = br_parameters(g, alpha, r)
    if not 0 <= i < g.n:
        raise IndexError(f"player {i} out of range")
    decoded = msg if isinstance(msg, DecodedTranscripts) else decode_routing_message(msg, params)
    s, d = g.pairs[i]
    path = fewest_edge_path(g, s, d)
    if path is None:
        raise UnreachableError(f"no path from {s} to {d}")
    last_counts, clamped, best = None, None, None
    for t in range(1, decoded.halt_round + 1):
        position = g.n * t + i
        if position > params.horizon:
            raise MalformedMessage(f"position {position} beyond horizon {params.horizon}")
        counts = decoded.counts_at(position)
        if last_counts is None or not np.array_equal(counts, last_counts):
            last_counts, clamped = counts, clamp_counts(counts, g.n)
            best = _best_response(g, s, d, clamped)
        if _needs_switch(g, path, best, clamped, params.alpha):
            path = best[1]
    return path


def routing_protocol(alpha: float, r: int) -> Protocol:
    """BR-Sim / ExtractPath as a two-stage protocol.  Private slice = player index
    (its (s_i, d_i) pair); the graph and costs are public."""

    def encode(g, rng):
        return br_sim(g, alpha, r, check_invariants=False).message

    def decode(private, msg, rng):
        i, g = private
        return extract_path(i, msg, g, alpha, r)

    def objective(g, actions):
        return verify_equilibrium(FlowState.from_paths(actions, g.m), g, 0.0)[1]

    return Protocol(
        name="br-sim",
        encode=encode,
        decode=decode,
        private_slices=lambda g: [(i, g) for i in range(g.n)],
        objective=objective,
        size=lambda g: (g.n, g.m),
    )


# ---------------------------------------------------------------------------
# generators


def parallel_edge_game(n: int, slopes: Sequence[float], intercepts: Sequence[float] | None = None) -> RoutingGame:
    m = len(slopes)
    intercepts = intercepts or [0.0] * m
    costs = [linear_cost(a, c) for a, c in zip(slopes, intercepts)]
    return RoutingGame(2, [(0, 1)] * m, costs, [(0, 1)] * n, max(slopes))


def random_parallel_game(n: int, m: int, seed: int, slope_scale: float = 1.0) -> RoutingGame:
    """m parallel links with slopes up to ``slope_scale / n`` and random intercepts."""
    if not 0 < slope_scale <= 1:
        raise ParameterError(f"slope_scale must lie in (0, 1], got {slope_scale}")
    rng = np.random.default_rng(seed)
    lam = slope_scale / n
    slopes = rng.uniform(0.2, 1.0, size=m) * lam
    intercepts = rng.uniform(0.0, 1.0 - slopes * n)
    costs = [linear_cost(float(a), float(c)) for a, c in zip(slopes, intercepts)]
    return RoutingGame(2, [(0, 1)] * m, costs, [(0, 1)] * n, float(slopes.max()))


def grid_game(rows: int, cols: int, n: int, seed: int, slope_scale: float = 1.0) -> RoutingGame:
    """Directed grid (right and down edges), players between random ordered cell pairs."""
    if not 0 < slope_scale <= 1:
        raise ParameterError(f"slope_scale must lie in (0, 1], got {slope_scale}")
    rng = np.random.default_rng(seed)
    node = lambda r_, c_: r_ * cols + c_  # noqa: E731
    edges = []
    for r_ in range(rows):
        for c_ in range(cols):
            if c_ + 1 < cols:
                edges.append((node(r_, c_), node(r_, c_ + 1)))
            if r_ + 1 < rows:
                edges.append((node(r_, c_), node(r_ + 1, c_)))
    lam = slope_scale / n
    slopes = rng.uniform(0.2, 1.0, size=len(edges)) * lam
    intercepts = rng.uniform(0.0, 0.5, size=len(edges)) * (1.0 - slopes * n)
    costs = [linear_cost(float(a), float(c)) for a, c in zip(slopes, intercepts)]
    pairs = []
    for _ in range(n):
        r0, r1 = sorted(rng.integers(0, rows, size=2))
        c0, c1 = sorted(rng.integers(0, cols, size=2))
        if (r0, c0) == (r1, c1):
            r1, c1 = rows - 1, cols - 1
            if (r0, c0) == (r1, c1):
                r0, c0 = 0, 0
        pairs.append((node(r0, c0), node(r1, c1)))
    return RoutingGame(rows * cols, edges, costs, pairs, float(slopes.max()))


def dumps(g: RoutingGame) -> str:
    return json.dumps(g.to_json(), sort_keys=True)
