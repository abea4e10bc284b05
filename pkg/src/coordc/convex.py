"""Coordination through a regularized dual.

The coordinator solves the dual of the strongly concave program
``max v(x) - (eta/2)||x||^2`` subject to the coupling constraints, rounds the
prices to a grid and broadcasts them.  Because the regularized per-agent
argmax is unique, the prices alone pin down every agent's share.

The many-to-one matching LP (players x goods, {0,1} values, integer supplies)
ships with a closed-form agent response; other programs plug in through
:class:`SeparableProgram`.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .core import (
    BitReader,
    BitWriter,
    CoordinationError,
    Message,
    ParameterError,
    Protocol,
    agent_rng,
    field_width,
)

log = logging.getLogger(__name__)

MATCHING_SCHEMA = "coordc.matching/1"
WIDTH_FIELD_BITS = 8
UNMATCHED = -1
TIE_SLACK = 1e-9


class DualConvergenceError(CoordinationError):
    def __init__(self, grad_norm: float, iterations: int):
        super().__init__(
            f"dual solver stopped after {iterations} iterations with projected gradient norm {grad_norm:.3e}"
        )
        self.grad_norm = grad_norm
        self.iterations = iterations


# ---------------------------------------------------------------------------
# instances


@dataclass
class MatchingInstance:
    valuations: np.ndarray
    supplies: np.ndarray
    generator: dict[str, Any] | None = None

    def __post_init__(self):
        v = np.asarray(self.valuations)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("valuations must be an n x k matrix with n, k >= 1")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("valuations must be 0/1")
        b = np.asarray(self.supplies)
        if b.shape != (v.shape[1],):
            raise ValueError(f"expected {v.shape[1]} supplies, got shape {b.shape}")
        if (b < 1).any() or not np.equal(np.floor(b), b).all():
            raise ValueError("supplies must be integers >= 1")
        self.valuations = v.astype(np.int8)
        self.supplies = b.astype(np.int64)

    @property
    def n(self) -> int:
        return self.valuations.shape[0]

    @property
    def k(self) -> int:
        return self.valuations.shape[1]

    @classmethod
    def from_edges(cls, n: int, k: int, edges, supplies, generator=None) -> MatchingInstance:
        v = np.zeros((n, k), dtype=np.int8)
        for i, j in edges:
            v[i, j] = 1
        return cls(v, np.asarray(supplies), generator)

    def edges(self) -> list[list[int]]:
        return [[int(i), int(j)] for i, j in zip(*np.nonzero(self.valuations))]

    def to_json(self) -> dict[str, Any]:
        doc = {
            "schema": MATCHING_SCHEMA,
            "n": self.n,
            "k": self.k,
            "supplies": [int(s) for s in self.supplies],
            "edges": self.edges(),
        }
        if self.generator:
            doc["generator"] = self.generator
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> MatchingInstance:
        if doc.get("schema") != MATCHING_SCHEMA:
            raise ValueError(f"not a matching instance (schema {doc.get('schema')!r})")
        n, k = int(doc["n"]), int(doc["k"])
        for i, j in doc["edges"]:
            if not (0 <= i < n and 0 <= j < k):
                raise ValueError(f"edge {(i, j)} out of range")
        return cls.from_edges(n, k, doc["edges"], doc["supplies"], doc.get("generator"))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def random_matching_instance(n: int, k: int, density: float, supplies, seed: int) -> MatchingInstance:
    rng = np.random.default_rng(seed)
    v = (rng.random((n, k)) < density).astype(np.int8)
    b = np.broadcast_to(np.asarray(supplies), (k,)).copy()
    return MatchingInstance(v, b, {"kind": "random", "density": density, "seed": int(seed)})


def planted_matching_instance(n: int, k: int, supply: int, extra_density: float, seed: int) -> MatchingInstance:
    """Every good has ``supply`` units and exactly ``supply`` players are
    planted on it, so OPT = min(n, k * supply).  Extra 1-entries are noise."""
    if n != k * supply:
        raise ParameterError(f"planted instance needs n = k * supply ({k} * {supply}), got n = {n}")
    rng = np.random.default_rng(seed)
    v = (rng.random((n, k)) < extra_density).astype(np.int8)
    planted = rng.permutation(np.repeat(np.arange(k), supply))
    v[np.arange(n), planted] = 1
    return MatchingInstance(
        v,
        np.full(k, supply),
        {"kind": "planted", "extra_density": extra_density, "seed": int(seed)},
    )


# ---------------------------------------------------------------------------
# agent response for the matching LP


def _project_capped_simplex(y: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto {x >= 0, sum(x) <= 1}."""
    y = np.atleast_2d(y)
    x = np.maximum(y, 0.0)
    over = x.sum(axis=1) > 1.0
    if over.any():
        yo = y[over]
        u = -np.sort(-yo, axis=1)
        css = np.cumsum(u, axis=1) - 1.0
        idx = np.arange(1, yo.shape[1] + 1)
        cond = u - css / idx > 0
        rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
        theta = css[np.arange(yo.shape[0]), rho] / (rho + 1)
        xo = np.maximum(yo - theta[:, None], 0.0)
        # with huge y (tiny eta) the subtraction leaves O(ulp(y)) error; the face sum(x) = 1 is exact
        x[over] = xo / np.maximum(xo.sum(axis=1, keepdims=True), 1.0)
    return x


def best_response_rows(valuations: np.ndarray, lam: np.ndarray, eta: float) -> np.ndarray:
    """Unique maximizer of (v_i - lam).x - (eta/2)|x|^2 over {x >= 0, sum x <= 1}, per row."""
    if not eta > 0:
        raise ParameterError(f"eta must be positive, got {eta}")
    lam = np.asarray(lam, dtype=float)
    if (lam < 0).any():
        raise ParameterError("dual prices must be non-negative")
    v = np.asarray(valuations, dtype=float)
    x = _project_capped_simplex((v - lam) / eta)
    # Exact zeros off the support of v (y <= 0 there already; this guards lam == 0).
    x[v == 0] = 0.0
    return x


def agent_best_response(row, lam, eta: float) -> np.ndarray:
    return best_response_rows(np.asarray(row)[None, :], lam, eta)[0]


def regularized_value(row, lam, eta: float, x) -> float:
    row, lam, x = (np.asarray(a, dtype=float) for a in (row, lam, x))
    return float((row - lam) @ x - 0.5 * eta * (x @ x))


# ---------------------------------------------------------------------------
# generic separable programs


@dataclass
class SeparableProgram:
    """Per-agent oracles for a linearly separable concave program.

    ``best_response(i, lam, eta)`` must return agent i's unique maximizer of
    ``v_i(x) - (eta/2)|x|^2 - lam . c_i(x)`` over its own feasible set.
    """

    n: int
    k: int
    best_response: Callable[[int, np.ndarray, float], np.ndarray]
    constraints: Callable[[int, np.ndarray], np.ndarray]
    objective: Callable[[int, np.ndarray], float]
    bounds: np.ndarray

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=float)
        if self.bounds.shape != (self.k,):
            raise ValueError("bounds must have length k")

    def responses(self, lam: np.ndarray, eta: float) -> list[np.ndarray]:
        out = []
        for i in range(self.n):
            x = np.asarray(self.best_response(i, lam, eta), dtype=float)
            if np.linalg.norm(x) > 1 + 1e-9:
                raise ValueError(f"oracle for agent {i} returned a point outside the unit ball")
            out.append(x)
        return out

    def check(self, rng: np.random.Generator, dim: int, samples: int = 20, lipschitz: float = 1.0) -> None:
        """Spot-check v_i(0) = 0 and ``lipschitz``-Lipschitz objectives on random pairs."""
        zero = np.zeros(dim)
        for i in range(self.n):
            if abs(self.objective(i, zero)) > 1e-12:
                raise ValueError(f"objective of agent {i} is nonzero at the origin")
            for _ in range(samples):
                a, b = rng.normal(size=(2, dim))
                a /= max(1.0, np.linalg.norm(a))
                b /= max(1.0, np.linalg.norm(b))
                if abs(self.objective(i, a) - self.objective(i, b)) > lipschitz * np.linalg.norm(a - b) + 1e-12:
                    raise ValueError(f"objective of agent {i} is not {lipschitz:g}-Lipschitz")


def matching_program(inst: MatchingInstance) -> SeparableProgram:
    v = inst.valuations.astype(float)
    return SeparableProgram(
        n=inst.n,
        k=inst.k,
        best_response=lambda i, lam, eta: agent_best_response(v[i], lam, eta),
        constraints=lambda i, x: np.asarray(x, dtype=float),
        objective=lambda i, x: float(v[i] @ np.asarray(x, dtype=float)),
        bounds=inst.supplies.astype(float),
    )


# ---------------------------------------------------------------------------
# dual solver


def _matching_oracle(inst: MatchingInstance, eta: float):
    # Extended precision: at small eta the gradient is ~n/eta times the
    # resolution of the prices, and float64 stalls around 1e-8.
    v = inst.valuations.astype(np.longdouble)
    b = inst.supplies.astype(np.longdouble)
    eta_l = np.longdouble(eta)

    def oracle(lam):
        x = _project_capped_simplex((v - lam) / eta_l)
        x[v == 0] = 0
        inner = np.einsum("ij,ij->i", v - lam, x) - eta_l / 2 * np.einsum("ij,ij->i", x, x)
        return lam @ b + inner.sum(), b - x.sum(axis=0), x

    def hessian(x):
        # Generalized Jacobian of the capped-simplex projection, summed over rows.
        s = (x > 0).astype(float)
        capped = (np.abs(x.sum(axis=1) - 1) <= 1e-12) & (s.sum(axis=1) > 0)
        h = np.diag(s.sum(axis=0))
        if capped.any():
            sc = s[capped]
            h -= (sc / sc.sum(axis=1, keepdims=True)).T @ sc
        return h / eta

    return oracle, hessian


def _generic_oracle(p: SeparableProgram, eta: float):
    def oracle(lam):
        xs = p.responses(lam, eta)
        total = float(lam @ p.bounds)
        load = np.zeros(p.k)
        for i, x in enumerate(xs):
            c = np.asarray(p.constraints(i, x), dtype=float)
            load += c
            total += p.objective(i, x) - 0.5 * eta * float(x @ x) - float(lam @ c)
        return total, p.bounds - load, xs

    return oracle


def projected_gradient_norm(lam: np.ndarray, grad: np.ndarray) -> float:
    r = lam - np.maximum(lam - grad, 0)
    return float(np.sqrt(r @ r))


def _backtrack(oracle, lam, f, grad, trial, first_t):
    """Halve ``t`` until ``trial(t)`` gives sufficient decrease.

    For a convex dual, a directional derivative at the trial point of at most
    sigma times the initial one implies the Armijo decrease, and that test does
    not suffer the cancellation that comparing two large dual values does.
    """
    sigma = 1e-4
    t = first_t
    for _ in range(80):
        new = trial(t)
        delta = new - lam
        slope = float(grad @ delta)
        if not slope < 0:
            return None
        fn, gn, xn = oracle(new)
        if float(gn @ delta) <= sigma * slope or fn <= f + sigma * slope:
            return new, fn, gn, xn, projected_gradient_norm(new, gn)
        t *= 0.5
    return None


def _minimize_dual(
    oracle, k: int, tol: float, max_iters: int, step0: float, hessian=None, lam0=None, dtype=float
):
    """Projected-gradient descent on the dual with backtracking.

    With a generalized Hessian, a projected Newton direction (shifted by the
    gradient norm, so flat directions still move) is also tried each
    iteration and the better of the two points is kept.

    Returns ``(lam, pg_norm, iterations)``; iterations is negative when no
    descent step exists before ``tol`` is met (float resolution) or the
    iteration budget runs out.
    """
    lam = np.zeros(k, dtype=dtype) if lam0 is None else np.maximum(np.asarray(lam0, dtype=dtype), 0)
    f, grad, x = oracle(lam)
    pg = projected_gradient_norm(lam, grad)
    step = step0
    for it in range(max_iters):
        if pg <= tol:
            return lam, pg, it
        candidates = []
        grad_point = _backtrack(oracle, lam, f, grad, lambda t: np.maximum(lam - t * grad, 0.0), step)
        if grad_point is not None:
            candidates.append(grad_point)
        if hessian is not None:
            free = ~((lam <= 0) & (grad > 0))
            d = np.zeros(k)
            if free.any():
                h = hessian(x)[np.ix_(free, free)] + pg * np.eye(int(free.sum()))
                d[free] = -np.linalg.solve(h, grad[free].astype(float))
            newton_point = _backtrack(oracle, lam, f, grad, lambda t: np.maximum(lam + t * d, 0.0), 1.0)
            if newton_point is not None:
                candidates.append(newton_point)
        if not candidates:
            return lam, pg, -it - 1
        noise = 64 * float(np.finfo(dtype).eps) * (abs(float(f)) + 1.0)
        best = min(candidates, key=lambda c: (round(float(c[1]) / noise), c[4]))
        new, fn, gn, xn, pgn = best
        s, y = new - lam, gn - grad
        sy = float(s @ y)
        ss = float(s @ s)
        step = ss / sy if sy > 0 else 2 * max(step, np.sqrt(ss) / max(pg, 1e-300))
        lam, f, grad, x, pg = new, fn, gn, xn, pgn
    return lam, pg, -max_iters - 1


def solve_regularized_dual(
    p: SeparableProgram | MatchingInstance,
    eta: float,
    tol: float = 1e-8,
    max_iters: int = 100_000,
) -> np.ndarray:
    """Nonnegative prices with projected dual gradient norm <= ``tol``.

    For matching instances with small ``eta`` the solve is warm-started
    through a decreasing sequence of regularization strengths.  Raises
    :class:`DualConvergenceError` carrying the last gradient norm if the
    tolerance is not reached.
    """
    if not eta > 0:
        raise ParameterError(f"eta must be positive, got {eta}")
    if isinstance(p, MatchingInstance):
        lam, used = None, 0
        for stage_eta in _continuation(eta):
            oracle, hessian = _matching_oracle(p, stage_eta)
            last = stage_eta == eta
            lam, pg, it = _minimize_dual(
                oracle,
                p.k,
                tol if last else max(tol, 1e-6),
                max_iters - used,
                stage_eta / p.n,
                hessian,
                lam,
                dtype=np.longdouble,
            )
            if it < 0:
                raise DualConvergenceError(pg, used - it - 1)
            used += it
        return lam.astype(float)
    else:
        oracle = _generic_oracle(p, eta)
        lam, pg, it = _minimize_dual(oracle, p.k, tol, max_iters, eta / max(p.n, 1))
        if it < 0:
            raise DualConvergenceError(pg, -it - 1)
    return lam


def _continuation(eta: float, start: float = 1.0, factor: float = 10.0) -> list[float]:
    stages = []
    e = start
    while e > eta * factor:
        stages.append(e)
        e /= factor
    stages.append(eta)
    return stages


# ---------------------------------------------------------------------------
# rounding and the price message


def round_dual(lam, alpha: float, k: int) -> tuple[np.ndarray, Message]:
    """Round each price to the nearest multiple of alpha/sqrt(k), ties upward."""
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (k,):
        raise ValueError(f"expected {k} prices, got shape {lam.shape}")
    if (lam < 0).any():
        raise ParameterError("dual prices must be non-negative")
    grid = alpha / math.sqrt(k)
    # Ratios within TIE_SLACK grid units of a half are treated as ties (rounded up).
    multiples = [int(math.floor(float(v) / grid + 0.5 + TIE_SLACK)) for v in lam]
    return np.array([m * grid for m in multiples]), encode_multiples(multiples)


def encode_multiples(multiples: Sequence[int]) -> Message:
    width = field_width(max(multiples, default=0))
    if width >= 1 << WIDTH_FIELD_BITS:
        raise ParameterError(f"price multiples need {width} bits; the header allows at most 255")
    w = BitWriter().write(width, WIDTH_FIELD_BITS)
    for m in multiples:
        w.write(m, width)
    return w.message()


def decode_multiples(msg: Message, k: int) -> list[int]:
    reader = BitReader(msg)
    width = reader.read(WIDTH_FIELD_BITS)
    out = [reader.read(width) for _ in range(k)]
    reader.expect_end()
    return out


def decode_dual(msg: Message, k: int, alpha: float) -> np.ndarray:
    grid = alpha / math.sqrt(k)
    return np.array([m * grid for m in decode_multiples(msg, k)])


def dual_message_bound(n: int, k: int, alpha: float, lam_max: float | None = None) -> int:
    """Bit budget for a price message when every price is at most ``lam_max`` (default n)."""
    lam_max = n if lam_max is None else lam_max
    return WIDTH_FIELD_BITS + k * math.ceil(math.log2(lam_max * math.sqrt(k) / alpha + 1))


# ---------------------------------------------------------------------------
# the protocol


def rec_alpha(n: int, k: int, eta: float, eps: float) -> float:
    return eta * eps**2 / (4 * math.sqrt(n * k))


def default_rec_parameter(n: int, k: int) -> float:
    return 1.0 / (100 * n**3 * k**3)


@dataclass
class RecEncoding:
    message: Message
    dual: np.ndarray
    rounded: np.ndarray
    alpha: float
    eta: float
    eps: float


def rec_encode(
    inst: MatchingInstance, eta: float, eps: float, tol: float = 1e-8, max_iters: int = 100_000
) -> RecEncoding:
    if not eta > 0 or not eps > 0:
        raise ParameterError(f"eta and eps must be positive (eta={eta}, eps={eps})")
    alpha = rec_alpha(inst.n, inst.k, eta, eps)
    lam = solve_regularized_dual(inst, eta, tol=tol, max_iters=max_iters)
    rounded, msg = round_dual(lam, alpha, inst.k)
    return RecEncoding(msg, lam, rounded, alpha, eta, eps)


def rec_decode_row(row, msg: Message, alpha: float, eta: float) -> np.ndarray:
    row = np.asarray(row)
    return agent_best_response(row, decode_dual(msg, row.shape[0], alpha), eta)


def rec_protocol(
    inst: MatchingInstance, eta: float, eps: float, tol: float = 1e-8, max_iters: int = 100_000
) -> tuple[Message, np.ndarray]:
    enc = rec_encode(inst, eta, eps, tol, max_iters)
    lam_hat = decode_dual(enc.message, inst.k, enc.alpha)
    x = best_response_rows(inst.valuations, lam_hat, eta)
    return enc.message, x


# ---------------------------------------------------------------------------
# rounding, welfare, OPT


def round_row(row, rng: np.random.Generator) -> int:
    """Good j with probability row[j]; UNMATCHED with the leftover mass."""
    row = np.asarray(row, dtype=float)
    total = row.sum()
    if total > 1 + 1e-9 or (row < 0).any():
        raise ValueError(f"row is not a sub-probability vector (sum {total})")
    u = rng.random()
    cum = np.cumsum(row)
    j = int(np.searchsorted(cum, u, side="right"))
    return j if j < row.shape[0] else UNMATCHED


def independent_rounding(x, seed: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    sums = x.sum(axis=1)
    if (sums > 1 + 1e-9).any():
        i = int(np.argmax(sums))
        raise ValueError(f"row {i} of the assignment sums to {sums[i]} > 1")
    return np.array([round_row(row, agent_rng(seed, i)) for i, row in enumerate(x)], dtype=np.int64)


def truncate_matching(assignment, inst: MatchingInstance) -> np.ndarray:
    """Keep, per good, the lowest-index ``b_j`` players who value it; drop the rest."""
    a = np.asarray(assignment, dtype=np.int64)
    kept = np.full(a.shape[0], UNMATCHED, dtype=np.int64)
    used = np.zeros(inst.k, dtype=np.int64)
    for i, j in enumerate(a):
        if j == UNMATCHED or inst.valuations[i, j] == 0:
            continue
        if used[j] < inst.supplies[j]:
            used[j] += 1
            kept[i] = j
    return kept


def capped_welfare(assignment, inst: MatchingInstance) -> float:
    a = np.asarray(assignment, dtype=np.int64)
    mask = a != UNMATCHED
    counts = np.zeros(inst.k, dtype=np.int64)
    valued = inst.valuations[np.nonzero(mask)[0], a[mask]] == 1
    np.add.at(counts, a[mask][valued], 1)
    return float(np.minimum(counts, inst.supplies).sum())


def fractional_welfare(x, inst: MatchingInstance) -> float:
    return float((np.asarray(x) * inst.valuations).sum())


def supply_violation(assignment, inst: MatchingInstance) -> float:
    """Sum over goods of (players selecting j - b_j)_+."""
    a = np.asarray(assignment, dtype=np.int64)
    counts = np.bincount(a[a != UNMATCHED], minlength=inst.k)
    return float(np.maximum(counts - inst.supplies, 0).sum())


def _flow_network(inst: MatchingInstance):
    n, k = inst.n, inst.k
    src, sink = n + k, n + k + 1
    rows, cols, caps = [], [], []
    for i in range(n):
        rows.append(src), cols.append(i), caps.append(1)
    pi, gj = np.nonzero(inst.valuations)
    rows.extend(pi.tolist()), cols.extend((n + gj).tolist()), caps.extend([1] * len(pi))
    for j in range(k):
        rows.append(n + j), cols.append(sink), caps.append(int(inst.supplies[j]))
    size = n + k + 2
    graph = csr_matrix((np.array(caps, dtype=np.int32), (rows, cols)), shape=(size, size))
    return graph, src, sink


def optimal_matching(inst: MatchingInstance) -> np.ndarray:
    """An integral optimum of the matching LP as a player -> good assignment."""
    graph, src, sink = _flow_network(inst)
    flow = maximum_flow(graph, src, sink).flow.tocoo()
    a = np.full(inst.n, UNMATCHED, dtype=np.int64)
    for u, w, f in zip(flow.row, flow.col, flow.data):
        if f > 0 and u < inst.n and inst.n <= w < inst.n + inst.k:
            a[u] = w - inst.n
    return a


def lp_opt(inst: MatchingInstance) -> int:
    graph, src, sink = _flow_network(inst)
    return int(maximum_flow(graph, src, sink).flow_value)


def matching_encoding(assignment, k: int) -> Message:
    """Trivial baseline: one ceil(log2(k+1))-bit field per player, 0 = unmatched."""
    width = field_width(k)
    w = BitWriter()
    for j in assignment:
        w.write(0 if j == UNMATCHED else int(j) + 1, width)
    return w.message()


def decode_matching_field(msg: Message, i: int, k: int) -> int:
    width = field_width(k)
    reader = BitReader(msg)
    reader.pos = i * width
    value = reader.read(width)
    return UNMATCHED if value == 0 else value - 1


def full_broadcast_protocol() -> Protocol:
    """Coordinator sends an exact optimal matching; agent i reads its field."""

    def encode(inst, rng):
        return matching_encoding(optimal_matching(inst), inst.k)

    def decode(private, msg, rng):
        i, row = private
        return decode_matching_field(msg, i, row.shape[0])

    return Protocol(
        name="full-broadcast",
        encode=encode,
        decode=decode,
        private_slices=lambda inst: [(i, inst.valuations[i]) for i in range(inst.n)],
        objective=capped_welfare_of_actions,
        opt=lp_opt,
        size=lambda inst: (inst.n, inst.k),
    )


def capped_welfare_of_actions(inst: MatchingInstance, actions) -> float:
    return capped_welfare(np.asarray(actions, dtype=np.int64), inst)


def rec_coordination_protocol(
    eta: float | None = None,
    eps: float | None = None,
    tol: float = 1e-8,
    max_iters: int = 100_000,
    with_opt: bool = True,
) -> Protocol:
    """ReC followed by independent rounding, packaged for :func:`run_protocol`.

    ``eta``/``eps`` default to 1/(100 n^3 k^3) per instance.  The public
    parameters (n, k, eta, eps) are known to every agent; the message carries
    only the rounded prices.
    """
    def params(n, k):
        e = default_rec_parameter(n, k) if eta is None else eta
        s = default_rec_parameter(n, k) if eps is None else eps
        return e, s

    def encode(inst, rng):
        e, s = params(inst.n, inst.k)
        return rec_encode(inst, e, s, tol, max_iters).message

    def decode(private, msg, rng):
        row, n = private
        k = row.shape[0]
        e, s = params(n, k)
        x = rec_decode_row(row, msg, rec_alpha(n, k, e, s), e)
        return round_row(x, rng)

    return Protocol(
        name="rec",
        encode=encode,
        decode=decode,
        private_slices=lambda inst: [(inst.valuations[i], inst.n) for i in range(inst.n)],
        objective=capped_welfare_of_actions,
        opt=lp_opt if with_opt else None,
        size=lambda inst: (inst.n, inst.k),
    )
