"""coordc command-line driver.

Exit codes: 0 success, 2 bad parameters, 3 protocol precondition violated,
4 verification failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Sequence

from . import convex, lowerbound, privacy, routing, stable
from .core import (
    CoordinationError,
    ParameterError,
    PreconditionError,
    ProtocolReport,
    reports_to_csv,
    reports_to_json,
    run_protocol,
)

log = logging.getLogger("coordc")

EXIT_OK = 0
EXIT_PARAMETER = 2
EXIT_PRECONDITION = 3
EXIT_VERIFY = 4

DEFAULT_BETA = 0.05
SWEEP_COLUMNS = ("parameter", "value", "seed", "message_bits", "objective", "opt", "ratio", "status")


class VerificationFailed(CoordinationError):
    pass


def thread_count() -> int:
    raw = os.environ.get("COORDC_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ParameterError(f"COORDC_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ParameterError(f"COORDC_THREADS must be a positive integer, got {raw!r}")
    return value


# ---------------------------------------------------------------------------
# I/O helpers


def load_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ParameterError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path} is not valid JSON: {exc}") from exc


def load_instance(path: str, expected: str | None = None):
    doc = load_json(path)
    schema = doc.get("schema") if isinstance(doc, dict) else None
    loaders = {
        convex.MATCHING_SCHEMA: convex.MatchingInstance.from_json,
        routing.ROUTING_SCHEMA: routing.RoutingGame.from_json,
        stable.STABLE_SCHEMA: stable.StableInstance.from_json,
        lowerbound.RANG_SCHEMA: lowerbound.OneToOneInstance.from_json,
    }
    if schema not in loaders:
        raise ParameterError(f"{path}: unknown instance schema {schema!r}")
    if expected is not None and schema != expected:
        raise ParameterError(f"{path}: expected a {expected} instance, got {schema}")
    try:
        return loaders[schema](doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParameterError(f"{path}: invalid instance: {exc}") from exc


def write_text(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def emit_reports(reports: Sequence[ProtocolReport], args) -> None:
    text = reports_to_json(reports) if args.format == "json" else reports_to_csv(reports)
    write_text(text, args.out)


def dump_json(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def dump_solution(path: str | None, actions: Sequence[Any]) -> None:
    if path:
        write_text(dump_json({"actions": [list(a) if isinstance(a, tuple) else int(a) for a in actions]}), path)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    kind = args.generator
    if kind == "rang":
        inst = lowerbound.rang(args.rho, args.n, args.seed)
        doc = inst.to_json()
    elif kind == "lift":
        base = lowerbound.rang(args.rho, args.n, args.seed)
        doc = lowerbound.lift_many_to_one(base, args.b).to_json()
    elif kind == "matching":
        doc = convex.random_matching_instance(args.n, args.k, args.density, args.b, args.seed).to_json()
    elif kind == "planted":
        doc = convex.planted_matching_instance(args.n, args.k, args.b, args.density, args.seed).to_json()
    elif kind == "parallel":
        doc = routing.random_parallel_game(args.n, args.m, args.seed, args.slope_scale).to_json()
    elif kind == "grid":
        doc = routing.grid_game(args.rows, args.cols, args.n, args.seed, args.slope_scale).to_json()
    elif kind == "stable":
        doc = stable.random_stable_instance(args.n, args.k, args.cap, args.seed).to_json()
    else:  # pragma: no cover - argparse restricts the choices
        raise ParameterError(f"unknown generator {kind}")
    doc.setdefault("generator", {}).setdefault("seed", args.seed)
    write_text(dump_json(doc), args.out)
    return EXIT_OK


def _positive(name: str, value: float | None) -> None:
    if value is not None and not value > 0:
        raise ParameterError(f"--{name} must be positive, got {value}")


def _check_gen_args(args) -> None:
    for name in ("n", "k", "b", "cap", "m", "rows", "cols"):
        _positive(name, getattr(args, name, None))
    if args.generator in ("matching", "planted") and not 0 <= args.density <= 1:
        raise ParameterError("--density must lie in [0, 1]")
    needs = {
        "rang": ("rho", "n"),
        "lift": ("rho", "n", "b"),
        "matching": ("n", "k", "b"),
        "planted": ("n", "k", "b"),
        "parallel": ("n", "m"),
        "grid": ("rows", "cols", "n"),
        "stable": ("n", "k", "cap"),
    }[args.generator]
    missing = [f"--{name}" for name in needs if getattr(args, name, None) is None]
    if missing:
        raise ParameterError(f"gen {args.generator} requires {', '.join(missing)}")


# ---------------------------------------------------------------------------
# protocol runs


def rec_parameters(n: int, k: int, eta: float | None, eps: float | None) -> tuple[float, float]:
    """Explicit values win; otherwise 1/(100 n^3 k^3), or 1e-6 when that underflows."""
    if n**3 * k**3 <= 1e6:
        default = convex.default_rec_parameter(n, k)
    else:
        default = 1e-6
        if eta is None or eps is None:
            log.info("n^3 k^3 = %.3g > 1e6: using eta = eps = 1e-6 instead of 1/(100 n^3 k^3)", float(n) ** 3 * k**3)
    eta = default if eta is None else eta
    eps = default if eps is None else eps
    _positive("eta", eta)
    _positive("eps", eps)
    return eta, eps


def match_report(inst: convex.MatchingInstance, seed: int, eta: float | None, eps: float | None, timing: bool):
    eta, eps = rec_parameters(inst.n, inst.k, eta, eps)
    protocol = convex.rec_coordination_protocol(eta, eps)
    msg, actions, report = run_protocol(protocol, inst, seed, timing=timing)
    report.extra = {
        "eta": eta,
        "eps": eps,
        "alpha": convex.rec_alpha(inst.n, inst.k, eta, eps),
        "supply_violation": convex.supply_violation(actions, inst),
    }
    return msg, actions, report


def cmd_match(args) -> int:
    inst = load_instance(args.instance, convex.MATCHING_SCHEMA)
    _, actions, report = match_report(inst, args.seed, args.eta, args.eps, args.timing)
    dump_solution(args.solution, actions)
    emit_reports([report], args)
    return EXIT_OK


def routing_parameters(g: routing.RoutingGame, alpha, r, eps) -> tuple[float, int]:
    if eps is not None:
        if alpha is not None or r is not None:
            raise ParameterError("give either --eps or both --alpha and --r")
        return routing.flowmain_parameters(g, eps)
    if alpha is None or r is None:
        raise ParameterError("routing needs --eps, or both --alpha and --r")
    if int(r) != r or r < 1:
        raise ParameterError(f"--r must be a positive integer, got {r}")
    return alpha, int(r)


def routing_report(g: routing.RoutingGame, seed: int, alpha: float, r: int, timing: bool):
    params = routing.br_parameters(g, alpha, r)
    msg, actions, report = run_protocol(routing.routing_protocol(alpha, r), g, seed, timing=timing)
    report.extra = {"alpha": alpha, "r": r, "eps_bound": params.equilibrium_eps, "rounds": params.rounds}
    return msg, actions, report


def cmd_routing(args) -> int:
    g = load_instance(args.instance, routing.ROUTING_SCHEMA)
    alpha, r = routing_parameters(g, args.alpha, args.r, args.eps)
    routing.br_parameters(g, alpha, r)  # fail fast before simulating
    _, actions, report = routing_report(g, args.seed, alpha, r, args.timing)
    dump_solution(args.solution, actions)
    emit_reports([report], args)
    return EXIT_OK


def cmd_stable(args) -> int:
    inst = load_instance(args.instance, stable.STABLE_SCHEMA)
    _, actions, report = run_protocol(stable.stable_protocol(), inst, args.seed, timing=args.timing)
    dump_solution(args.solution, actions)
    emit_reports([report], args)
    return EXIT_OK


def cmd_private(args) -> int:
    inst = load_instance(args.instance, convex.MATCHING_SCHEMA)
    _positive("privacy-eps", args.privacy_eps)
    _positive("eta", args.eta)
    _positive("step", args.step)
    if args.candidates:
        candidates = privacy.CandidateMessageSpace.from_json(load_json(args.candidates))
    else:
        if args.levels < 1:
            raise ParameterError("--levels must be at least 1")
        candidates = privacy.dual_grid_candidates(inst.k, [range(args.levels)] * inst.k)
    alpha = args.step * math.sqrt(inst.k)
    msg, actions, report = privacy.pri_coor(
        privacy.rec_decoder(alpha, args.eta),
        inst,
        candidates,
        args.privacy_eps,
        args.seed,
        privacy.dual_quality(alpha, args.eta, args.seed),
    )
    report.opt_value = float(convex.lp_opt(inst))
    report.approximation_ratio = report.opt_value / report.objective_value if report.objective_value > 0 else None
    if args.format != "json":
        report.extra = {}
    dump_solution(args.solution, actions)
    emit_reports([report], args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    inst = load_instance(args.instance)
    actions = load_json(args.solution)["actions"] if args.solution else None
    if isinstance(inst, lowerbound.OneToOneInstance):
        problems = lowerbound.validate_rang(inst) if inst.rho is not None else []
        size = lowerbound.max_matching(inst)
        need = -(-7 * inst.n // 8)
        if inst.rho is not None and size < need:
            problems.append(f"maximum matching {size} < {need}")
        result = {"kind": "rang", "max_matching": size, "problems": problems}
    elif isinstance(inst, stable.StableInstance):
        if actions is None:
            _, actions, _ = run_protocol(stable.stable_protocol(), inst, args.seed, timing=False)
        ok, violations = stable.verify_stability(actions, inst)
        problems = [f"{v.kind}: student {v.student} school {v.school}" for v in violations]
        result = {"kind": "stable", "problems": problems}
    elif isinstance(inst, routing.RoutingGame):
        alpha, r = routing_parameters(inst, args.alpha, args.r, args.eps)
        params = routing.br_parameters(inst, alpha, r)
        if actions is None:
            _, actions, _ = routing_report(inst, args.seed, alpha, r, False)
        flow = routing.FlowState.from_paths(actions, inst.m)
        flow.check(inst)
        ok, regret = routing.verify_equilibrium(flow, inst, params.equilibrium_eps)
        problems = [] if ok else [f"regret {regret:.6g} exceeds {params.equilibrium_eps:.6g}"]
        result = {"kind": "routing", "regret": regret, "eps": params.equilibrium_eps, "problems": problems}
    else:
        if actions is None:
            _, actions, report = match_report(inst, args.seed, args.eta, args.eps, False)
        opt = convex.lp_opt(inst)
        welfare = convex.capped_welfare(actions, inst)
        bound = opt - 8 * math.sqrt(inst.k) * math.log(2 * inst.k / args.beta) * math.sqrt(opt)
        problems = [] if welfare >= bound else [f"capped welfare {welfare} below {bound:.6g}"]
        result = {"kind": "matching", "welfare": welfare, "opt": opt, "bound": bound, "problems": problems}
    result["ok"] = not result["problems"]
    write_text(dump_json(result), args.out)
    if not result["ok"]:
        raise VerificationFailed("; ".join(result["problems"][:5]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _sweep_cell(cell: tuple[str, str, float, int, dict]) -> dict[str, Any]:
    protocol, param, value, seed, fixed = cell
    row = {"parameter": param, "value": value, "seed": seed}
    try:
        if protocol == "match":
            n, k = int(fixed["n"]), int(fixed["k"])
            if param == "k":
                k = int(value)
                n = int(fixed["ratio"]) * k
            elif param == "n":
                n = int(value)
            supply = max(1, n // k)
            inst = convex.planted_matching_instance(supply * k, k, supply, fixed["density"], seed)
            eta = fixed.get("eta")
            eps = fixed.get("eps")
            if param == "eta":
                eta = value
            elif param == "eps":
                eps = value
            _, _, rep = match_report(inst, seed, eta, eps, False)
        elif protocol == "routing":
            g = routing.random_parallel_game(int(fixed["n"]), int(fixed["m"]), seed)
            if param != "eps":
                raise ParameterError("routing sweeps vary --param eps")
            alpha, r = routing.flowmain_parameters(g, value)
            _, _, rep = routing_report(g, seed, alpha, r, False)
        else:
            raise ParameterError(f"unknown sweep protocol {protocol}")
        row.update(
            message_bits=rep.message_bits,
            objective=rep.objective_value,
            opt=rep.opt_value,
            ratio=rep.approximation_ratio,
            status="ok",
        )
    except CoordinationError as exc:
        row.update(message_bits="", objective="", opt="", ratio="", status=f"error: {exc}")
    return row


def sweep_rows(protocol: str, param: str, values: Sequence[float], seeds: Sequence[int], fixed: dict, workers: int = 1):
    cells = [(protocol, param, v, s, fixed) for v in values for s in seeds]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            return list(pool.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in SWEEP_COLUMNS})
    return buf.getvalue()


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",") if v.strip()] if args.values else []
    if args.param in ("k", "n"):
        if any(v != int(v) or v < 1 for v in values):
            raise ParameterError(f"--values for {args.param} must be positive integers")
        values = [int(v) for v in values]
    seeds = list(range(args.seed, args.seed + args.seeds))
    fixed = {
        "n": args.n,
        "k": args.k,
        "m": args.m,
        "ratio": args.ratio,
        "density": args.density,
        "eta": args.eta,
        "eps": args.eps,
    }
    rows = sweep_rows(args.protocol, args.param, values, seeds, fixed, thread_count())
    write_text(sweep_csv(rows), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", "-o", help="output file (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--seed", type=int, default=0, help="64-bit master seed")
    p.add_argument("--timing", action="store_true", help="record wall-clock time (reports are then not reproducible)")
    p.add_argument("--solution", help="also write the agents' actions as JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coordc", description="Coordination protocols with short broadcasts.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an instance")
    g.add_argument("generator", choices=("rang", "lift", "matching", "planted", "parallel", "grid", "stable"))
    g.add_argument("--rho", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--b", type=int, help="supply per good / copies per vertex")
    g.add_argument("--cap", type=int, help="school capacity")
    g.add_argument("--m", type=int, help="parallel edges")
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--density", type=float, default=0.1)
    g.add_argument("--slope-scale", type=float, default=1.0, help="edge slopes up to slope_scale/n (routing games)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", "-o")
    g.set_defaults(func=cmd_gen, check=_check_gen_args)

    m = sub.add_parser("match-coordinate", help="run ReC on a matching instance")
    m.add_argument("instance")
    m.add_argument("--eta", type=float)
    m.add_argument("--eps", type=float)
    _add_output(m)
    m.set_defaults(func=cmd_match)

    r = sub.add_parser("routing-coordinate", help="run BR-Sim on a routing game")
    r.add_argument("instance")
    r.add_argument("--alpha", type=float)
    r.add_argument("--r", type=int)
    r.add_argument("--eps", type=float, help="target equilibrium quality (sets alpha and r)")
    _add_output(r)
    r.set_defaults(func=cmd_routing)

    s = sub.add_parser("stable-coordinate", help="run Stab on a school-choice instance")
    s.add_argument("instance")
    _add_output(s)
    s.set_defaults(func=cmd_stable)

    p = sub.add_parser("private-coordinate", help="exponential-mechanism choice among dual messages")
    p.add_argument("instance")
    p.add_argument("--candidates", help="JSON array of hex messages (default: a dual grid)")
    p.add_argument("--levels", type=int, default=4, help="grid multiples per good")
    p.add_argument("--step", type=float, default=1 / 3, help="price step of the grid")
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--privacy-eps", type=float, default=1.0)
    _add_output(p)
    p.set_defaults(func=cmd_private)

    v = sub.add_parser("verify", help="check an instance or a solution")
    v.add_argument("instance")
    v.add_argument("--solution", help="actions JSON; default: run the instance's protocol")
    v.add_argument("--alpha", type=float)
    v.add_argument("--r", type=int)
    v.add_argument("--eps", type=float)
    v.add_argument("--eta", type=float)
    v.add_argument("--beta", type=float, default=DEFAULT_BETA)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", "-o")
    v.set_defaults(func=cmd_verify)

    w = sub.add_parser("sweep", help="message length and objective over a parameter grid")
    w.add_argument("protocol", choices=("match", "routing"))
    w.add_argument("--param", required=True, choices=("k", "n", "eta", "eps"))
    w.add_argument("--values", default="", help="comma-separated grid")
    w.add_argument("--seeds", type=int, default=1)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--n", type=int, default=100)
    w.add_argument("--k", type=int, default=4)
    w.add_argument("--m", type=int, default=4)
    w.add_argument("--ratio", type=int, default=20, help="players per good when sweeping k")
    w.add_argument("--density", type=float, default=0.1)
    w.add_argument("--eta", type=float)
    w.add_argument("--eps", type=float)
    w.add_argument("--out", "-o")
    w.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if hasattr(args, "seed") and not 0 <= args.seed < 2**64:
            raise ParameterError(f"--seed must be a 64-bit unsigned integer, got {args.seed}")
        check = getattr(args, "check", None)
        if check:
            check(args)
        return args.func(args)
    except VerificationFailed as exc:
        print(f"coordc: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except PreconditionError as exc:
        print(f"coordc: precondition violated: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (ParameterError, ValueError) as exc:
        print(f"coordc: {exc}", file=sys.stderr)
        return EXIT_PARAMETER
    except CoordinationError as exc:
        print(f"coordc: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
