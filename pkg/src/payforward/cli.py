"""Command-line front end.

Each subcommand prints its result to stdout (6-decimal numbers, CSV with a
header, or sorted-key JSON).  With ``--out DIR`` or ``PAYFORWARD_OUT`` set,
the result is also written to DIR together with a ``*.manifest.json`` that
records the arguments, seed, version and timing of the run.

Exit status: 0 on success, 1 on a domain error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

from payforward import __version__
from payforward.model import MiningParams, Scheme, Variant, honest_gain
from payforward.search import NoCompliance, curve, min_w, to_csv
from payforward.solver import PolicyError

OUT_ENV = "PAYFORWARD_OUT"
SCHEMA = 1


def _unit(flag, lo=0.0, hi=1.0, lo_open=True, hi_open=True):
    def parse(text):
        try:
            x = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects a number, got {text!r}") from None
        bad_lo = x <= lo if lo_open else x < lo
        bad_hi = x >= hi if hi_open else x > hi
        if math.isnan(x) or bad_lo or bad_hi:
            left = "(" if lo_open else "["
            right = ")" if hi_open else "]"
            raise argparse.ArgumentTypeError(f"{flag} must lie in {left}{lo}, {hi}{right}, got {x}")
        return x

    return parse


def _nonneg(flag):
    return _unit(flag, 0.0, math.inf, lo_open=False)


def _int_at_least(flag, lo):
    def parse(text):
        try:
            n = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects an integer, got {text!r}") from None
        if n < lo:
            raise argparse.ArgumentTypeError(f"{flag} must be >= {lo}, got {n}")
        return n

    return parse


def _game_args(sp, w=True, scheme=True, p=True):
    if p:
        sp.add_argument("--p", type=_unit("--p"), required=True, help="Miner 1 hash power")
    if w:
        sp.add_argument("--w", type=_nonneg("--w"), default=0.0, help="pay-forward unit")
    sp.add_argument("--d", type=_int_at_least("--d", 1), default=8, help="truncation depth")
    sp.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.IMMEDIATE.value)
    if scheme:
        sp.add_argument("--scheme", choices=[s.value for s in Scheme], default=Scheme.UNIFORM.value)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="payforward", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} if set)")
    sub = ap.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    sp = sub.add_parser("solve", help="optimal gain per level and policy")
    _game_args(sp)
    sp.add_argument("--json", action="store_true")

    sp = sub.add_parser("min-w", help="smallest w under which Frontier is a best response")
    _game_args(sp, w=False)
    sp.add_argument("--tol", type=_unit("--tol", 0.0, 1.0), default=1e-4)

    sp = sub.add_parser("curve", help="min-w over a range of p, as CSV")
    _game_args(sp, w=False, p=False)
    sp.add_argument("--p-from", type=_unit("--p-from"), required=True)
    sp.add_argument("--p-to", type=_unit("--p-to"), required=True)
    sp.add_argument("--p-step", type=_unit("--p-step"), default=0.01)
    sp.add_argument("--tol", type=_unit("--tol", 0.0, 1.0), default=1e-4)
    sp.add_argument("--workers", type=_int_at_least("--workers", 1), default=1)

    sp = sub.add_parser("bounds", help="closed-form bounds at p")
    sp.add_argument("--p", type=_unit("--p", 0.0, 0.5, lo_open=False, hi_open=False), required=True)
    sp.add_argument("--w", type=_nonneg("--w"), default=1.0, help="w for the release claim value")

    sp = sub.add_parser("verify", help="potential, induction and closed-form checks")
    _game_args(sp)
    sp.add_argument("--k", type=_int_at_least("--k", 1), default=200, help="horizon for the induction check")

    sp = sub.add_parser("simulate", help="Monte-Carlo run")
    _game_args(sp)
    sp.add_argument("--policy", choices=["frontier", "optimal"], default="frontier")
    sp.add_argument("--phases", type=_int_at_least("--phases", 1), default=1_000_000)
    sp.add_argument("--seed", type=_int_at_least("--seed", 0), default=0)
    sp.add_argument("--replicates", type=_int_at_least("--replicates", 1), default=1)
    sp.add_argument("--workers", type=_int_at_least("--workers", 1), default=1)
    sp.add_argument("--trace", action="store_true", help="write a per-phase CSV trace (needs --out)")
    sp.add_argument("--small-miners", type=_int_at_least("--small-miners", 1), default=None, metavar="N",
                    help="run the small-miner deviation experiment with N miners")
    sp.add_argument("--no-deviant", action="store_true", help="small-miner run with everyone compliant")

    sp = sub.add_parser("pne-check", help="small-miner deviation payoff against compliance")
    sp.add_argument("--p", type=_unit("--p", 0.0, 0.5), required=True)
    sp.add_argument("--w", type=_nonneg("--w"), required=True)
    return ap


# --- output -------------------------------------------------------------------


def _round(obj):
    if isinstance(obj, float):
        return obj if not math.isfinite(obj) else round(obj, 6)
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def dumps(obj) -> str:
    return json.dumps(_round(obj), sort_keys=True, indent=2) + "\n"


def _lines(record: dict) -> str:
    out = []
    for k in sorted(record):
        v = record[k]
        if isinstance(v, bool) or not isinstance(v, float):
            out.append(f"{k}: {v}")
        else:
            out.append(f"{k}: {v:.6f}")
    return "\n".join(out) + "\n"


@dataclass
class RunManifest:
    subcommand: str
    parameters: dict
    seed: int | None
    version: str = __version__
    schema: int = SCHEMA
    started: float = 0.0
    wall_seconds: float = 0.0
    outputs: list = field(default_factory=list)


def _atomic_write(path: str, text: str) -> None:
    folder = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


class Output:
    def __init__(self, args, stdout):
        self.dir = args.out or os.environ.get(OUT_ENV) or None
        self.stdout = stdout
        params = {k: v for k, v in vars(args).items() if k not in ("out", "command")}
        self.manifest = RunManifest(args.command, params, params.get("seed"), started=time.time())
        self._t0 = time.perf_counter()
        self.primary = None

    def path(self, name: str) -> str | None:
        if self.dir is None:
            return None
        os.makedirs(self.dir, exist_ok=True)
        return os.path.join(self.dir, name)

    def emit(self, text: str, name: str) -> None:
        self.stdout.write(text)
        path = self.path(name)
        if path is not None:
            _atomic_write(path, text)
            self.manifest.outputs.append(path)
            self.primary = self.primary or path

    def close(self) -> None:
        if self.dir is None or self.primary is None:
            return
        self.manifest.wall_seconds = time.perf_counter() - self._t0
        stem = os.path.splitext(os.path.basename(self.primary))[0]
        path = os.path.join(self.dir, f"{stem}.manifest.json")
        _atomic_write(path, json.dumps(asdict(self.manifest), sort_keys=True, indent=2) + "\n")


# --- subcommands ----------------------------------------------------------------


def _params(args) -> MiningParams:
    return MiningParams(args.p, getattr(args, "w", 0.0), args.d, args.variant, getattr(args, "scheme", "uniform"))


def cmd_solve(args, out: Output):
    from payforward.potential import solve_potential
    from payforward.solver import extract_policy, value_iterate

    params = _params(args)
    table = value_iterate(params)
    policy = extract_policy(table)
    lp = solve_potential(params)
    lo, hi = table.gain_bounds()
    record = {
        "g_star": table.gain,
        "g_lower": lo,
        "g_upper": hi,
        "g_lp": lp.g,
        "honest_gain": honest_gain(params),
        "frontier_optimal": policy.is_frontier(),
        "horizon": table.K,
    }
    dump = {str(s): ("settle" if a is None else str(a)) for s, a in sorted(policy.actions.items())}
    if args.json:
        out.emit(dumps({**record, "policy": dump}), "solve.json")
    else:
        body = _lines(record) + "policy:\n" + "".join(f"  {s} {a}\n" for s, a in dump.items())
        out.emit(body, "solve.txt")


def cmd_min_w(args, out: Output):
    res = min_w(args.p, args.d, args.variant, args.scheme, args.tol)
    out.emit(f"{res.w_min:.6f}\n", "min_w.txt")


def cmd_curve(args, out: Output):
    if args.p_to < args.p_from:
        raise ValueError("--p-to must be >= --p-from")
    results = curve(args.p_from, args.p_to, args.p_step, args.d, args.variant, args.scheme, args.tol,
                    workers=args.workers)
    out.emit(to_csv(results), f"curve_{args.variant}_{args.scheme}_d{args.d}.csv")


def cmd_bounds(args, out: Output):
    from payforward import bounds as B

    p = args.p
    record = {
        "p": p,
        "case1_qpf_bound": B.case1_qpf_bound(p),
        "case1_advantage": B.case1_advantage(p),
        "case2_advantage": B.case2_advantage(p),
        "strategic_threshold": B.strategic_threshold(),
        "release_claim_c0": B.release_claim_value(p, args.w, 0),
        "release_claim_c1": B.release_claim_value(p, args.w, 1),
    }
    if 0 < p < 1:
        for gap in (1, 2, 3):
            record[f"gamblers_ruin_gap{gap}"] = B.gamblers_ruin_bound(p, gap)
        case = B.case1_bound(p)
        record["case1_pi"] = case.pi
        record["case1_beta"] = case.beta
    if 0 < p < 0.5:
        dev = B.pne_deviation_check(p, args.w)
        record["pne_deviation_payoff"] = dev.deviation_payoff
        record["pne_compliant_payoff"] = dev.compliant_payoff
    out.emit(_lines(record), "bounds.txt")


def cmd_verify(args, out: Output):
    from payforward.potential import (
        check_strategic_claims,
        induction_violations,
        solve_potential,
        upper_bound_violations,
        verify_potential,
    )
    from payforward.solver import value_iterate

    params = _params(args)
    sol = solve_potential(params)
    report = verify_potential(sol)
    table = value_iterate(params, args.k, keep_layers=True)
    induction = induction_violations(sol, table)
    record = {
        "g_lp": sol.g,
        "honest_gain": honest_gain(params),
        "potential_tight": report.ok,
        "potential_max_gap": report.max_gap,
        "frontier_optimal": report.policy.is_frontier(),
        "induction_k": args.k,
        "induction_violations": len(induction),
    }
    if not params.strategic:
        record["upper_bound_violations"] = len(upper_bound_violations(sol))
    if not params.strategic and params.scheme is Scheme.UNIFORM and params.p < 0.5:
        claims = check_strategic_claims(params.p, params.w, sol)
        record["claims_ok"] = claims.ok
        record["claims_release_gap_min"] = claims.release_gap_min
        record["claims_capitulation_max"] = claims.capitulation_max
        record["claims_recurrence_max_gap"] = claims.recurrence_max_gap
    out.emit(_lines(record), "verify.txt")
    return 0 if report.ok and not induction else 1


def cmd_simulate(args, out: Output):
    from payforward.simulate import SimConfig, simulate, simulate_replicates, simulate_small_miners
    from payforward.solver import solve_policy

    if args.small_miners is not None:
        rep = simulate_small_miners(
            n=args.small_miners, w=args.w, p=args.p, phases=args.phases, seed=args.seed,
            deviant_index=None if args.no_deviant else 1,
        )
        out.emit(dumps({"schema": SCHEMA, **rep.to_dict()}), "small_miners.json")
        return
    params = _params(args)
    policy = solve_policy(params) if args.policy == "optimal" else None
    config = SimConfig(params, policy, args.phases, args.seed)
    if args.replicates > 1:
        if args.trace:
            raise ValueError("--trace works with a single replicate only")
        stats = simulate_replicates(config, args.replicates, args.workers)
    else:
        trace = None
        if args.trace:
            trace = out.path("trace.csv")
            if trace is None:
                raise ValueError("--trace needs --out or $" + OUT_ENV)
        stats = simulate(config, trace_path=trace)
        if trace is not None:
            out.manifest.outputs.append(trace)
    out.emit(dumps({"schema": SCHEMA, **stats.to_dict()}), "simulate.json")


def cmd_pne_check(args, out: Output):
    from payforward.bounds import pne_deviation_check

    res = pne_deviation_check(args.p, args.w)
    out.emit(
        f"deviation_payoff: {res.deviation_payoff:.6f}\n"
        f"compliant_payoff: {res.compliant_payoff:.6f}\n"
        f"equilibrium_supporting: {str(res.is_equilibrium_supporting).lower()}\n",
        "pne_check.txt",
    )


COMMANDS = {
    "solve": cmd_solve,
    "min-w": cmd_min_w,
    "curve": cmd_curve,
    "bounds": cmd_bounds,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "pne-check": cmd_pne_check,
}


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Output(args, stdout)
    try:
        status = COMMANDS[args.command](args, out) or 0
        out.close()
    except (NoCompliance, PolicyError, ValueError, RuntimeError) as exc:
        stderr.write(f"payforward {args.command}: error: {exc}\n")
        return 1
    return status


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
