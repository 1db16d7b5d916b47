"""Smallest pay-forward that makes Frontier a best response, and p-sweeps of it."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from payforward.model import MiningParams, Scheme, Variant, honest_gain
from payforward.potential import solve_potential, verify_potential
from payforward.solver import optimal_gain

GAIN_TOL = 1e-6
ENGINE_TOL = 1e-4
W_HI = 2.0

CSV_FIELDS = ("p", "w_min", "variant", "scheme", "d", "residual")


class NoCompliance(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    params: MiningParams
    lp_gain: float
    honest: float
    tight: bool
    frontier_policy: bool
    vi_gain: float | None

    @property
    def residual(self) -> float:
        return self.lp_gain - self.honest

    @property
    def ok(self) -> bool:
        if abs(self.residual) > GAIN_TOL or not self.tight:
            return False
        return self.vi_gain is None or abs(self.vi_gain - self.lp_gain) <= ENGINE_TOL


def assess(params: MiningParams, use_vi: bool = True) -> Verdict:
    sol = solve_potential(params)
    honest = honest_gain(params)
    report = verify_potential(sol)
    vi = None
    # value iteration only matters once the LP says Frontier is optimal
    if use_vi and abs(sol.g - honest) <= GAIN_TOL:
        vi = optimal_gain(params)
    return Verdict(params, sol.g, honest, report.ok, report.policy.is_frontier(), vi)


def is_frontier_best_response(
    p: float,
    w: float,
    d: int = 8,
    variant: Variant | str = Variant.IMMEDIATE,
    scheme: Scheme | str = Scheme.UNIFORM,
    use_vi: bool = True,
) -> bool:
    return assess(MiningParams(p, w, d, variant, scheme), use_vi).ok


@dataclass(frozen=True)
class MinWResult:
    p: float
    d: int
    variant: Variant
    scheme: Scheme
    w_min: float | None
    certified_by: str
    residual: float
    error: str | None = None

    def row(self) -> dict:
        return {
            "p": f"{self.p:.6f}",
            "w_min": "" if self.w_min is None else f"{self.w_min:.6f}",
            "variant": self.variant.value,
            "scheme": self.scheme.value,
            "d": str(self.d),
            "residual": f"{self.residual:.6e}" if self.error is None else self.error,
        }


def min_w(
    p: float,
    d: int = 8,
    variant: Variant | str = Variant.IMMEDIATE,
    scheme: Scheme | str = Scheme.UNIFORM,
    tol: float = 1e-4,
    w_hi: float = W_HI,
    use_vi: bool = True,
) -> MinWResult:
    """Bisection on w; the returned value is the smallest certified-compliant
    point found, within ``tol`` of a non-compliant one (unless it is 0)."""
    base = MiningParams(p, 0.0, d, variant, scheme)
    check = lambda w: assess(base.with_w(w), use_vi)  # noqa: E731
    by = "both" if use_vi else "lp"
    first = check(0.0)
    if first.ok:
        return MinWResult(p, d, base.variant, base.scheme, 0.0, by, first.residual)
    top = check(w_hi)
    if not top.ok:
        raise NoCompliance(f"no compliance within bound w <= {w_hi} at p={p}")
    lo, hi = 0.0, w_hi
    best = top
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        verdict = check(mid)
        if verdict.ok:
            hi, best = mid, verdict
        else:
            lo = mid
    return MinWResult(p, d, base.variant, base.scheme, hi, by, best.residual)


def _curve_point(args) -> MinWResult:
    p, d, variant, scheme, tol, use_vi = args
    try:
        return min_w(p, d, variant, scheme, tol, use_vi=use_vi)
    except (ValueError, RuntimeError) as exc:
        return MinWResult(p, d, Variant(variant), Scheme(scheme), None, "none", float("nan"), str(exc))


def p_grid(p_from: float, p_to: float, p_step: float) -> list[float]:
    n = int(np.floor((p_to - p_from) / p_step + 1e-9))
    grid = [round(p_from + i * p_step, 10) for i in range(n + 1)]
    if p_to - grid[-1] > 1e-9:
        grid.append(round(p_to, 10))
    return grid


def curve(
    p_from: float,
    p_to: float,
    p_step: float,
    d: int = 8,
    variant: Variant | str = Variant.IMMEDIATE,
    scheme: Scheme | str = Scheme.UNIFORM,
    tol: float = 1e-4,
    use_vi: bool = True,
    workers: int = 1,
    ps: list[float] | None = None,
) -> list[MinWResult]:
    grid = sorted(ps) if ps is not None else p_grid(p_from, p_to, p_step)
    jobs = [(p, d, variant, scheme, tol, use_vi) for p in grid]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_curve_point, jobs))
    else:
        results = [_curve_point(j) for j in jobs]
    return sorted(results, key=lambda r: r.p)


def to_csv(results: list[MinWResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.row())
    return buf.getvalue()


def read_csv(text: str) -> list[tuple[float, float | None]]:
    rows = csv.DictReader(io.StringIO(text))
    return [(float(r["p"]), float(r["w_min"]) if r["w_min"] else None) for r in rows]
