"""Command-line front end.

Every subcommand reads an optional JSON scenario (``--econ``), writes its
results under the output directory together with ``resolved_config.json``,
and exits 0 on success, 1 on usage or configuration errors and 2 on
numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from .firstbest import classify_first_best
from .market import solve_fair_ce_2, tatonnement_ce, TatonnementConfig, welfare_ratio, write_price_csv
from .model import (
    ArgumentError,
    Economy,
    ExponentialDiscount,
    InfeasibleError,
    InvariantError,
    NumericalError,
    canonical_economy,
)
from .ntype import MonteCarloConfig, montecarlo_welfare, summarize
from .secondbest import (
    DegenerateEconomyError,
    classify_region,
    pooling_welfare,
    solve_second_best,
)

log = logging.getLogger("quality_alloc")

OUT_ENV = "QUALITY_ALLOC_OUT"
DEFAULT_OUT = "output"

SWEEP_COLUMNS = ["r_P", "r_I", "fb_structure", "sb_region", "x1", "x2", "x3", "beta",
                 "W_fb", "W_sb", "W_pool", "s_IP", "s_PI"]
MC_COLUMNS = ["N", "draw", "rates", "W_firstbest", "W_secondbest", "W_pooling", "status"]
RATIO_COLUMNS = ["r_P", "r_I", "ratio", "ratio_no_disposal"]
DEGENERATE = "Degenerate"
FAILED = "Failed"

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_UTILITY = {
    "type": "object",
    "required": ["family"],
    "properties": {
        "family": {"enum": ["exponential", "cara", "crra", "tabulated"]},
        "rate": _POS,
        "coefficient": _POS,
        "exponent": _POS,
        "points": {"type": "array", "items": _NUM, "minItems": 2},
        "values": {"type": "array", "items": _POS, "minItems": 2},
    },
    "additionalProperties": False,
}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "economy": {
            "type": "object",
            "required": ["types", "supply"],
            "additionalProperties": False,
            "properties": {
                "types": {
                    "type": "array",
                    "minItems": 1,
                    "maxItems": 10,
                    "items": {
                        "type": "object",
                        "required": ["utility", "mass", "weight"],
                        "additionalProperties": False,
                        "properties": {"utility": _UTILITY, "mass": _POS, "weight": _POS},
                    },
                },
                "supply": {
                    "type": "object",
                    "required": ["kind"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["uniform", "piecewise_linear", "tabulated"]},
                        "height": _POS,
                        "upper": _POS,
                        "xs": {"type": "array", "items": _NUM, "minItems": 2},
                        "ys": {"type": "array", "items": _NUM, "minItems": 2},
                    },
                },
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"r_min": _POS, "r_max": _POS, "n": {"type": "integer", "minimum": 2}},
        },
        "montecarlo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_list": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 10},
                           "minItems": 1},
                "draws": {"type": "integer", "minimum": 1},
                "rate_range": {"type": "array", "items": {"type": "number", "minimum": 0},
                               "minItems": 2, "maxItems": 2},
                "grid_n": {"type": "integer", "minimum": 50},
            },
        },
        "oracle_n": {"type": "integer", "minimum": 10, "maximum": 2000},
        "grid_n": {"type": "integer", "minimum": 100},
        "seed": {"type": "integer", "minimum": 0},
        "jobs": {"type": "integer", "minimum": 1},
    },
}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class SweepSettings:
    r_min: float = 0.02
    r_max: float = 2.0
    n: int = 20

    def rates(self) -> np.ndarray:
        return np.linspace(self.r_min, self.r_max, self.n)


@dataclass(frozen=True)
class MonteCarloSettings:
    n_list: tuple[int, ...] = tuple(range(2, 11))
    draws: int = 1000
    rate_range: tuple[float, float] = (0.0, 2.0)
    grid_n: int = 150


@dataclass(frozen=True)
class ScenarioConfig:
    economy: dict = field(default_factory=lambda: canonical_economy().to_dict())
    sweep: SweepSettings = SweepSettings()
    montecarlo: MonteCarloSettings = MonteCarloSettings()
    oracle_n: int = 1000
    grid_n: int = 1000
    seed: int = 0
    jobs: int = 1

    def build_economy(self) -> Economy:
        return Economy.from_dict(self.economy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["montecarlo"]["n_list"] = list(self.montecarlo.n_list)
        d["montecarlo"]["rate_range"] = list(self.montecarlo.rate_range)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> ScenarioConfig:
        validate_config(raw)
        base = cls()
        mc = raw.get("montecarlo", {})
        cfg = cls(
            economy=raw.get("economy", base.economy),
            sweep=SweepSettings(**raw.get("sweep", {})),
            montecarlo=MonteCarloSettings(
                n_list=tuple(mc.get("n_list", base.montecarlo.n_list)),
                draws=mc.get("draws", base.montecarlo.draws),
                rate_range=tuple(mc.get("rate_range", base.montecarlo.rate_range)),
                grid_n=mc.get("grid_n", base.montecarlo.grid_n),
            ),
            oracle_n=raw.get("oracle_n", base.oracle_n),
            grid_n=raw.get("grid_n", base.grid_n),
            seed=raw.get("seed", base.seed),
            jobs=raw.get("jobs", base.jobs),
        )
        cfg.build_economy()  # semantic checks beyond the schema
        return cfg


def validate_config(raw: dict) -> None:
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        lines = [f"  {'/'.join(str(p) for p in err.path) or '<root>'}: {err.message}" for err in errors]
        raise ArgumentError("invalid configuration:\n" + "\n".join(lines))


def load_config(path: str | None) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArgumentError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ArgumentError(f"{path}: top level must be an object")
    return ScenarioConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Sweep over (r_P, r_I)
# ---------------------------------------------------------------------------


def economy_with_rates(base: Economy, rates) -> Economy:
    if len(rates) != base.n_types:
        raise ArgumentError(f"{len(rates)} rates given for {base.n_types} types")
    return base.replace(utilities=[ExponentialDiscount(float(r)) for r in rates])


def ordered_pair(base: Economy, r_p: float, r_i: float) -> Economy:
    """Two-type economy for a lattice cell, with the more risk-averse type first."""
    e = economy_with_rates(base, (r_p, r_i))
    if r_p <= r_i:
        return e
    types = (e.types[1], e.types[0])
    return Economy(types, e.supply)


def sweep_cell(base: Economy, r_p: float, r_i: float) -> dict:
    row = dict.fromkeys(SWEEP_COLUMNS, float("nan"))
    row.update(r_P=r_p, r_I=r_i)
    e = ordered_pair(base, r_p, r_i)
    try:
        fb = classify_first_best(e)
        row["fb_structure"] = fb.structure
        row["W_fb"] = fb.welfare
        row["W_pool"] = pooling_welfare(e) if r_p != r_i else _pool_identical(e)
    except (NumericalError, InvariantError, InfeasibleError, ArgumentError) as exc:
        log.warning("cell (%g, %g): first-best failed: %s", r_p, r_i, exc)
        row.update(fb_structure=FAILED, sb_region=FAILED)
        return row
    try:
        sb = solve_second_best(e)
        row.update(
            sb_region=classify_region(sb, fb), x1=sb.x1, x2=sb.x2, x3=sb.x3, beta=sb.beta,
            W_sb=sb.welfare, s_IP=sb.s_ip, s_PI=sb.s_pi,
        )
    except DegenerateEconomyError:
        # Identical types: incentive compatibility forces equal values, so pooling is second-best.
        row.update(sb_region=DEGENERATE, W_sb=row["W_pool"])
    except (NumericalError, InvariantError, InfeasibleError, ArgumentError) as exc:
        log.warning("cell (%g, %g): second-best failed: %s", r_p, r_i, exc)
        row["sb_region"] = FAILED
    return row


def _pool_identical(e: Economy) -> float:
    s = e.supply
    table = e.payoff[0]
    v = float(table.between(0.0, e.x_bar)) / s.mass(0.0, e.x_bar)
    return float(np.sum(e.weights * e.masses)) * v


def _sweep_task(args) -> dict:
    base_dict, r_p, r_i = args
    return sweep_cell(Economy.from_dict(base_dict), r_p, r_i)


def run_sweep(cfg: ScenarioConfig) -> list[dict]:
    base = cfg.build_economy()
    base.require_two_types()
    rs = cfg.sweep.rates()
    cells = [(cfg.economy, float(rp), float(ri)) for rp in rs for ri in rs]
    return _map(_sweep_task, cells, cfg.jobs)


def _ratio_task(args) -> dict:
    base_dict, r_p, r_i = args
    row = {"r_P": r_p, "r_I": r_i, "ratio": float("nan"), "ratio_no_disposal": float("nan")}
    if r_p == r_i:
        return row
    try:
        w = welfare_ratio(ordered_pair(Economy.from_dict(base_dict), r_p, r_i))
        row.update(ratio=w.ratio, ratio_no_disposal=w.ratio_no_disposal)
    except (NumericalError, InvariantError, InfeasibleError) as exc:
        log.warning("cell (%g, %g): ratio failed: %s", r_p, r_i, exc)
    return row


def run_ratio_grid(cfg: ScenarioConfig) -> list[dict]:
    cfg.build_economy().require_two_types()
    rs = cfg.sweep.rates()
    cells = [(cfg.economy, float(rp), float(ri)) for rp in rs for ri in rs]
    return _map(_ratio_task, cells, cfg.jobs)


def _map(fun, items: list, jobs: int) -> list:
    if jobs <= 1:
        return [fun(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fun, items, chunksize=max(1, len(items) // (4 * jobs))))


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


# ---------------------------------------------------------------------------
# Verification table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    limit: float
    passed: bool


def verify_suite(e: Economy, oracle_n: int) -> list[Check]:
    from .ntype import check_accordion_ic, construct_ic_first_best
    from .oracle import compare, discretize, oracle_first_best, oracle_second_best
    from .model import exponential_economy, fast_welfare

    checks = []
    fb = classify_first_best(e)
    g = discretize(e, 2000)
    gap = compare(fb.allocation, oracle_first_best(g), g).objective_gap
    checks.append(Check("first-best vs greedy oracle (n=2000)", gap, 1e-4, gap <= 1e-4))

    sb = solve_second_best(e)
    g = discretize(e, oracle_n)
    lp = oracle_second_best(g)
    gap = abs(sb.welfare - lp.objective) / abs(lp.objective)
    checks.append(Check(f"second-best vs IC-constrained LP (n={oracle_n})", gap, 1e-3, gap <= 1e-3))

    ce = solve_fair_ce_2(e)
    kkt = ce.residuals.kkt()
    checks.append(Check("threshold equilibrium KKT residual", kkt, 1e-4, kkt <= 1e-4 and ce.residuals.ok()))
    tat = tatonnement_ce(e, TatonnementConfig(n=1000))
    width = e.supply.upper / 1000
    dist = float(np.max(np.abs(np.array(tat.spec.lower + tat.spec.upper)
                                - np.array(ce.spec.lower + ce.spec.upper))))
    checks.append(Check("tatonnement thresholds vs threshold solver (bin widths)",
                        dist / width, 2.0, dist <= 2 * width))

    e3 = exponential_economy([0.2, 0.7, 1.5])
    acc = construct_ic_first_best(e3)
    verdict = check_accordion_ic(acc.allocation, e3)
    checks.append(Check("three-type accordion: smallest adjacent IC slack",
                        float(acc.adjacent.min()), 0.0, verdict.passed and verdict.chain_consistent))
    ew = e3.replace(weights=acc.weights)
    lp = oracle_first_best(discretize(ew, 500), method="lp")
    gap = abs(lp.objective - fast_welfare(acc.allocation, ew)) / abs(lp.objective)
    checks.append(Check("three-type accordion is LP-optimal under recovered weights", gap, 1e-3,
                        gap <= 1e-3))
    return checks


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quality-alloc", description="Allocation of goods of heterogeneous quality.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--econ", help="JSON scenario file (default: built-in canonical scenario)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--rates", type=float, nargs="+", help="exponential rates replacing the scenario's")
    common.add_argument("--grid-n", type=int, help="bins for the tatonnement grid")
    common.add_argument("--oracle-n", type=int, help="bins for LP oracle checks")
    common.add_argument("--seed", type=int, help="Monte Carlo seed")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--draws", type=int, help="Monte Carlo draws per type count")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, helptext in (
        ("solve-fb", "first-best allocation"),
        ("solve-sb", "second-best allocation (two types)"),
        ("solve-ce", "fair competitive equilibrium"),
        ("sweep", "first- and second-best over a rate lattice"),
        ("montecarlo", "welfare of first-best, second-best and pooling for random rates"),
        ("ratio-grid", "equilibrium welfare ratio over a rate lattice"),
        ("verify", "oracle comparison table"),
    ):
        sub.add_parser(name, parents=[common], help=helptext)
    return p


def _resolve(args) -> ScenarioConfig:
    cfg = load_config(args.econ)
    over = {}
    for key in ("grid_n", "oracle_n", "seed", "jobs"):
        val = getattr(args, key)
        if val is not None:
            over[key] = val
    if args.rates:
        e = economy_with_rates(cfg.build_economy(), args.rates)
        over["economy"] = e.to_dict()
    if args.draws is not None:
        over["montecarlo"] = replace(cfg.montecarlo, draws=args.draws)
    cfg = replace(cfg, **over)
    # Re-validate overrides through the same schema.
    return ScenarioConfig.from_dict(cfg.to_dict())


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")


def _execute(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    _dump(out / "resolved_config.json", cfg.to_dict())
    e = cfg.build_economy()
    cmd = args.command
    if cmd == "solve-fb":
        r = classify_first_best(e)
        _dump(out / "firstbest.json", r.to_dict())
        print(f"{r.structure} x1={r.x1:.6f} x2={r.x2:.6f} welfare={r.welfare:.10g}")
    elif cmd == "solve-sb":
        fb = classify_first_best(e)
        r = solve_second_best(e)
        region = classify_region(r, fb)
        d = r.to_dict()
        d["region"] = region
        _dump(out / "secondbest.json", d)
        print(f"{region} x1={r.x1:.6f} x2={r.x2:.6f} x3={r.x3:.6f} beta={r.beta:.6g} welfare={r.welfare:.10g}")
    elif cmd == "solve-ce":
        if e.n_types == 2:
            r = solve_fair_ce_2(e)
        else:
            r = tatonnement_ce(e, TatonnementConfig(n=cfg.grid_n))
            if not r.residuals.ok():
                raise NumericalError(f"equilibrium residuals too large: {r.residuals.to_dict()}")
        _dump(out / "equilibrium.json", r.to_dict())
        write_price_csv(str(out / "prices.csv"), r)
        print(f"{r.method} lower={[round(float(x), 6) for x in r.spec.lower]} "
              f"upper={[round(float(x), 6) for x in r.spec.upper]}")
    elif cmd == "sweep":
        rows = run_sweep(cfg)
        write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
        failed = sum(r["sb_region"] == FAILED for r in rows)
        print(f"{len(rows)} cells written to {out / 'sweep.csv'} ({failed} failed)")
    elif cmd == "montecarlo":
        mc = cfg.montecarlo
        rows = montecarlo_welfare(MonteCarloConfig(mc.n_list, mc.draws, mc.rate_range, mc.grid_n,
                                                   cfg.seed, cfg.jobs))
        write_csv(out / "montecarlo.csv", MC_COLUMNS, [
            {"N": r.n_types, "draw": r.draw, "rates": ";".join(repr(x) for x in r.rates),
             "W_firstbest": r.w_firstbest, "W_secondbest": r.w_secondbest,
             "W_pooling": r.w_pooling, "status": r.status}
            for r in rows
        ])
        summ = summarize(rows)
        write_csv(out / "montecarlo_summary.csv", list(asdict(summ[0]).keys()), [asdict(s) for s in summ])
        bad = sum(not r.ordered() for r in rows)
        print(f"{len(rows)} rows, {bad} violating W_fb >= W_sb > W_pool")
    elif cmd == "ratio-grid":
        rows = run_ratio_grid(cfg)
        write_csv(out / "ratio_grid.csv", RATIO_COLUMNS, rows)
        print(f"{len(rows)} cells written to {out / 'ratio_grid.csv'}")
    elif cmd == "verify":
        e.require_two_types()
        checks = verify_suite(e, cfg.oracle_n)
        width = max(len(c.name) for c in checks)
        for c in checks:
            print(f"{c.name:<{width}}  {c.value:12.4g}  limit {c.limit:<8g} {'PASS' if c.passed else 'FAIL'}")
        if not all(c.passed for c in checks):
            return 2
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _execute(args)
    except (ArgumentError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, InvariantError, InfeasibleError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
