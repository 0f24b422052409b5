import argparse
import json
import sys
from dataclasses import fields
from typing import Any, Callable

import numpy as np
from dotenv import load_dotenv
from loguru import logger

from . import __version__
from .config import RunConfig
from .core import MechanismHandle, UtilityVector, even_split_mechanism, first_best_mechanism
from .dip import five_sixths_dip_mechanism, five_sixths_price_schedule, sample_prices
from .errors import ConfigError, InfeasibleAllocationError, MechanismError, ScheduleError, SolverError
from .lp import build_gc_lp, build_qr_lp, default_delta, export_lp, extract_qr_tables, solution_to_json, solve
from .multi_item import averaged_pa_mechanism, pa_max_mechanism, pa_mechanism, pa_ratio_certificate
from .two_item import (
    QRTables,
    SymmetricTwoItemMechanism,
    constant_mechanism,
    first_best_symmetric,
    five_sixths_mechanism,
    natural_partial_pair,
    partial_family_mechanism,
    ratio_floor,
)
from .verify import (
    DEFAULT_SEED,
    BoundCertificate,
    CertificateSearch,
    check_bound_certificate,
    check_rochet,
    check_sp_direct,
    check_sufficient_condition,
    measure_ratio,
    search_best_certificate,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

CHECK_TOLERANCES = {"sp": 1e-9, "rochet": 1e-9, "sufficient": 1e-6}


def _partial_qr(config: RunConfig) -> SymmetricTwoItemMechanism:
    if not config.tables:
        raise ConfigError("partial-qr needs --tables pointing at a Q/R CSV (see `lp qr`)")
    return partial_family_mechanism(*natural_partial_pair(), QRTables.from_csv(config.tables))


# two-item mechanisms described by A(b1, b2); used by rochet and sufficient checks
SYMMETRIC_MECHANISMS: dict[str, Callable[[RunConfig], SymmetricTwoItemMechanism]] = {
    "five-sixths": lambda config: five_sixths_mechanism(),
    "partial-qr": _partial_qr,
    "even-split": lambda config: constant_mechanism(0.5),
    "dictator-fixture": lambda config: first_best_symmetric(),
}

MECHANISMS: dict[str, Callable[[RunConfig], MechanismHandle]] = {
    "five-sixths": lambda config: five_sixths_mechanism().handle(),
    "partial-qr": lambda config: _partial_qr(config).handle(),
    "pa-max": lambda config: pa_max_mechanism(),
    "pa-avg": lambda config: averaged_pa_mechanism(),
    "even-split": lambda config: even_split_mechanism(),
    "dip-five-sixths": lambda config: five_sixths_dip_mechanism(),
    "dictator-fixture": lambda config: first_best_mechanism(),
}


def resolve_mechanism(config: RunConfig) -> MechanismHandle:
    """
    Builds the mechanism named by config.mechanism
        :param config: resolved run configuration
    Ids are the MECHANISMS keys plus pa:<c> for any positive exponent c
    """
    mech_id = config.mechanism
    if mech_id.startswith("pa:"):
        try:
            return pa_mechanism(float(mech_id[3:]))
        except ValueError as err:
            if isinstance(err, MechanismError):
                raise
            raise ConfigError(f"cannot read the exponent in {mech_id!r}") from err
    if mech_id not in MECHANISMS:
        raise ConfigError(f"unknown mechanism {mech_id!r}; choose from {', '.join(sorted(MECHANISMS))} or pa:<c>")
    return MECHANISMS[mech_id](config)


def resolve_symmetric(config: RunConfig) -> SymmetricTwoItemMechanism:
    if config.mechanism not in SYMMETRIC_MECHANISMS:
        raise ConfigError(
            f"{config.mechanism!r} is not a symmetric two-item mechanism; "
            f"choose from {', '.join(sorted(SYMMETRIC_MECHANISMS))}"
        )
    return SYMMETRIC_MECHANISMS[config.mechanism](config)


def _emit(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _bids(args: argparse.Namespace) -> tuple[UtilityVector, UtilityVector]:
    if args.u1 is not None and args.u2 is not None:
        return UtilityVector.parse(args.u1), UtilityVector.parse(args.u2)
    if args.t1 is not None and args.t2 is not None:
        return UtilityVector.from_t(args.t1), UtilityVector.from_t(args.t2)
    raise ConfigError("give either --t1 and --t2, or --u1 and --u2")


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    bid_1, bid_2 = _bids(args)
    mech = resolve_mechanism(config)
    allocation = mech(bid_1, bid_2)
    _emit(
        {
            "mechanism": mech.label,
            "allocation": allocation.to_dict(),
            "utilities": list(allocation.utilities(bid_1, bid_2)),
        }
    )
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> int:
    kind = args.kind
    if kind == "ratio":
        report = measure_ratio(
            resolve_mechanism(config),
            grid_n=config.grid,
            m=config.m,
            samples=config.samples,
            seed=config.seed,
            workers=config.workers,
        )
        _emit(report.to_json())
        if args.min_ratio is not None and report.min_ratio < args.min_ratio:
            logger.error(f"min ratio {report.min_ratio:.9f} is below the required {args.min_ratio}")
            return EXIT_FAILED
        return EXIT_OK

    tol = CHECK_TOLERANCES[kind] if config.tol is None else config.tol
    if kind == "sp":
        sp_report = check_sp_direct(
            resolve_mechanism(config),
            grid_n=config.grid,
            tol=tol,
            m=config.m,
            samples=config.samples,
            trials=config.trials,
            seed=config.seed,
            workers=config.workers,
        )
    elif kind == "rochet":
        sp_report = check_rochet(resolve_symmetric(config), grid_n=config.grid, tol=tol)
    else:
        sp_report = check_sufficient_condition(resolve_symmetric(config), tol=tol, grid_n=config.grid)
    _emit(sp_report.to_json())
    return EXIT_OK if sp_report.passed else EXIT_FAILED


def cmd_lp(args: argparse.Namespace, config: RunConfig) -> int:
    backend = config.backend or None
    if args.action == "qr":
        delta = config.delta_value()
        delta = default_delta(config.lp_n) if delta is None else delta
        solution = solve(build_qr_lp(config.lp_n, delta), backend)
        if not solution.optimal:
            _emit(solution_to_json(solution))
            return EXIT_FAILED
        tables = extract_qr_tables(solution, config.lp_n, delta)
        out = config.out or f"qr_tables_n{config.lp_n}.csv"
        tables.to_csv(out)
        _emit(
            {
                "n": tables.n,
                "delta": delta,
                "lambda": tables.lam,
                "ratio_floor": ratio_floor(tables.lam, tables.n),
                "max_q": tables.max_q,
                "tables": out,
            }
        )
        return EXIT_OK

    lp = build_gc_lp(config.lp_n, config.lp_kind, config.prune)
    if args.action == "build":
        if not config.out:
            raise ConfigError("lp build needs --out")
        export_lp(lp, config.out)
        _emit(
            {
                "out": config.out,
                "variables": len(lp.variables),
                "rows": {tag: lp.count(tag) for tag in ("sp", "competitiveness", "fullness", "feasibility")},
            }
        )
        return EXIT_OK

    solution = solve(lp, backend)
    payload = solution_to_json(solution)
    if config.out:
        with open(config.out, "w") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
        payload = {key: value for key, value in payload.items() if key != "nonzeros"} | {"out": config.out}
    _emit(payload)
    return EXIT_OK if solution.optimal else EXIT_FAILED


def cmd_bound(args: argparse.Namespace, config: RunConfig) -> int:
    if args.action == "check":
        certificate = BoundCertificate(h=args.h, q_star=args.q, t1_prime=args.t1p, t1_double_prime=args.t1pp)
        check = check_bound_certificate(certificate)
        _emit(certificate.to_json() | check.to_json())
        return EXIT_OK if check.valid else EXIT_FAILED

    search = CertificateSearch(h_range=(args.h_min, args.h_max), q_range=(args.q_min, args.q_max))
    found = search_best_certificate(search)
    if found is None:
        _emit({"found": False})
        return EXIT_FAILED
    h, certificate = found
    _emit({"found": True, "h": h} | certificate.to_json() | check_bound_certificate(certificate).to_json())
    return EXIT_OK


def cmd_pa(args: argparse.Namespace, config: RunConfig) -> int:
    certificate = pa_ratio_certificate(
        c=args.c, grid_step=args.step, workers=config.workers, csv_path=config.out or None
    )
    _emit(certificate.to_json())
    return EXIT_OK


def cmd_dip(args: argparse.Namespace, config: RunConfig) -> int:
    rows = sample_prices(five_sixths_price_schedule(args.t2), points=args.points)
    target = config.out or sys.stdout
    np.savetxt(target, rows, fmt="%.12g", delimiter=",", header="y,price_1,price_2", comments="")
    if config.out:
        logger.info(f"Wrote {len(rows)} price rows to {config.out}")
    return EXIT_OK


def _mechanism_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mechanism", help="mechanism id, e.g. five-sixths, pa:0.5, pa-avg")
    parser.add_argument("--tables", help="Q/R CSV for the partial-qr mechanism")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sp-mechanisms",
        description="Strategyproof two-agent allocation mechanisms and their verification engine",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key=value run configuration file")
    parser.add_argument("--seed", type=int, help=f"seed for every sampler (default {DEFAULT_SEED})")
    parser.add_argument("--workers", type=int, help="threads sharing grid loops (default 1)")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    evaluate = commands.add_parser("eval", help="allocation of one bid pair")
    _mechanism_options(evaluate)
    evaluate.add_argument("--t1", type=float, help="agent 1's two-item bid (t, 1 - t)")
    evaluate.add_argument("--t2", type=float, help="agent 2's two-item bid")
    evaluate.add_argument("--u1", help="agent 1's bid as comma separated weights")
    evaluate.add_argument("--u2", help="agent 2's bid as comma separated weights")
    evaluate.set_defaults(handler=cmd_eval)

    verify = commands.add_parser("verify", help="strategyproofness and ratio checks")
    verify.add_argument("kind", choices=("sp", "rochet", "sufficient", "ratio"))
    _mechanism_options(verify)
    verify.add_argument("--grid", type=int, help="grid resolution (default 200)")
    verify.add_argument("--tol", type=float, help="tolerance; 0 is exact (default per check)")
    verify.add_argument("--samples", type=int, help="sampled misreports or profiles for m > 2")
    verify.add_argument("--trials", type=int, help="sampled true profiles for m > 2")
    verify.add_argument("--m", type=int, help="number of items (default 2)")
    verify.add_argument("--min-ratio", type=float, help="ratio: exit 1 when the minimum falls below this")
    verify.set_defaults(handler=cmd_verify)

    lp = commands.add_parser("lp", help="upper-bound and Q/R linear programs")
    lp.add_argument("action", choices=("build", "solve", "qr"))
    lp.add_argument("--kind", dest="lp_kind", choices=("full", "partial"), help="LP variant (default full)")
    lp.add_argument("--n", dest="lp_n", type=int, help="grid resolution (default 50)")
    lp.add_argument("--prune", action="store_true", default=None, help="keep only neighbouring SP rows")
    lp.add_argument("--delta", help="Q/R headroom, a number or auto")
    lp.add_argument("--backend", help="highs, simplex, ipm or external")
    lp.add_argument("--out", help="output path")
    lp.set_defaults(handler=cmd_lp)

    bound = commands.add_parser("bound", help="upper-bound certificates")
    bound.add_argument("action", choices=("check", "search"))
    bound.add_argument("--h", type=float, default=0.9523)
    bound.add_argument("--q", type=float, default=0.6979)
    bound.add_argument("--t1p", type=float, default=0.26)
    bound.add_argument("--t1pp", type=float, default=0.32)
    bound.add_argument("--h-min", type=float, default=0.91)
    bound.add_argument("--h-max", type=float, default=1.0)
    bound.add_argument("--q-min", type=float, default=0.0)
    bound.add_argument("--q-max", type=float, default=1.0)
    bound.set_defaults(handler=cmd_bound)

    pa = commands.add_parser("pa", help="grid certificate for the averaged PA mechanism")
    pa.add_argument("action", choices=("certificate",))
    pa.add_argument("--c", type=float, default=0.421)
    pa.add_argument("--step", type=float, default=1 / 200)
    pa.add_argument("--out", help="optional CSV dump of the grid")
    pa.set_defaults(handler=cmd_pa)

    dip = commands.add_parser("dip", help="price schedules of the DIP form")
    dip.add_argument("action", choices=("prices",))
    dip.add_argument("--t2", type=float, required=True, help="opponent's two-item bid")
    dip.add_argument("--points", type=int, default=101)
    dip.add_argument("--out", help="CSV path; stdout when omitted")
    dip.set_defaults(handler=cmd_dip)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {field.name: getattr(args, field.name, None) for field in fields(RunConfig)}


def main(argv: list[str] | None = None) -> int:
    """
    Entry point of the sp-mechanisms command
        :param argv: arguments without the program name; None reads sys.argv
    Returns 0 on success, 1 when a verification fails, 2 on usage or configuration errors
    """
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if args.verbose else "INFO")

    try:
        config = RunConfig.load(args.config, **_overrides(args))
        return int(args.handler(args, config))
    except (InfeasibleAllocationError, ScheduleError) as err:
        logger.error(f"mechanism failure: {err}")
        return EXIT_FAILED
    except MechanismError as err:
        logger.error(str(err))
        return EXIT_USAGE
    except SolverError as err:
        logger.error(f"solver failure: {err}")
        return EXIT_FAILED
    except OSError as err:
        logger.error(f"I/O failure: {err}")
        return EXIT_FAILED
