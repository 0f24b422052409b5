import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations
from typing import Any

import numpy as np
from loguru import logger

from .core import FloatArray, MechanismHandle, UtilityVector, competitive_ratio_at
from .errors import InvalidInputError
from .two_item import SymmetricTwoItemMechanism, round_to_grid, u_hat

DEFAULT_SEED = 20140601
FD_STEP = 1e-6
BREAKPOINT_RADIUS = 1e-3
MONOTONE_TOL = 1e-12
CONTINUITY_EPS = 1e-9
CONTINUITY_TOL = 1e-6
NEAR_MISS = 1e-6


@dataclass(frozen=True)
class SPReport:
    """
    Outcome of a strategyproofness check

    Attributes:
        passed: (bool) max_regret <= tol
        max_regret: (float) largest gain found from misreporting (or largest residual
                for the derivative condition)
        worst_case: (dict) true type, misreport and opponent bid where it happens
        condition: (str) which check produced the report
        details: (dict) per-condition measurements
    """

    passed: bool
    max_regret: float
    worst_case: dict[str, Any]
    condition: str = "direct"
    details: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "condition": self.condition,
            "passed": self.passed,
            "max_regret": self.max_regret,
            "worst_case": self.worst_case,
            **({"details": self.details} if self.details else {}),
        }


@dataclass(frozen=True)
class RatioReport:
    """
    Measured competitive ratio

    Attributes:
        min_ratio: (float) smallest welfare ratio found, in [0, 1]
        argmin: (dict) bids where it happens
        grid_n: (int) grid resolution (or sample count for more than two items)
    """

    min_ratio: float
    argmin: dict[str, Any]
    grid_n: int

    def to_json(self) -> dict[str, Any]:
        return {"min_ratio": self.min_ratio, "argmin": self.argmin, "grid_n": self.grid_n}


@dataclass(frozen=True)
class BoundCertificate:
    """
    Witness that no strategyproof two-item mechanism beats ratio h

    Attributes:
        h: (float) the ratio being ruled out, in (0, 1]
        q_star: (float) split point for the value of u_hat(0, 0.1)
        t1_prime: (float) type violating the first support line
        t1_double_prime: (float) type violating the second support line, in [0.1, 1]
    """

    h: float
    q_star: float
    t1_prime: float
    t1_double_prime: float

    def __post_init__(self) -> None:
        if not 0.0 < self.h <= 1.0:
            raise InvalidInputError(f"h must lie in (0, 1], got {self.h}")
        for name in ("q_star", "t1_prime", "t1_double_prime"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.t1_double_prime < 0.1:
            raise InvalidInputError(f"t1_double_prime must be at least 0.1, got {self.t1_double_prime}")

    def to_json(self) -> dict[str, float]:
        return {"h": self.h, "q": self.q_star, "t1p": self.t1_prime, "t1pp": self.t1_double_prime}


@dataclass(frozen=True)
class CertificateCheck:
    """
    Attributes:
        valid: (bool) both strict inequalities hold
        slack_a: (float) q (1 - t1') - U_h(t1', 0.1)
        slack_b: (float) 1.1 h - q + (11 h - 10)(t1'' - 0.1) - U_h(t1'', 0)
    """

    valid: bool
    slack_a: float
    slack_b: float

    def to_json(self) -> dict[str, Any]:
        return {"valid": self.valid, "slack_a": self.slack_a, "slack_b": self.slack_b}


@dataclass(frozen=True)
class CertificateSearch:
    """
    Search space for search_best_certificate

    Attributes:
        h_range: (tuple) candidate ratios, inside [10/11, 1]
        q_range: (tuple) allowed q*
        t1p_range: (tuple) allowed t1'
        t1pp_range: (tuple) allowed t1'', inside [0.1, 1]
        grid: (int) samples per t range
        h_grid: (int) coarse samples of h before refinement
        h_tol: (float) refinement tolerance on h
    """

    h_range: tuple[float, float] = (0.91, 1.0)
    q_range: tuple[float, float] = (0.0, 1.0)
    t1p_range: tuple[float, float] = (0.0, 1.0)
    t1pp_range: tuple[float, float] = (0.1, 1.0)
    grid: int = 10_001
    h_grid: int = 91
    h_tol: float = 1e-6


def _grid(grid_n: int) -> FloatArray:
    if grid_n < 2:
        raise InvalidInputError(f"grid resolution must be at least 2, got {grid_n}")
    return np.arange(grid_n + 1) / grid_n


def _symmetric_table(fn: Any, grid: FloatArray) -> FloatArray:
    return np.asarray(fn(grid[:, None], grid[None, :]), dtype=float)


def _allocation_table(mech: MechanismHandle, grid: FloatArray, workers: int) -> FloatArray:
    """shares[i, j] is the 2 x 2 allocation when agent 1 bids grid[i] and agent 2 bids grid[j]"""
    bids = [UtilityVector.from_t(t) for t in grid]

    def row(i: int) -> FloatArray:
        return np.stack([mech(bids[i], bid).shares for bid in bids])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(row, range(len(grid))))
    else:
        rows = [row(i) for i in range(len(grid))]
    return np.stack(rows)


def _truthful_utilities(table: FloatArray, grid: FloatArray) -> FloatArray:
    """U[i, j] = utility of type grid[i] bidding truthfully against grid[j] under a symmetric table"""
    return grid[:, None] * table + (1.0 - grid)[:, None] * table[::-1, ::-1]


def _grid_regret(utility: FloatArray) -> tuple[float, int, int]:
    """utility[a, b]: type a bidding b. Returns (regret, type, misreport) of the largest gain."""
    regret = utility - np.diag(utility)[:, None]
    a, b = np.unravel_index(int(np.argmax(regret)), regret.shape)
    return float(regret[a, b]), int(a), int(b)


def _report(
    condition: str, max_regret: float, tol: float, worst: dict[str, Any], extra_ok: bool = True, **details: float
) -> SPReport:
    report = SPReport(
        passed=max_regret <= tol and extra_ok, max_regret=max_regret, worst_case=worst, condition=condition, details=details
    )
    if report.passed:
        logger.success(f"{condition} check passed (max violation {max_regret:.3e})")
    else:
        logger.error(f"{condition} check failed: violation {max_regret:.3e} at {worst}")
    return report


def check_sp_direct(
    mech: MechanismHandle,
    grid_n: int = 100,
    tol: float = 1e-9,
    m: int = 2,
    samples: int = 1000,
    trials: int = 20,
    seed: int = DEFAULT_SEED,
    workers: int = 1,
) -> SPReport:
    """
    Searches for a profitable misreport
        :param mech: mechanism under test
        :param grid_n: for two items, every bid is a multiple of 1/grid_n
        :param tol: regret tolerated as rounding noise
        :param m: number of items; above two, sampled bid triples are used
        :param samples: misreports tried per true type (more than two items)
        :param trials: true-type / opponent pairs drawn (more than two items)
        :param seed: seed of the sampler
        :param workers: threads used to tabulate a non-symmetric mechanism
    Returns an SPReport covering both agents
    """
    if m > 2:
        return _check_sp_sampled(mech, grid_n, tol, m, samples, trials, seed)
    grid = _grid(grid_n)
    n = grid_n
    logger.debug(f"Direct SP check of {mech.label} on a {n + 1}x{n + 1} grid")
    best = (-math.inf, 0, 0, 0, 1)
    if mech.symmetric_fn is not None:
        table = _symmetric_table(mech.symmetric_fn, grid)
        for o in range(n + 1):
            item_1, item_2 = table[:, o], table[::-1, n - o]
            utility = grid[:, None] * item_1[None, :] + (1.0 - grid)[:, None] * item_2[None, :]
            regret, a, b = _grid_regret(utility)
            if regret > best[0]:
                best = (regret, a, b, o, 1)
    else:
        shares = _allocation_table(mech, grid, workers)
        for o in range(n + 1):
            for agent, slab in ((1, shares[:, o, 0, :]), (2, shares[o, :, 1, :])):
                utility = grid[:, None] * slab[None, :, 0] + (1.0 - grid)[:, None] * slab[None, :, 1]
                regret, a, b = _grid_regret(utility)
                if regret > best[0]:
                    best = (regret, a, b, o, agent)
    regret, a, b, o, agent = best
    worst = {"agent": agent, "t1": float(grid[a]), "misreport": float(grid[b]), "t2": float(grid[o])}
    return _report("direct", max(regret, 0.0), tol, worst)


def _simplex_point(rng: np.random.Generator, m: int, grid_n: int) -> UtilityVector:
    counts = rng.multinomial(grid_n, rng.dirichlet(np.ones(m)))
    return UtilityVector(tuple(counts / grid_n))


def _misreports(
    rng: np.random.Generator, true: UtilityVector, opponent: UtilityVector, samples: int
) -> list[UtilityVector]:
    m = true.m
    candidates: list[UtilityVector] = []
    orders = list(permutations(range(m))) if m <= 4 else [tuple(rng.permutation(m)) for _ in range(m)]
    candidates.extend(UtilityVector(tuple(true[j] for j in order)) for order in orders)
    candidates.extend(UtilityVector(tuple(float(i == j) for i in range(m))) for j in range(m))
    for pull in np.linspace(0.1, 1.0, 10):
        mixed = (1.0 - pull) * true.array + pull * opponent.array
        candidates.append(UtilityVector(tuple(mixed / mixed.sum())))
    while len(candidates) < samples:
        draw = rng.dirichlet(np.ones(m))
        candidates.append(UtilityVector(tuple(draw / draw.sum())))
    return candidates[:samples] if len(candidates) > samples else candidates


def _check_sp_sampled(
    mech: MechanismHandle, grid_n: int, tol: float, m: int, samples: int, trials: int, seed: int
) -> SPReport:
    rng = np.random.default_rng(seed)
    logger.debug(f"Sampled SP check of {mech.label}: {trials} profiles x {samples} misreports, m={m}")
    best: tuple[float, dict[str, Any]] = (-math.inf, {})
    for _ in range(trials):
        u1, u2 = _simplex_point(rng, m, grid_n), _simplex_point(rng, m, grid_n)
        truthful = mech(u1, u2).utilities(u1, u2)
        for agent, true, opponent in ((1, u1, u2), (2, u2, u1)):
            for misreport in _misreports(rng, true, opponent, samples):
                bids = (misreport, opponent) if agent == 1 else (opponent, misreport)
                gained = true.value(mech(*bids).bundle(agent)) - truthful[agent - 1]
                if gained > best[0]:
                    best = (
                        gained,
                        {
                            "agent": agent,
                            "t1": list(true.entries),
                            "misreport": list(misreport.entries),
                            "t2": list(opponent.entries),
                        },
                    )
    return _report("direct", max(best[0], 0.0), tol, best[1])


def check_rochet(mech: SymmetricTwoItemMechanism, grid_n: int = 100, tol: float = 1e-9) -> SPReport:
    """
    Convexity of u_hat in the own type, and A(b1, b2) - A(1 - b1, 1 - b2) as its subgradient
        :param mech: symmetric two-item mechanism
        :param grid_n: grid resolution, at least 4
        :param tol: tolerated violation
    """
    if grid_n < 4:
        raise InvalidInputError(f"the convexity check needs grid_n >= 4, got {grid_n}")
    grid = _grid(grid_n)
    table = _symmetric_table(mech.a_fn, grid)
    utility = _truthful_utilities(table, grid)
    slope = table - table[::-1, ::-1]

    curvature = utility[2:, :] - 2.0 * utility[1:-1, :] + utility[:-2, :]
    convexity = float(max(-curvature.min(), 0.0))

    subgradient, worst = 0.0, {"t1": 0.0, "misreport": 0.0, "t2": 0.0}
    for o in range(grid_n + 1):
        support = utility[None, :, o] + slope[None, :, o] * (grid[:, None] - grid[None, :])
        gap = support - utility[:, o][:, None]
        a, b = np.unravel_index(int(np.argmax(gap)), gap.shape)
        if gap[a, b] > subgradient:
            subgradient = float(gap[a, b])
            worst = {"t1": float(grid[a]), "misreport": float(grid[b]), "t2": float(grid[o])}
    return _report(
        "rochet", max(convexity, subgradient), tol, worst, convexity=convexity, subgradient=subgradient
    )


def _derivative(mech: SymmetricTwoItemMechanism, t1: FloatArray, t2: FloatArray) -> FloatArray:
    return (np.asarray(mech(t1 + FD_STEP, t2)) - np.asarray(mech(t1 - FD_STEP, t2))) / (2.0 * FD_STEP)


def check_sufficient_condition(
    mech: SymmetricTwoItemMechanism,
    breakpoints: tuple[float, ...] | None = None,
    tol: float = 1e-6,
    grid_n: int = 200,
) -> SPReport:
    """
    t1 dA/db1(t1, t2) = (1 - t1) dA/db1(1 - t1, 1 - t2) away from breakpoints, plus
    monotonicity and continuity of A in b1
        :param mech: symmetric two-item mechanism
        :param breakpoints: non-differentiable points of A in b1; defaults to the mechanism's own
        :param tol: tolerated residual
        :param grid_n: grid resolution
    """
    breakpoints = mech.breakpoints if breakpoints is None else tuple(breakpoints)
    grid = _grid(grid_n)
    avoid = np.array((0.0, 1.0) + tuple(breakpoints))
    interior = grid[1:-1]
    distance = np.minimum(
        np.abs(interior[:, None] - avoid[None, :]).min(axis=1),
        np.abs((1.0 - interior)[:, None] - avoid[None, :]).min(axis=1),
    )
    t1 = interior[distance >= BREAKPOINT_RADIUS][:, None]
    t2 = grid[None, :]

    residual = np.abs(t1 * _derivative(mech, t1, t2) - (1.0 - t1) * _derivative(mech, 1.0 - t1, 1.0 - t2))
    a, o = np.unravel_index(int(np.argmax(residual)), residual.shape)
    worst = {"t1": float(t1[a, 0]), "misreport": float(t1[a, 0]), "t2": float(grid[o])}
    derivative_gap = float(residual[a, o])

    table = _symmetric_table(mech.a_fn, grid)
    decrease = float(max(-(table[1:, :] - table[:-1, :]).min(), 0.0))
    jump = 0.0
    for point in breakpoints:
        left = np.asarray(mech(np.full_like(grid, point - CONTINUITY_EPS), grid))
        right = np.asarray(mech(np.full_like(grid, point + CONTINUITY_EPS), grid))
        jump = max(jump, float(np.abs(right - left).max()))

    regular = decrease <= MONOTONE_TOL and jump <= CONTINUITY_TOL
    if not regular:
        logger.error(f"A is not monotone and continuous in b1 (decrease {decrease:.3e}, jump {jump:.3e})")
    return _report(
        "sufficient", derivative_gap, tol, worst, regular, derivative=derivative_gap, decrease=decrease, jump=jump
    )


def _canonical(i: int, j: int, n: int) -> tuple[int, int]:
    """Symmetric image of (i, j) with t1 >= t2 and t1 + t2 <= 1"""
    for a, b in ((i, j), (j, i), (n - i, n - j), (n - j, n - i)):
        if a >= b and a + b <= n:
            return a, b
    return i, j


def measure_ratio(
    mech: MechanismHandle,
    grid_n: int = 200,
    m: int = 2,
    samples: int = 100_000,
    seed: int = DEFAULT_SEED,
    workers: int = 1,
) -> RatioReport:
    """
    Smallest truthful welfare over first-best welfare
        :param mech: mechanism under test
        :param grid_n: two-item grid resolution
        :param m: number of items; above two, random profiles are sampled
        :param samples: number of sampled profiles for m > 2
        :param seed: seed of the sampler
        :param workers: threads used to tabulate a non-symmetric mechanism
    """
    if m > 2:
        rng = np.random.default_rng(seed)
        best: tuple[float, dict[str, Any]] = (math.inf, {})
        for _ in range(samples):
            u1, u2 = (UtilityVector(tuple(rng.dirichlet(np.ones(m)))) for _ in range(2))
            ratio = competitive_ratio_at(mech, u1, u2)
            if ratio < best[0]:
                best = (ratio, {"u1": list(u1.entries), "u2": list(u2.entries)})
        logger.info(f"{mech.label}: min ratio {best[0]:.9f} over {samples} sampled profiles")
        return RatioReport(min_ratio=best[0], argmin=best[1], grid_n=samples)

    grid = _grid(grid_n)
    optimum = 1.0 + np.abs(grid[:, None] - grid[None, :])
    if mech.symmetric_fn is not None:
        utility = _truthful_utilities(_symmetric_table(mech.symmetric_fn, grid), grid)
        welfare = utility + utility.T
    else:
        shares = _allocation_table(mech, grid, workers)
        welfare = (
            grid[:, None] * shares[:, :, 0, 0]
            + (1.0 - grid)[:, None] * shares[:, :, 0, 1]
            + grid[None, :] * shares[:, :, 1, 0]
            + (1.0 - grid)[None, :] * shares[:, :, 1, 1]
        )
    ratio = welfare / optimum
    i, j = np.unravel_index(int(np.argmin(ratio)), ratio.shape)
    min_ratio = float(ratio[i, j])
    if mech.symmetric_fn is not None:
        i, j = _canonical(int(i), int(j), grid_n)
    logger.info(f"{mech.label}: min ratio {min_ratio:.9f} at t1={grid[i]:.4f}, t2={grid[j]:.4f}")
    return RatioReport(min_ratio=min_ratio, argmin={"t1": float(grid[i]), "t2": float(grid[j])}, grid_n=grid_n)


def _check_h(h: float) -> None:
    if not 0.0 < h <= 1.0 or not 0.0 <= 1.1 - 1.0 / h <= 1.0 / h - 0.9:
        raise InvalidInputError(f"h={h} leaves the branch intervals inverted; need 10/11 <= h <= 1")


def u_upper(t1: float | FloatArray, case: str, h: float) -> float | FloatArray:
    """
    Largest utility agent 1 can keep while the pair stays h-competitive
        :param t1: own type, in [0, 1]
        :param case: "opponent_0.1" or "opponent_0", the opponent's type
        :param h: competitive ratio, in [10/11, 1]
    """
    _check_h(h)
    t = np.asarray(t1, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise InvalidInputError("t1 must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        if case == "opponent_0.1":
            left_end, right_end = 1.1 - 1.0 / h, 1.0 / h - 0.9
            left = 1.0 - ((1.1 - t) * h - 1.0) / (0.1 - t) * t
            right = 1.0 + ((t + 0.9) * h - 1.0) / (t - 0.1) * (t - 1.0)
            out = np.where(t < left_end, left, np.where(t > right_end, right, 1.0))
        elif case == "opponent_0":
            out = np.where(t > 0.0, np.minimum(1.0, 1.0 + ((t + 1.0) * h - 1.0) / t * (t - 1.0)), 1.0)
        else:
            raise InvalidInputError(f"unknown case {case!r}; use opponent_0.1 or opponent_0")
    return float(out) if np.ndim(out) == 0 else out


def l_lower(t1: float | FloatArray, h: float) -> float | FloatArray:
    """Smallest utility agent 1 can get while the pair stays h-competitive, opponent type 0.1"""
    _check_h(h)
    t = np.asarray(t1, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise InvalidInputError("t1 must lie in [0, 1]")
    left_end, right_end = 1.1 - 1.0 / h, 1.0 / h - 0.9
    with np.errstate(divide="ignore", invalid="ignore"):
        left = ((1.1 - t) * h - 1.0) / (0.1 - t) * (1.0 - t)
        right = ((t + 0.9) * h - 1.0) / (t - 0.1) * t
        out = np.where(t < left_end, left, np.where(t > right_end, right, 0.0))
    return float(out) if np.ndim(out) == 0 else out


def _slack_a(h: float, q: float, t1p: float | FloatArray) -> float | FloatArray:
    return q * (1.0 - np.asarray(t1p)) - np.asarray(u_upper(t1p, "opponent_0.1", h))


def _support_b(h: float, t1pp: float | FloatArray) -> FloatArray:
    t = np.asarray(t1pp, dtype=float)
    return 1.1 * h + (11.0 * h - 10.0) * (t - 0.1) - np.asarray(u_upper(t, "opponent_0", h))


def check_bound_certificate(cert: BoundCertificate) -> CertificateCheck:
    """
    Both strict inequalities of the certificate, with their slacks
        :param cert: candidate certificate
    """
    slack_a = float(_slack_a(cert.h, cert.q_star, cert.t1_prime))
    slack_b = float(_support_b(cert.h, cert.t1_double_prime)) - cert.q_star
    check = CertificateCheck(valid=slack_a > 0.0 and slack_b > 0.0, slack_a=slack_a, slack_b=slack_b)
    if check.valid and min(slack_a, slack_b) < NEAR_MISS:
        logger.warning(f"Certificate at h={cert.h} holds by less than {NEAR_MISS:g}")
    elif check.valid:
        logger.success(f"Certificate at h={cert.h} holds (slacks {slack_a:.3e}, {slack_b:.3e})")
    else:
        logger.info(f"Certificate at h={cert.h} fails (slacks {slack_a:.3e}, {slack_b:.3e})")
    return check


def _best_at(h: float, search: CertificateSearch) -> BoundCertificate | None:
    t_prime = np.linspace(*search.t1p_range, search.grid)
    t_prime = t_prime[t_prime < 1.0]
    t_double = np.linspace(*search.t1pp_range, search.grid)
    with np.errstate(divide="ignore"):
        needed = np.asarray(u_upper(t_prime, "opponent_0.1", h)) / (1.0 - t_prime)
    support = _support_b(h, t_double)
    a, b = int(np.argmin(needed)), int(np.argmax(support))
    low, high = max(float(needed[a]), search.q_range[0]), min(float(support[b]), search.q_range[1])
    if search.q_range[0] == search.q_range[1]:
        q = search.q_range[0]
        if not float(needed[a]) < q < float(support[b]):
            return None
    elif low < high:
        q = (low + high) / 2.0
    else:
        return None
    return BoundCertificate(h=h, q_star=q, t1_prime=float(t_prime[a]), t1_double_prime=float(t_double[b]))


def search_best_certificate(search: CertificateSearch | None = None) -> tuple[float, BoundCertificate] | None:
    """
    Smallest h in the search range for which a certificate exists
        :param search: ranges and resolutions; defaults to CertificateSearch()
    Returns (h, certificate), or None when no h in range admits one
    """
    search = search or CertificateSearch()
    h_lo, h_hi = search.h_range
    _check_h(h_lo)
    _check_h(h_hi)
    failing, found = None, None
    for h in np.linspace(h_lo, h_hi, search.h_grid):
        candidate = _best_at(float(h), search)
        if candidate is not None:
            found = candidate
            break
        failing = float(h)
    if found is None:
        logger.info(f"No certificate for h in [{h_lo}, {h_hi}]")
        return None
    if failing is not None:
        low, high = failing, found.h
        while high - low > search.h_tol:
            middle = (low + high) / 2.0
            candidate = _best_at(middle, search)
            if candidate is None:
                low = middle
            else:
                high, found = middle, candidate
    if not check_bound_certificate(found).valid:
        logger.warning(f"Search candidate at h={found.h} failed the exact check")
        return None
    logger.success(f"Best certificate found at h={found.h:.6f}")
    return found.h, found


def rounding_error_gap(mech: SymmetricTwoItemMechanism, n: int, grid_n: int = 200) -> float:
    """
    Largest |u_hat(t1, t2~) - u_hat(t1~, t2~)| caused by rounding the own type to the 1/n grid
        :param mech: symmetric mechanism that rounds the opponent's bid to the 1/n grid
        :param n: rounding resolution
        :param grid_n: resolution of the sampled types
    """
    grid = _grid(grid_n)
    own, opponent = np.meshgrid(grid, grid, indexing="ij")
    rounded_own, rounded_opponent = round_to_grid(own, n), round_to_grid(opponent, n)
    gap = np.asarray(u_hat(mech, own, rounded_opponent)) - np.asarray(u_hat(mech, rounded_own, rounded_opponent))
    return float(np.abs(gap).max())

