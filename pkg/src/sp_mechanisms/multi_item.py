import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike

from .core import (
    Allocation,
    FloatArray,
    MechanismHandle,
    UtilityPoint,
    UtilityVector,
    average_mechanisms,
    check_dimensions,
)
from .errors import InvalidInputError
from .optimize import golden_section_maximize

AVERAGED_PA_C = 0.421
AVERAGED_PA_WEIGHTS = (1029 / 4000, 1029 / 4000, 971 / 2000)
GOLDEN_TOL = 1e-12
REGION_TOL = 1e-12
CERTIFICATE_HEADER = "u1_star,u2_star,bound"


@dataclass(frozen=True)
class PAResult:
    """
    Outcome of one Partial Allocation run

    Attributes:
        base_allocation: (Allocation) the full split maximising u1(a1) * u2(a2)^c
        w_value: (float) the maximal product W, in (0, 1]
        scaled_allocation: (Allocation) agent 1's row scaled by u2(a2)^c and agent 2's by u1(a1)^(1/c)
        c: (float) the exponent
    """

    base_allocation: Allocation
    w_value: float
    scaled_allocation: Allocation
    c: float

    @property
    def attained(self) -> tuple[float, float]:
        """Utilities after scaling: W for agent 1 and W^(1/c) for agent 2"""
        return self.w_value, self.w_value ** (1.0 / self.c)


@dataclass(frozen=True)
class PARatioCertificate:
    """
    Grid certificate for a weighted PA average

    Attributes:
        grid_minimum: (float) smallest ratio bound over the grid of first-best points
        corrected_bound: (float) grid_minimum * (1 - 2 * grid_step), valid at every real point
        argmin: (tuple) first-best utility pair where the minimum sits
        grid_step: (float) spacing of the grid
        points: (int) how many grid points were evaluated
    """

    grid_minimum: float
    corrected_bound: float
    argmin: tuple[float, float]
    grid_step: float
    points: int

    def to_json(self) -> dict:
        return {
            "grid_minimum": self.grid_minimum,
            "corrected_bound": self.corrected_bound,
            "argmin": {"u1_star": self.argmin[0], "u2_star": self.argmin[1]},
            "grid_step": self.grid_step,
            "points": self.points,
        }


def _check_exponent(c: float) -> float:
    c = float(c)
    if not (math.isfinite(c) and c > 0.0):
        raise InvalidInputError(f"exponent c must be positive and finite, got {c}")
    return c


def _ratio_order(u1: FloatArray, u2: FloatArray) -> FloatArray:
    # u2j == 0 counts as ratio +inf, so those items go to agent 1 first
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(u2 > 0.0, u1 / np.where(u2 > 0.0, u2, 1.0), np.inf)
    return np.argsort(-ratios, kind="stable")


def solve_weighted_product(u1: UtilityVector, u2: UtilityVector, c: float) -> PAResult:
    """
    Full split of the items maximising u1(a1) * u2(a2)^c
        :param u1: agent 1's bid
        :param u2: agent 2's bid
        :param c: exponent in (0, inf)
    Items are sorted by u1j / u2j; some optimum gives agent 1 a prefix, agent 2 the
    suffix and splits one item between them. Every split item is tried with a
    golden-section search on the log objective and the best is kept.
    """
    c = _check_exponent(c)
    check_dimensions(u1.m, u1, u2)
    first, second = u1.array, u2.array
    order = _ratio_order(first, second)
    a, b = first[order], second[order]
    before = np.concatenate([[0.0], np.cumsum(a)[:-1]])
    after = np.concatenate([np.cumsum(b[::-1])[::-1][1:], [0.0]])

    def objective(x: FloatArray) -> FloatArray:
        return np.log(before + x * a) + c * np.log(after + (1.0 - x) * b)

    m = u1.m
    fractions, values = golden_section_maximize(objective, np.zeros(m), np.ones(m), tol=GOLDEN_TOL)
    split = int(np.argmax(values))
    if not np.isfinite(values[split]):
        raise InvalidInputError("weighted product is zero for every split; an agent values nothing")

    sorted_share = np.zeros(m)
    sorted_share[:split] = 1.0
    sorted_share[split] = fractions[split]
    agent_1 = np.empty(m)
    agent_1[order] = sorted_share
    base = Allocation.from_rows(agent_1, 1.0 - agent_1)

    own, other = base.utilities(u1, u2)
    w_value = own * other**c
    scaled = Allocation.from_rows(base.shares[0] * other**c, base.shares[1] * own ** (1.0 / c))
    return PAResult(base_allocation=base, w_value=w_value, scaled_allocation=scaled, c=c)


def pa_mechanism(c: float) -> MechanismHandle:
    """Partial Allocation mechanism PA_c"""
    c = _check_exponent(c)

    def evaluator(bid_1: UtilityVector, bid_2: UtilityVector) -> Allocation:
        return solve_weighted_product(bid_1, bid_2, c).scaled_allocation

    return MechanismHandle(evaluator=evaluator, label=f"pa:{c:g}")


def _even_split(m: int) -> Allocation:
    return Allocation(np.full((2, m), 0.5))


def pa_max_mechanism() -> MechanismHandle:
    """PA_1 or the even split, whichever has the higher welfare under the bids (even split on ties)"""

    def evaluator(bid_1: UtilityVector, bid_2: UtilityVector) -> Allocation:
        result = solve_weighted_product(bid_1, bid_2, 1.0)
        if sum(result.scaled_allocation.utilities(bid_1, bid_2)) > 1.0:
            return result.scaled_allocation
        return _even_split(bid_1.m)

    return MechanismHandle(evaluator=evaluator, label="pa-max")


def averaged_pa_mechanism(
    c: float = AVERAGED_PA_C, weights: tuple[float, float, float] = AVERAGED_PA_WEIGHTS
) -> MechanismHandle:
    """w1 * PA_c + w2 * PA_(1/c) + w3 * PA_max, by default the 0.67776-competitive average"""
    c = _check_exponent(c)
    return average_mechanisms(
        [(weights[0], pa_mechanism(c)), (weights[1], pa_mechanism(1.0 / c)), (weights[2], pa_max_mechanism())],
        label="pa-avg" if (c, weights) == (AVERAGED_PA_C, AVERAGED_PA_WEIGHTS) else "",
    )


def segment_bounds(r1: ArrayLike, r2: ArrayLike, c: float) -> FloatArray:
    """
    Vectorised max of x * y^c along the segments from (1, 0) and from (0, 1) to
    each first-best point (r1, r2)
    """
    u1, u2 = np.broadcast_arrays(np.asarray(r1, dtype=float), np.asarray(r2, dtype=float))

    def from_right(s: FloatArray) -> FloatArray:
        return np.log(1.0 + s * (u1 - 1.0)) + c * np.log(s * u2)

    def from_top(s: FloatArray) -> FloatArray:
        return np.log(s * u1) + c * np.log(1.0 + s * (u2 - 1.0))

    zeros, ones = np.zeros(u1.shape), np.ones(u1.shape)
    _, right = golden_section_maximize(from_right, zeros, ones, tol=GOLDEN_TOL)
    _, top = golden_section_maximize(from_top, zeros, ones, tol=GOLDEN_TOL)
    return np.exp(np.maximum(right, top))


def aur_segment_bound(u_star: UtilityPoint, c: float) -> float:
    """
    Lower bound on W from the two segments inside the attainable region
        :param u_star: first-best utility pair, 1 <= r1 + r2 <= 2
        :param c: PA exponent
    """
    c = _check_exponent(c)
    total = u_star.r1 + u_star.r2
    if total < 1.0 - REGION_TOL or total > 2.0 + REGION_TOL:
        raise InvalidInputError(f"first-best point must satisfy 1 <= r1 + r2 <= 2, got {total}")
    return float(segment_bounds(u_star.r1, u_star.r2, c).reshape(-1)[0])


def _ratio_bounds(
    u1: FloatArray, u2: FloatArray, c: float, weights: tuple[float, float, float]
) -> FloatArray:
    w_c = segment_bounds(u1, u2, c)
    w_inverse = segment_bounds(u1, u2, 1.0 / c)
    w_one = segment_bounds(u1, u2, 1.0)
    combined = (
        weights[0] * (w_c + w_c ** (1.0 / c))
        + weights[1] * (w_inverse + w_inverse**c)
        + weights[2] * np.maximum(2.0 * w_one, 1.0)
    )
    return combined / (u1 + u2)


def pa_ratio_certificate(
    c: float = AVERAGED_PA_C,
    weights: tuple[float, float, float] = AVERAGED_PA_WEIGHTS,
    grid_step: float = 1 / 200,
    workers: int = 1,
    csv_path: str | Path | None = None,
) -> PARatioCertificate:
    """
    Lower-bounds the competitive ratio of the weighted PA average over every
    first-best point on a grid, then corrects the minimum for off-grid points
        :param c: PA exponent of the first part (the second part uses 1/c)
        :param weights: weights of PA_c, PA_(1/c) and PA_max
        :param grid_step: spacing; 1 / grid_step must be an integer
        :param workers: threads sharing the grid rows
        :param csv_path: optional dump of (u1*, u2*, bound) rows
    """
    c = _check_exponent(c)
    steps = round(1.0 / grid_step)
    if steps < 1 or abs(steps * grid_step - 1.0) > 1e-9:
        raise InvalidInputError(f"grid step {grid_step} does not divide [0, 1]")
    if abs(math.fsum(weights) - 1.0) > 1e-12 or min(weights) <= 0.0:
        raise InvalidInputError(f"weights must be positive and sum to 1: {weights}")

    rows = np.array_split(np.arange(steps + 1), max(1, workers))

    def certify(indices: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        i, j = np.meshgrid(indices, np.arange(steps + 1), indexing="ij")
        keep = i + j >= steps
        u1, u2 = i[keep] / steps, j[keep] / steps
        return u1, u2, _ratio_bounds(u1, u2, c, weights)

    logger.debug(f"Certifying PA average on a 1/{steps} grid with {workers} worker(s)")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(certify, [chunk for chunk in rows if chunk.size]))
    else:
        parts = [certify(chunk) for chunk in rows if chunk.size]

    u1 = np.concatenate([part[0] for part in parts])
    u2 = np.concatenate([part[1] for part in parts])
    bounds = np.concatenate([part[2] for part in parts])
    worst = int(np.argmin(bounds))
    grid_minimum = float(bounds[worst])
    certificate = PARatioCertificate(
        grid_minimum=grid_minimum,
        corrected_bound=grid_minimum * (1.0 - 2.0 * grid_step),
        argmin=(float(u1[worst]), float(u2[worst])),
        grid_step=grid_step,
        points=int(bounds.size),
    )
    if csv_path is not None:
        np.savetxt(
            csv_path, np.column_stack([u1, u2, bounds]), fmt="%.12g", delimiter=",", header=CERTIFICATE_HEADER,
            comments="",
        )
        logger.debug(f"Wrote {bounds.size} certificate rows to {csv_path}")
    logger.info(
        f"PA grid minimum {grid_minimum:.6f} at {certificate.argmin}, corrected {certificate.corrected_bound:.6f}"
    )
    return certificate
