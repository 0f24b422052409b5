import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from loguru import logger
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import linprog

from .errors import InfeasibleAllocationError, InvalidInputError, SolverError

NORMALIZATION_TOL = 1e-12
FEASIBILITY_TOL = 1e-12
WEIGHT_TOL = 1e-12

FloatArray = NDArray[np.float64]
SymmetricFn = Callable[[ArrayLike, ArrayLike], FloatArray]


@dataclass(frozen=True)
class UtilityVector:
    """
    Normalised linear utility (or bid) vector of one agent

    Attributes:
        entries: (tuple) nonnegative weights, one per item, summing to 1

    Inputs off the simplex by more than NORMALIZATION_TOL are rejected, never renormalised.
    """

    entries: tuple[float, ...]

    def __post_init__(self) -> None:
        entries = tuple(float(entry) for entry in self.entries)
        if len(entries) < 2:
            raise InvalidInputError(f"need at least two items, got {len(entries)}")
        if any(not math.isfinite(entry) or entry < 0.0 for entry in entries):
            raise InvalidInputError(f"utility entries must be finite and >= 0: {entries}")
        total = math.fsum(entries)
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise InvalidInputError(f"utility entries sum to {total!r}, expected 1")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_t(cls, t: float) -> "UtilityVector":
        """
        Two-item vector (t, 1 - t)
            :param t: first entry, in [0, 1]
        """
        if not 0.0 <= t <= 1.0:
            raise InvalidInputError(f"two-item parameter must lie in [0, 1], got {t}")
        return cls((t, 1.0 - t))

    @classmethod
    def parse(cls, text: str) -> "UtilityVector":
        """Builds a vector from a comma separated string such as "0.99,0.01" """
        try:
            return cls(tuple(float(part) for part in text.split(",")))
        except ValueError as err:
            if isinstance(err, InvalidInputError):
                raise
            raise InvalidInputError(f"cannot parse utility vector {text!r}") from err

    @property
    def m(self) -> int:
        return len(self.entries)

    @property
    def array(self) -> FloatArray:
        return np.array(self.entries, dtype=float)

    def value(self, bundle: ArrayLike) -> float:
        return float(np.dot(self.array, np.asarray(bundle, dtype=float)))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[float]:
        return iter(self.entries)

    def __getitem__(self, index: int) -> float:
        return self.entries[index]


@dataclass(frozen=True, eq=False)
class Allocation:
    """
    Feasible 2 x m share matrix

    Attributes:
        shares: (ndarray) row 0 is agent 1's bundle, row 1 is agent 2's bundle.
                Every share lies in [0, 1] and every column sums to at most 1
                (both within FEASIBILITY_TOL). Stored read-only.
    """

    shares: FloatArray

    def __post_init__(self) -> None:
        shares = np.array(self.shares, dtype=float)
        if shares.ndim != 2 or shares.shape[0] != 2 or shares.shape[1] < 2:
            raise InvalidInputError(f"allocation must be 2 x m with m >= 2, got {shares.shape}")
        if not np.all(np.isfinite(shares)):
            raise InfeasibleAllocationError("allocation contains non-finite shares")
        if shares.min() < -FEASIBILITY_TOL or shares.max() > 1.0 + FEASIBILITY_TOL:
            raise InfeasibleAllocationError(f"shares outside [0, 1]: {shares.tolist()}")
        column_sums = shares.sum(axis=0)
        if np.any(column_sums > 1.0 + FEASIBILITY_TOL):
            item = int(np.argmax(column_sums))
            raise InfeasibleAllocationError(
                f"item {item} over-allocated: {column_sums[item]!r} > 1"
            )
        shares.setflags(write=False)
        object.__setattr__(self, "shares", shares)

    @classmethod
    def from_rows(cls, agent_1: ArrayLike, agent_2: ArrayLike) -> "Allocation":
        return cls(np.vstack([np.asarray(agent_1, dtype=float), np.asarray(agent_2, dtype=float)]))

    @property
    def m(self) -> int:
        return int(self.shares.shape[1])

    def bundle(self, agent: int) -> FloatArray:
        """Bundle of agent 1 or agent 2"""
        if agent not in (1, 2):
            raise InvalidInputError(f"agent must be 1 or 2, got {agent}")
        return self.shares[agent - 1]

    def utilities(self, u1: UtilityVector, u2: UtilityVector) -> tuple[float, float]:
        """Utilities the two agents attain from this allocation"""
        check_dimensions(self.m, u1, u2)
        return u1.value(self.shares[0]), u2.value(self.shares[1])

    def to_dict(self) -> dict[str, list[float]]:
        return {"agent_1": self.shares[0].tolist(), "agent_2": self.shares[1].tolist()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Allocation):
            return NotImplemented
        return bool(np.array_equal(self.shares, other.shares))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class MechanismHandle:
    """
    A deterministic two-agent mechanism at the multi-item level

    Attributes:
        evaluator: (callable) maps (bid_1, bid_2) to an Allocation
        label: (str) identifier used in reports and logs
        symmetric_fn: (callable, optional) vectorised A(b1, b2) when the mechanism is a
                symmetric two-item mechanism; verifiers use it for fast grids
    """

    evaluator: Callable[[UtilityVector, UtilityVector], Allocation]
    label: str
    symmetric_fn: SymmetricFn | None = None

    def __call__(self, bid_1: UtilityVector, bid_2: UtilityVector) -> Allocation:
        check_dimensions(bid_1.m, bid_1, bid_2)
        allocation = self.evaluator(bid_1, bid_2)
        if allocation.m != bid_1.m:
            raise InvalidInputError(
                f"{self.label} returned {allocation.m} items for {bid_1.m}-item bids"
            )
        return allocation


@dataclass(frozen=True)
class UtilityPoint:
    """
    Pair of attained utilities

    Attributes:
        r1: (float) utility of agent 1, in [0, 1]
        r2: (float) utility of agent 2, in [0, 1]
    """

    r1: float
    r2: float

    def __post_init__(self) -> None:
        for name in ("r1", "r2"):
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"{name}={value} outside [0, 1]")
            object.__setattr__(self, name, value)


def check_dimensions(m: int, *vectors: UtilityVector) -> None:
    for vector in vectors:
        if vector.m != m:
            raise InvalidInputError(f"dimension mismatch: expected {m} items, got {vector.m}")


def social_welfare(mech: MechanismHandle, u1: UtilityVector, u2: UtilityVector) -> float:
    """
    Social welfare when both agents bid truthfully
        :param mech: the mechanism to run
        :param u1: agent 1's utility vector, also used as her bid
        :param u2: agent 2's utility vector, also used as her bid
    Returns u1 . A_1 + u2 . A_2, a value in [0, 2]
    """
    r1, r2 = mech(u1, u2).utilities(u1, u2)
    return r1 + r2


def first_best(u1: UtilityVector, u2: UtilityVector) -> tuple[float, Allocation]:
    """
    Welfare-maximising allocation: each item goes wholly to the agent valuing it more
        :param u1: agent 1's utility vector
        :param u2: agent 2's utility vector
    Returns (SW_OPT, allocation). Ties go to agent 1; the value does not depend on that
    choice but the allocation does.
    """
    check_dimensions(u1.m, u1, u2)
    first, second = u1.array, u2.array
    to_agent_1 = first >= second
    shares = np.vstack([to_agent_1, ~to_agent_1]).astype(float)
    return float(np.maximum(first, second).sum()), Allocation(shares)


def competitive_ratio_at(mech: MechanismHandle, u1: UtilityVector, u2: UtilityVector) -> float:
    """Truthful social welfare over SW_OPT at one bid pair (SW_OPT >= 1 for normalised inputs)"""
    optimum, _ = first_best(u1, u2)
    return social_welfare(mech, u1, u2) / optimum


def average_mechanisms(
    parts: Sequence[tuple[float, MechanismHandle]], label: str = ""
) -> MechanismHandle:
    """
    Share-wise weighted average of mechanisms
        :param parts: (weight, mechanism) pairs; weights positive and summing to 1
        :param label: optional label for the combined mechanism
    Returns a mechanism whose allocation is the convex combination of the parts'
    """
    if not parts:
        raise InvalidInputError("cannot average an empty list of mechanisms")
    weights = [float(weight) for weight, _ in parts]
    if any(not weight > 0.0 for weight in weights):
        raise InvalidInputError(f"weights must be positive: {weights}")
    total = math.fsum(weights)
    if abs(total - 1.0) > WEIGHT_TOL:
        raise InvalidInputError(f"weights sum to {total!r}, expected 1")
    mechanisms = [mech for _, mech in parts]

    def evaluator(bid_1: UtilityVector, bid_2: UtilityVector) -> Allocation:
        shares = sum(
            (weight * mech(bid_1, bid_2).shares for weight, mech in zip(weights, mechanisms)),
            np.zeros((2, bid_1.m)),
        )
        return Allocation(shares)

    symmetric_fn: SymmetricFn | None = None
    if all(mech.symmetric_fn is not None for mech in mechanisms):
        functions = [mech.symmetric_fn for mech in mechanisms]

        def averaged_fn(b1: ArrayLike, b2: ArrayLike) -> FloatArray:
            return sum(  # type: ignore[return-value]
                weight * fn(b1, b2) for weight, fn in zip(weights, functions)  # type: ignore[misc]
            )

        symmetric_fn = averaged_fn

    if not label:
        label = "avg(" + ", ".join(f"{w:g}*{m.label}" for w, m in zip(weights, mechanisms)) + ")"
    logger.debug(f"Averaging {len(parts)} mechanisms into {label}")
    return MechanismHandle(evaluator=evaluator, label=label, symmetric_fn=symmetric_fn)


def even_split_mechanism() -> MechanismHandle:
    """Splits every item evenly, whatever the bids"""

    def evaluator(bid_1: UtilityVector, bid_2: UtilityVector) -> Allocation:
        return Allocation(np.full((2, bid_1.m), 0.5))

    def half(b1: ArrayLike, b2: ArrayLike) -> FloatArray:
        return np.full(np.broadcast(np.asarray(b1), np.asarray(b2)).shape, 0.5)

    return MechanismHandle(evaluator=evaluator, label="even-split", symmetric_fn=half)


def first_best_mechanism() -> MechanismHandle:
    """First-best allocation of the bids (ties to agent 1). Not strategyproof."""

    def evaluator(bid_1: UtilityVector, bid_2: UtilityVector) -> Allocation:
        return first_best(bid_1, bid_2)[1]

    return MechanismHandle(evaluator=evaluator, label="first-best")


def _pareto_corner(u1: UtilityVector, u2: UtilityVector) -> tuple[float, float]:
    # agent 1 takes the item she values most relative to agent 2; u2j == 0 sorts first
    first, second = u1.array, u2.array
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(second > 0.0, first / np.where(second > 0.0, second, 1.0), np.inf)
    best = int(np.argmax(ratios))
    other = 1 - best
    return float(first[best]), float(second[other])


def _aur_contains_two_items(
    u1: UtilityVector, u2: UtilityVector, point: UtilityPoint, tol: float
) -> bool:
    corner_r1, corner_r2 = _pareto_corner(u1, u2)
    r1, r2 = point.r1, point.r2
    if r1 <= corner_r1 and corner_r1 > 0.0:
        frontier = 1.0 - (1.0 - corner_r2) * (r1 / corner_r1)
    elif corner_r1 < 1.0:
        frontier = corner_r2 * (1.0 - r1) / (1.0 - corner_r1)
    else:
        frontier = corner_r2
    return r2 <= frontier + tol


def _aur_contains_lp(u1: UtilityVector, u2: UtilityVector, point: UtilityPoint, tol: float) -> bool:
    m = u1.m
    zeros = np.zeros(m)
    capacity = np.hstack([np.eye(m), np.eye(m)])
    utility_rows = np.vstack(
        [
            np.hstack([u1.array, zeros]),
            -np.hstack([u1.array, zeros]),
            np.hstack([zeros, u2.array]),
            -np.hstack([zeros, u2.array]),
        ]
    )
    a_ub = np.vstack([capacity, utility_rows])
    b_ub = np.concatenate(
        [np.ones(m), [point.r1 + tol, -(point.r1 - tol), point.r2 + tol, -(point.r2 - tol)]]
    )
    res = linprog(np.zeros(2 * m), A_ub=a_ub, b_ub=b_ub, bounds=[(0.0, 1.0)] * (2 * m), method="highs")
    if res.status == 0:
        return True
    if res.status == 2:
        return False
    raise SolverError(f"AUR feasibility LP ended with status {res.status}: {res.message}")


def aur_contains(
    u1: UtilityVector,
    u2: UtilityVector,
    point: UtilityPoint,
    tol: float = 1e-9,
    method: str = "auto",
) -> bool:
    """
    Whether some feasible allocation attains the utility pair
        :param u1: agent 1's utility vector
        :param u2: agent 2's utility vector
        :param point: candidate (r1, r2)
        :param tol: slack allowed on both utilities
        :param method: "auto", "closed_form" (two items only) or "lp"
    Returns True when point is in the attainable utility region, within tol
    """
    check_dimensions(u1.m, u1, u2)
    if method == "auto":
        method = "closed_form" if u1.m == 2 else "lp"
    if method == "closed_form":
        if u1.m != 2:
            raise InvalidInputError("the closed-form region test needs exactly two items")
        return _aur_contains_two_items(u1, u2, point, tol)
    if method == "lp":
        return _aur_contains_lp(u1, u2, point, tol)
    raise InvalidInputError(f"unknown AUR method {method!r}")
