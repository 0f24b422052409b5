import math
from dataclasses import dataclass
from typing import Callable, ClassVar, Mapping

import numpy as np
from loguru import logger
from scipy.optimize import brentq

from .core import Allocation, FloatArray, MechanismHandle, UtilityVector
from .errors import InvalidInputError, ScheduleError
from .piecewise import ConstantPiece, InfinitePiece, Piece, PiecewiseFunction
from .two_item import five_sixths_f

BUDGET = 1.0
BUDGET_TOL = 1e-9
SCHEDULE_TOL = 1e-12
QUANTITY_TOL = 1e-12
RATE_RTOL = 1e-12

ScheduleBuilder = Callable[[UtilityVector], "PriceSchedule"]
# per item, the lowest and highest price level met at one spending rate
ExactLevels = Mapping[int, tuple[float, float]]


@dataclass(frozen=True)
class PriceSchedule:
    """
    Marginal prices one agent faces, set from the other agent's report

    Attributes:
        per_item: (tuple) one nondecreasing PiecewiseFunction on [0, 1] per item,
                giving the price of the next unit after y units are bought.
                Prices are >= 0 and may end in an infinite segment.
    """

    per_item: tuple[PiecewiseFunction, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_item", tuple(self.per_item))
        for item, price in enumerate(self.per_item):
            lo, hi = price.domain
            if abs(lo) > SCHEDULE_TOL or abs(hi - 1.0) > SCHEDULE_TOL:
                raise ScheduleError(f"price of item {item} must be defined on [0, 1], got {price.domain}")
            previous = 0.0
            for k, piece in enumerate(price.pieces):
                start, end = price.breakpoints[k], price.breakpoints[k + 1]
                first, last = piece.scalar(start), piece.scalar(end)
                if first < previous - SCHEDULE_TOL or last < first - SCHEDULE_TOL:
                    raise ScheduleError(f"price of item {item} decreases or is negative near y={start}")
                previous = last

    @property
    def m(self) -> int:
        return len(self.per_item)


@dataclass(frozen=True)
class Purchase:
    """
    Bundle bought with the unit budget

    Attributes:
        quantities: (tuple) units of each item, in [0, 1]
        spent: (float) virtual money used, at most 1 (within BUDGET_TOL)
    """

    quantities: tuple[float, ...]
    spent: float

    def __post_init__(self) -> None:
        quantities = tuple(float(q) for q in self.quantities)
        if any(q < -QUANTITY_TOL or q > 1.0 + QUANTITY_TOL for q in quantities):
            raise InvalidInputError(f"purchased quantities outside [0, 1]: {quantities}")
        if self.spent > BUDGET + BUDGET_TOL:
            raise InvalidInputError(f"purchase spends {self.spent!r}, over the unit budget")
        object.__setattr__(self, "quantities", quantities)

    def utility(self, u: UtilityVector) -> float:
        return u.value(self.quantities)


def cumulative_cost(sched: PriceSchedule, item: int, x: float) -> float:
    """
    Money needed for the first x units of an item
        :param sched: price schedule
        :param item: zero-based item index
        :param x: quantity in [0, 1]
    Returns the integral of the marginal price over [0, x]; inf once an infinite price is crossed
    """
    if not 0 <= item < sched.m:
        raise InvalidInputError(f"item {item} out of range for {sched.m} items")
    if not 0.0 <= x <= 1.0:
        raise InvalidInputError(f"quantity must lie in [0, 1], got {x}")
    return sched.per_item[item].integrate(0.0, x)


def _total_cost(sched: PriceSchedule, quantities: list[float]) -> float:
    return math.fsum(price.integrate(0.0, x) for price, x in zip(sched.per_item, quantities))


def optimal_purchase(u: UtilityVector, sched: PriceSchedule, budget: float = BUDGET) -> Purchase:
    """
    Utility-maximising bundle under nondecreasing marginal prices and a budget
        :param u: the buyer's utility vector
        :param sched: prices the buyer faces
        :param budget: virtual money available
    Free units are always taken. Paid units are bought in decreasing order of
    utility per unit price: the purchase is found at the rate where money runs
    out, with flat price segments at that rate filled in item order.
    Raises ScheduleError if the bundle found costs more than the budget.
    """
    if u.m != sched.m:
        raise InvalidInputError(f"utility has {u.m} items, schedule has {sched.m}")
    weights = u.entries

    def bundle(rate: float, strict: bool, exact: ExactLevels | None = None) -> list[float]:
        quantities = []
        for item, (price, weight) in enumerate(zip(sched.per_item, weights)):
            if weight <= 0.0:
                quantities.append(price.sup_below(0.0))
                continue
            level = weight / rate
            if exact and item in exact:
                level = exact[item][0] if strict else exact[item][1]
            quantities.append(price.sup_below(level, strict))
        return quantities

    everything = [
        price.sup_below(math.inf, strict=True) if weight > 0.0 else price.sup_below(0.0)
        for price, weight in zip(sched.per_item, weights)
    ]
    total = _total_cost(sched, everything)
    if total <= budget:
        return Purchase(tuple(everything), total)

    higher: float | None = None
    affordable: list[float] = []
    affordable_cost = 0.0
    for rate, exact in _spending_rates(sched, weights):
        reached = bundle(rate, strict=False, exact=exact)
        reached_cost = _total_cost(sched, reached)
        if reached_cost < budget:
            higher, affordable, affordable_cost = rate, reached, reached_cost
            continue
        short = bundle(rate, strict=True, exact=exact)
        short_cost = _total_cost(sched, short)
        if short_cost <= budget:
            return _fill_flat_segments(sched, short, reached, budget - short_cost)
        if higher is None:
            higher = _raise_rate(sched, bundle, rate, budget)
            affordable = bundle(higher, strict=False)
            affordable_cost = _total_cost(sched, affordable)

        # strictly between two rates every item sits between these two bundles
        def between(candidate: float, low: list[float] = affordable, high: list[float] = short) -> list[float]:
            return [min(max(q, lo), hi) for q, lo, hi in zip(bundle(candidate, strict=False), low, high)]

        def excess(
            candidate: float,
            floor: float = rate,
            floor_cost: float = short_cost,
            ceiling: float = higher,
            ceiling_cost: float = affordable_cost,
        ) -> float:
            if candidate <= floor:
                return floor_cost - budget
            if candidate >= ceiling:
                return ceiling_cost - budget
            return _total_cost(sched, between(candidate)) - budget

        root = brentq(excess, rate, higher, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        quantities = affordable if root >= higher else between(max(root, math.nextafter(rate, math.inf)))
        spent = _total_cost(sched, quantities)
        if spent > budget + BUDGET_TOL:
            raise ScheduleError(f"bundle {quantities} costs {spent!r}, over the budget {budget}")
        return Purchase(tuple(quantities), spent)
    raise ScheduleError("could not bracket the spending rate; prices have no finite positive level")


def _spending_rates(
    sched: PriceSchedule, weights: tuple[float, ...]
) -> list[tuple[float, dict[int, tuple[float, float]]]]:
    """
    Rates weight / level at which an item reaches one of its price levels, highest first.
    Each rate carries the exact (lowest, highest) level per item reaching it, so flat
    segments are tested against their own price and not a rounded quotient.
    """
    found = sorted(
        (
            (weight / level, item, level)
            for item, (price, weight) in enumerate(zip(sched.per_item, weights))
            if weight > 0.0
            for level in price.levels()
            if level > 0.0
        ),
        reverse=True,
    )
    rates: list[tuple[float, dict[int, tuple[float, float]]]] = []
    for rate, item, level in found:
        if not rates or not math.isclose(rate, rates[-1][0], rel_tol=RATE_RTOL):
            rates.append((rate, {}))
        exact = rates[-1][1]
        low, high = exact.get(item, (level, level))
        exact[item] = (min(low, level), max(high, level))
    return rates


def _raise_rate(
    sched: PriceSchedule, bundle: Callable[[float, bool], list[float]], rate: float, budget: float
) -> float:
    candidate = rate
    for _ in range(200):
        candidate *= 2.0
        if _total_cost(sched, bundle(candidate, False)) < budget:
            return candidate
    raise ScheduleError("free segments alone exceed the budget")


def _fill_flat_segments(
    sched: PriceSchedule, lower: list[float], upper: list[float], remaining: float
) -> Purchase:
    quantities = list(lower)
    for item, price in enumerate(sched.per_item):
        extra = upper[item] - lower[item]
        if extra <= 0.0 or remaining <= 0.0:
            continue
        cost = price.integrate(lower[item], upper[item])
        if cost <= remaining:
            quantities[item] = upper[item]
            remaining -= cost
        else:
            quantities[item] = lower[item] + extra * remaining / cost
            remaining = 0.0
    return Purchase(tuple(quantities), _total_cost(sched, quantities))


@dataclass(frozen=True)
class FiveSixthsPricePiece(Piece):
    """
    Rising segment C / g(y) - C of the five-sixths schedule, where z = g(y) in
    [1/5, 1/2] solves f(1 - z) + tau = y. On that range f(1 - z) = 1/2 - ln(5z) / 6,
    so g(y) = exp(3 - 6 (y - tau)) / 5.

    Attributes:
        scale: (float) the constant C
        tau: (float) length of the free segment
    """

    scale: float
    tau: float
    kind: ClassVar[str] = "five_sixths_price"

    def g(self, y: FloatArray) -> FloatArray:
        """Inverse of z -> f(1 - z) + tau on z in [1/5, 1/2]"""
        shifted = np.asarray(y, dtype=float) - self.tau
        return np.clip(np.exp(3.0 - 6.0 * shifted) / 5.0, 0.2, 0.5)

    def value(self, t: FloatArray) -> FloatArray:
        return self.scale / self.g(t) - self.scale

    def derivative(self, t: FloatArray) -> FloatArray:
        return 6.0 * self.scale / self.g(t)

    def antiderivative(self, t: FloatArray) -> FloatArray:
        z = self.g(t)
        return self.scale / 6.0 * (1.0 / z + np.log(z) - 2.0 + math.log(2.0))

    def sup_below(self, level: float, lo: float, hi: float, strict: bool) -> float:
        if (level > 4.0 * self.scale) if strict else (level >= 4.0 * self.scale):
            return hi
        if (level <= self.scale) if strict else (level < self.scale):
            return lo
        z = self.scale / (level + self.scale)
        return min(max(0.5 - math.log(5.0 * z) / 6.0 + self.tau, lo), hi)

    def levels(self, lo: float, hi: float) -> tuple[float, ...]:
        return self.scale, 4.0 * self.scale


def _five_sixths_item_price(t_opponent: float, scale: float) -> PiecewiseFunction:
    f = five_sixths_f()
    f_half = float(f(0.5))
    tau = 0.5 - float(f(t_opponent))
    flat_end, rising_end = f_half + tau, 0.5 + tau
    if not (0.0 <= tau <= flat_end <= rising_end <= 1.0 + SCHEDULE_TOL):
        raise ScheduleError(f"price pieces out of order for opponent bid {t_opponent}")
    return PiecewiseFunction.build(
        [
            (0.0, tau, ConstantPiece(0.0)),
            (tau, flat_end, ConstantPiece(scale)),
            (flat_end, rising_end, FiveSixthsPricePiece(scale=scale, tau=tau)),
            (rising_end, 1.0, InfinitePiece()),
        ]
    )


def five_sixths_price_schedule(t2: float) -> PriceSchedule:
    """
    Prices agent 1 faces when agent 2 bids (t2, 1 - t2)
        :param t2: opponent's weight on item 1, in [0, 1]
    Item 1 is free up to tau = 1/2 - f(t2), costs C up to f(1/2) + tau, then
    C / g(y) - C up to 1/2 + tau, and is unavailable beyond. Item 2 uses 1 - t2.
    C makes the whole finite part cost exactly one unit of money.
    """
    if not 0.0 <= t2 <= 1.0:
        raise InvalidInputError(f"opponent bid must lie in [0, 1], got {t2}")
    unit = _five_sixths_item_price(t2, 1.0)
    scale = 1.0 / unit.integrate(0.0, 1.0 - float(five_sixths_f()(t2)))
    return PriceSchedule((_five_sixths_item_price(t2, scale), _five_sixths_item_price(1.0 - t2, scale)))


def even_split_price_schedule(m: int = 2) -> PriceSchedule:
    """Half of every item is free and the rest is unavailable"""
    half = PiecewiseFunction.build([(0.0, 0.5, ConstantPiece(0.0)), (0.5, 1.0, InfinitePiece())])
    return PriceSchedule(tuple(half for _ in range(m)))


def dip_mechanism(builder: ScheduleBuilder, label: str) -> MechanismHandle:
    """
    Every agent buys her best bundle at prices built from the other agent's report
        :param builder: maps the opponent's bid to the schedule the agent faces
        :param label: identifier of the mechanism
    """

    def evaluator(bid_1: UtilityVector, bid_2: UtilityVector) -> Allocation:
        first = optimal_purchase(bid_1, builder(bid_2))
        second = optimal_purchase(bid_2, builder(bid_1))
        return Allocation.from_rows(first.quantities, second.quantities)

    return MechanismHandle(evaluator=evaluator, label=label)


def five_sixths_dip_mechanism() -> MechanismHandle:
    def builder(opponent: UtilityVector) -> PriceSchedule:
        if opponent.m != 2:
            raise InvalidInputError("the five-sixths schedule prices exactly two items")
        return five_sixths_price_schedule(opponent[0])

    logger.debug("Built the five-sixths mechanism as a dynamic-increasing-price mechanism")
    return dip_mechanism(builder, "dip-five-sixths")


def sample_prices(sched: PriceSchedule, points: int = 101) -> FloatArray:
    """Rows (y, price of item 1, ..., price of item m) on an even grid of [0, 1]"""
    if points < 2:
        raise InvalidInputError("need at least two sample points")
    grid = np.linspace(0.0, 1.0, points)
    return np.column_stack([grid] + [np.asarray(price(grid)) for price in sched.per_item])
