import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from dotenv import dotenv_values
from loguru import logger
from numpy.typing import ArrayLike

from .core import Allocation, FloatArray, MechanismHandle, SymmetricFn, UtilityVector
from .errors import CouplingError, InvalidInputError
from .piecewise import AffinePiece, ConstantPiece, LogReciprocalPiece, PiecewiseFunction

FIVE_SIXTHS_BREAKPOINTS = (0.2, 0.8)
COUPLING_TOL = 1e-8
ENDPOINT_TOL = 1e-12
QR_HEADER = "t,q,r"
TIE_TOL = 1e-9


@dataclass(frozen=True)
class SymmetricTwoItemMechanism:
    """
    Two-item mechanism described by the single function A(b1, b2)

    Attributes:
        a_fn: (callable) vectorised fraction of item 1 given to an agent bidding b1
                against an opponent bidding b2
        label: (str) identifier used in reports
        breakpoints: (tuple) points in (0, 1) where A may fail to be differentiable in b1
        full: (bool) whether every item is always allocated completely

    Agent 1 receives A(b1, b2) of item 1 and A(1 - b1, 1 - b2) of item 2;
    agent 2 receives A(b2, b1) and A(1 - b2, 1 - b1).
    """

    a_fn: SymmetricFn
    label: str
    breakpoints: tuple[float, ...] = ()
    full: bool = False

    def __call__(self, b1: ArrayLike, b2: ArrayLike) -> FloatArray:
        return self.a_fn(b1, b2)

    def allocation(self, b1: float, b2: float) -> Allocation:
        values = np.asarray(self.a_fn(np.array([b1, 1.0 - b1, b2, 1.0 - b2]), np.array([b2, 1.0 - b2, b1, 1.0 - b1])))
        return Allocation(values.reshape(2, 2))

    def handle(self) -> MechanismHandle:
        """Wraps the mechanism for the multi-item interfaces (two items only)"""

        def evaluator(bid_1: UtilityVector, bid_2: UtilityVector) -> Allocation:
            if bid_1.m != 2:
                raise InvalidInputError(f"{self.label} is a two-item mechanism, got {bid_1.m} items")
            return self.allocation(bid_1[0], bid_2[0])

        return MechanismHandle(evaluator=evaluator, label=self.label, symmetric_fn=self.a_fn)


def _check_unit(name: str, values: FloatArray) -> None:
    if np.any(values < 0.0) or np.any(values > 1.0) or np.any(np.isnan(values)):
        raise InvalidInputError(f"{name} must lie in [0, 1]")


def _shape_like(out: FloatArray, *inputs: ArrayLike) -> float | FloatArray:
    if all(np.ndim(value) == 0 for value in inputs):
        return float(np.asarray(out).reshape(-1)[0])
    return out


@lru_cache(maxsize=None)
def five_sixths_f() -> PiecewiseFunction:
    """The four-piece increasing function behind the 5/6-competitive mechanism"""
    return PiecewiseFunction.build(
        [
            (0.0, 0.2, ConstantPiece(0.0)),
            (0.2, 0.5, LogReciprocalPiece(a=5.0 / 6.0, b=-1.0 / 6.0, c=-1.0 / 6.0, d=5.0)),
            (0.5, 0.8, LogReciprocalPiece(a=0.5, c=-1.0 / 6.0, d=5.0, reflect=True)),
            (0.8, 1.0, ConstantPiece(0.5)),
        ]
    )


def f_five_sixths(t: ArrayLike) -> float | FloatArray:
    """
    0 on [0, 1/5], 5/6 - 1/(6t) - ln(5t)/6 on [1/5, 1/2],
    1/2 - ln(5(1 - t))/6 on [1/2, 4/5] and 1/2 on [4/5, 1]
    """
    values = np.asarray(t, dtype=float)
    _check_unit("t", values)
    return five_sixths_f()(values)


def five_sixths_mechanism() -> SymmetricTwoItemMechanism:
    """A(b1, b2) = f(b1) - f(b2) + 1/2, a full mechanism"""
    f = five_sixths_f()

    def a_fn(b1: ArrayLike, b2: ArrayLike) -> FloatArray:
        first, second = np.asarray(b1, dtype=float), np.asarray(b2, dtype=float)
        _check_unit("bid", first)
        _check_unit("bid", second)
        return _shape_like(np.asarray(f(first)) - np.asarray(f(second)) + 0.5, b1, b2)  # type: ignore[return-value]

    return SymmetricTwoItemMechanism(
        a_fn=a_fn, label="five-sixths", breakpoints=FIVE_SIXTHS_BREAKPOINTS, full=True
    )


def constant_mechanism(value: float = 0.5) -> SymmetricTwoItemMechanism:
    """Hands out the same fraction of both items whatever the bids"""
    if not 0.0 <= value <= 0.5:
        raise InvalidInputError(f"a constant allocation must lie in [0, 1/2], got {value}")

    def a_fn(b1: ArrayLike, b2: ArrayLike) -> FloatArray:
        shape = np.broadcast(np.asarray(b1), np.asarray(b2)).shape
        return _shape_like(np.full(shape, value), b1, b2)  # type: ignore[return-value]

    return SymmetricTwoItemMechanism(a_fn=a_fn, label=f"constant({value:g})", full=value == 0.5)


def first_best_symmetric() -> SymmetricTwoItemMechanism:
    """Each item to the higher bidder, split on ties. Not strategyproof."""

    def a_fn(b1: ArrayLike, b2: ArrayLike) -> FloatArray:
        first, second = np.asarray(b1, dtype=float), np.asarray(b2, dtype=float)
        return _shape_like(np.where(first > second, 1.0, np.where(first < second, 0.0, 0.5)), b1, b2)  # type: ignore[return-value]

    return SymmetricTwoItemMechanism(a_fn=a_fn, label="first-best-symmetric", full=True)


def identity_mechanism() -> SymmetricTwoItemMechanism:
    """A(b1, b2) = b1. Only meant for derivative checks; it over-allocates for large bids."""

    def a_fn(b1: ArrayLike, b2: ArrayLike) -> FloatArray:
        out = np.asarray(b1, dtype=float) + 0.0 * np.asarray(b2, dtype=float)
        return _shape_like(out, b1, b2)  # type: ignore[return-value]

    return SymmetricTwoItemMechanism(a_fn=a_fn, label="identity")


def u_hat(mech: SymmetricTwoItemMechanism, b1: ArrayLike, b2: ArrayLike) -> float | FloatArray:
    """
    Truthful utility of agent 1 with type b1 against bid b2
        :param mech: two-item mechanism
        :param b1: own type, in [0, 1]
        :param b2: opponent's bid, in [0, 1]
    Returns b1 * A(b1, b2) + (1 - b1) * A(1 - b1, 1 - b2)
    """
    first, second = np.asarray(b1, dtype=float), np.asarray(b2, dtype=float)
    _check_unit("b1", first)
    _check_unit("b2", second)
    out = first * np.asarray(mech(first, second)) + (1.0 - first) * np.asarray(mech(1.0 - first, 1.0 - second))
    return _shape_like(out, b1, b2)


def symmetric_social_welfare(f: PiecewiseFunction, t1: ArrayLike, t2: ArrayLike) -> float | FloatArray:
    """Truthful welfare of A = f(b1) - f(b2) + 1/2 in closed form"""
    first, second = np.asarray(t1, dtype=float), np.asarray(t2, dtype=float)
    bracket = np.asarray(f(first)) - np.asarray(f(second)) - np.asarray(f(1.0 - first)) + np.asarray(f(1.0 - second))
    return _shape_like(1.0 + (first - second) * bracket, t1, t2)


def natural_partial_pair() -> tuple[PiecewiseFunction, PiecewiseFunction]:
    """f1(t) = t on [0, 1/2] and its coupled partner f2(t) = ln(2t) - t + 1/2 on [1/2, 1]"""
    f1 = PiecewiseFunction.build([(0.0, 0.5, AffinePiece(0.0, 1.0))])
    f2 = PiecewiseFunction.build([(0.5, 1.0, LogReciprocalPiece(a=0.5, c=1.0, d=2.0, e=-1.0))])
    return f1, f2


def grid_index(t: ArrayLike, n: int) -> FloatArray:
    """
    Index of the nearest multiple of 1/n. Halfway points round toward 1/2, so the
    index of 1 - t is n minus the index of t (except t = 1/2 with n odd).
    """
    scaled = np.asarray(t, dtype=float) * n
    below = np.floor(scaled)
    tie = np.abs(scaled - below - 0.5) <= TIE_TOL
    toward_half = np.where(scaled < n / 2.0, below + 1.0, below)
    return np.clip(np.where(tie, toward_half, np.floor(scaled + 0.5)), 0, n).astype(int)


def round_to_grid(t: ArrayLike, n: int) -> float | FloatArray:
    return _shape_like(grid_index(t, n) / n, t)


@dataclass(frozen=True)
class QRTables:
    """
    Solved Q/R coefficients for the partial family

    Attributes:
        n: (int) grid resolution; tables hold values at k / n for k = 0..n
        q_values: (tuple) Q at the grid points, all >= 0
        r_values: (tuple) R at the grid points, all >= 0
        delta: (float) feasibility headroom the LP was solved with
        lam: (float) certified LP objective
    """

    n: int
    q_values: tuple[float, ...]
    r_values: tuple[float, ...]
    delta: float
    lam: float

    def __post_init__(self) -> None:
        if self.n < 2:
            raise InvalidInputError(f"grid resolution must be at least 2, got {self.n}")
        q_values = tuple(float(v) for v in self.q_values)
        r_values = tuple(float(v) for v in self.r_values)
        if len(q_values) != self.n + 1 or len(r_values) != self.n + 1:
            raise InvalidInputError(f"tables need {self.n + 1} entries for n={self.n}")
        if min(q_values) < 0.0 or min(r_values) < 0.0:
            raise InvalidInputError("Q and R values must be nonnegative")
        object.__setattr__(self, "q_values", q_values)
        object.__setattr__(self, "r_values", r_values)

    @property
    def max_q(self) -> float:
        return max(self.q_values)

    @staticmethod
    def meta_path(path: str | Path) -> Path:
        path = Path(path)
        return path.with_name(path.name + ".meta")

    def to_csv(self, path: str | Path) -> None:
        """Writes `t,q,r` rows plus a key=value sidecar holding n, delta and lambda"""
        grid = np.arange(self.n + 1) / self.n
        rows = np.column_stack([grid, self.q_values, self.r_values])
        np.savetxt(path, rows, fmt="%.17g", delimiter=",", header=QR_HEADER, comments="")
        self.meta_path(path).write_text(f"n={self.n}\ndelta={self.delta!r}\nlambda={self.lam!r}\n")
        logger.debug(f"Wrote Q/R tables for n={self.n} to {path}")

    @classmethod
    def from_csv(cls, path: str | Path) -> "QRTables":
        meta = dotenv_values(cls.meta_path(path))
        try:
            n = int(meta["n"] or "")
            delta = float(meta["delta"] or "")
            lam = float(meta["lambda"] or "")
        except (KeyError, ValueError) as err:
            raise InvalidInputError(f"unreadable Q/R metadata next to {path}") from err
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.shape != (n + 1, 3):
            raise InvalidInputError(f"expected {n + 1} rows of t,q,r in {path}, got {rows.shape}")
        if not np.allclose(rows[:, 0], np.arange(n + 1) / n, atol=1e-9):
            raise InvalidInputError(f"t column of {path} is not the 1/{n} grid")
        return cls(n=n, q_values=tuple(rows[:, 1]), r_values=tuple(rows[:, 2]), delta=delta, lam=lam)


def check_coupling(f1: PiecewiseFunction, f2: PiecewiseFunction, points: int = 1000) -> None:
    """
    Validates f1 on [0, 1/2] and f2 on [1/2, 1] for the partial family
        :param f1: first-branch function, f1(0) = 0
        :param f2: second-branch function, f2(1/2) = 0
        :param points: grid size for t * f1'(t) = (1 - t) * f2'(1 - t)
    """
    if abs(f1.domain[0]) > ENDPOINT_TOL or abs(f1.domain[1] - 0.5) > ENDPOINT_TOL:
        raise InvalidInputError(f"f1 must be defined on [0, 1/2], got {f1.domain}")
    if abs(f2.domain[0] - 0.5) > ENDPOINT_TOL or abs(f2.domain[1] - 1.0) > ENDPOINT_TOL:
        raise InvalidInputError(f"f2 must be defined on [1/2, 1], got {f2.domain}")
    if abs(f1(0.0)) > ENDPOINT_TOL or abs(f2(0.5)) > ENDPOINT_TOL:
        raise InvalidInputError("the partial family needs f1(0) = 0 and f2(1/2) = 0")
    grid = np.linspace(0.0, 0.5, points + 1)
    residual = np.abs(grid * np.asarray(f1.derivative(grid)) - (1.0 - grid) * np.asarray(f2.derivative(1.0 - grid)))
    worst = int(np.argmax(residual))
    if residual[worst] > COUPLING_TOL:
        raise CouplingError(float(grid[worst]), float(residual[worst]))


def partial_family_mechanism(
    f1: PiecewiseFunction, f2: PiecewiseFunction, qr: QRTables
) -> SymmetricTwoItemMechanism:
    """
    Rounded partial mechanism built from coupled (f1, f2) and solved Q/R tables
        :param f1: increasing function on [0, 1/2] with f1(0) = 0
        :param f2: increasing function on [1/2, 1] with f2(1/2) = 0
        :param qr: tables indexed by the opponent's bid rounded to the 1/n grid
    Returns A(b1, b2) = Q(b2~) f1(b1) + R(b2~) for b1 <= 1/2, and
    A(1/2, b2~) + Q(1 - b2~) f2(b1) above, where b2~ is b2 rounded to the grid
    """
    check_coupling(f1, f2)
    n = qr.n
    q = np.array(qr.q_values)
    r = np.array(qr.r_values)
    f1_half = float(f1(0.5))

    def a_fn(b1: ArrayLike, b2: ArrayLike) -> FloatArray:
        first, second = np.broadcast_arrays(np.asarray(b1, dtype=float), np.asarray(b2, dtype=float))
        _check_unit("bid", first)
        _check_unit("bid", second)
        k = grid_index(second, n)
        low = first <= 0.5
        lower = q[k] * np.asarray(f1(np.minimum(first, 0.5))) + r[k]
        upper = q[k] * f1_half + r[k] + q[n - k] * np.asarray(f2(np.maximum(first, 0.5)))
        return _shape_like(np.where(low, lower, upper), b1, b2)  # type: ignore[return-value]

    logger.debug(f"Built partial mechanism on n={n} with max Q {qr.max_q:.6f}")
    return SymmetricTwoItemMechanism(a_fn=a_fn, label=f"partial-qr(n={n})", breakpoints=(0.5,))


def rounding_headroom(qr: QRTables, derivative_bound: float = 1.0) -> float:
    """Largest off-grid overshoot of A(b1,b2) + A(b2,b1) over the grid values, per the Q bound"""
    return 2.0 * qr.max_q * derivative_bound / (2.0 * qr.n)


def ratio_floor(lam: float, n: int) -> float:
    """Competitive ratio guaranteed off the grid when the grid LP certifies lam"""
    if n < 1 or not math.isfinite(lam):
        raise InvalidInputError("need n >= 1 and a finite lambda")
    return lam - 1.0 / (2.0 * n)
