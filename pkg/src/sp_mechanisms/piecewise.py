import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.integrate import quad
from scipy.optimize import brentq

from .core import FloatArray
from .errors import InvalidInputError

DOMAIN_TOL = 1e-12
DERIVATIVE_STEP = 1e-7

ScalarFn = Callable[[FloatArray], FloatArray]


class Piece(ABC):
    """
    One closed-form segment of a PiecewiseFunction

    Subclasses give the value on an array of arguments; the derivative, the
    antiderivative and the level-set search have generic fallbacks (central
    differences, scipy quad and brentq) that closed forms override.
    """

    kind: ClassVar[str] = "piece"
    infinite: ClassVar[bool] = False

    @abstractmethod
    def value(self, t: FloatArray) -> FloatArray:
        ...

    def scalar(self, t: float) -> float:
        return float(self.value(np.array([t], dtype=float))[0])

    def derivative(self, t: FloatArray) -> FloatArray:
        return (self.value(t + DERIVATIVE_STEP) - self.value(t - DERIVATIVE_STEP)) / (2 * DERIVATIVE_STEP)

    def antiderivative(self, t: FloatArray) -> FloatArray | None:
        return None

    def integral(self, lo: float, hi: float) -> float:
        closed = self.antiderivative(np.array([lo, hi], dtype=float))
        if closed is not None:
            return float(closed[1] - closed[0])
        area, _ = quad(self.scalar, lo, hi, epsabs=1e-12, epsrel=1e-10, limit=200)
        return float(area)

    def sup_below(self, level: float, lo: float, hi: float, strict: bool) -> float:
        """
        Largest argument in [lo, hi] whose value stays under level, assuming the
        piece is nondecreasing
            :param level: price or value threshold
            :param lo: left end of the piece
            :param hi: right end of the piece
            :param strict: use < instead of <=
        """
        if _accepts(self.scalar(hi), level, strict):
            return hi
        if not _accepts(self.scalar(lo), level, strict):
            return lo
        return self.solve_level(level, lo, hi)

    def solve_level(self, level: float, lo: float, hi: float) -> float:
        return float(brentq(lambda s: self.scalar(s) - level, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))

    def levels(self, lo: float, hi: float) -> tuple[float, ...]:
        """Values at which the piece can sit flat or start, used as candidate price levels"""
        return self.scalar(lo), self.scalar(hi)


def _accepts(value: float, level: float, strict: bool) -> bool:
    return value < level if strict else value <= level


@dataclass(frozen=True)
class ConstantPiece(Piece):
    constant: float
    kind: ClassVar[str] = "constant"

    def value(self, t: FloatArray) -> FloatArray:
        return np.full(np.shape(t), self.constant, dtype=float)

    def derivative(self, t: FloatArray) -> FloatArray:
        return np.zeros(np.shape(t))

    def antiderivative(self, t: FloatArray) -> FloatArray:
        return self.constant * np.asarray(t, dtype=float)

    def sup_below(self, level: float, lo: float, hi: float, strict: bool) -> float:
        return hi if _accepts(self.constant, level, strict) else lo

    def levels(self, lo: float, hi: float) -> tuple[float, ...]:
        return (self.constant,)


@dataclass(frozen=True)
class AffinePiece(Piece):
    intercept: float
    slope: float
    kind: ClassVar[str] = "affine"

    def value(self, t: FloatArray) -> FloatArray:
        return self.intercept + self.slope * np.asarray(t, dtype=float)

    def derivative(self, t: FloatArray) -> FloatArray:
        return np.full(np.shape(t), self.slope, dtype=float)

    def antiderivative(self, t: FloatArray) -> FloatArray:
        t = np.asarray(t, dtype=float)
        return self.intercept * t + 0.5 * self.slope * t * t

    def solve_level(self, level: float, lo: float, hi: float) -> float:
        return min(max((level - self.intercept) / self.slope, lo), hi)


@dataclass(frozen=True)
class LogReciprocalPiece(Piece):
    """
    a + b / s + c * ln(d * s) + e * s with s = t, or s = 1 - t when reflect is set

    Covers every piece of the five-sixths allocation function and the natural
    partial pair. s must stay positive on the piece's interval.
    """

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    d: float = 1.0
    e: float = 0.0
    reflect: bool = False
    kind: ClassVar[str] = "log_reciprocal"

    def _s(self, t: FloatArray) -> FloatArray:
        t = np.asarray(t, dtype=float)
        return 1.0 - t if self.reflect else t

    def value(self, t: FloatArray) -> FloatArray:
        s = self._s(t)
        with np.errstate(divide="ignore"):
            out = self.a + self.e * s
            if self.b:
                out = out + self.b / s
            if self.c:
                out = out + self.c * np.log(self.d * s)
        return out

    def derivative(self, t: FloatArray) -> FloatArray:
        s = self._s(t)
        ds = -self.b / (s * s) + self.c / s + self.e
        return -ds if self.reflect else ds

    def _primitive(self, s: FloatArray) -> FloatArray:
        out = self.a * s + 0.5 * self.e * s * s
        if self.b:
            out = out + self.b * np.log(s)
        if self.c:
            out = out + self.c * (s * np.log(self.d * s) - s)
        return out

    def antiderivative(self, t: FloatArray) -> FloatArray:
        primitive = self._primitive(self._s(t))
        return -primitive if self.reflect else primitive


@dataclass(frozen=True)
class TablePiece(Piece):
    """Linear interpolation through (xs, ys); xs strictly increasing, ys nondecreasing"""

    xs: tuple[float, ...]
    ys: tuple[float, ...]
    kind: ClassVar[str] = "table"

    def __post_init__(self) -> None:
        if len(self.xs) != len(self.ys) or len(self.xs) < 2:
            raise InvalidInputError("table piece needs matching xs/ys with at least two knots")
        if np.any(np.diff(self.xs) <= 0.0):
            raise InvalidInputError("table knots must be strictly increasing")

    def value(self, t: FloatArray) -> FloatArray:
        return np.interp(t, self.xs, self.ys)

    def derivative(self, t: FloatArray) -> FloatArray:
        xs, ys = np.asarray(self.xs), np.asarray(self.ys)
        slopes = np.diff(ys) / np.diff(xs)
        index = np.clip(np.searchsorted(xs, t, side="left") - 1, 0, len(slopes) - 1)
        return slopes[index]

    def antiderivative(self, t: FloatArray) -> FloatArray:
        xs, ys = np.asarray(self.xs), np.asarray(self.ys)
        cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs))])
        t = np.clip(np.asarray(t, dtype=float), xs[0], xs[-1])
        index = np.clip(np.searchsorted(xs, t, side="right") - 1, 0, len(xs) - 2)
        width = t - xs[index]
        return cumulative[index] + 0.5 * (ys[index] + np.interp(t, xs, ys)) * width

    def sup_below(self, level: float, lo: float, hi: float, strict: bool) -> float:
        xs, ys = np.asarray(self.xs), np.asarray(self.ys)
        if strict:
            k = int(np.searchsorted(ys, level, side="left"))
            if k == 0:
                return lo
            if k == len(ys):
                return hi
            k -= 1
        else:
            k = int(np.searchsorted(ys, level, side="right")) - 1
            if k < 0:
                return lo
            if k == len(ys) - 1:
                return hi
        point = xs[k] + (level - ys[k]) / (ys[k + 1] - ys[k]) * (xs[k + 1] - xs[k])
        return float(min(max(point, lo), hi))

    def levels(self, lo: float, hi: float) -> tuple[float, ...]:
        return tuple(float(y) for y in self.ys)


@dataclass(frozen=True)
class InfinitePiece(Piece):
    """+inf sentinel: cost integrals over it short-circuit to inf"""

    kind: ClassVar[str] = "infinite"
    infinite: ClassVar[bool] = True

    def value(self, t: FloatArray) -> FloatArray:
        return np.full(np.shape(t), math.inf)

    def derivative(self, t: FloatArray) -> FloatArray:
        return np.zeros(np.shape(t))

    def integral(self, lo: float, hi: float) -> float:
        return math.inf if hi > lo else 0.0

    def sup_below(self, level: float, lo: float, hi: float, strict: bool) -> float:
        return lo

    def levels(self, lo: float, hi: float) -> tuple[float, ...]:
        return ()


@dataclass(frozen=True)
class CallablePiece(Piece):
    """
    Segment given by vectorised callables

    Attributes:
        fn: (callable) value on an array of arguments
        derivative_fn: (callable, optional) closed-form derivative
        antiderivative_fn: (callable, optional) closed-form antiderivative
        inverse_fn: (callable, optional) argument at which the value equals a level
    """

    fn: ScalarFn
    derivative_fn: ScalarFn | None = None
    antiderivative_fn: ScalarFn | None = None
    inverse_fn: Callable[[float], float] | None = None
    kind: ClassVar[str] = "callable"

    def value(self, t: FloatArray) -> FloatArray:
        return self.fn(np.asarray(t, dtype=float))

    def derivative(self, t: FloatArray) -> FloatArray:
        if self.derivative_fn is not None:
            return self.derivative_fn(np.asarray(t, dtype=float))
        return super().derivative(t)

    def antiderivative(self, t: FloatArray) -> FloatArray | None:
        if self.antiderivative_fn is None:
            return None
        return self.antiderivative_fn(np.asarray(t, dtype=float))

    def solve_level(self, level: float, lo: float, hi: float) -> float:
        if self.inverse_fn is None:
            return super().solve_level(level, lo, hi)
        return min(max(float(self.inverse_fn(level)), lo), hi)


@dataclass(frozen=True)
class PiecewiseFunction:
    """
    Scalar function on [breakpoints[0], breakpoints[-1]] made of closed-form pieces

    Attributes:
        breakpoints: (tuple) strictly increasing; piece k covers (b_k, b_k+1],
                and the first piece also owns its left end
        pieces: (tuple) one Piece per interval, so the pieces cover the domain without gaps
    """

    breakpoints: tuple[float, ...]
    pieces: tuple[Piece, ...]
    _array: FloatArray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        breakpoints = tuple(float(b) for b in self.breakpoints)
        if len(breakpoints) != len(self.pieces) + 1 or not self.pieces:
            raise InvalidInputError(
                f"{len(self.pieces)} pieces need {len(self.pieces) + 1} breakpoints, got {len(breakpoints)}"
            )
        if any(hi <= lo for lo, hi in zip(breakpoints, breakpoints[1:])):
            raise InvalidInputError(f"breakpoints must be strictly increasing: {breakpoints}")
        object.__setattr__(self, "breakpoints", breakpoints)
        object.__setattr__(self, "pieces", tuple(self.pieces))
        object.__setattr__(self, "_array", np.array(breakpoints))

    @classmethod
    def build(cls, segments: Sequence[tuple[float, float, Piece]]) -> "PiecewiseFunction":
        """
        Builds from contiguous (lo, hi, piece) triples, dropping zero-width segments
            :param segments: ordered segments; each hi must equal the next lo
        """
        kept = [(lo, hi, piece) for lo, hi, piece in segments if hi > lo]
        if not kept:
            raise InvalidInputError("piecewise function has no segment of positive width")
        for (_, hi, _), (lo, _, _) in zip(kept, kept[1:]):
            if abs(hi - lo) > DOMAIN_TOL:
                raise InvalidInputError(f"gap between segments at {hi} and {lo}")
        breakpoints = [kept[0][0]] + [hi for _, hi, _ in kept]
        return cls(tuple(breakpoints), tuple(piece for _, _, piece in kept))

    @property
    def domain(self) -> tuple[float, float]:
        return self.breakpoints[0], self.breakpoints[-1]

    def _prepare(self, t: ArrayLike) -> tuple[FloatArray, FloatArray]:
        values = np.asarray(t, dtype=float)
        lo, hi = self.domain
        if np.any(values < lo - DOMAIN_TOL) or np.any(values > hi + DOMAIN_TOL):
            raise InvalidInputError(f"argument outside [{lo}, {hi}]")
        flat = np.clip(np.atleast_1d(values).ravel(), lo, hi)
        index = np.clip(np.searchsorted(self._array, flat, side="left") - 1, 0, len(self.pieces) - 1)
        return flat, index

    def _apply(self, t: ArrayLike, method: str) -> float | FloatArray:
        shape = np.shape(t)
        flat, index = self._prepare(t)
        out = np.empty_like(flat)
        for k, piece in enumerate(self.pieces):
            mask = index == k
            if mask.any():
                out[mask] = getattr(piece, method)(flat[mask])
        if not shape:
            return float(out[0])
        return out.reshape(shape)

    def __call__(self, t: ArrayLike) -> float | FloatArray:
        return self._apply(t, "value")

    def derivative(self, t: ArrayLike) -> float | FloatArray:
        return self._apply(t, "derivative")

    def integrate(self, lo: float, hi: float) -> float:
        """
        Integral over [lo, hi]; closed form per piece where available, scipy quad otherwise
        Returns inf as soon as an infinite piece is crossed with positive width
        """
        domain_lo, domain_hi = self.domain
        if lo < domain_lo - DOMAIN_TOL or hi > domain_hi + DOMAIN_TOL or hi < lo:
            raise InvalidInputError(f"cannot integrate over [{lo}, {hi}] on [{domain_lo}, {domain_hi}]")
        total = 0.0
        for k, piece in enumerate(self.pieces):
            a = max(lo, self.breakpoints[k])
            b = min(hi, self.breakpoints[k + 1])
            if b <= a:
                continue
            area = piece.integral(a, b)
            if math.isinf(area):
                return math.inf
            total += area
        return total

    def sup_below(self, level: float, strict: bool = False) -> float:
        """
        Largest argument whose value is at most level (below level when strict),
        for a nondecreasing function. Returns the left end when no argument qualifies.
        """
        for k, piece in enumerate(self.pieces):
            lo, hi = self.breakpoints[k], self.breakpoints[k + 1]
            point = piece.sup_below(level, lo, hi, strict)
            if point < hi:
                return point
        return self.breakpoints[-1]

    def levels(self) -> tuple[float, ...]:
        """Sorted distinct finite values the function takes at knots"""
        found: set[float] = set()
        for k, piece in enumerate(self.pieces):
            found.update(
                v for v in piece.levels(self.breakpoints[k], self.breakpoints[k + 1]) if math.isfinite(v)
            )
        return tuple(sorted(found))

    def is_nondecreasing(self, samples: int = 10_000, tol: float = 1e-12) -> bool:
        values = np.asarray(self(np.linspace(*self.domain, samples)))
        with np.errstate(invalid="ignore"):
            steps = values[1:] >= values[:-1] - tol
        return bool(np.all(steps))

    def max_breakpoint_jump(self) -> float:
        """Largest gap between the one-sided values at interior breakpoints"""
        jump = 0.0
        for k in range(1, len(self.pieces)):
            at = self.breakpoints[k]
            left = self.pieces[k - 1].scalar(at)
            right = self.pieces[k].scalar(at)
            if math.isinf(left) or math.isinf(right):
                if left != right:
                    return math.inf
                continue
            jump = max(jump, abs(right - left))
        return jump
