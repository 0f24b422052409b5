import math
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike

from .core import FloatArray

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0

VectorFn = Callable[[FloatArray], FloatArray]


def golden_section_maximize(
    objective: VectorFn, lo: ArrayLike, hi: ArrayLike, tol: float = 1e-12
) -> tuple[FloatArray, FloatArray]:
    """
    Golden-section search for the maximum of a unimodal function, run on many
    brackets at once
        :param objective: vectorised function, called on arrays shaped like the brackets
        :param lo: left ends of the brackets
        :param hi: right ends of the brackets
        :param tol: bracket width at which the search stops
    Returns (argmax, max) arrays. Both bracket ends are compared against the final
    interior point so maxima sitting on a boundary come back exactly.
    """
    a, b = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    left_end, right_end = a, b
    a, b = a.copy(), b.copy()
    width = float(np.max(b - a)) if a.size else 0.0
    steps = 0 if width <= tol else int(math.ceil(math.log(tol / width) / math.log(INVPHI)))

    with np.errstate(divide="ignore", invalid="ignore"):
        c = b - INVPHI * (b - a)
        d = a + INVPHI * (b - a)
        fc, fd = objective(c), objective(d)
        for _ in range(steps):
            left = fc > fd
            b = np.where(left, d, b)
            a = np.where(left, a, c)
            new = np.where(left, b - INVPHI * (b - a), a + INVPHI * (b - a))
            f_new = objective(new)
            c, d = np.where(left, new, d), np.where(left, c, new)
            fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)

        candidates = np.stack([(a + b) / 2.0, left_end, right_end])
        values = np.stack([objective(candidates[0]), objective(candidates[1]), objective(candidates[2])])
    values = np.where(np.isnan(values), -np.inf, values)
    best = np.argmax(values, axis=0)
    pick = np.take_along_axis(candidates, best[np.newaxis], axis=0)[0]
    value = np.take_along_axis(values, best[np.newaxis], axis=0)[0]
    return pick, value


def bisect_increasing(
    fn: VectorFn, target: ArrayLike, lo: ArrayLike, hi: ArrayLike, tol: float = 1e-12
) -> FloatArray:
    """
    Solves fn(x) = target for a nondecreasing fn by bisection, elementwise
        :param fn: vectorised nondecreasing function
        :param target: levels to hit
        :param lo: brackets with fn(lo) <= target
        :param hi: brackets with fn(hi) >= target
        :param tol: final bracket width
    """
    target, a, b = np.broadcast_arrays(
        np.asarray(target, dtype=float), np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    )
    a, b = a.copy(), b.copy()
    width = float(np.max(b - a)) if a.size else 0.0
    steps = 0 if width <= tol else int(math.ceil(math.log2(width / tol)))
    for _ in range(steps):
        middle = (a + b) / 2.0
        below = fn(middle) < target
        a = np.where(below, middle, a)
        b = np.where(below, b, middle)
    return (a + b) / 2.0
