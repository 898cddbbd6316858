"""Limited-memory BFGS with a strong-Wolfe line search.

The objective is a callable ``x -> (f, grad)``. Stopping rules follow the
usual conventions: infinity norm of the gradient, relative decrease of the
function, iteration cap. A line search that exhausts its trial budget ends
the run with status ``"stagnated"`` and the best point seen so far.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class LBFGSSettings:
    memory: int = 10
    gtol: float = 1e-8
    ftol: float = 1e-12
    maxiter: int = 200
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 20

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.memory < 1 or self.maxiter < 0 or self.max_linesearch < 1:
            raise ValueError("memory, maxiter and max_linesearch must be positive")


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    status: str
    history: list = field(default_factory=list)   # f at every accepted iterate, x0 first
    grad_norms: list = field(default_factory=list)
    line_search_failures: int = 0

    @property
    def converged(self) -> bool:
        return self.status in ("gtol", "ftol")


class _Counted:
    """Wraps the objective; counts calls and remembers the best point."""

    def __init__(self, fun: Callable):
        self.fun = fun
        self.calls = 0
        self.best = None

    def __call__(self, x):
        f, g = self.fun(x)
        self.calls += 1
        f = float(f)
        g = np.asarray(g, dtype=float)
        if self.best is None or f < self.best[0]:
            self.best = (f, x.copy(), g.copy())
        return f, g


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic interpolating (a, fa, da), (b, fb, db), or None."""
    if a == b:
        return None
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0.0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0.0:
        return None
    t = b - (b - a) * (db + d2 - d1) / denom
    return t if math.isfinite(t) else None


def strong_wolfe(fun: _Counted, x, f0, g0, d, alpha, c1, c2, max_evals, alpha_max=1e10):
    """Line search along ``d`` (Nocedal-Wright algorithms 3.5 and 3.6).

    Returns ``(alpha, f, g)`` on success and ``None`` when the trial budget
    runs out.
    """
    dphi0 = float(g0 @ d)
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = fun(x + a * d)
        return f, g, float(g @ d)

    def zoom(lo, hi):
        # lo, hi are (alpha, f, dphi, g)
        while evals < max_evals:
            a_lo, f_lo, d_lo, _ = lo
            a_hi, f_hi, d_hi, _ = hi
            width = a_hi - a_lo
            a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            lo_b, hi_b = sorted((a_lo + 0.1 * width, a_hi - 0.1 * width))
            if a is None or not lo_b <= a <= hi_b:
                a = a_lo + 0.5 * width
            if a == a_lo or a == a_hi:
                return None
            f, g, da = phi(a)
            if not math.isfinite(f):
                f, da = math.inf, 0.0
            if f > f0 + c1 * a * dphi0 or f >= f_lo:
                hi = (a, f, da, g)
            else:
                if abs(da) <= -c2 * dphi0:
                    return a, f, g
                if da * (a_hi - a_lo) >= 0.0:
                    hi = lo
                lo = (a, f, da, g)
        return None

    prev = (0.0, f0, dphi0, g0)
    first = True
    while evals < max_evals:
        f, g, da = phi(alpha)
        if not math.isfinite(f):    # failed trial: treat as overshoot
            f, da = math.inf, 0.0
        cur = (alpha, f, da, g)
        if f > f0 + c1 * alpha * dphi0 or (not first and f >= prev[1]):
            return zoom(prev, cur)
        if abs(da) <= -c2 * dphi0:
            return alpha, f, g
        if da >= 0.0:
            return zoom(cur, prev)
        prev = cur
        first = False
        alpha = min(2.0 * alpha, alpha_max)
    return None


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun: Callable, x0, settings: LBFGSSettings | None = None,
                   callback: Callable | None = None) -> OptimizeResult:
    """Minimise ``fun`` from ``x0``; ``fun(x)`` returns ``(f, grad)``."""
    st = settings or LBFGSSettings()
    obj = _Counted(fun)
    x = np.array(x0, dtype=float)
    f, g = obj(x)
    history = [f]
    gnorms = [float(np.abs(g).max()) if g.size else 0.0]
    pairs: deque = deque(maxlen=st.memory)
    failures = 0
    status = "maxiter"
    it = 0
    if gnorms[-1] <= st.gtol:
        status = "gtol"
    else:
        while it < st.maxiter:
            d = _two_loop(g, pairs)
            if not float(g @ d) < 0.0:
                pairs.clear()
                d = -g
            alpha0 = 1.0 if pairs else min(1.0, 1.0 / gnorms[-1])
            step = strong_wolfe(obj, x, f, g, d, alpha0, st.c1, st.c2, st.max_linesearch)
            if step is None and pairs:
                # retry once along steepest descent with a fresh memory
                failures += 1
                pairs.clear()
                d = -g
                step = strong_wolfe(obj, x, f, g, d, min(1.0, 1.0 / gnorms[-1]),
                                    st.c1, st.c2, st.max_linesearch)
            if step is None:
                failures += 1
                status = "stagnated"
                break
            alpha, f_new, g_new = step
            s = alpha * d
            y = g_new - g
            sy = float(s @ y)
            if sy > 1e-12 * float(y @ y) and sy > 0.0:
                pairs.append((s, y, 1.0 / sy))
            df = f - f_new
            x = x + s
            f, g = f_new, g_new
            it += 1
            history.append(f)
            gnorms.append(float(np.abs(g).max()))
            if callback is not None:
                callback(x, f, g)
            if gnorms[-1] <= st.gtol:
                status = "gtol"
                break
            if abs(df) <= st.ftol * max(abs(f), 1.0):
                status = "ftol"
                break
    # best point seen; accepted iterates are monotone so this is the last
    # accepted one unless a failed line search probed a lower value
    bf, bx, bg = obj.best
    if bf < f:
        f, x, g = bf, bx, bg
    return OptimizeResult(x=x, fun=f, grad=g, iterations=it, evaluations=obj.calls,
                          status=status, history=history, grad_norms=gnorms,
                          line_search_failures=failures)
