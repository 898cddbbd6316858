"""Per-time-step interface optimisation for the four FEM/ROM couplings.

A coupling mode picks FEM (F) or ROM (R) for the left state, the right
state and the control, in that order. The objective is always half the
squared L2 norm of the interface velocity jump, evaluated on the traces
that the mode prescribes; its gradient comes from one adjoint solve per
subdomain.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .linalg import SingularMatrixError
from .optim import LBFGSSettings, OptimizeResult, lbfgs_minimize
from .rom import ReducedBasis, ReducedModel, ReducedNewtonSettings, ReducedState
from .solvers import DDProblem, Mu, NewtonError, NewtonSettings, StateSolution

log = logging.getLogger(__name__)


class CouplingMode(str, enum.Enum):
    FFF = "FFF"
    FRF = "FRF"
    FRR = "FRR"
    RRR = "RRR"

    @property
    def reduced(self) -> tuple[bool, bool, bool]:
        return tuple(c == "R" for c in self.value)

    @property
    def needs_basis(self) -> bool:
        return "R" in self.value


class MissingBasisError(RuntimeError):
    pass


@dataclass
class CouplingSettings:
    gradient: str = "riesz"        # optimiser metric for FEM controls: "riesz" or "raw"
    newton: NewtonSettings = field(default_factory=NewtonSettings)
    reduced_newton: ReducedNewtonSettings = field(default_factory=ReducedNewtonSettings)
    lbfgs: LBFGSSettings = field(default_factory=LBFGSSettings)

    def __post_init__(self):
        if self.gradient not in ("riesz", "raw"):
            raise ValueError(f"gradient must be 'riesz' or 'raw', got {self.gradient!r}")


@dataclass
class ObjectiveEvaluation:
    """Functional value and gradient in the mode's control coordinates.

    For a FEM control ``gradient`` is the Riesz representative on the trace
    space and ``raw`` the mass-weighted dual vector; for a reduced control
    both are the gradient in reduced coordinates. ``J_interface`` is the
    mismatch of the FEM (or lifted) traces, which differs from ``J`` only
    when the traces are projected onto the control space.
    """

    J: float
    gradient: np.ndarray | None
    raw: np.ndarray | None
    J_interface: float
    states: tuple
    adjoints: tuple | None = None
    stats: dict = field(default_factory=dict)


@dataclass
class TimestepReport:
    step: int
    time: float
    iterations: int
    evaluations: int
    J: float
    J_interface: float
    J_initial: float
    J_zero: float
    J_zero_interface: float
    grad_norm: float
    status: str
    line_search_failures: int
    wall_time: float
    newton_iterations: int = 0
    max_divergence: float = 0.0
    trace: list = field(default_factory=list)


@dataclass
class TransientResult:
    mode: CouplingMode
    mu: Mu
    dt: float
    reports: list
    archive: dict
    gradient: str = "riesz"
    error: str | None = None


class Coupler:
    """Evaluates per-mode objectives and runs the time-stepping optimisation."""

    def __init__(self, problem: DDProblem, basis: ReducedBasis | None = None,
                 models: tuple | None = None, settings: CouplingSettings | None = None):
        self.problem = problem
        self.settings = settings or CouplingSettings()
        self.basis = basis
        if basis is not None and models is None:
            models = tuple(ReducedModel.from_fem(fem, sb) for fem, sb in zip(problem.sub, basis.sub))
        self.models = models
        Mg = problem.Mg.toarray()
        self.Mg = Mg
        self.chol = sla.cholesky(Mg, lower=True)

    # -- helpers -------------------------------------------------------------------------
    def require_basis(self, mode: CouplingMode):
        if mode.needs_basis and (self.basis is None or self.models is None):
            raise MissingBasisError(
                f"mode {mode.value} needs a reduced basis; run the 'offline' command first")

    def control_dim(self, mode: CouplingMode) -> int:
        return self.basis.Zg.shape[1] if mode.reduced[2] else self.problem.n_control

    def initial_states(self, mode: CouplingMode) -> tuple:
        """Zero initial condition in each subdomain's representation."""
        out = []
        for i in (1, 2):
            if mode.reduced[i - 1]:
                m = self.models[i - 1]
                out.append(ReducedState.zero(m.N, m.Np))
            else:
                out.append(np.zeros(self.problem.sub[i - 1].nu_dofs))
        return tuple(out)

    def control_field(self, mode: CouplingMode, g) -> np.ndarray:
        """Control as coefficients on the FEM trace space."""
        return self.basis.Zg @ g if mode.reduced[2] else np.asarray(g, dtype=float)

    def lifted(self, i: int, state):
        """FEM velocity and pressure of a subdomain state."""
        if isinstance(state, ReducedState):
            return self.models[i - 1].lift(state)
        return state.u, state.p

    # -- one objective evaluation ------------------------------------------------------
    def _solve_state(self, mode, i, g_fem, mu, prev, dt, t, guess, convection):
        if mode.reduced[i - 1]:
            m = self.models[i - 1]
            return m.solve_state(mu, dt, prev, load=m.interface_load(g_fem), guess=guess,
                                 settings=self.settings.reduced_newton, convection=convection)
        return self.problem.subdomain_state_step(i, g_fem, prev, mu, dt, t=t,
                                                 guess=None if guess is None else (guess.u, guess.p),
                                                 settings=self.settings.newton,
                                                 convection=convection)

    def _trace(self, i, state):
        if isinstance(state, ReducedState):
            return self.models[i - 1].trace(state)
        return self.problem.sub[i - 1].trace(state.u)

    def evaluate_objective(self, mode: CouplingMode, g, mu: Mu, prev: tuple, dt, t: float = 0.0,
                           guesses: tuple | None = None, gradient: bool = True,
                           convection: bool = True) -> ObjectiveEvaluation:
        """Objective and gradient of ``mode`` at control ``g`` (mode coordinates)."""
        mode = CouplingMode(mode)
        self.require_basis(mode)
        g = np.asarray(g, dtype=float)
        if g.shape != (self.control_dim(mode),):
            raise ValueError(f"control of mode {mode.value} has dimension "
                             f"{self.control_dim(mode)}, got {g.shape}")
        prob = self.problem
        g_fem = self.control_field(mode, g)
        guesses = guesses or (None, None)
        states = tuple(self._solve_state(mode, i, g_fem, mu, prev[i - 1], dt, t, guesses[i - 1],
                                         convection) for i in (1, 2))
        delta = self._trace(1, states[0]) - self._trace(2, states[1])
        J_interface = prob.functional_from_traces(delta)
        Zg = self.basis.Zg if mode.reduced[2] else None
        if mode is CouplingMode.FRR:
            dN = Zg.T @ (self.Mg @ delta)
            J = 0.5 * float(dN @ dN)
            weight = self.Mg @ (Zg @ dN)      # dJ/d(trace jump)
        else:
            J = J_interface
            weight = self.Mg @ delta
        stats = {"newton": sum(s.iterations for s in states),
                 "divergence": max(s.divergence for s in states)}
        if not gradient:
            return ObjectiveEvaluation(J, None, None, J_interface, states, None, stats)
        adj = []
        alpha = []
        for i, st in zip((1, 2), states):
            sign = prob.sub[i - 1].sign
            if mode.reduced[i - 1]:
                m = self.models[i - 1]
                a = m.solve_adjoint(st, sign * (m.PZ.T @ weight), convection=convection)
                alpha.append(m.PZ @ a.xi)
            else:
                fem = prob.sub[i - 1]
                a = fem.solve_adjoint(st, sign * (fem.sel.T @ weight))
                alpha.append(fem.trace(a.xi))
            adj.append(a)
        stats["adjoint_divergence"] = max(a.divergence for a in adj)
        jump = alpha[0] - alpha[1]
        if mode.reduced[2]:
            grad = Zg.T @ (self.Mg @ jump)
            raw = grad
        else:
            grad = jump
            raw = self.Mg @ jump
        return ObjectiveEvaluation(J, grad, raw, J_interface, states, tuple(adj), stats)

    def riesz_norm(self, mode: CouplingMode, ev: ObjectiveEvaluation) -> float:
        """L2(interface) norm of the gradient."""
        if mode.reduced[2]:
            return float(np.linalg.norm(ev.gradient))
        return math.sqrt(max(float(ev.gradient @ (self.Mg @ ev.gradient)), 0.0))

    # -- one time step -----------------------------------------------------------------
    def step_objective(self, mode, mu, prev, dt, t) -> "StepObjective":
        return StepObjective(self, CouplingMode(mode), mu, prev, dt, t)

    def minimize_step(self, mode, mu: Mu, prev: tuple, dt, t: float, z0,
                      settings: LBFGSSettings | None = None):
        obj = self.step_objective(mode, mu, prev, dt, t)
        res = lbfgs_minimize(obj, z0, settings or self.settings.lbfgs)
        return res, obj

    def run_transient(self, mode, mu: Mu, dt: float, n_steps: int, t0: float = 0.0,
                      callback=None) -> TransientResult:
        """Minimise the interface mismatch step by step from a zero initial state.

        The control of each step starts from the previous optimum. On a
        solver failure the completed steps are returned with ``error`` set.
        """
        mode = CouplingMode(mode)
        self.require_basis(mode)
        # chord-Newton rounding depends on the cached factors: start clean
        self.problem.clear_factorizations()
        prev = self.initial_states(mode)
        z = np.zeros(self.control_dim(mode))
        reports = []
        keys = ("time", "u1", "p1", "u2", "p2", "g", "z")
        arch = {k: [] for k in keys}
        result = TransientResult(mode, mu, dt, reports, {}, gradient=self.settings.gradient)
        for n in range(1, n_steps + 1):
            t = t0 + n * dt
            tic = time.perf_counter()
            try:
                obj = self.step_objective(mode, mu, prev, dt, t)
                zero = obj.evaluate(np.zeros_like(z), gradient=False)
                res = lbfgs_minimize(obj, z, self.settings.lbfgs)
                final = obj.evaluate(res.x)
            except (NewtonError, SingularMatrixError, np.linalg.LinAlgError) as exc:
                log.error("%s step %d failed: %s", mode.value, n, exc)
                result.error = f"step {n}: {exc}"
                break
            wall = time.perf_counter() - tic
            rep = TimestepReport(
                step=n, time=t, iterations=res.iterations, evaluations=res.evaluations,
                J=res.fun, J_interface=final.J_interface, J_initial=res.history[0],
                J_zero=zero.J, J_zero_interface=zero.J_interface,
                grad_norm=self.riesz_norm(mode, final), status=res.status,
                line_search_failures=res.line_search_failures, wall_time=wall,
                newton_iterations=obj.newton_iterations, max_divergence=obj.max_divergence,
                trace=list(res.history))
            if n >= 2 and rep.J_initial > rep.J_zero:
                log.info("%s step %d: warm start J %.3e above cold start J %.3e",
                         mode.value, n, rep.J_initial, rep.J_zero)
            reports.append(rep)
            prev = tuple(s.u if isinstance(s, StateSolution) else s for s in final.states)
            z = res.x
            g = obj.control(res.x)
            u1, p1 = self.lifted(1, final.states[0])
            u2, p2 = self.lifted(2, final.states[1])
            for k, v in zip(keys, (t, u1, p1, u2, p2, self.control_field(mode, g), g)):
                arch[k].append(np.array(v, dtype=float))
            if callback is not None:
                callback(rep)
        result.archive = {k: np.array(v) for k, v in arch.items()}
        return result


class StepObjective:
    """``z -> (J, dJ/dz)`` for one time step in optimiser coordinates.

    With a FEM control and the Riesz metric, ``z = L^T g`` where ``L L^T``
    is the interface mass matrix, so Euclidean steps in ``z`` are L2 steps
    in ``g``. Newton solves are warm-started from the latest states.
    """

    def __init__(self, coupler: Coupler, mode: CouplingMode, mu: Mu, prev: tuple, dt, t):
        self.c = coupler
        self.mode = mode
        self.mu = mu
        self.prev = prev
        self.dt = dt
        self.t = t
        self.riesz = coupler.settings.gradient == "riesz" and not mode.reduced[2]
        self.guesses = None
        self.newton_iterations = 0
        self.max_divergence = 0.0
        self.failures = 0
        self._cache = None

    def control(self, z) -> np.ndarray:
        if self.riesz:
            return sla.solve_triangular(self.c.chol, z, lower=True, trans="T")
        return np.asarray(z, dtype=float)

    def coordinates(self, g) -> np.ndarray:
        return self.c.chol.T @ g if self.riesz else np.asarray(g, dtype=float)

    def evaluate(self, z, gradient: bool = True) -> ObjectiveEvaluation:
        z = np.asarray(z, dtype=float)
        if self._cache is not None and gradient and np.array_equal(self._cache[0], z):
            return self._cache[1]
        ev = self.c.evaluate_objective(self.mode, self.control(z), self.mu, self.prev, self.dt,
                                       self.t, guesses=self.guesses, gradient=gradient)
        self.guesses = ev.states
        self.newton_iterations += ev.stats["newton"]
        self.max_divergence = max(self.max_divergence, ev.stats["divergence"])
        if gradient:
            self._cache = (z.copy(), ev)
        return ev

    def __call__(self, z):
        try:
            ev = self.evaluate(z)
        except NewtonError as exc:
            # trial control too far out for Newton: report as an overshoot
            self.failures += 1
            self.guesses = None
            log.debug("objective evaluation failed: %s", exc)
            return math.inf, np.zeros_like(np.asarray(z, dtype=float))
        if self.riesz:
            return ev.J, self.c.chol.T @ ev.gradient
        if self.mode.reduced[2]:
            return ev.J, ev.gradient
        return ev.J, ev.raw


@dataclass
class GradientCheck:
    mode: str
    step: int
    eps: float
    directional: float      # <gradient, direction>
    central: float          # central difference quotient
    rel_error: float


def gradient_check(coupler: Coupler, mode, g, direction, mu: Mu, prev: tuple, dt, t: float = 0.0,
                   eps: float | None = None, step: int = 0) -> GradientCheck:
    """Compare the adjoint gradient with a central difference of the mode's own J.

    ``eps`` defaults to ``1e-6 |g| + 1e-8``; both vectors are in the mode's
    control coordinates (trace-space coefficients or reduced coefficients).
    States are solved a hundredfold tighter than the run default and without
    factor reuse: at the run tolerance the state error divided by ``eps`` can
    swamp the difference quotient.
    """
    mode = CouplingMode(mode)
    g = np.asarray(g, dtype=float)
    d = np.asarray(direction, dtype=float)
    eps = 1e-6 * float(np.linalg.norm(g)) + 1e-8 if eps is None else eps
    saved = coupler.settings
    coupler.settings = replace(
        saved, newton=replace(saved.newton, atol=1e-12, rtol=1e-15, maxiter=50,
                              reuse_factorization=False),
        reduced_newton=replace(saved.reduced_newton, atol=1e-12, rtol=1e-15))
    try:
        ev = coupler.evaluate_objective(mode, g, mu, prev, dt, t)
        guesses = ev.states
        jp = coupler.evaluate_objective(mode, g + eps * d, mu, prev, dt, t, guesses=guesses,
                                        gradient=False).J
        jm = coupler.evaluate_objective(mode, g - eps * d, mu, prev, dt, t, guesses=guesses,
                                        gradient=False).J
    finally:
        coupler.settings = saved
    fd = (jp - jm) / (2.0 * eps)
    dd = float(ev.raw @ d)
    rel = abs(dd - fd) / max(abs(fd), abs(dd), 1e-300)
    return GradientCheck(mode.value, step, eps, dd, fd, rel)
