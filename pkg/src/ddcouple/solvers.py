"""Implicit-Euler Navier-Stokes solves on the full domain and on subdomains.

The subdomain problems carry the interface control ``g`` as a Neumann load
with sign +1 on the left subdomain and -1 on the right one. Adjoint solves
reuse the transposed Newton Jacobian at the converged state, so the
gradient returned by :meth:`DDProblem.compute_gradient` is the exact derivative of
the discrete mismatch functional.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .fem import (AssembledOperators, ConvectionAssembler, ElementData, assemble_constant_ops,
                  assemble_interface_mass, interpolate_velocity, trace_selection)
from .linalg import SparseLU
from .mesh import DofMap, InterfaceMesh, Mesh, build_dofmap, decompose, node_correspondence

log = logging.getLogger(__name__)


class Mu(NamedTuple):
    """Physical parameter: peak inlet speed and kinematic viscosity."""

    U: float
    nu: float


class NewtonError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(f"{message}; residual history {['%.3e' % r for r in history]}")
        self.history = list(history)


@dataclass
class NewtonSettings:
    """Stopping rule ``|R|_inf <= max(atol, rtol |R_0|_inf)``.

    With ``reuse_factorization`` the latest LU factors are kept across
    solves with the same (mu, dt) and refreshed whenever an iteration
    contracts the residual by less than ``refresh_ratio``.
    """

    atol: float = 1e-10
    rtol: float = 1e-12
    maxiter: int = 25
    reuse_factorization: bool = True
    refresh_ratio: float = 0.05


@dataclass
class StateSolution:
    u: np.ndarray
    p: np.ndarray
    u_prev: np.ndarray
    mu: Mu
    dt: float
    iterations: int = 0
    residuals: list = field(default_factory=list)
    divergence: float = 0.0
    convection: bool = True
    factorizations: int = 0


@dataclass
class AdjointSolution:
    xi: np.ndarray
    lam: np.ndarray
    divergence: float = 0.0


def parabolic_inlet(y0: float, y1: float, U: float) -> Callable:
    """Profile U * 4 (y - y0)(y1 - y) / (y1 - y0)^2 in x-direction."""
    def profile(x, y):
        return U * 4.0 * (y - y0) * (y1 - y) / (y1 - y0) ** 2, np.zeros_like(y)
    return profile


class SystemPattern:
    """CSR structure of the velocity-pressure Newton matrix of one mesh.

    Entries are the union of the element velocity pattern, the divergence
    blocks and the diagonal. Rows and columns of Dirichlet DoFs are zeroed
    and given a unit diagonal (symmetric elimination).
    """

    def __init__(self, elements: ElementData, ops: AssembledOperators, dirichlet: np.ndarray):
        vp, dp = elements.vector_pattern, elements.div_pattern
        nu, npr = vp.shape[0], dp.shape[0]
        n = nu + npr
        k_uu = vp.rows * n + vp.cols
        k_pu = (dp.rows + nu) * n + dp.cols
        k_up = dp.cols * n + (dp.rows + nu)
        k_diag = np.arange(n, dtype=np.int64) * (n + 1)
        keys = np.unique(np.concatenate([k_uu, k_pu, k_up, k_diag]))
        self.n = n
        self.pos_uu = np.searchsorted(keys, k_uu)
        self.pos_pu = np.searchsorted(keys, k_pu)
        self.pos_up = np.searchsorted(keys, k_up)
        rows, cols = keys // n, keys % n
        self.indices = cols.astype(np.int32)
        self.indptr = np.searchsorted(rows, np.arange(n + 1)).astype(np.int32)
        fixed = np.zeros(n, dtype=bool)
        fixed[dirichlet] = True
        self.keep = ~(fixed[rows] | fixed[cols])
        self.pos_fixed = np.searchsorted(keys, np.asarray(dirichlet, dtype=np.int64) * (n + 1))
        self.nnz = len(keys)
        self.m_data = np.asarray(ops.M[vp.rows, vp.cols]).ravel()
        self.k_data = np.asarray(ops.K[vp.rows, vp.cols]).ravel()
        self.b_data = np.asarray(ops.B[dp.rows, dp.cols]).ravel()

    def matrix(self, uu_data: np.ndarray) -> sp.csr_matrix:
        data = np.zeros(self.nnz)
        data[self.pos_uu] = uu_data
        data[self.pos_pu] = self.b_data
        data[self.pos_up] = self.b_data
        data *= self.keep
        data[self.pos_fixed] = 1.0
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))


class FlowProblem:
    """Discrete Navier-Stokes operator on one mesh.

    ``sign`` multiplies the interface load: +1 on the left subdomain, -1 on
    the right one and 0 for the full domain. ``inlet`` is the (y0, y1) span
    of the inflow profile; it is read from the mesh when omitted.
    """

    def __init__(self, mesh: Mesh, sign: int = 0, interface_mass: sp.spmatrix | None = None,
                 inlet: tuple[float, float] | None = None, forcing: Callable | None = None):
        self.mesh = mesh
        self.sign = sign
        self.dofmap: DofMap = build_dofmap(mesh)
        self.elements = ElementData(mesh, self.dofmap)
        self.ops: AssembledOperators = assemble_constant_ops(self.elements)
        self.conv = ConvectionAssembler(self.elements)
        self.forcing = forcing
        self.nu_dofs = self.dofmap.n_velocity
        self.np_dofs = self.dofmap.n_pressure
        self.dirichlet = self.dofmap.dirichlet_dofs()
        inlet_nodes = self.dofmap.node_tags.get("inlet", np.zeros(0, dtype=np.int64))
        self.inlet_dofs = 2 * inlet_nodes
        if inlet is None and len(inlet_nodes):
            y = self.dofmap.node_coords[inlet_nodes, 1]
            inlet = (float(y.min()), float(y.max()))
        self.inlet = inlet
        self._unit_inlet = np.zeros(self.nu_dofs)
        if len(inlet_nodes):
            prof = parabolic_inlet(inlet[0], inlet[1], 1.0)
            ux, _ = prof(None, self.dofmap.node_coords[inlet_nodes, 1])
            self._unit_inlet[2 * inlet_nodes] = ux
        self.sel = None
        self.T = None
        if len(self.dofmap.interface_nodes) and interface_mass is not None:
            self.sel = trace_selection(self.dofmap)
            self.T = (self.sel.T @ interface_mass).tocsr()
        self.system = SystemPattern(self.elements, self.ops, self.dirichlet)
        self._lu_key = None
        self._lu = None

    # -- data ------------------------------------------------------------------
    def dirichlet_values(self, mu: Mu) -> np.ndarray:
        """Full velocity vector that is zero except on Dirichlet DoFs."""
        return mu.U * self._unit_inlet

    def load(self, t: float) -> np.ndarray:
        if self.forcing is None:
            return np.zeros(self.nu_dofs)
        fi = interpolate_velocity(self.dofmap, lambda x, y: self.forcing(x, y, t))
        return self.ops.M @ fi

    def interface_load(self, g: np.ndarray | None) -> np.ndarray:
        if g is None or self.sign == 0:
            return np.zeros(self.nu_dofs)
        return self.sign * (self.T @ g)

    def trace(self, u: np.ndarray) -> np.ndarray:
        return self.sel @ u

    # -- operators ---------------------------------------------------------------
    def _inv_dt(self, dt) -> float:
        return 0.0 if dt is None or math.isinf(dt) else 1.0 / dt

    def residual(self, u, p, u_prev, mu: Mu, dt, rhs, convection: bool = True) -> np.ndarray:
        ops = self.ops
        ru = ops.M @ (u - u_prev) * self._inv_dt(dt) + mu.nu * (ops.K @ u) + ops.B.T @ p - rhs
        if convection:
            ru += self.conv.residual(u)
        rp = ops.B @ u
        r = np.concatenate([ru, rp])
        r[self.dirichlet] = 0.0
        return r

    def jacobian(self, u, mu: Mu, dt, convection: bool = True) -> sp.csr_matrix:
        """Newton matrix [[M/dt + nu K + J_c(u), B^T], [B, 0]] after elimination."""
        sysp = self.system
        uu = sysp.m_data * self._inv_dt(dt) + mu.nu * sysp.k_data
        if convection:
            uu = uu + self.conv.jacobian_data(u)
        return sysp.matrix(uu)

    def _cached_lu(self, key):
        return self._lu if self._lu_key == key else None

    def clear_factorization(self) -> None:
        """Drop cached Newton factors so the next solve does not depend on history."""
        self._lu_key = self._lu = None

    # -- solves ----------------------------------------------------------------
    def solve_state(self, mu: Mu, dt, u_prev, g=None, t: float = 0.0, guess=None,
                    settings: NewtonSettings | None = None, convection: bool = True,
                    extra_load=None) -> StateSolution:
        """Newton solve of the implicit-Euler step.

        ``guess`` is an optional (u, p) pair; by default Newton starts from
        the previous velocity with zero pressure. Dirichlet values are
        imposed on the initial guess and every correction vanishes there.
        """
        settings = settings or NewtonSettings()
        rhs = self.load(t) + self.interface_load(g)
        if extra_load is not None:
            rhs = rhs + extra_load
        if guess is None:
            u = np.array(u_prev, dtype=float)
            p = np.zeros(self.np_dofs)
        else:
            u = np.array(guess[0], dtype=float)
            p = np.array(guess[1], dtype=float)
        u[self.dirichlet] = self.dirichlet_values(mu)[self.dirichlet]
        key = (mu, dt, convection)
        lu = self._cached_lu(key) if settings.reuse_factorization else None
        history = []
        r = self.residual(u, p, u_prev, mu, dt, rhs, convection)
        r0 = np.abs(r).max()
        history.append(r0)
        it = nfact = 0
        while history[-1] > max(settings.atol, settings.rtol * r0):
            if it >= settings.maxiter:
                raise NewtonError(f"Newton did not converge in {settings.maxiter} iterations",
                                  history)
            if lu is None:
                lu = SparseLU(self.jacobian(u, mu, dt, convection))
                nfact += 1
            dx = lu.solve(-r)
            u += dx[: self.nu_dofs]
            p += dx[self.nu_dofs:]
            it += 1
            r = self.residual(u, p, u_prev, mu, dt, rhs, convection)
            history.append(np.abs(r).max())
            if not np.isfinite(history[-1]):
                raise NewtonError("Newton diverged", history)
            if not settings.reuse_factorization or history[-1] > settings.refresh_ratio * history[-2]:
                lu = None
        if lu is not None:
            self._lu_key, self._lu = key, lu
        return StateSolution(u=u, p=p, u_prev=np.asarray(u_prev), mu=mu, dt=dt, iterations=it,
                             residuals=history, divergence=float(np.abs(self.ops.B @ u).max()),
                             convection=convection, factorizations=nfact)

    def solve_adjoint(self, state: StateSolution, rhs_u: np.ndarray,
                      rtol: float = 1e-13, max_refine: int = 8) -> AdjointSolution:
        """Transposed linearised system at ``state`` with homogeneous Dirichlet data.

        Uses the cached factors of a nearby Jacobian with iterative
        refinement against the exact Jacobian at ``state.u``; falls back to
        a fresh factorisation when refinement stalls.
        """
        jac = self.jacobian(state.u, state.mu, state.dt, state.convection)
        jac_t = jac.T.tocsr()
        rhs = np.concatenate([rhs_u, np.zeros(self.np_dofs)])
        rhs[self.dirichlet] = 0.0
        bnorm = np.abs(rhs).max()
        anorm = abs(jac).sum(axis=1).max()
        key = (state.mu, state.dt, state.convection)
        lu = self._cached_lu(key)
        sol = None
        for attempt in range(2):
            if lu is None:
                lu = SparseLU(jac)
                self._lu_key, self._lu = key, lu
            x = lu.solve(rhs, trans=True)
            prev = np.inf
            for _ in range(max_refine):
                res = rhs - jac_t @ x
                rn = np.abs(res).max()
                if rn <= rtol * (anorm * np.abs(x).max() + bnorm) or bnorm == 0.0:
                    sol = x
                    break
                if rn > 0.5 * prev:
                    break
                prev = rn
                x = x + lu.solve(res, trans=True)
            if sol is not None:
                break
            lu = None
        if sol is None:
            raise np.linalg.LinAlgError("adjoint solve did not reach the residual tolerance")
        xi, lam = sol[: self.nu_dofs], sol[self.nu_dofs:]
        return AdjointSolution(xi=xi, lam=lam, divergence=float(np.abs(self.ops.B @ xi).max()))

    def stokes_lifting(self) -> np.ndarray:
        """Steady Stokes field with unit inlet data, natural elsewhere."""
        mu = Mu(1.0, 1.0)
        st = self.solve_state(mu, None, np.zeros(self.nu_dofs), convection=False)
        return st.u


class DDProblem:
    """Full-domain problem plus its two-subdomain splitting at x = x_interface."""

    def __init__(self, mesh: Mesh, x_interface: float | None = None, forcing=None):
        self.mesh = mesh
        x_interface = mesh.x_interface if x_interface is None else x_interface
        m1, m2, gamma = decompose(mesh, x_interface)
        self.gamma: InterfaceMesh = gamma
        self.Mg = assemble_interface_mass(gamma)
        self.mono = FlowProblem(mesh, 0, self.Mg, forcing=forcing)
        inlet = self.mono.inlet
        self.sub = (FlowProblem(m1, +1, self.Mg, inlet=inlet, forcing=forcing),
                    FlowProblem(m2, -1, self.Mg, inlet=inlet, forcing=forcing))
        self.n_control = self.Mg.shape[0]
        self._node_maps = [node_correspondence(s.dofmap, self.mono.dofmap) for s in self.sub]
        self._vertex_maps = [s.mesh.parent_vertices for s in self.sub]
        self._mg_lu = None

    def clear_factorizations(self) -> None:
        for fem in (self.mono, *self.sub):
            fem.clear_factorization()

    # -- restriction of full-domain fields ----------------------------------------
    def restrict_velocity(self, i: int, u: np.ndarray) -> np.ndarray:
        nodes = self._node_maps[i - 1]
        out = np.empty(2 * len(nodes))
        out[0::2] = u[2 * nodes]
        out[1::2] = u[2 * nodes + 1]
        return out

    def restrict_pressure(self, i: int, p: np.ndarray) -> np.ndarray:
        return p[self._vertex_maps[i - 1]]

    # -- state, functional, adjoint, gradient -------------------------------------
    def monolithic_step(self, u_prev, mu: Mu, dt, t: float = 0.0, guess=None,
                        settings=None) -> StateSolution:
        return self.mono.solve_state(mu, dt, u_prev, t=t, guess=guess, settings=settings)

    def subdomain_state_step(self, i: int, g, u_prev, mu: Mu, dt, t: float = 0.0, guess=None,
                             settings=None, convection=True) -> StateSolution:
        return self.sub[i - 1].solve_state(mu, dt, u_prev, g=g, t=t, guess=guess,
                                           settings=settings, convection=convection)

    def mismatch(self, u1, u2) -> np.ndarray:
        return self.sub[0].trace(u1) - self.sub[1].trace(u2)

    def functional_from_traces(self, delta: np.ndarray) -> float:
        return 0.5 * float(delta @ (self.Mg @ delta))

    def compute_functional(self, u1, u2) -> float:
        """0.5 * int_Gamma |u1 - u2|^2."""
        return self.functional_from_traces(self.mismatch(u1, u2))

    def adjoint_rhs(self, i: int, delta: np.ndarray) -> np.ndarray:
        """((-1)^(i+1) eta, delta)_Gamma as a velocity load."""
        return self.sub[i - 1].sign * (self.sub[i - 1].T @ delta)

    def subdomain_adjoint(self, i: int, s1: StateSolution, s2: StateSolution) -> AdjointSolution:
        delta = self.mismatch(s1.u, s2.u)
        state = (s1, s2)[i - 1]
        return self.sub[i - 1].solve_adjoint(state, self.adjoint_rhs(i, delta))

    def compute_gradient(self, xi1: np.ndarray, xi2: np.ndarray):
        """Return ``(riesz, raw)``: the trace jump xi1 - xi2 on the interface and
        its mass-weighted dual vector, the Euclidean gradient in coefficients."""
        riesz = self.sub[0].trace(xi1) - self.sub[1].trace(xi2)
        return riesz, self.Mg @ riesz

    # -- monolithic interface flux ---------------------------------------------------
    def monolithic_flux(self, mono: StateSolution, t: float = 0.0) -> np.ndarray:
        """Control reproducing the full-domain solution on the left subdomain.

        The left-subdomain residual of the restricted full-domain fields,
        taken on the interface DoFs, is the discrete normal flux; its Riesz
        representative in the trace space is the control.
        """
        sub = self.sub[0]
        u = self.restrict_velocity(1, mono.u)
        up = self.restrict_velocity(1, mono.u_prev)
        p = self.restrict_pressure(1, mono.p)
        ops = sub.ops
        flux = ops.M @ (u - up) * sub._inv_dt(mono.dt) + mono.mu.nu * (ops.K @ u) \
            + sub.conv.residual(u) + ops.B.T @ p - sub.load(t)
        if self._mg_lu is None:
            self._mg_lu = SparseLU(self.Mg)
        return self._mg_lu.solve(sub.trace(flux))

    def relative_errors(self, mono: StateSolution, u1, p1, u2, p2) -> dict:
        """Relative L2 errors of subdomain fields against the restricted full solution."""
        out = {}
        for i, (u, p) in enumerate(((u1, p1), (u2, p2)), start=1):
            ops = self.sub[i - 1].ops
            ur = self.restrict_velocity(i, mono.u)
            pr = self.restrict_pressure(i, mono.p)
            du, dp = u - ur, p - pr
            out[f"u{i}"] = math.sqrt(du @ ops.M @ du) / max(math.sqrt(ur @ ops.M @ ur), 1e-300)
            out[f"p{i}"] = math.sqrt(dp @ ops.Mp @ dp) / max(math.sqrt(pr @ ops.Mp @ pr), 1e-300)
        return out
