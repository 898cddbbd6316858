"""Taylor-Hood assembly of mass, stiffness, divergence and convection forms.

Velocity vectors are interleaved, DoF ``2*node + component``. Element
matrices are built in batch with ``einsum`` and scattered into a CSR
structure computed once per mesh, so the convection Jacobian can be
reassembled cheaply inside Newton loops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import DofMap, InterfaceMesh, Mesh

# Symmetric rules on the reference triangle (0,0)-(1,0)-(0,1); weights sum to 1.
_A4, _B4 = 0.445948490915965, 0.091576213509771
_W4a, _W4b = 0.223381589678011, 0.109951743655322
QUAD_DEG4 = (
    np.array([[_A4, _A4], [1 - 2 * _A4, _A4], [_A4, 1 - 2 * _A4],
              [_B4, _B4], [1 - 2 * _B4, _B4], [_B4, 1 - 2 * _B4]]),
    np.array([_W4a] * 3 + [_W4b] * 3),
)
_A5, _B5 = 0.470142064105115, 0.101286507323456
_W5a, _W5b = 0.132394152788506, 0.125939180544827
QUAD_DEG5 = (
    np.array([[1 / 3, 1 / 3],
              [_A5, _A5], [1 - 2 * _A5, _A5], [_A5, 1 - 2 * _A5],
              [_B5, _B5], [1 - 2 * _B5, _B5], [_B5, 1 - 2 * _B5]]),
    np.array([0.225] + [_W5a] * 3 + [_W5b] * 3),
)


def p2_basis(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """P2 shape functions and reference gradients at points ``xi`` (n, 2).

    Order: vertices 0, 1, 2, then midpoints of edges (0,1), (1,2), (2,0).
    """
    s, t = xi[:, 0], xi[:, 1]
    l0, l1, l2 = 1 - s - t, s, t
    phi = np.column_stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                           4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0])
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    lam = (l0, l1, l2)
    grad = np.empty((len(xi), 6, 2))
    for i in range(3):
        grad[:, i, :] = (4 * lam[i] - 1)[:, None] * dl[i]
    for k, (i, j) in enumerate([(0, 1), (1, 2), (2, 0)]):
        grad[:, 3 + k, :] = 4 * (lam[i][:, None] * dl[j] + lam[j][:, None] * dl[i])
    return phi, grad


def p1_basis(xi: np.ndarray) -> np.ndarray:
    s, t = xi[:, 0], xi[:, 1]
    return np.column_stack([1 - s - t, s, t])


class Pattern:
    """Fixed CSR structure for element matrices with given local DoF maps.

    ``keys`` are the sorted linear indices ``row * ncols + col`` of the
    stored entries; :meth:`data` sums element contributions onto them.
    """

    def __init__(self, row_dofs: np.ndarray, col_dofs: np.ndarray, shape: tuple[int, int]):
        nr, nc = row_dofs.shape[1], col_dofs.shape[1]
        rows = np.repeat(row_dofs[:, :, None], nc, axis=2).ravel()
        cols = np.repeat(col_dofs[:, None, :], nr, axis=1).ravel()
        key = rows.astype(np.int64) * shape[1] + cols
        self.keys, self._inverse = np.unique(key, return_inverse=True)
        self.shape = shape
        self.rows = self.keys // shape[1]
        self.cols = self.keys % shape[1]
        self._indices = self.cols.astype(np.int32)
        self._indptr = np.searchsorted(self.rows, np.arange(shape[0] + 1)).astype(np.int32)
        self.nnz = len(self.keys)

    def data(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self._inverse, weights=local.ravel(), minlength=self.nnz)

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=self.shape)

    def assemble(self, local: np.ndarray) -> sp.csr_matrix:
        return self.matrix(self.data(local))


class ElementData:
    """Geometry factors and physical basis gradients for one (sub)mesh."""

    def __init__(self, mesh: Mesh, dofmap: DofMap):
        self.mesh = mesh
        self.dofmap = dofmap
        p = mesh.points[mesh.triangles]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns: d x / d xi
        self.det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(self.det <= 0):
            raise ValueError("mesh contains degenerate or negatively oriented triangles")
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 1, 1] = jac[:, 0, 0]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        self.jinv = inv / self.det[:, None, None]
        self.rules = {}
        for name, (xi, w) in (("deg4", QUAD_DEG4), ("deg5", QUAD_DEG5)):
            phi, dref = p2_basis(xi)
            # grad_x phi = J^{-T} grad_xi phi
            grad = np.einsum("eji,qkj->eqki", self.jinv, dref)
            self.rules[name] = (phi, grad, p1_basis(xi), 0.5 * w[None, :] * self.det[:, None])
        nodes = dofmap.cell_nodes
        self.vdofs = np.stack([2 * nodes, 2 * nodes + 1], axis=2).reshape(len(nodes), 12)
        self.pdofs = mesh.triangles
        nn, nv = dofmap.n_nodes, dofmap.n_pressure
        self.scalar_pattern = Pattern(nodes, nodes, (nn, nn))
        self.vector_pattern = Pattern(self.vdofs, self.vdofs, (2 * nn, 2 * nn))
        self.div_pattern = Pattern(self.pdofs, self.vdofs, (nv, 2 * nn))
        self.pmass_pattern = Pattern(self.pdofs, self.pdofs, (nv, nv))

    def local_velocity(self, u: np.ndarray) -> np.ndarray:
        return u[self.vdofs].reshape(-1, 6, 2)

    def scatter_velocity(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.vdofs.ravel(), weights=local.reshape(-1),
                           minlength=2 * self.dofmap.n_nodes)


@dataclass(frozen=True, eq=False)
class AssembledOperators:
    """Constant operators of one (sub)mesh.

    ``M`` velocity mass, ``K`` velocity stiffness without viscosity (``A =
    nu * K``), ``B`` the divergence form b(v, q) = -(div v, q) as a
    pressure-by-velocity matrix, ``Mp`` the pressure mass.
    """

    M: sp.csr_matrix
    K: sp.csr_matrix
    B: sp.csr_matrix
    Mp: sp.csr_matrix
    nu: float = 1.0

    @property
    def A(self) -> sp.csr_matrix:
        return self.nu * self.K

    @property
    def X(self) -> sp.csr_matrix:
        """Full H1 inner product on velocities (L2 + seminorm)."""
        return self.M + self.K


def _interleave(scalar: sp.csr_matrix) -> sp.csr_matrix:
    return sp.kron(scalar, sp.identity(2), format="csr")


def assemble_constant_ops(elements: ElementData, nu: float = 1.0) -> AssembledOperators:
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    phi, grad, psi, wdet = elements.rules["deg4"]
    mass = np.einsum("eq,qi,qj->eij", wdet, phi, phi)
    stiff = np.einsum("eq,eqid,eqjd->eij", wdet, grad, grad)
    pat = elements.scalar_pattern
    M = _interleave(pat.assemble(mass))
    K = _interleave(pat.assemble(stiff))
    # b(v, q) = -(div v, q); local columns ordered (node, component)
    div = -np.einsum("eq,qk,eqjc->ekjc", wdet, psi, grad).reshape(len(wdet), 3, 12)
    B = elements.div_pattern.assemble(div)
    Mp = elements.pmass_pattern.assemble(np.einsum("eq,qk,ql->ekl", wdet, psi, psi))
    return AssembledOperators(M=M, K=K, B=B, Mp=Mp, nu=float(nu))


class ConvectionAssembler:
    """Trilinear form c(w, u, v) = ((w . grad) u, v) and its linearisation.

    Local matrices use the interleaved (node, component) order of
    ``ElementData.vdofs``; :meth:`jacobian_data` returns entries aligned
    with ``ElementData.vector_pattern`` for fast reassembly.
    """

    def __init__(self, elements: ElementData):
        self.el = elements
        phi, grad, _, wdet = elements.rules["deg5"]
        self.phi = phi
        self.grad = grad                                     # (e, q, j, d)
        self.grad_t = np.ascontiguousarray(grad.transpose(0, 1, 3, 2))
        self.phiw_t = np.ascontiguousarray((wdet[:, :, None] * phi[None]).transpose(0, 2, 1))
        ne, nq = wdet.shape
        pp = np.einsum("eq,qi,qj->eijq", wdet, phi, phi)
        self.ppw = np.ascontiguousarray(pp.reshape(ne, 36, nq))

    def _at_quadrature(self, w: np.ndarray):
        wl = self.el.local_velocity(w)
        wq = np.matmul(self.phi[None], wl)                   # (e, q, c)
        gq = np.matmul(self.grad_t, wl[:, None])             # (e, q, d, c) = d w_c / d x_d
        return wq, gq

    def residual(self, u: np.ndarray) -> np.ndarray:
        """Vector c(u, u, phi_k) over all velocity test functions."""
        uq, gq = self._at_quadrature(u)
        adv = np.matmul(uq[:, :, None, :], gq)[:, :, 0, :]   # (e, q, c)
        return self.el.scatter_velocity(np.matmul(self.phiw_t, adv))

    def _advection_block(self, wq):
        # int phi_i (w . grad phi_j)
        cj = np.matmul(self.grad, wq[..., None])[..., 0]     # (e, q, j)
        return np.matmul(self.phiw_t, cj)                    # (e, i, j)

    def _local(self, w: np.ndarray, reaction: bool) -> np.ndarray:
        wq, gq = self._at_quadrature(w)
        blk = self._advection_block(wq)
        ne = len(blk)
        if reaction:
            # int phi_i phi_j d w_a / d x_b, stored at [i, a, j, b]
            r = np.matmul(self.ppw, gq.reshape(ne, -1, 4)).reshape(ne, 6, 6, 2, 2)
            local = np.ascontiguousarray(r.transpose(0, 1, 4, 2, 3))
        else:
            local = np.zeros((ne, 6, 2, 6, 2))
        local[:, :, 0, :, 0] += blk
        local[:, :, 1, :, 1] += blk
        return local

    def matrix(self, w: np.ndarray) -> sp.csr_matrix:
        """C(w) with (C(w) u)_k = c(w, u, phi_k)."""
        return self.el.vector_pattern.assemble(self._local(w, False))

    def jacobian_data(self, w: np.ndarray) -> np.ndarray:
        return self.el.vector_pattern.data(self._local(w, True))

    def jacobian(self, w: np.ndarray) -> sp.csr_matrix:
        """Derivative of u -> C(u) u at w: c(du, w, .) + c(w, du, .)."""
        return self.el.vector_pattern.matrix(self.jacobian_data(w))

    def both(self, w: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        return self.matrix(w), self.jacobian(w)


def assemble_convection(conv: ConvectionAssembler, w: np.ndarray):
    """Return ``(C(w), J_c(w))``."""
    return conv.both(w)


# --- interface --------------------------------------------------------------

def p2_line_mass(length: float, npoints: int = 3) -> np.ndarray:
    """P2 mass matrix on a segment; local order (end0, mid, end1)."""
    t, w = np.polynomial.legendre.leggauss(npoints)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w * length
    psi = np.column_stack([(1 - t) * (1 - 2 * t), 4 * t * (1 - t), t * (2 * t - 1)])
    return np.einsum("q,qi,qj->ij", w, psi, psi)


def assemble_interface_mass(interface: InterfaceMesh) -> sp.csr_matrix:
    """Mass matrix of the vector P2 trace space on the interface.

    Trace nodes are the interface vertices and segment midpoints sorted by
    y; trace DoF ``2*k + component``.
    """
    nseg = len(interface.segments)
    n = 2 * nseg + 1
    rows, cols, vals = [], [], []
    y = interface.points[:, 1]
    for s in range(nseg):
        loc = p2_line_mass(abs(y[s + 1] - y[s]))
        idx = np.array([2 * s, 2 * s + 1, 2 * s + 2])
        rows.append(np.repeat(idx, 3))
        cols.append(np.tile(idx, 3))
        vals.append(loc.ravel())
    scalar = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(n, n))
    return _interleave(scalar)


def trace_selection(dofmap: DofMap) -> sp.csr_matrix:
    """0/1 matrix taking velocity coefficients to trace-space coefficients."""
    dofs = dofmap.interface_dofs()
    n = len(dofs)
    return sp.csr_matrix((np.ones(n), (np.arange(n), dofs)), shape=(n, dofmap.n_velocity))


def assemble_interface_ops(dofmap: DofMap, interface: InterfaceMesh):
    """Return ``(T, M_gamma)``; ``T @ g`` is the load (g, v)_Gamma on velocity DoFs."""
    mg = assemble_interface_mass(interface)
    if mg.shape[0] != dofmap.n_trace:
        raise ValueError("interface nodes of the dofmap and trace space differ")
    sel = trace_selection(dofmap)
    return (sel.T @ mg).tocsr(), mg


# --- Dirichlet data -----------------------------------------------------------

@dataclass(frozen=True)
class DirichletData:
    """Prescribed values on a set of system DoFs."""

    dofs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.dofs) != len(self.values):
            raise ValueError("dofs and values differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite Dirichlet values")


def eliminate(matrix: sp.spmatrix, dofs: np.ndarray) -> sp.csr_matrix:
    """Zero the rows and columns of ``dofs`` and put ones on their diagonal."""
    n = matrix.shape[0]
    keep = np.ones(n)
    keep[dofs] = 0.0
    dk = sp.diags(keep)
    return (dk @ matrix @ dk + sp.diags(1.0 - keep)).tocsr()


def apply_dirichlet(matrix: sp.spmatrix, rhs: np.ndarray, data: DirichletData):
    """Symmetric elimination: returns the modified ``(matrix, rhs)``."""
    n = matrix.shape[0]
    dofs = np.asarray(data.dofs, dtype=np.int64)
    if dofs.size and (dofs.min() < 0 or dofs.max() >= n):
        raise IndexError(f"Dirichlet DoF outside system of size {n}")
    lifted = np.zeros(n)
    lifted[dofs] = data.values
    b = np.asarray(rhs, dtype=float) - matrix @ lifted
    b[dofs] = data.values
    return eliminate(matrix, dofs), b


def interpolate_velocity(dofmap: DofMap, func) -> np.ndarray:
    """Nodal P2 interpolant of ``func(x, y) -> (ux, uy)``."""
    x, y = dofmap.node_coords[:, 0], dofmap.node_coords[:, 1]
    ux, uy = func(x, y)
    out = np.empty(dofmap.n_velocity)
    out[0::2] = np.broadcast_to(ux, x.shape)
    out[1::2] = np.broadcast_to(uy, x.shape)
    return out


def interpolate_pressure(dofmap: DofMap, mesh: Mesh, func) -> np.ndarray:
    return np.broadcast_to(func(mesh.points[:, 0], mesh.points[:, 1]), (mesh.n_vertices,)).astype(float)
