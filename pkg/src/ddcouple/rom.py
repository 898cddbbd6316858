"""Offline POD bases and online Galerkin-reduced subdomain solves.

Velocity snapshots are homogenised with the lifting ``U * l_unit`` where
``l_unit`` is a Stokes field carrying the unit inflow profile. Bases are
orthonormal in the inner product of their space: H1 (mass + stiffness) for
velocity, L2 for pressure, L2 on the interface for the control. Pressure
supremizers are appended to the velocity bases.

The reduced convection term is stored as a dense 3-tensor so that a
reduced solve never touches FEM-sized arrays.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import eliminate
from .linalg import DenseLU, SparseLU, svd
from .solvers import DDProblem, FlowProblem, Mu, NewtonError

log = logging.getLogger(__name__)

INNER_PRODUCTS = {"velocity": "H1 = mass + stiffness", "pressure": "L2", "control": "L2 on interface"}
MAGIC = b"DDCBASIS"
VERSION = 1


class RankError(ValueError):
    def __init__(self, requested: int, rank: int):
        super().__init__(f"requested {requested} modes but the snapshot set has numerical rank {rank}")
        self.requested = requested
        self.rank = rank


class BasisFileError(ValueError):
    pass


class FingerprintError(BasisFileError):
    pass


# -- POD ---------------------------------------------------------------------------

def _xdot(X, a, b):
    return a.T @ b if X is None else a.T @ (X @ b)


def weighted_qr(S: np.ndarray, X=None, drop_tol: float = 1e-13):
    """``S = Q R`` with ``Q^T X Q = I`` on the nonzero columns (CGS2).

    Columns that are numerically dependent on earlier ones get a zero
    column in ``Q`` and a zero diagonal in ``R``.
    """
    S = np.asarray(S, dtype=float)
    n, m = S.shape
    Q = np.zeros((n, m))
    R = np.zeros((m, m))
    for j in range(m):
        v = S[:, j].copy()
        nrm0 = math.sqrt(max(float(_xdot(X, v, v)), 0.0))
        for _ in range(2):
            c = _xdot(X, Q[:, :j], v)
            v -= Q[:, :j] @ c
            R[:j, j] += c
        nrm = math.sqrt(max(float(_xdot(X, v, v)), 0.0))
        if nrm > drop_tol * nrm0 and nrm > 0.0:
            Q[:, j] = v / nrm
            R[j, j] = nrm
    return Q, R


def pod_basis(S: np.ndarray, n_modes: int, X=None, rank_tol: float = 1e-12):
    """Leading ``n_modes`` POD modes of ``S`` in the ``X`` inner product.

    Returns ``(Z, sigma)`` with all singular values of the weighted snapshot
    matrix. Raises :class:`RankError` if ``n_modes`` exceeds the numerical
    rank (singular values above ``rank_tol * sigma_1``).
    """
    S = np.asarray(S, dtype=float)
    if n_modes < 1:
        raise ValueError("n_modes must be positive")
    Q, R = weighted_qr(S, X)
    U, sigma, _ = svd(R)
    rank = int(np.sum(sigma > rank_tol * sigma[0])) if sigma.size and sigma[0] > 0 else 0
    if n_modes > rank:
        raise RankError(n_modes, rank)
    Z = Q @ U[:, :n_modes]
    # one more pass restores orthonormality lost in the product
    Z, _ = weighted_qr(Z, X)
    return Z, sigma


def projection_errors(S: np.ndarray, Z: np.ndarray, X=None) -> np.ndarray:
    """Per-snapshot ``|s - Z Z^T X s|_X``."""
    E = S - Z @ _xdot(X, Z, S)
    return np.sqrt(np.maximum(np.einsum("ij,ij->j", E, E if X is None else X @ E), 0.0))


def orthonormal_append(Z: np.ndarray, V: np.ndarray, X=None, drop_tol: float = 1e-10):
    """Gram-Schmidt the columns of ``V`` against ``Z`` (twice) and append.

    Columns that vanish after orthogonalisation are skipped.
    """
    cols = [Z[:, k] for k in range(Z.shape[1])]
    added = 0
    for v in V.T:
        v = np.array(v, dtype=float)
        nrm0 = math.sqrt(max(float(_xdot(X, v, v)), 0.0))
        if nrm0 == 0.0:
            continue
        B = np.column_stack(cols) if cols else np.zeros((len(v), 0))
        for _ in range(2):
            v -= B @ _xdot(X, B, v)
        nrm = math.sqrt(max(float(_xdot(X, v, v)), 0.0))
        if nrm <= drop_tol * nrm0:
            continue
        cols.append(v / nrm)
        added += 1
    out = np.column_stack(cols) if cols else np.zeros((Z.shape[0], 0))
    return out, added


def supremizers(fem: FlowProblem, Zp: np.ndarray) -> np.ndarray:
    """Solve ``X_u s = B^T q`` with homogeneous Dirichlet data for each column q."""
    Xe = eliminate(fem.ops.X, fem.dirichlet)
    lu = SparseLU(Xe)
    rhs = fem.ops.B.T @ Zp
    rhs[fem.dirichlet, :] = 0.0
    return np.column_stack([lu.solve(rhs[:, k]) for k in range(Zp.shape[1])]) \
        if Zp.shape[1] else np.zeros((fem.nu_dofs, 0))


def supremizer_enrich(fem: FlowProblem, Zu: np.ndarray, Zp: np.ndarray):
    """Append X-orthonormalised supremizers of ``Zp`` to ``Zu``; returns ``(Z, n_added)``."""
    return orthonormal_append(Zu, supremizers(fem, Zp), fem.ops.X)


# -- snapshots ---------------------------------------------------------------------

@dataclass
class SnapshotSet:
    """Homogenised snapshots, one column per (parameter, step)."""

    mus: list
    index: list            # column -> (parameter index, step)
    times: np.ndarray
    u1: np.ndarray
    p1: np.ndarray
    u2: np.ndarray
    p2: np.ndarray
    g: np.ndarray
    J: np.ndarray

    @property
    def n_columns(self) -> int:
        return len(self.index)

    def column(self, mu_index: int, step: int) -> int:
        return self.index.index((mu_index, step))

    @classmethod
    def empty(cls, dims) -> "SnapshotSet":
        z = [np.zeros((d, 0)) for d in dims]
        return cls([], [], np.zeros(0), *z, np.zeros(0))

    def append_run(self, mu: Mu, run, lifts) -> None:
        """Add one FFF transient run (a :class:`coupling.TransientResult`)."""
        k = len(self.mus)
        self.mus.append(mu)
        arch = run.archive
        n = len(arch["time"])
        self.index.extend((k, s + 1) for s in range(n))
        self.times = np.concatenate([self.times, arch["time"]])
        self.u1 = np.hstack([self.u1, arch["u1"].T - mu.U * lifts[0][:, None]])
        self.u2 = np.hstack([self.u2, arch["u2"].T - mu.U * lifts[1][:, None]])
        self.p1 = np.hstack([self.p1, arch["p1"].T])
        self.p2 = np.hstack([self.p2, arch["p2"].T])
        self.g = np.hstack([self.g, arch["g"].T])
        self.J = np.concatenate([self.J, [r.J for r in run.reports]])


def sample_parameters(n: int, seed: int, box=((0.5, 4.5), (0.4, 2.0))) -> list:
    """Uniform samples of (U, nu) in ``box`` from a seeded generator."""
    rng = np.random.default_rng(seed)
    lo = np.array([box[0][0], box[1][0]])
    hi = np.array([box[0][1], box[1][1]])
    pts = lo + (hi - lo) * rng.random((n, 2))
    return [Mu(float(a), float(b)) for a, b in pts]


def lifting_fields(problem: DDProblem) -> tuple[np.ndarray, np.ndarray]:
    return tuple(s.stokes_lifting() for s in problem.sub)


def collect_snapshots(coupler, training, dt: float, n_steps: int, lifts=None,
                      max_fail_fraction: float = 1.0):
    """Run the FEM optimisation for every training parameter and stack snapshots.

    Returns ``(snapshots, failures)`` where ``failures`` lists
    ``(index, mu, message)`` for parameters whose run raised.
    """
    from .coupling import CouplingMode

    problem = coupler.problem
    lifts = lifting_fields(problem) if lifts is None else lifts
    dims = [problem.sub[0].nu_dofs, problem.sub[0].np_dofs,
            problem.sub[1].nu_dofs, problem.sub[1].np_dofs, problem.n_control]
    snaps = SnapshotSet.empty(dims)
    failures = []
    for k, mu in enumerate(training):
        try:
            run = coupler.run_transient(CouplingMode.FFF, mu, dt, n_steps)
        except (NewtonError, np.linalg.LinAlgError, RuntimeError) as exc:
            log.warning("training parameter %d %s failed: %s", k, tuple(mu), exc)
            failures.append((k, mu, str(exc)))
            continue
        snaps.append_run(mu, run, lifts)
    if len(failures) > max_fail_fraction * len(training):
        raise RuntimeError(f"{len(failures)} of {len(training)} training runs failed")
    return snaps, failures


# -- bases and reduced operators -------------------------------------------------------

@dataclass
class SubdomainBasis:
    Z: np.ndarray            # velocity modes, POD then supremizers
    Zp: np.ndarray
    lift: np.ndarray         # unit lifting field
    n_pod: int
    n_supremizers: int
    sigma_u: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sigma_p: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class ReducedBasis:
    sub: tuple
    Zg: np.ndarray
    sigma_g: np.ndarray
    fingerprint: str
    meta: dict = field(default_factory=dict)

    def mode_counts(self) -> dict:
        s1, s2 = self.sub
        return {"u1": s1.n_pod, "p1": s1.Zp.shape[1], "s1": s1.n_supremizers,
                "u2": s2.n_pod, "p2": s2.Zp.shape[1], "s2": s2.n_supremizers,
                "g": self.Zg.shape[1]}


def problem_fingerprint(problem: DDProblem) -> str:
    sha = hashlib.sha256(problem.mesh.fingerprint().encode())
    sha.update(repr(float(problem.gamma.x)).encode())
    return sha.hexdigest()


def build_basis(problem: DDProblem, snaps: SnapshotSet, counts: dict, lifts=None,
                meta: dict | None = None) -> ReducedBasis:
    """POD of every field plus supremizer enrichment.

    ``counts`` holds ``u1, u2, p1, p2, g`` mode numbers.
    """
    lifts = lifting_fields(problem) if lifts is None else lifts
    subs = []
    for i, (fem, S_u, S_p) in enumerate(((problem.sub[0], snaps.u1, snaps.p1),
                                         (problem.sub[1], snaps.u2, snaps.p2)), start=1):
        Zu, sig_u = pod_basis(S_u, counts[f"u{i}"], fem.ops.X)
        Zp, sig_p = pod_basis(S_p, counts[f"p{i}"], fem.ops.Mp)
        Z, nsup = supremizer_enrich(fem, Zu, Zp)
        subs.append(SubdomainBasis(Z=Z, Zp=Zp, lift=np.asarray(lifts[i - 1]), n_pod=Zu.shape[1],
                                   n_supremizers=nsup, sigma_u=sig_u, sigma_p=sig_p))
    Zg, sig_g = pod_basis(snaps.g, counts["g"], problem.Mg)
    return ReducedBasis(sub=tuple(subs), Zg=Zg, sigma_g=sig_g,
                        fingerprint=problem_fingerprint(problem), meta=dict(meta or {}))


@dataclass
class ReducedState:
    a: np.ndarray            # homogeneous velocity coefficients
    b: np.ndarray            # pressure coefficients
    U: float                 # lifting scale
    mu: Mu | None = None
    dt: float | None = None
    iterations: int = 0
    residuals: list = field(default_factory=list)
    divergence: float = 0.0

    @classmethod
    def zero(cls, n: int, npr: int) -> "ReducedState":
        return cls(np.zeros(n), np.zeros(npr), 0.0)


@dataclass
class ReducedAdjoint:
    xi: np.ndarray
    lam: np.ndarray
    divergence: float = 0.0


@dataclass
class ReducedNewtonSettings:
    atol: float = 1e-10
    rtol: float = 1e-12
    maxiter: int = 50


OPERATOR_FIELDS = ("Mr", "Kr", "Br", "Ml", "Kl", "Bl", "Ct", "Lc", "cll", "Tr", "PZ", "Pl")


class ReducedModel:
    """Galerkin projection of one subdomain problem onto its basis.

    The velocity is ``Z a + U l`` with ``l`` the unit lifting; ``sign`` is
    the interface-load sign of the subdomain.
    """

    def __init__(self, basis: SubdomainBasis, sign: int, ops: dict):
        self.basis = basis
        self.sign = sign
        for name in OPERATOR_FIELDS:
            setattr(self, name, np.asarray(ops[name], dtype=float))
        self.N = basis.Z.shape[1]
        self.Np = basis.Zp.shape[1]
        self._ct2 = self.Ct.reshape(self.N, self.N * self.N)

    @classmethod
    def from_fem(cls, fem: FlowProblem, basis: SubdomainBasis) -> "ReducedModel":
        Z, Zp, l = basis.Z, basis.Zp, basis.lift
        o = fem.ops
        ops = {"Mr": Z.T @ (o.M @ Z), "Kr": Z.T @ (o.K @ Z), "Br": Zp.T @ (o.B @ Z),
               "Ml": Z.T @ (o.M @ l), "Kl": Z.T @ (o.K @ l), "Bl": Zp.T @ (o.B @ l)}
        N = Z.shape[1]
        Ct = np.empty((N, N, N))
        for j in range(N):
            Ct[:, j, :] = Z.T @ (fem.conv.matrix(Z[:, j]) @ Z)
        ops["Ct"] = Ct
        ops["Lc"] = Z.T @ (fem.conv.jacobian(l) @ Z)
        ops["cll"] = Z.T @ fem.conv.residual(l)
        ops["Tr"] = Z.T @ fem.T.toarray()
        ops["PZ"] = fem.sel @ Z
        ops["Pl"] = fem.sel @ l
        return cls(basis, fem.sign, ops)

    def operators(self) -> dict:
        return {name: getattr(self, name) for name in OPERATOR_FIELDS}

    # -- fields --------------------------------------------------------------------
    def lift(self, state: ReducedState) -> tuple[np.ndarray, np.ndarray]:
        """FEM velocity and pressure of a reduced state."""
        return self.basis.Z @ state.a + state.U * self.basis.lift, self.basis.Zp @ state.b

    def trace(self, state: ReducedState) -> np.ndarray:
        return self.PZ @ state.a + state.U * self.Pl

    def interface_load(self, g: np.ndarray) -> np.ndarray:
        """Reduced load ``sign * Z^T T g`` for a control ``g`` on the trace space."""
        return self.sign * (self.Tr @ g)

    # -- residual and Jacobian -----------------------------------------------------
    def _inv_dt(self, dt) -> float:
        return 0.0 if dt is None or math.isinf(dt) else 1.0 / dt

    def residual(self, a, b, U, prev: ReducedState, mu: Mu, dt, rhs, convection=True):
        idt = self._inv_dt(dt)
        ru = idt * (self.Mr @ (a - prev.a) + (U - prev.U) * self.Ml) \
            + mu.nu * (self.Kr @ a + U * self.Kl) + self.Br.T @ b - rhs
        if convection:
            ru += self._ct2 @ np.outer(a, a).ravel() + U * (self.Lc @ a) + U * U * self.cll
        rp = self.Br @ a + U * self.Bl
        return np.concatenate([ru, rp])

    def jacobian(self, a, U, mu: Mu, dt, convection=True) -> np.ndarray:
        N, Np = self.N, self.Np
        Juu = self._inv_dt(dt) * self.Mr + mu.nu * self.Kr
        if convection:
            Juu = Juu + self.Ct @ a + np.einsum("ijm,j->im", self.Ct, a) + U * self.Lc
        J = np.zeros((N + Np, N + Np))
        J[:N, :N] = Juu
        J[:N, N:] = self.Br.T
        J[N:, :N] = self.Br
        return J

    def solve_state(self, mu: Mu, dt, prev: ReducedState, load=None, guess: ReducedState | None = None,
                    settings: ReducedNewtonSettings | None = None, convection=True) -> ReducedState:
        """Dense Newton solve of the reduced implicit-Euler step.

        ``load`` is the reduced right-hand side (interface and body forces).
        """
        st = settings or ReducedNewtonSettings()
        rhs = np.zeros(self.N) if load is None else np.asarray(load, dtype=float)
        U = mu.U
        start = guess if guess is not None else prev
        a = np.array(start.a, dtype=float)
        b = np.array(start.b, dtype=float)
        r = self.residual(a, b, U, prev, mu, dt, rhs, convection)
        history = [float(np.abs(r).max())]
        r0 = history[0]
        it = 0
        while history[-1] > max(st.atol, st.rtol * r0):
            if it >= st.maxiter:
                raise NewtonError(f"reduced Newton did not converge in {st.maxiter} iterations",
                                  history)
            dx = DenseLU(self.jacobian(a, U, mu, dt, convection)).solve(-r)
            a += dx[: self.N]
            b += dx[self.N:]
            it += 1
            r = self.residual(a, b, U, prev, mu, dt, rhs, convection)
            history.append(float(np.abs(r).max()))
            if not np.isfinite(history[-1]):
                raise NewtonError("reduced Newton diverged", history)
        div = float(np.abs(self.Br @ a + U * self.Bl).max()) if self.Np else 0.0
        return ReducedState(a=a, b=b, U=U, mu=mu, dt=dt, iterations=it, residuals=history,
                            divergence=div)

    def solve_adjoint(self, state: ReducedState, rhs_u: np.ndarray, convection=True) -> ReducedAdjoint:
        J = self.jacobian(state.a, state.U, state.mu, state.dt, convection)
        rhs = np.concatenate([rhs_u, np.zeros(self.Np)])
        x = DenseLU(J).solve(rhs, trans=True)
        xi, lam = x[: self.N], x[self.N:]
        return ReducedAdjoint(xi=xi, lam=lam,
                              divergence=float(np.abs(self.Br @ xi).max()) if self.Np else 0.0)


# -- projection and lifting operators -------------------------------------------------

class ProjectionOperators:
    """The reduced/FEM maps used by the hybrid couplings.

    ``Pi(i, mu, u) = Z_i^T X (u - U l_i)`` with transpose ``a -> Z_i a + U l_i``;
    ``Pi0`` is the same without lifting; ``PiX(g) = Z_g^T M_G g``.
    """

    def __init__(self, basis: ReducedBasis, X: tuple, Mg):
        self.basis = basis
        self.X = X
        self.Mg = Mg

    def _check(self, v, n, what):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != n:
            raise ValueError(f"{what}: expected leading dimension {n}, got {v.shape[0]}")
        return v

    def Pi(self, i, mu: Mu, u):
        sb = self.basis.sub[i - 1]
        u = self._check(u, sb.Z.shape[0], "Pi")
        return sb.Z.T @ (self.X[i - 1] @ (u - mu.U * sb.lift))

    def Pi_T(self, i, mu: Mu, a):
        sb = self.basis.sub[i - 1]
        return sb.Z @ self._check(a, sb.Z.shape[1], "Pi_T") + mu.U * sb.lift

    def Pi0(self, i, u):
        sb = self.basis.sub[i - 1]
        return sb.Z.T @ (self.X[i - 1] @ self._check(u, sb.Z.shape[0], "Pi0"))

    def Pi0_T(self, i, a):
        sb = self.basis.sub[i - 1]
        return sb.Z @ self._check(a, sb.Z.shape[1], "Pi0_T")

    def PiX(self, g):
        Zg = self.basis.Zg
        return Zg.T @ (self.Mg @ self._check(g, Zg.shape[0], "PiX"))

    def PiX_T(self, gN):
        Zg = self.basis.Zg
        return Zg @ self._check(gN, Zg.shape[1], "PiX_T")


def apply_projection(ops: ProjectionOperators, name: str, field, i: int | None = None,
                     mu: Mu | None = None):
    """Apply the operator called ``name`` (Pi, Pi_T, Pi0, Pi0_T, PiX, PiX_T)."""
    if name in ("Pi", "Pi_T"):
        return getattr(ops, name)(i, mu, field)
    if name in ("Pi0", "Pi0_T"):
        return getattr(ops, name)(i, field)
    if name in ("PiX", "PiX_T"):
        return getattr(ops, name)(field)
    raise ValueError(f"unknown projection {name!r}")


# -- persistence ------------------------------------------------------------------------

def _basis_arrays(basis: ReducedBasis, models) -> list:
    arrays = []
    for i, (sb, rm) in enumerate(zip(basis.sub, models), start=1):
        arrays += [(f"s{i}.Z", sb.Z), (f"s{i}.Zp", sb.Zp), (f"s{i}.lift", sb.lift),
                   (f"s{i}.sigma_u", sb.sigma_u), (f"s{i}.sigma_p", sb.sigma_p)]
        arrays += [(f"s{i}.{name}", getattr(rm, name)) for name in OPERATOR_FIELDS]
        arrays.append((f"s{i}.info", np.array([sb.n_pod, sb.n_supremizers, rm.sign], dtype=float)))
    arrays += [("Zg", basis.Zg), ("sigma_g", basis.sigma_g)]
    return arrays


def save_basis(path, basis: ReducedBasis, models) -> dict:
    """Write the binary container and its JSON manifest; returns the manifest.

    Layout (little endian): magic ``DDCBASIS``, u32 version, 32-byte
    SHA-256 fingerprint, u32 field count, then per field a u16 name length,
    the UTF-8 name, u8 rank and u64 extents; a 32-byte SHA-256 of all header
    bytes so far; the arrays as column-major float64 in header order; a
    trailing 32-byte SHA-256 of the array bytes.
    """
    path = Path(path)
    arrays = _basis_arrays(basis, models)
    head = bytearray(MAGIC)
    head += struct.pack("<I", VERSION)
    head += bytes.fromhex(basis.fingerprint)
    head += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        arr = np.asarray(arr, dtype=float)
        nb = name.encode()
        head += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += hashlib.sha256(head).digest()
    body = b"".join(np.asarray(arr, dtype="<f8").tobytes(order="F") for _, arr in arrays)
    payload = bytes(head) + body + hashlib.sha256(body).digest()
    path.write_bytes(payload)
    manifest = {
        "format": "DDCBASIS", "version": VERSION, "fingerprint": basis.fingerprint,
        "file": path.name, "sha256": hashlib.sha256(payload).hexdigest(),
        "fields": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays],
        "mode_counts": basis.mode_counts(),
        "inner_products": INNER_PRODUCTS, "meta": basis.meta,
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_basis(path, expected_fingerprint: str | None = None):
    """Read a container written by :func:`save_basis`; returns ``(basis, models)``.

    Any corruption of header or data, and a fingerprint that differs from
    ``expected_fingerprint``, raise :class:`FingerprintError`.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise BasisFileError(f"{path}: not a basis container")
    pos = 8
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise BasisFileError(f"{path}: unsupported version {version}")
    fingerprint = raw[pos:pos + 32].hex()
    pos += 32
    try:
        (nfields,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shapes = []
        for _ in range(nfields):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            shapes.append((name, shape))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FingerprintError(f"{path}: corrupt header ({exc})") from None
    if hashlib.sha256(raw[:pos]).digest() != raw[pos:pos + 32]:
        raise FingerprintError(f"{path}: header checksum mismatch")
    pos += 32
    body = raw[pos:-32]
    if hashlib.sha256(body).digest() != raw[-32:]:
        raise FingerprintError(f"{path}: data checksum mismatch")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintError(
            f"{path}: basis was built for mesh {fingerprint[:12]}, current mesh is "
            f"{expected_fingerprint[:12]}")
    arrays = {}
    off = 0
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(
            shape, order="F").copy(order="C")
        off += 8 * n
    manifest_path = Path(str(path) + ".json")
    meta = {}
    if manifest_path.exists():
        meta = json.loads(manifest_path.read_text()).get("meta", {})
    subs, models = [], []
    for i in (1, 2):
        n_pod, nsup, sign = (int(v) for v in arrays[f"s{i}.info"])
        sb = SubdomainBasis(Z=arrays[f"s{i}.Z"], Zp=arrays[f"s{i}.Zp"], lift=arrays[f"s{i}.lift"],
                            n_pod=n_pod, n_supremizers=nsup, sigma_u=arrays[f"s{i}.sigma_u"],
                            sigma_p=arrays[f"s{i}.sigma_p"])
        subs.append(sb)
        ops = {name: arrays[f"s{i}.{name}"] for name in OPERATOR_FIELDS}
        models.append(ReducedModel(sb, sign, ops))
    basis = ReducedBasis(sub=tuple(subs), Zg=arrays["Zg"], sigma_g=arrays["sigma_g"],
                         fingerprint=fingerprint, meta=meta)
    return basis, tuple(models)
