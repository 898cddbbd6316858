import numpy as np
import pytest

from ddcouple.fem import interpolate_velocity
from ddcouple.mesh import generate_bfs_mesh, generate_rect_mesh
from ddcouple.solvers import DDProblem, FlowProblem, Mu, NewtonError, NewtonSettings

MU = Mu(3.0, 0.8)
DT = 0.01


def exact_poiseuille(fem, U, ly):
    y = fem.dofmap.node_coords[:, 1]
    out = np.zeros(fem.nu_dofs)
    out[0::2] = 4.0 * U * y * (ly - y) / ly ** 2
    return out


def test_zero_data_gives_zero(coarse_problem):
    mu0 = Mu(0.0, 1.0)
    st = coarse_problem.monolithic_step(np.zeros(coarse_problem.mono.nu_dofs), mu0, DT)
    assert np.abs(st.u).max() == 0.0 and np.abs(st.p).max() == 0.0
    for i in (1, 2):
        sub = coarse_problem.sub[i - 1]
        st = coarse_problem.subdomain_state_step(i, np.zeros(coarse_problem.n_control),
                                                 np.zeros(sub.nu_dofs), mu0, DT)
        assert np.abs(st.u).max() == 0.0 and np.abs(st.p).max() == 0.0


@pytest.mark.parametrize("h,ly,U,nu", [(0.25, 1.0, 1.0, 1.0), (0.5, 2.0, 2.0, 0.5)])
def test_steady_poiseuille(h, ly, U, nu):
    fem = FlowProblem(generate_rect_mesh(4.0, ly, h))
    st = fem.solve_state(Mu(U, nu), None, np.zeros(fem.nu_dofs))
    assert np.abs(st.u - exact_poiseuille(fem, U, ly)).max() <= 1e-8
    assert st.divergence <= 1e-9


def test_poiseuille_is_a_fixed_point_of_the_time_step():
    fem = FlowProblem(generate_rect_mesh(4.0, 1.0, 0.25))
    u = exact_poiseuille(fem, 1.5, 1.0)
    for _ in range(5):
        u = fem.solve_state(Mu(1.5, 0.7), DT, u).u
    assert np.abs(u - exact_poiseuille(fem, 1.5, 1.0)).max() <= 1e-8


def test_transient_poiseuille_converges():
    fem = FlowProblem(generate_rect_mesh(4.0, 1.0, 0.25))
    u = np.zeros(fem.nu_dofs)
    for _ in range(60):
        u = fem.solve_state(Mu(1.0, 1.0), 0.5, u).u
    assert np.abs(u - exact_poiseuille(fem, 1.0, 1.0)).max() <= 1e-8


def test_dirichlet_values_exact(coarse_problem):
    fem = coarse_problem.mono
    st = coarse_problem.monolithic_step(np.zeros(fem.nu_dofs), MU, DT)
    prof = interpolate_velocity(fem.dofmap, lambda x, y: (
        MU.U * 4.0 / 9.0 * (y - 2.0) * (5.0 - y) * (x == 0.0), 0.0 * x))
    d = fem.dirichlet
    assert np.array_equal(st.u[d], fem.dirichlet_values(MU)[d])
    assert np.abs(st.u[d] - prof[d]).max() <= 1e-14 * MU.U


def test_newton_failure_reports_history(coarse_problem):
    fem = coarse_problem.mono
    with pytest.raises(NewtonError) as err:
        fem.solve_state(Mu(4.5, 0.4), DT, np.zeros(fem.nu_dofs),
                        settings=NewtonSettings(atol=0.0, rtol=0.0, maxiter=1))
    assert len(err.value.history) == 2


def test_stokes_superposition(coarse_problem, rng):
    n = coarse_problem.n_control
    g1, g2 = rng.standard_normal(n), rng.standard_normal(n)
    for i in (1, 2):
        prev = rng.standard_normal(coarse_problem.sub[i - 1].nu_dofs) * 0.1

        def u(g):
            return coarse_problem.subdomain_state_step(i, g, prev, MU, DT, convection=False).u

        u0 = u(np.zeros(n))
        lhs = u(g1 + g2) - u0
        rhs = (u(g1) - u0) + (u(g2) - u0)
        assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(lhs).max())


def gauss_functional(problem, delta):
    """Per-segment 5-point Gauss rule on the P2 interpolant of the jump."""
    y = problem.gamma.points[:, 1]
    t, w = np.polynomial.legendre.leggauss(5)
    t = 0.5 * (t + 1)
    total = 0.0
    for s in range(len(y) - 1):
        L = y[s + 1] - y[s]
        psi = np.column_stack([(1 - t) * (1 - 2 * t), 4 * t * (1 - t), t * (2 * t - 1)])
        for c in range(2):
            vals = psi @ delta[2 * (2 * s) + c: 2 * (2 * s + 3) + c: 2]
            total += 0.5 * L * np.sum(0.5 * w * vals ** 2)
    return total


def test_functional_values(coarse_problem, rng):
    p = coarse_problem
    n = p.n_control
    u1 = rng.standard_normal(p.sub[0].nu_dofs)
    u2 = np.zeros(p.sub[1].nu_dofs)
    u2[p.sub[1].dofmap.interface_dofs()] = p.sub[0].trace(u1)
    assert p.compute_functional(u1, u2) == 0.0
    ex = np.zeros(n)
    ex[0::2] = 1.0
    assert p.functional_from_traces(ex) == pytest.approx(2.5, rel=1e-14)
    delta = rng.standard_normal(n)
    assert p.functional_from_traces(delta) == pytest.approx(gauss_functional(p, delta), rel=1e-12)
    assert p.functional_from_traces(delta) >= 0


def subdomain_pair(problem, g, prevs, mu=MU, convection=True):
    return tuple(problem.subdomain_state_step(i, g, prevs[i - 1], mu, DT, convection=convection)
                 for i in (1, 2))


def test_adjoint_zero_for_matching_traces(coarse_problem):
    p = coarse_problem
    s = subdomain_pair(p, np.zeros(p.n_control), [np.zeros(f.nu_dofs) for f in p.sub])
    # fabricate a matching right state by copying the left trace
    s2 = s[1]
    s2.u[p.sub[1].dofmap.interface_dofs()] = p.sub[0].trace(s[0].u)
    for i in (1, 2):
        adj = p.subdomain_adjoint(i, s[0], s2)
        assert np.abs(adj.xi).max() == 0.0 and np.abs(adj.lam).max() == 0.0
    riesz, raw = p.compute_gradient(np.zeros(p.sub[0].nu_dofs), np.zeros(p.sub[1].nu_dofs))
    assert not riesz.any() and not raw.any()


def fd_gradient_error(problem, g, d, prevs, convection, eps=None):
    eps = 1e-6 * np.linalg.norm(g) + 1e-8 if eps is None else eps
    s = subdomain_pair(problem, g, prevs, convection=convection)
    adj = [problem.subdomain_adjoint(i, *s) for i in (1, 2)]
    _, raw = problem.compute_gradient(adj[0].xi, adj[1].xi)

    def J(gg):
        return problem.compute_functional(*(x.u for x in subdomain_pair(problem, gg, prevs,
                                                                        convection=convection)))
    fd = (J(g + eps * d) - J(g - eps * d)) / (2 * eps)
    return abs(raw @ d - fd) / max(abs(fd), 1e-300), adj


def test_lagrangian_identity_stokes(coarse_problem, rng):
    p = coarse_problem
    prevs = [0.1 * rng.standard_normal(f.nu_dofs) for f in p.sub]
    g = rng.standard_normal(p.n_control)
    d = rng.standard_normal(p.n_control)
    err, adj = fd_gradient_error(p, g, d, prevs, convection=False, eps=1e-3)
    assert err <= 1e-8
    assert max(a.divergence for a in adj) <= 1e-9
    for a, f in zip(adj, p.sub):
        assert np.abs(a.xi[f.dirichlet]).max() == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_central_difference(desk_problem, seed):
    p = desk_problem
    rng = np.random.default_rng(seed)
    prevs = [np.zeros(f.nu_dofs) for f in p.sub]
    for _ in range(seed):
        s = subdomain_pair(p, np.zeros(p.n_control), prevs)
        prevs = [x.u for x in s]
    g = rng.standard_normal(p.n_control)
    d = rng.standard_normal(p.n_control)
    err, adj = fd_gradient_error(p, g, d, prevs, convection=True)
    assert err <= 1e-5
    assert max(a.divergence for a in adj) <= 1e-9


def test_states_divergence_free(desk_problem, rng):
    p = desk_problem
    st = p.monolithic_step(np.zeros(p.mono.nu_dofs), Mu(4.5, 0.4), DT)
    assert st.divergence <= 1e-9
    for s in subdomain_pair(p, rng.standard_normal(p.n_control),
                            [np.zeros(f.nu_dofs) for f in p.sub], Mu(4.5, 0.4)):
        assert s.divergence <= 1e-9


def test_restriction_round_trip(coarse_problem, rng):
    p = coarse_problem
    u = rng.standard_normal(p.mono.nu_dofs)
    u1, u2 = p.restrict_velocity(1, u), p.restrict_velocity(2, u)
    assert np.array_equal(p.sub[0].trace(u1), p.sub[1].trace(u2))
    assert p.compute_functional(u1, u2) == 0.0


def test_flux_control_reproduces_left_state_outside_interface_pressure(desk_problem):
    # the extracted flux balances the restricted full solution in every
    # momentum equation of the left subdomain
    p = desk_problem
    mono = p.monolithic_step(np.zeros(p.mono.nu_dofs), MU, DT)
    g = p.monolithic_flux(mono, t=DT)
    sub = p.sub[0]
    u = p.restrict_velocity(1, mono.u)
    pr = p.restrict_pressure(1, mono.p)
    r = sub.residual(u, pr, np.zeros(sub.nu_dofs), MU, DT, sub.interface_load(g))
    assert np.abs(r[: sub.nu_dofs]).max() <= 1e-9 * np.abs(sub.interface_load(g)).max()


@pytest.mark.xfail(strict=True, reason="separate subdomain pressures impose the divergence "
                   "constraint of interface pressure nodes on each side; the full solution "
                   "only satisfies their sum")
def test_monolithic_flux_reproduces_restriction(desk_problem):
    p = desk_problem
    mono = p.monolithic_step(np.zeros(p.mono.nu_dofs), MU, DT)
    g = p.monolithic_flux(mono, t=DT)
    s = subdomain_pair(p, g, [np.zeros(f.nu_dofs) for f in p.sub])
    err = p.relative_errors(mono, s[0].u, s[0].p, s[1].u, s[1].p)
    assert p.compute_functional(s[0].u, s[1].u) <= 1e-12
    assert max(err["u1"], err["u2"]) <= 1e-8


def test_restricted_state_violates_split_divergence(desk_problem):
    # the reason behind the expected failure above, checked directly
    p = desk_problem
    mono = p.monolithic_step(np.zeros(p.mono.nu_dofs), MU, DT)
    b1 = p.sub[0].ops.B @ p.restrict_velocity(1, mono.u)
    b2 = p.sub[1].ops.B @ p.restrict_velocity(2, mono.u)
    gam = np.isclose(p.sub[0].mesh.points[:, 0], 9.0)
    gam2 = np.isclose(p.sub[1].mesh.points[:, 0], 9.0)
    assert np.abs(b1[~gam]).max() <= 1e-9
    assert np.abs(b1[gam]).max() > 1e-4
    # on each interface pressure node the two halves cancel
    y1 = p.sub[0].mesh.points[gam, 1]
    y2 = p.sub[1].mesh.points[gam2, 1]
    assert np.array_equal(np.sort(y1), np.sort(y2))
    s1 = b1[gam][np.argsort(y1)]
    s2 = b2[gam2][np.argsort(y2)]
    assert np.abs(s1 + s2).max() <= 1e-9


@pytest.mark.slow
def test_bfs_hundred_steps():
    p = DDProblem(generate_bfs_mesh(0.5, 9.0))
    u = np.zeros(p.mono.nu_dofs)
    for n in range(1, 101):
        st = p.monolithic_step(u, Mu(4.5, 0.4), DT, t=n * DT)
        assert st.divergence <= 1e-9
        u = st.u
    assert np.all(np.isfinite(u))
    assert abs(n * DT - 1.0) < 1e-12
