import numpy as np
import pytest
from numpy.polynomial import chebyshev as C

from fedsciml import solvers as S


def test_rk45_examples():
    q = np.linspace(0, 1, 21)
    assert np.all(S.rk45(lambda x: np.zeros(2), q) == 0.0)
    assert np.max(np.abs(S.rk45(np.cos, q)[0] - np.sin(q))) < 1e-8
    t3 = lambda x: C.chebval(2 * x - 1, [0, 0, 0, 1])  # noqa: E731
    # antiderivative of T3(2x - 1) on [0, 1] by polynomial algebra
    anti = C.chebint([0, 0, 0, 1], lbnd=-1) / 2
    assert np.max(np.abs(S.rk45(t3, q)[0] - C.chebval(2 * q - 1, anti))) < 1e-8


def test_rk45_batches_polynomials_exactly():
    rng = np.random.default_rng(0)
    coeffs = rng.uniform(-1, 1, (8, 11))
    q = np.linspace(0, 1, 50)
    got = S.rk45(lambda x: C.chebval(x, coeffs.T), q)
    want = np.array([C.chebval(q, C.chebint(c, lbnd=0)) for c in coeffs])
    assert np.max(np.abs(got - want)) < 1e-8


def test_dr_time_zero_source_gives_zero():
    rep = S.solve_dr_time(np.zeros(101))
    assert rep.u.shape == (101, 101)
    assert np.max(np.abs(rep.u)) < 1e-10


def test_dr_time_initial_and_boundary_values():
    v = np.sin(np.pi * np.linspace(0, 1, 101))
    u = S.solve_dr_time(np.stack([v, -2 * v])).u
    assert u.shape == (2, 101, 101)
    assert np.all(u[:, 0, :] == 0) and np.all(u[:, :, 0] == 0) and np.all(u[:, :, -1] == 0)


def test_dr_time_linear_matches_fourier_series():
    # k = 0, v = sin(pi x): u = (1 - exp(-D pi^2 t)) / (D pi^2) sin(pi x)
    x = np.linspace(0, 1, 101)
    rep = S.solve_dr_time(np.sin(np.pi * x), reaction=0.0)
    lam = 0.01 * np.pi ** 2
    exact = ((1 - np.exp(-lam * rep.t)) / lam)[:, None] * np.sin(np.pi * x)[None, :]
    assert np.max(np.abs(rep.u - exact)) < 1e-4
    flipped = S.solve_dr_time(-np.sin(np.pi * x), reaction=0.0).u
    assert np.array_equal(flipped, -rep.u)


def test_dr_time_manufactured_order():
    d, k = 0.01, 0.01

    def exact(x, t):
        return np.sin(np.pi * x) * t * t

    def src(x, t):
        return (np.sin(np.pi * x) * 2 * t + d * np.pi ** 2 * np.sin(np.pi * x) * t * t
                - k * exact(x, t) ** 2)

    errs = []
    for m in (11, 21, 41):
        rep = S.solve_dr_time(src, nx=m, nt=m)
        xx = rep.x[None, :]
        errs.append(np.max(np.abs(rep.u - exact(xx, rep.t[:, None]))))
    order = S.observed_order(errs)
    assert np.all(np.abs(order - 2) < 0.3)


def test_burgers_examples():
    u = S.solve_burgers(lambda x: np.full_like(x, 0.7)).u
    assert np.allclose(u, 0.7, rtol=0, atol=1e-14)
    rep = S.solve_burgers(lambda x: np.sin(2 * np.pi * x) + 0.3)
    means = rep.u[:, :-1].mean(axis=1)
    assert np.max(np.abs(means - means[0])) < 1e-8
    energy = np.sqrt((rep.u[:, :-1] ** 2).sum(axis=1))
    assert np.all(np.diff(energy) <= 1e-12)
    assert np.abs(rep.u[-1]).max() < np.abs(rep.u[0]).max()
    assert np.array_equal(rep.u[:, -1], rep.u[:, 0])


def test_burgers_refuses_unstable_dt():
    with pytest.raises(S.SolverError):
        S.solve_burgers(lambda x: np.sin(2 * np.pi * x), dt=0.01)


def test_burgers_self_convergence():
    v = lambda x: np.sin(2 * np.pi * x) + 0.5 * np.cos(4 * np.pi * x)  # noqa: E731
    sols = [S.solve_burgers(v, nx=m, nt=11).u for m in (65, 129, 257)]
    order = S.self_convergence_order(sols[0], sols[1][:, ::2], sols[2][:, ::4])
    assert abs(order - 2) < 0.3


def test_allen_cahn_initial_and_boundary():
    rep = S.solve_allen_cahn(nx=129, nt_out=11)
    interior = rep.x[1:-1]
    assert np.array_equal(rep.u[0, 1:-1], S.allen_cahn_initial(interior))
    assert np.all(rep.u[:, 0] == -1.0) and np.all(rep.u[:, -1] == -1.0)
    with pytest.raises(S.SolverError):
        S.solve_allen_cahn(nx=33, dt=3e-3, nt_out=11)


@pytest.mark.slow
def test_allen_cahn_refinement():
    sols = {n: S.solve_allen_cahn(nx=n).u for n in (193, 385, 769, 1537)}
    diffs = [np.max(np.abs(sols[a] - sols[b][:, ::2])) for a, b in ((193, 385), (385, 769), (769, 1537))]
    assert np.all(np.abs(S.observed_order(diffs) - 2) < 0.3)
    # the problem reference grid: halving h moves the solution by less than 1e-3
    assert diffs[-1] < 1e-3


def test_dr_bvp_examples():
    rep = S.solve_dr_bvp(f_fn=lambda x: np.zeros_like(x))
    assert np.all(rep.u == 0.0)
    rep = S.solve_dr_bvp()
    assert rep.residual < 1e-10
    assert rep.u[0] == 0.0 and rep.u[-1] == 0.0


def _bvp_k0_exact(x):
    # 0.01 u'' = sin(2 pi x), u(0) = u(1) = 0
    return -np.sin(2 * np.pi * x) / (0.01 * 4 * np.pi ** 2)


def test_dr_bvp_k0_matches_closed_form():
    k0 = lambda x: np.zeros_like(x)  # noqa: E731
    coarse = S.solve_dr_bvp(k0, nodes=1001)
    assert np.max(np.abs(coarse.u - _bvp_k0_exact(coarse.x))) < 1e-5
    fine = S.solve_dr_bvp(k0, nodes=4001)
    assert np.max(np.abs(fine.u - _bvp_k0_exact(fine.x))) < 1e-6
    order = S.observed_order([np.max(np.abs(S.solve_dr_bvp(k0, nodes=m).u - _bvp_k0_exact(np.linspace(0, 1, m))))
                              for m in (101, 201, 401)])
    assert np.all(np.abs(order - 2) < 0.3)


def test_dr_bvp_agrees_with_spectral_oracle():
    fd = S.solve_dr_bvp(nodes=4001)
    cheb = S.dr_bvp_spectral()
    assert np.max(np.abs(fd.u - cheb(fd.x))) < 1e-6
    xs = np.linspace(0.05, 0.95, 50)
    res = 0.01 * cheb.deriv(2)(xs) - S.inverse_dr_k(xs) * cheb(xs) - np.sin(2 * np.pi * xs)
    assert np.max(np.abs(res)) < 1e-8


def test_analytic_examples():
    f = S.analytic_solutions
    assert f("poisson1d_u")(0.0) == 0.0
    assert f("poisson1d_u")(np.pi) == pytest.approx(np.pi, abs=1e-14)
    assert f("inverse_dr_k")(0.5) == pytest.approx(1.1)
    assert f("gramacy")(0.0) == pytest.approx(0.0625)
    assert f("schaffer")(0.0, 0.0) == 0.0
    with pytest.raises(KeyError):
        f("navier_stokes")
    x = np.linspace(0, np.pi, 9)
    h = 1e-4
    fd = (S.poisson1d_u(x + h) - 2 * S.poisson1d_u(x) + S.poisson1d_u(x - h)) / h ** 2
    assert np.allclose(fd, S.poisson1d_u_xx(x), atol=1e-5)


def test_order_helpers():
    assert np.allclose(S.observed_order([1.0, 0.25, 0.0625]), [2.0, 2.0])
    assert S.self_convergence_order(np.array([4.0]), np.array([0.0]), np.array([-1.0])) == 2.0
