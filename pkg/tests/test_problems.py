import math

import numpy as np
import pytest
import sympy as sp
import torch

from fedsciml import nn, solvers
from fedsciml import problems as P
from fedsciml.heterogeneity import Shard


def _zero_params(pb):
    d = pb.defaults
    return nn.zeros_like_spec(nn.MlpSpec.hidden(pb.input_dim, d.width, d.depth, 1, d.activation))


def _residual_np(pb, params, pts):
    tensors = nn.to_torch(params.arrays(), requires_grad=False)
    x = torch.tensor(np.asarray(pts, dtype=np.float64))
    return pb.torch_residual(tensors, x).detach().numpy()


def _shard(points, labels=None):
    points = np.asarray(points, dtype=np.float64)
    return Shard(points, labels, 0, np.arange(len(points)))


# ---- targets and metric --------------------------------------------------------

def test_regression_targets():
    assert solvers.gramacy(0.0) == pytest.approx(0.0625, abs=1e-15)
    assert solvers.schaffer(0.0, 0.0) == pytest.approx(0.0, abs=1e-15)
    assert solvers.inverse_dr_k(0.5) == pytest.approx(1.1, abs=1e-15)


def test_l2_relative_error_examples():
    u = np.sin(np.linspace(0, 3, 50))
    assert P.l2_relative_error(u, u) == 0.0
    assert P.l2_relative_error(2 * u, u) == pytest.approx(1.0, abs=1e-15)
    unit = u / np.linalg.norm(u)
    assert P.l2_relative_error(unit + 1e-3, unit) == pytest.approx(1e-3 * math.sqrt(50), rel=1e-12)
    with pytest.raises(ValueError):
        P.l2_relative_error(u, np.zeros_like(u))


def test_registry():
    assert set(P.PROBLEMS) == {"gramacy", "schaffer", "poisson1d", "helmholtz2d", "allen-cahn", "inverse-dr"}
    with pytest.raises(KeyError):
        P.get_problem("kdv")


# ---- hard constraints -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_hard_constraints_hold_for_random_networks(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 1, 100)

    pb = P.Poisson1D()
    u = pb.predict(pb.init_params(seed), np.array([0.0, math.pi]))
    assert abs(u[0]) < 1e-12 and abs(u[1] - math.pi) < 1e-12

    pb = P.Helmholtz2D()
    edges = np.concatenate([np.column_stack([np.zeros(25), t[:25]]), np.column_stack([np.ones(25), t[25:50]]),
                            np.column_stack([t[50:75], np.zeros(25)]), np.column_stack([t[75:], np.ones(25)])])
    assert np.max(np.abs(pb.predict(pb.init_params(seed), edges))) < 1e-12

    pb = P.AllenCahn()
    x = rng.uniform(-1, 1, 50)
    side = np.where(rng.random(50) < 0.5, -1.0, 1.0)
    pts = np.vstack([np.column_stack([x, np.zeros(50)]), np.column_stack([side, t[:50]])])
    want = np.concatenate([x * x * np.cos(np.pi * x), -np.ones(50)])
    assert np.max(np.abs(pb.predict(pb.init_params(seed), pts) - want)) < 1e-12

    pb = P.InverseDR()
    u = pb.predict(pb.init_params(seed), np.array([0.0, 1.0]))
    assert np.max(np.abs(u)) < 1e-12


# ---- residuals through exact solutions -------------------------------------------

X, Y, T = sp.symbols("x y t")


def _sym(expr, *args):
    return sp.lambdify(args, expr, "numpy")


def test_poisson_exact_solution_annihilates_residual():
    u = X + sum(sp.sin(i * X) / i for i in range(1, 5)) + sp.sin(8 * X) / 8
    x = np.random.default_rng(0).uniform(0, np.pi, 100)
    r = P.poisson_residual(x, _sym(sp.diff(u, X, 2), X)(x))
    assert np.max(np.abs(r)) < 1e-8
    # the closed-form evaluator used for scoring is the same function
    assert np.allclose(_sym(u, X)(x), solvers.poisson1d_u(x), atol=1e-14)


def test_helmholtz_exact_solution_annihilates_residual():
    k0 = 4 * sp.pi
    u = sp.sin(k0 * X) * sp.sin(k0 * Y)
    rng = np.random.default_rng(1)
    x, y = rng.uniform(0, 1, (2, 100))
    r = P.helmholtz_residual(x, y, _sym(u, X, Y)(x, y), _sym(sp.diff(u, X, 2), X, Y)(x, y),
                             _sym(sp.diff(u, Y, 2), X, Y)(x, y))
    assert np.max(np.abs(r)) < 1e-8


def test_allen_cahn_stationary_front_annihilates_residual():
    # tanh(a x) is steady when 2 d a^2 = 5, i.e. a = 50 for d = 0.001
    u = sp.tanh(50 * X) + 0 * T
    rng = np.random.default_rng(2)
    x, t = rng.uniform(-0.1, 0.1, 100), rng.uniform(0, 1, 100)
    r = P.allen_cahn_residual(_sym(u, X, T)(x, t), _sym(sp.diff(u, T), X, T)(x, t),
                              _sym(sp.diff(u, X, 2), X, T)(x, t))
    assert np.max(np.abs(r)) < 1e-8


def test_inverse_dr_oracle_solution_annihilates_residual():
    cheb = solvers.dr_bvp_spectral()
    x = np.random.default_rng(3).uniform(0, 1, 100)
    r = P.inverse_dr_residual(x, cheb(x), cheb.deriv(2)(x), solvers.inverse_dr_k(x))
    assert np.max(np.abs(r)) < 1e-8
    # the finite-difference reference, differentiated by its own stencil
    ref = solvers.solve_dr_bvp()
    h = ref.x[1] - ref.x[0]
    uxx = (ref.u[2:] - 2 * ref.u[1:-1] + ref.u[:-2]) / h ** 2
    xi = ref.x[1:-1]
    assert np.max(np.abs(P.inverse_dr_residual(xi, ref.u[1:-1], uxx, solvers.inverse_dr_k(xi)))) < 1e-6


def test_inverse_dr_total_loss_at_oracle():
    pb = P.InverseDR()
    cheb = solvers.dr_bvp_spectral()
    ds = pb.dataset()
    xr = pb.residual_points()[:, 0]
    res = P.inverse_dr_residual(xr, cheb(xr), cheb.deriv(2)(xr), solvers.inverse_dr_k(xr))
    obs = cheb(ds.points[:, 0]) - ds.labels
    assert np.mean(res ** 2) + np.mean(obs ** 2) < 1e-8


def test_zero_network_residuals():
    x = np.linspace(0.1, 3.0, 7)[:, None]
    pb = P.Poisson1D()
    assert np.allclose(_residual_np(pb, _zero_params(pb), x), -P.poisson_source(x[:, 0]), atol=1e-12)

    pts = np.random.default_rng(4).uniform(0, 1, (7, 2))
    pb = P.Helmholtz2D()
    assert np.allclose(_residual_np(pb, _zero_params(pb), pts),
                       -P.helmholtz_source(pts[:, 0], pts[:, 1]), atol=1e-9)

    u0 = sp.Pow(X, 2) * sp.cos(sp.pi * X)
    want = -0.001 * sp.diff(u0, X, 2) - 5 * (u0 - u0 ** 3)
    xs = np.linspace(-0.9, 0.9, 7)
    pb = P.AllenCahn()
    got = _residual_np(pb, _zero_params(pb), np.column_stack([xs, np.zeros(7)]))
    # at t = 0 with N = 0 the transform gives u_t = (1 - x^2) N = 0
    assert np.allclose(got, _sym(want, X)(xs), atol=1e-12)


# ---- torch vs tape, parameter gradients -----------------------------------------

def _small(pb, width=8, depth=2, seed=0):
    act = pb.defaults.activation
    return nn.init_glorot(nn.MlpSpec.hidden(pb.input_dim, width, depth, 1, act, seed))


@pytest.mark.parametrize("name", ["poisson1d", "helmholtz2d", "allen-cahn"])
def test_tape_and_torch_residuals_agree(name):
    pb = P.get_problem(name)
    params = _small(pb, 6, 2, seed=3)
    pts = pb.dataset().points[::97][:5]
    torch_r = _residual_np(pb, params, pts)
    tape_r = [P.tape_residual(pb, params, p) for p in pts]
    assert np.allclose(torch_r, tape_r, rtol=1e-10, atol=1e-10)


def test_inverse_dr_tape_and_torch_agree():
    pb = P.InverseDR()
    u = _small(pb, 5, 2, seed=1)
    k = nn.init_glorot(nn.MlpSpec.hidden(1, 5, 2, 1, "tanh", 2))
    params = nn.CompositeParams((("u", u), ("k", k)))
    pts = pb.residual_points()[::3]
    torch_r = _residual_np(pb, params, pts)
    tape_r = [P.tape_residual(pb, params, p) for p in pts]
    assert np.allclose(torch_r, tape_r, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("name", ["poisson1d", "helmholtz2d", "allen-cahn"])
def test_residual_parameter_gradient_matches_finite_differences(name):
    pb = P.get_problem(name)
    params = _small(pb, 8, 2, seed=5)
    obj = pb.objective(_shard(pb.dataset().points[::50][:6]))
    _, grads = obj.loss_and_grad(params)
    flat = params.flatten()
    g = nn.flatten(grads)
    rng = np.random.default_rng(0)
    h = 1e-6
    for i in rng.choice(flat.size, 12, replace=False):
        e = np.zeros_like(flat)
        e[i] = h
        fd = (obj.loss(params.unflatten(flat + e)) - obj.loss(params.unflatten(flat - e))) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(g[i]), 1e-3)


# ---- losses ------------------------------------------------------------------------

def test_regression_loss_examples():
    pb = P.Gramacy()
    params = pb.init_params(0)
    x = np.linspace(-1, 1, 9)[:, None]
    perfect = pb.objective(_shard(x, pb.predict(params, x)))
    assert perfect.loss(params) < 1e-28
    y = solvers.gramacy(x[:, 0])
    obj = pb.objective(_shard(x, y))
    assert obj.loss(params) == pytest.approx(np.mean((nn.forward(params, x)[:, 0] - y) ** 2), rel=1e-12)
    with pytest.raises(ValueError):
        pb.objective(_shard(x)).loss(params)


def test_pinn_loss_examples():
    pb = P.Poisson1D()
    params = pb.init_params(0)
    one = _shard([[1.3]])
    r = P.tape_residual(pb, params, [1.3])
    assert pb.objective(one).loss(params) == pytest.approx(r * r, rel=1e-10)
    pts = pb.dataset().points[::4]
    tape_loss = np.mean([P.tape_residual(pb, params, p) ** 2 for p in pts])
    assert pb.objective(_shard(pts)).loss(params) == pytest.approx(tape_loss, rel=1e-12)
    with pytest.raises(ValueError):
        pb.objective(_shard(np.zeros((0, 1))))


def test_objective_rejects_non_finite():
    pb = P.Gramacy()
    params = pb.init_params(0)
    bad = params.with_arrays([np.full_like(a, np.nan) for a in params.arrays()])
    with pytest.raises(FloatingPointError):
        pb.objective(pb.shards(200, 1)[0]).loss_and_grad(bad)


def test_sample_grad_norms_match_per_sample_objectives():
    pb = P.Gramacy()
    params = pb.init_params(1)
    sh = pb.shards(200, 1)[0]
    obj = pb.objective(sh)
    norms = obj.sample_grad_norms(params)
    for i in (0, 57, 199):
        _, g = pb.objective(_shard(sh.points[i:i + 1], sh.labels[i:i + 1])).loss_and_grad(params)
        assert norms[i] == pytest.approx(np.linalg.norm(nn.flatten(g)), rel=1e-12)


# ---- datasets and shards ---------------------------------------------------------------

def test_dataset_sizes_and_union():
    assert len(P.Gramacy().dataset().points) == 200
    assert len(P.Poisson1D().dataset().points) == 32
    assert len(P.Helmholtz2D().dataset().points) == 576
    assert len(P.AllenCahn().dataset().points) == 9200
    ds = P.InverseDR().dataset()
    assert len(ds.points) == 24 and len(P.InverseDR().residual_points()) == 10
    pb = P.Gramacy()
    shards = pb.shards(2, 2)
    union = pb.union_shard(shards)
    assert len(union) == 200
    assert np.array_equal(np.sort(union.indices), np.arange(200))


def test_inverse_dr_residual_points_replicated():
    pb = P.InverseDR()
    shards = pb.shards(6, 3)
    datas = [pb.client_data(s) for s in shards]
    assert all(torch.equal(d["x_res"], datas[0]["x_res"]) for d in datas)
    assert sum(d["x_obs"].shape[0] for d in datas) == 24


def test_errors_report_k_for_inverse():
    pb = P.InverseDR()
    errs = pb.errors(pb.init_params(0))
    assert set(errs) == {"l2_rel_error", "l2_rel_error_k"}
    assert all(np.isfinite(v) and v > 0 for v in errs.values())


def test_allen_cahn_reference_grid():
    pb = P.AllenCahn()
    pts = pb.test_points()
    ref = pb.reference(pts)
    assert np.all(np.isfinite(ref))
    assert np.allclose(ref[: len(pts) // 101], solvers.allen_cahn_initial(pts[: len(pts) // 101, 0]), atol=1e-12)
