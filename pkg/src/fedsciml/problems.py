"""Function-fitting and physics-informed problems bound to networks.

A :class:`Problem` knows how to build its training set, how to turn a
client's shard into loss inputs, how to evaluate the loss (and its
parameter gradient, through torch), and how to score a trained model
against a reference solution.

Residuals are written once against an array namespace ``xp`` (numpy or
torch) and take derivative values as inputs, so the same formula is fed by
torch autograd during training, by the scalar tape in tests, and by
closed-form derivatives in the residual sanity checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from . import nn
from . import solvers
from .heterogeneity import Shard, hammersley, partition, partition_2d_xy

PI = math.pi
ALLEN_CAHN_D = 0.001
K0 = solvers.HELMHOLTZ_K0


@dataclass(frozen=True)
class TrainingDefaults:
    width: int
    depth: int
    activation: str
    local_epochs: int
    global_epochs: int
    lr: float = nn.DEFAULT_LR


# ---- residual formulas ---------------------------------------------------

def poisson_source(x, xp=np):
    return sum(i * xp.sin(i * x) for i in range(1, 5)) + 8 * xp.sin(8 * x)


def poisson_residual(x, u_xx, xp=np):
    return -u_xx - poisson_source(x, xp)


def poisson_transform(x, n, xp=np):
    return x + x * (PI - x) * n


def helmholtz_source(x, y, xp=np):
    return K0 ** 2 * xp.sin(K0 * x) * xp.sin(K0 * y)


def helmholtz_residual(x, y, u, u_xx, u_yy, xp=np):
    return -u_xx - u_yy - K0 ** 2 * u - helmholtz_source(x, y, xp)


def helmholtz_transform(x, y, n, xp=np):
    return x * (1 - x) * y * (1 - y) * n


def allen_cahn_residual(u, u_t, u_xx, d=ALLEN_CAHN_D):
    return u_t - d * u_xx - 5 * (u - u ** 3)


def allen_cahn_transform(x, t, n, xp=np):
    return x * x * xp.cos(PI * x) + t * (1 - x * x) * n


def inverse_dr_residual(x, u, u_xx, k, xp=np, lam=solvers.DR_LAMBDA):
    return lam * u_xx - k * u - xp.sin(2 * PI * x)


def inverse_dr_transform(x, n, xp=np):
    return x * (1 - x) * n


def softplus(z, xp=np):
    if xp is torch:
        return torch.nn.functional.softplus(z)
    return np.logaddexp(0.0, z)


# ---- problem base ----------------------------------------------------------

@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray | None = None


class Objective:
    """Loss of one client (or the centralized union) as a function of params."""

    def __init__(self, problem: "Problem", data: dict, size: int):
        self.problem = problem
        self.data = data
        self.size = size

    def loss(self, params) -> float:
        # no torch.no_grad here: PINN residuals differentiate w.r.t. inputs
        t = nn.to_torch(params.arrays(), requires_grad=False)
        return float(self.problem.torch_loss(t, self.data).detach())

    def loss_and_grad(self, params) -> tuple[float, list[np.ndarray]]:
        tensors = nn.to_torch(params.arrays())
        loss = self.problem.torch_loss(tensors, self.data)
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        out = [np.zeros(t.shape) if g is None else g.detach().numpy().copy()
               for t, g in zip(tensors, grads)]
        value = float(loss.detach())
        if not math.isfinite(value):
            raise nn.NonFiniteGradient(f"non-finite loss {value!r} in {self.problem.name}")
        return value, out

    def sample_grad_norms(self, params) -> np.ndarray:
        """||grad l(theta; d_i)|| for every sample of this objective."""
        tensors = nn.to_torch(params.arrays())
        per = self.problem.torch_sample_losses(tensors, self.data)
        norms = np.empty(per.shape[0])
        for i in range(per.shape[0]):
            gs = torch.autograd.grad(per[i], tensors, retain_graph=True, allow_unused=True)
            norms[i] = math.sqrt(sum(float((g * g).sum()) for g in gs if g is not None))
        return norms


class Problem:
    name: str = ""
    kind: str = "regression"
    input_dim: int = 1
    partition_kind: str = "oneD"
    defaults: TrainingDefaults
    n_list: tuple[int, ...] = ()

    def init_params(self, seed: int):
        d = self.defaults
        return nn.init_glorot(nn.MlpSpec.hidden(self.input_dim, d.width, d.depth, 1, d.activation, seed))

    def dataset(self) -> Dataset:
        raise NotImplementedError

    def shards(self, n: int, clients: int) -> list[Shard]:
        ds = self.dataset()
        return partition(self.partition_kind, ds.points, n, clients, labels=ds.labels)

    def union_shard(self, shards) -> Shard:
        """D = union of the D_k, rows kept in client order."""
        pts = np.vstack([s.points for s in shards])
        lab = None if shards[0].labels is None else np.concatenate([s.labels for s in shards])
        idx = np.concatenate([s.indices for s in shards])
        return Shard(pts, lab, 0, idx, {"kind": "union", "clients": len(shards)})

    def client_data(self, shard: Shard) -> dict:
        data = {"x": torch.tensor(shard.points, dtype=torch.float64)}
        if shard.labels is not None:
            data["y"] = torch.tensor(shard.labels, dtype=torch.float64).reshape(-1, 1)
        return data

    def objective(self, shard: Shard) -> Objective:
        if len(shard) == 0:
            raise ValueError(f"client {shard.client_id} has an empty shard")
        return Objective(self, self.client_data(shard), len(shard))

    def torch_sample_losses(self, tensors, data) -> torch.Tensor:
        raise NotImplementedError

    def torch_loss(self, tensors, data) -> torch.Tensor:
        return self.torch_sample_losses(tensors, data).mean()

    def predict(self, params, points) -> np.ndarray:
        raise NotImplementedError

    def test_points(self) -> np.ndarray:
        raise NotImplementedError

    def reference(self, points) -> np.ndarray:
        raise NotImplementedError

    def errors(self, params) -> dict[str, float]:
        pts = self.test_points()
        return {"l2_rel_error": l2_relative_error(self.predict(params, pts), self.reference(pts))}


def l2_relative_error(pred, ref) -> float:
    pred = np.ravel(np.asarray(pred, dtype=np.float64))
    ref = np.ravel(np.asarray(ref, dtype=np.float64))
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(pred - ref) / denom)


def _mlp_out(tensors, act, x):
    return nn.torch_mlp(tensors, act, x)


# ---- regression ------------------------------------------------------------

class RegressionProblem(Problem):
    kind = "regression"

    def torch_sample_losses(self, tensors, data):
        if "y" not in data:
            raise ValueError("regression needs labelled shards")
        pred = _mlp_out(tensors, self.defaults.activation, data["x"])
        return ((pred - data["y"]) ** 2).reshape(-1)

    def predict(self, params, points):
        return nn.forward(params, np.asarray(points).reshape(-1, self.input_dim))[:, 0]


class Gramacy(RegressionProblem):
    name = "gramacy"
    input_dim = 1
    partition_kind = "oneD"
    defaults = TrainingDefaults(64, 3, "tanh", 5, 3000)
    # per-client counts 1..50, expressed as totals for two clients
    n_list = (2, 4, 10, 20, 40, 60, 100)

    def __init__(self, points: int = 200):
        self.points = points

    def dataset(self):
        x = np.linspace(-1.0, 1.0, self.points)[:, None]
        return Dataset(x, solvers.gramacy(x[:, 0]))

    def test_points(self):
        return np.linspace(-1.0, 1.0, 1000)[:, None]

    def reference(self, points):
        return solvers.gramacy(np.asarray(points)[:, 0])


class Schaffer(RegressionProblem):
    name = "schaffer"
    input_dim = 2
    partition_kind = "twoD_x"
    defaults = TrainingDefaults(64, 3, "tanh", 5, 3000)
    n_list = (2, 4, 6, 10, 16, 20, 25)

    def __init__(self, per_axis: int = 40):
        self.per_axis = per_axis

    def dataset(self):
        g = np.linspace(0.0, 1.0, self.per_axis)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        return Dataset(pts, solvers.schaffer(pts[:, 0], pts[:, 1]))

    def test_points(self):
        g = np.linspace(0.0, 1.0, 100)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def reference(self, points):
        return solvers.schaffer(points[:, 0], points[:, 1])


# ---- forward PINNs -----------------------------------------------------------

def _grad(out, x):
    return torch.autograd.grad(out.sum(), x, create_graph=True)[0]


class PinnProblem(Problem):
    kind = "pde_forward"

    def client_data(self, shard):
        return {"x": torch.tensor(shard.points, dtype=torch.float64)}

    def torch_sample_losses(self, tensors, data):
        if data["x"].shape[0] == 0:
            raise ValueError("empty collocation set")
        return self.torch_residual(tensors, data["x"]).reshape(-1) ** 2

    def torch_residual(self, tensors, x):
        raise NotImplementedError

    def transform(self, coords, n, xp=np):
        raise NotImplementedError

    def predict(self, params, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, self.input_dim)
        n = nn.forward(params, pts)[:, 0]
        return self.transform(pts, n)


class Poisson1D(PinnProblem):
    name = "poisson1d"
    input_dim = 1
    partition_kind = "oneD"
    defaults = TrainingDefaults(20, 3, "tanh", 5, 1000)
    n_list = (6, 8, 10, 16, 32)

    def __init__(self, points: int = 32):
        self.points = points

    def dataset(self):
        return Dataset(np.linspace(0.0, PI, self.points)[:, None])

    def transform(self, coords, n, xp=np):
        return poisson_transform(coords[:, 0], n, xp)

    def torch_residual(self, tensors, x):
        x = x.detach().clone().requires_grad_(True)
        n = _mlp_out(tensors, self.defaults.activation, x)[:, 0]
        u = poisson_transform(x[:, 0], n, torch)
        u_x = _grad(u, x)[:, 0]
        u_xx = _grad(u_x, x)[:, 0]
        return poisson_residual(x[:, 0], u_xx, torch)

    def test_points(self):
        return np.linspace(0.0, PI, 1000)[:, None]

    def reference(self, points):
        return solvers.poisson1d_u(np.asarray(points)[:, 0])


class Helmholtz2D(PinnProblem):
    name = "helmholtz2d"
    input_dim = 2
    partition_kind = "twoD_xy"
    defaults = TrainingDefaults(64, 3, "sin", 5, 2000)
    n_list = (2, 4, 6, 10, 12, 24)

    def __init__(self, per_axis: int = 24):
        self.per_axis = per_axis

    def dataset(self):
        return Dataset(hammersley(self.per_axis ** 2))

    def shards(self, n, clients):
        return partition_2d_xy(self.dataset().points, n, clients, bounds=((0, 0), (1, 1)))

    def transform(self, coords, n, xp=np):
        return helmholtz_transform(coords[:, 0], coords[:, 1], n, xp)

    def torch_residual(self, tensors, x):
        x = x.detach().clone().requires_grad_(True)
        n = _mlp_out(tensors, self.defaults.activation, x)[:, 0]
        u = helmholtz_transform(x[:, 0], x[:, 1], n, torch)
        g = _grad(u, x)
        u_xx = _grad(g[:, 0], x)[:, 0]
        u_yy = _grad(g[:, 1], x)[:, 1]
        return helmholtz_residual(x[:, 0], x[:, 1], u, u_xx, u_yy, torch)

    def test_points(self):
        g = np.linspace(0.0, 1.0, 100)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def reference(self, points):
        return solvers.helmholtz2d_u(points[:, 0], points[:, 1])


class AllenCahn(PinnProblem):
    name = "allen-cahn"
    input_dim = 2  # (x, t)
    partition_kind = "twoD_x"
    defaults = TrainingDefaults(64, 3, "sin", 5, 10000)
    n_list = (2, 4, 6, 8, 10, 20, 32, 40)

    def __init__(self, interior: int = 8000, boundary: int = 400, initial: int = 800):
        self.counts = (interior, boundary, initial)

    def dataset(self):
        interior, boundary, initial = self.counts
        h = hammersley(interior)
        inner = np.column_stack([2.0 * h[:, 0] - 1.0, h[:, 1]])
        tb = np.linspace(0.0, 1.0, boundary // 2 + 2)[1:-1]
        tb = np.resize(tb, boundary // 2)
        edges = np.vstack([np.column_stack([-np.ones_like(tb), tb]),
                           np.column_stack([np.ones_like(tb), tb])])
        x0 = np.linspace(-1.0, 1.0, initial)
        start = np.column_stack([x0, np.zeros_like(x0)])
        return Dataset(np.vstack([inner, edges, start]))

    def transform(self, coords, n, xp=np):
        return allen_cahn_transform(coords[:, 0], coords[:, 1], n, xp)

    def torch_residual(self, tensors, x):
        x = x.detach().clone().requires_grad_(True)
        n = _mlp_out(tensors, self.defaults.activation, x)[:, 0]
        u = allen_cahn_transform(x[:, 0], x[:, 1], n, torch)
        g = _grad(u, x)
        u_xx = _grad(g[:, 0], x)[:, 0]
        return allen_cahn_residual(u, g[:, 1], u_xx)

    @cached_property
    def _reference(self):
        return solvers.solve_allen_cahn(nx=AC_NODES)

    def test_points(self):
        ref = self._reference
        xs, ts = ref.x[::3], ref.t
        tt, xx = np.meshgrid(ts, xs, indexing="ij")
        return np.column_stack([xx.ravel(), tt.ravel()])

    def reference(self, points):
        from scipy.interpolate import RegularGridInterpolator
        ref = self._reference
        interp = RegularGridInterpolator((ref.t, ref.x), ref.u)
        return interp(np.column_stack([points[:, 1], points[:, 0]]))


AC_NODES = 769  # nested refinement: halving h from here changes u by < 1e-3


# ---- inverse diffusion-reaction -------------------------------------------------

class InverseDR(Problem):
    """lam u'' - k(x) u = sin(2 pi x); learn u and k from observations of u."""

    name = "inverse-dr"
    kind = "pde_inverse"
    input_dim = 1
    partition_kind = "oneD"
    defaults = TrainingDefaults(20, 3, "tanh", 5, 20000)
    n_list = (2, 4, 6, 8, 12, 24)

    def __init__(self, observations: int = 24, residual_points: int = 10):
        self.n_obs = observations
        self.n_res = residual_points

    def init_params(self, seed):
        d = self.defaults
        u = nn.init_glorot(nn.MlpSpec.hidden(1, d.width, d.depth, 1, d.activation, seed), "init.u")
        k = nn.init_glorot(nn.MlpSpec.hidden(1, d.width, d.depth, 1, d.activation, seed), "init.k")
        return nn.CompositeParams((("u", u), ("k", k)))

    @cached_property
    def _bvp(self):
        return solvers.solve_dr_bvp(solvers.inverse_dr_k, nodes=1001)

    def solution(self, x):
        ref = self._bvp
        return np.interp(np.asarray(x, dtype=np.float64), ref.x, ref.u)

    def dataset(self):
        x = np.linspace(0.0, 1.0, self.n_obs)
        return Dataset(x[:, None], self.solution(x))

    def residual_points(self):
        return np.linspace(0.0, 1.0, self.n_res + 2)[1:-1, None]

    def client_data(self, shard):
        return {
            "x_obs": torch.tensor(shard.points, dtype=torch.float64),
            "u_obs": torch.tensor(shard.labels, dtype=torch.float64),
            # residual points are shared by every client
            "x_res": torch.tensor(self.residual_points(), dtype=torch.float64),
        }

    def _split(self, tensors):
        half = len(tensors) // 2
        return tensors[:half], tensors[half:]

    def torch_u(self, tu, x):
        n = _mlp_out(tu, self.defaults.activation, x)[:, 0]
        return inverse_dr_transform(x[:, 0], n, torch)

    def torch_k(self, tk, x):
        return softplus(_mlp_out(tk, self.defaults.activation, x)[:, 0], torch)

    def torch_residual(self, tensors, x):
        tu, tk = self._split(tensors)
        x = x.detach().clone().requires_grad_(True)
        u = self.torch_u(tu, x)
        u_xx = _grad(_grad(u, x)[:, 0], x)[:, 0]
        return inverse_dr_residual(x[:, 0], u, u_xx, self.torch_k(tk, x), torch)

    def torch_sample_losses(self, tensors, data):
        res = self.torch_residual(tensors, data["x_res"]) ** 2
        obs = (self.torch_u(self._split(tensors)[0], data["x_obs"]) - data["u_obs"]) ** 2
        return torch.cat([res, obs])

    def torch_loss(self, tensors, data):
        if data["x_res"].shape[0] == 0:
            raise ValueError("empty collocation set")
        res = self.torch_residual(tensors, data["x_res"]) ** 2
        obs = (self.torch_u(self._split(tensors)[0], data["x_obs"]) - data["u_obs"]) ** 2
        return res.mean() + obs.mean()

    def predict(self, params, points):
        x = np.asarray(points, dtype=np.float64).reshape(-1, 1)
        return inverse_dr_transform(x[:, 0], nn.forward(params["u"], x)[:, 0])

    def predict_k(self, params, points):
        x = np.asarray(points, dtype=np.float64).reshape(-1, 1)
        return softplus(nn.forward(params["k"], x)[:, 0])

    def test_points(self):
        return self._bvp.x[:, None]

    def reference(self, points):
        return self.solution(np.asarray(points)[:, 0])

    def errors(self, params):
        pts = self.test_points()
        return {
            "l2_rel_error": l2_relative_error(self.predict(params, pts), self.reference(pts)),
            "l2_rel_error_k": l2_relative_error(self.predict_k(params, pts),
                                                solvers.inverse_dr_k(pts[:, 0])),
        }


PROBLEMS: dict[str, type[Problem]] = {
    cls.name: cls for cls in (Gramacy, Schaffer, Poisson1D, Helmholtz2D, AllenCahn, InverseDR)
}


def get_problem(name: str, **kwargs) -> Problem:
    try:
        return PROBLEMS[name](**kwargs)
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


# ---- scalar-tape path ---------------------------------------------------------

def tape_derivatives(params: nn.MlpParams, transform: Callable, point, order_pairs):
    """Value and selected second derivatives of ``transform(point, N(point))``
    computed with the scalar tape.  ``order_pairs`` lists (i, j) index pairs."""
    def f(leaves):
        n = nn.forward_tape(params, leaves)[0]
        return transform(leaves, n)

    tape = ad.Tape()
    leaves = [tape.leaf(v) for v in point]
    value = f(leaves).value
    first = ad.derivative(f, point)
    second = {ij: ad.second_derivative(f, point, *ij) for ij in order_pairs}
    return value, first, second


def tape_residual(problem: Problem, params, point) -> float:
    """Pointwise residual through the scalar tape (slow; tests and spot checks)."""
    p = [float(v) for v in point]
    if isinstance(problem, Poisson1D):
        _, _, sec = tape_derivatives(params, lambda z, n: z[0] + z[0] * (PI - z[0]) * n, p, [(0, 0)])
        return float(poisson_residual(p[0], sec[(0, 0)]))
    if isinstance(problem, Helmholtz2D):
        u, _, sec = tape_derivatives(
            params, lambda z, n: z[0] * (1 - z[0]) * z[1] * (1 - z[1]) * n, p, [(0, 0), (1, 1)])
        return float(helmholtz_residual(p[0], p[1], u, sec[(0, 0)], sec[(1, 1)]))
    if isinstance(problem, AllenCahn):
        u, first, sec = tape_derivatives(
            params, lambda z, n: z[0] * z[0] * ad.cos(PI * z[0]) + z[1] * (1 - z[0] * z[0]) * n,
            p, [(0, 0)])
        return float(allen_cahn_residual(u, first[1], sec[(0, 0)]))
    if isinstance(problem, InverseDR):
        u, _, sec = tape_derivatives(params["u"], lambda z, n: z[0] * (1 - z[0]) * n, p, [(0, 0)])
        k = float(softplus(nn.forward(params["k"], np.array(p))[0]))
        return float(inverse_dr_residual(p[0], u, sec[(0, 0)], k))
    raise TypeError(f"{problem.name} has no PDE residual")
