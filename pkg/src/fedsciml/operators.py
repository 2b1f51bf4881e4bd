"""DeepONet: branch and trunk networks joined by an inner product, plus
operator datasets built from the reference solvers."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import federation as fed
from . import nn, solvers
from .heterogeneity import ChebyshevSpaceSpec, chebyshev_eval, client_modes, sample_chebyshev

log = logging.getLogger(__name__)

SENSORS = 50


@dataclass(frozen=True)
class DeepOnetParams:
    branch: nn.MlpParams
    trunk: nn.MlpParams
    b0: float = 0.0

    def __post_init__(self):
        if self.branch.widths[-1] != self.trunk.widths[-1]:
            raise nn.ShapeError(f"branch width {self.branch.widths[-1]} != trunk width {self.trunk.widths[-1]}")

    @property
    def p(self) -> int:
        return self.branch.widths[-1]

    def arrays(self):
        return self.branch.arrays() + self.trunk.arrays() + [np.array([self.b0])]

    def with_arrays(self, arrays):
        arrays = list(arrays)
        nb = len(self.branch.arrays())
        nt = len(self.trunk.arrays())
        if len(arrays) != nb + nt + 1:
            raise nn.ShapeError("array count does not match the DeepONet layout")
        return DeepOnetParams(self.branch.with_arrays(arrays[:nb]),
                              self.trunk.with_arrays(arrays[nb:nb + nt]),
                              float(np.asarray(arrays[-1]).reshape(-1)[0]))

    def layer_blocks(self):
        nb = len(self.branch.arrays())
        out = [(f"branch.{n}", idx) for n, idx in self.branch.layer_blocks()]
        out += [(f"trunk.{n}", [nb + i for i in idx]) for n, idx in self.trunk.layer_blocks()]
        out.append(("b0", [len(self.arrays()) - 1]))
        return out

    def flatten(self):
        return nn.flatten(self.arrays())


def init_deeponet(sensors: int, query_dim: int, width: int, depth: int,
                  activation: str = "relu", seed: int = 0) -> DeepOnetParams:
    """Branch m -> width^depth -> p and trunk d -> width^depth -> p with p = width."""
    branch = nn.init_glorot(nn.MlpSpec.hidden(sensors, width, depth, width, activation, seed), "init.branch")
    trunk = nn.init_glorot(nn.MlpSpec.hidden(query_dim, width, depth, width, activation, seed), "init.trunk")
    return DeepOnetParams(branch, trunk, 0.0)


_ACT = {"tanh": np.tanh, "sin": np.sin, "relu": lambda z: np.maximum(z, 0.0)}


def deeponet_forward(params: DeepOnetParams, sensor_values, queries) -> np.ndarray:
    """G(v)(xi) = sum_k b_k(v) t_k(xi) + b0 for every (function, query) pair.

    ``sensor_values`` is (F, m) and ``queries`` is (Q, d); returns (F, Q).
    A single function / single query gives the squeezed result.
    """
    v = np.asarray(sensor_values, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    d = params.trunk.widths[0]
    one_fn = v.ndim == 1
    # a bare coordinate is one query; a 1D array is a list of queries only for d = 1
    one_q = q.ndim == 0 or (q.ndim == 1 and d > 1)
    v2 = v[None, :] if one_fn else v
    if v2.shape[1] != params.branch.widths[0]:
        raise nn.ShapeError(f"{v2.shape[1]} sensor values, branch expects {params.branch.widths[0]}")
    if (q.ndim == 2 and q.shape[1] != d) or q.ndim > 2 or q.size % d:
        raise nn.ShapeError(f"queries of shape {q.shape}, trunk expects dimension {d}")
    q2 = q.reshape(-1, d)
    b = nn.forward(params.branch, v2)
    t = _ACT[params.trunk.activation](nn.forward(params.trunk, q2))
    out = b @ t.T + params.b0
    if one_q:
        out = out[:, 0]
    return out[0] if one_fn else out


def torch_deeponet(tensors, branch_act: str, trunk_act: str, n_branch: int, v, q):
    b = nn.torch_mlp(tensors[:n_branch], branch_act, v)
    t = nn._TORCH_ACT[trunk_act](nn.torch_mlp(tensors[n_branch:-1], trunk_act, q))
    return b @ t.T + tensors[-1]


@dataclass
class OperatorSample:
    sensor_values: np.ndarray
    query: np.ndarray
    target: float
    source_function_id: int


@dataclass
class OperatorDataset:
    sensors: np.ndarray  # (m,)
    sensor_values: np.ndarray  # (F, m)
    queries: np.ndarray  # (Q, d)
    targets: np.ndarray  # (F, Q)
    coeffs: np.ndarray  # (F, terms) Chebyshev coefficients of the inputs
    function_ids: np.ndarray

    def __len__(self):
        return len(self.sensor_values)

    def samples(self):
        for f in range(len(self)):
            for j in range(len(self.queries)):
                yield OperatorSample(self.sensor_values[f], self.queries[j],
                                     float(self.targets[f, j]), int(self.function_ids[f]))

    def subset(self, idx) -> "OperatorDataset":
        return OperatorDataset(self.sensors, self.sensor_values[idx], self.queries,
                               self.targets[idx], self.coeffs[idx], self.function_ids[idx])


def concat(datasets: Sequence[OperatorDataset]) -> OperatorDataset:
    d0 = datasets[0]
    return OperatorDataset(d0.sensors, np.vstack([d.sensor_values for d in datasets]), d0.queries,
                           np.vstack([d.targets for d in datasets]), np.vstack([d.coeffs for d in datasets]),
                           np.concatenate([d.function_ids for d in datasets]))


def sensor_grid(m: int = SENSORS) -> np.ndarray:
    if m < 2:
        raise ValueError("need at least two sensors")
    return np.linspace(0.0, 1.0, m)


def _coeffs(spec: ChebyshevSpaceSpec, count: int, rng) -> np.ndarray:
    return sample_chebyshev(spec, rng, count).coeffs


def build_antiderivative_dataset(spec: ChebyshevSpaceSpec, count: int, rng, sensors: int = SENSORS,
                                 queries: int = 100, coeffs=None) -> OperatorDataset:
    """u(x) = int_0^x v with v = sum a_i T_i(x) on [0, 1], u by RK45."""
    c = _coeffs(spec, count, rng) if coeffs is None else np.atleast_2d(coeffs)
    xs = sensor_grid(sensors)
    xq = np.linspace(0.0, 1.0, queries)
    u = solvers.rk45(lambda x: chebyshev_eval(c, x), xq)
    return OperatorDataset(xs, chebyshev_eval(c, xs), xq[:, None], u, c, np.arange(len(c)))


def build_dr_dataset(spec: ChebyshevSpaceSpec, count: int, rng, sensors: int = SENSORS,
                     nx: int = 101, nt: int = 101, coeffs=None) -> OperatorDataset:
    """Source term v(x) to solution u(x, t) of u_t = D u_xx + k u^2 + v."""
    c = _coeffs(spec, count, rng) if coeffs is None else np.atleast_2d(coeffs)
    rep = solvers.solve_dr_time(chebyshev_eval(c, np.linspace(0.0, 1.0, nx)), nx=nx, nt=nt)
    u = rep.u.reshape(len(c), nt, nx)
    tt, xx = np.meshgrid(rep.t, rep.x, indexing="ij")
    q = np.column_stack([xx.ravel(), tt.ravel()])
    return OperatorDataset(sensor_grid(sensors), chebyshev_eval(c, sensor_grid(sensors)), q,
                           u.reshape(len(c), -1), c, np.arange(len(c)))


def periodized(coeffs, x):
    """p(cos 2 pi x): smooth, 1-periodic, same coefficient control as p."""
    return chebyshev_eval(coeffs, np.cos(2.0 * np.pi * np.asarray(x, dtype=np.float64)))


def build_burgers_dataset(spec: ChebyshevSpaceSpec, count: int, rng, sensors: int = SENSORS,
                          nx: int = 101, nt: int = 101, coeffs=None) -> OperatorDataset:
    """Initial condition v to the periodic viscous Burgers solution u(x, t)."""
    c = _coeffs(spec, count, rng) if coeffs is None else np.atleast_2d(coeffs)
    rep = solvers.solve_burgers(periodized(c, np.linspace(0.0, 1.0, nx)), nx=nx, nt=nt)
    u = rep.u.reshape(len(c), nt, nx)
    tt, xx = np.meshgrid(rep.t, rep.x, indexing="ij")
    q = np.column_stack([xx.ravel(), tt.ravel()])
    xs = np.linspace(0.0, 1.0, sensors, endpoint=False)
    return OperatorDataset(xs, periodized(c, xs), q, u.reshape(len(c), -1), c, np.arange(len(c)))


@dataclass(frozen=True)
class OperatorTask:
    name: str
    builder: object
    query_dim: int
    width: int
    depth: int
    activation: str
    local_epochs: int
    global_epochs: int
    train_functions: int
    test_functions: int


TASKS = {
    "antiderivative": OperatorTask("antiderivative", build_antiderivative_dataset, 1, 40, 2, "relu",
                                   5, 10000, 200, 1000),
    "dr": OperatorTask("dr", build_dr_dataset, 2, 100, 3, "relu", 5, 10000, 500, 1000),
    "burgers": OperatorTask("burgers", build_burgers_dataset, 2, 64, 2, "relu", 5, 10000, 200, 500),
}


class OperatorObjective:
    """Mean squared error over every (function, query) pair of a dataset."""

    def __init__(self, params_like: DeepOnetParams, data: OperatorDataset):
        if len(data) == 0:
            raise ValueError("empty operator dataset")
        self.data = data
        self.size = len(data)
        self.n_branch = len(params_like.branch.arrays())
        self.acts = (params_like.branch.activation, params_like.trunk.activation)
        self.v = torch.tensor(data.sensor_values, dtype=torch.float64)
        self.q = torch.tensor(data.queries, dtype=torch.float64)
        self.y = torch.tensor(data.targets, dtype=torch.float64)

    def _pred(self, tensors, v=None):
        return torch_deeponet(tensors, *self.acts, self.n_branch, self.v if v is None else v, self.q)

    def loss(self, params) -> float:
        with torch.no_grad():
            t = nn.to_torch(params.arrays(), requires_grad=False)
            return float(((self._pred(t) - self.y) ** 2).mean())

    def loss_and_grad(self, params):
        tensors = nn.to_torch(params.arrays())
        loss = ((self._pred(tensors) - self.y) ** 2).mean()
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise nn.NonFiniteGradient(f"non-finite operator loss {value!r}")
        return value, [np.zeros(t.shape) if g is None else g.numpy().copy() for t, g in zip(tensors, grads)]

    def sample_grad_norms(self, params) -> np.ndarray:
        """Gradient norm of each function's mean squared error (one sample = one function)."""
        tensors = nn.to_torch(params.arrays())
        per = ((self._pred(tensors) - self.y) ** 2).mean(dim=1)
        out = np.empty(len(per))
        for i in range(len(per)):
            gs = torch.autograd.grad(per[i], tensors, retain_graph=True, allow_unused=True)
            out[i] = math.sqrt(sum(float((g * g).sum()) for g in gs if g is not None))
        return out


def operator_errors(params: DeepOnetParams, data: OperatorDataset) -> tuple[np.ndarray, int]:
    """Per-function relative L2 errors; zero-norm targets are dropped and counted."""
    pred = deeponet_forward(params, data.sensor_values, data.queries)
    pred = np.atleast_2d(pred)
    norms = np.linalg.norm(data.targets, axis=1)
    keep = norms > 0
    skipped = int(np.sum(~keep))
    if skipped:
        log.warning("skipped %d test functions with zero-norm targets", skipped)
    errs = np.linalg.norm(pred[keep] - data.targets[keep], axis=1) / norms[keep]
    return errs, skipped


def operator_error(params: DeepOnetParams, data: OperatorDataset) -> float:
    if len(data) == 0:
        raise ValueError("empty test set")
    errs, _ = operator_errors(params, data)
    if errs.size == 0:
        raise ValueError("every test function has a zero-norm target")
    return float(np.mean(errs))


@dataclass
class OperatorSetup:
    task: OperatorTask
    client_data: list[OperatorDataset]
    test: OperatorDataset
    params0: DeepOnetParams

    @property
    def union(self) -> OperatorDataset:
        return concat(self.client_data)

    def objectives(self):
        return [OperatorObjective(self.params0, d) for d in self.client_data]


def setup_operator_task(name: str, n: int, clients: int, seed: int = 0, train_functions: int | None = None,
                        test_functions: int | None = None, sensors: int = SENSORS) -> OperatorSetup:
    """Client datasets from Chebyshev windows (forward / middle / inverse),
    test set from the full space, shared initialization."""
    task = TASKS[name]
    n_train = train_functions or task.train_functions
    n_test = test_functions or task.test_functions
    per_client = [n_train // clients + (1 if k < n_train % clients else 0) for k in range(clients)]
    data = []
    for k, mode in enumerate(client_modes(clients)):
        spec = ChebyshevSpaceSpec(n, mode)
        data.append(task.builder(spec, per_client[k], nn.rng_stream(seed, "functions", name, k), sensors))
    test = task.builder(ChebyshevSpaceSpec(10, "forward"), n_test, nn.rng_stream(seed, "test", name), sensors)
    p0 = init_deeponet(sensors, task.query_dim, task.width, task.depth, task.activation, seed)
    return OperatorSetup(task, data, test, p0)


def communication_sweep(setup: OperatorSetup, e_list: Sequence[int], total_iters: int,
                        lr: float = nn.DEFAULT_LR) -> dict[int, float]:
    """Final test error for each local-epoch count at a fixed step budget."""
    for e in e_list:
        if e < 1 or total_iters % e:
            raise ValueError(f"total_iters={total_iters} is not divisible by E={e}")
    out = {}
    objs = setup.objectives()
    for e in e_list:
        cfg = fed.FederationConfig(len(objs), e, total_iters // e, lr=lr)
        res = fed.run_training(cfg, objs, setup.params0)
        out[e] = operator_error(res.params, setup.test)
    return out


def dataset_to_csv(data: OperatorDataset, path) -> None:
    """One row per (function, query): id, sensor values, query coordinates, target."""
    m, d = data.sensor_values.shape[1], data.queries.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["function_id"] + [f"v{i}" for i in range(m)] + [f"xi{i}" for i in range(d)] + ["u"])
        for f in range(len(data)):
            head = [int(data.function_ids[f])] + [repr(float(v)) for v in data.sensor_values[f]]
            for j in range(len(data.queries)):
                w.writerow(head + [repr(float(c)) for c in data.queries[j]] + [repr(float(data.targets[f, j]))])
