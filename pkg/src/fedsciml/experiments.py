"""Experiment drivers shared by the CLI and the acceptance tests.

Every driver returns plain rows (dicts) so results can be written as CSV
without further translation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import federation as fed
from . import nn
from . import operators as ops
from .problems import Problem, get_problem
from .transport import shard_heterogeneity

RESULT_COLUMNS = ["problem", "mode", "n", "clients", "client", "w1", "loss", "l2_rel_error",
                  "l2_rel_error_k", "local_epochs", "rounds", "seed"]
DIVERGENCE_COLUMNS = ["round", "divergence_abs", "divergence_rel", "bound", "m_hat"]
MODES = ("centralized", "extrapolation", "federated")


@dataclass
class Setup:
    problem: Problem
    shards: list
    params0: object
    w1: float

    def objectives(self):
        return [self.problem.objective(s) for s in self.shards]

    def union_objective(self):
        return self.problem.objective(self.problem.union_shard(self.shards))


def setup(problem: str | Problem, n: int, clients: int, seed: int = 0, with_w1: bool = True) -> Setup:
    pb = get_problem(problem) if isinstance(problem, str) else problem
    shards = pb.shards(n, clients)
    for s in shards:
        if len(s) == 0:
            raise ValueError(f"n={n}, K={clients} leaves client {s.client_id} without data")
    w1 = shard_heterogeneity([s.points for s in shards], seed=seed) if with_w1 and clients > 1 else 0.0
    return Setup(pb, shards, pb.init_params(seed), w1)


def config_for(pb_defaults, clients: int, local_epochs=None, rounds=None, lr=None,
               client_opt: str = "adam", seed: int = 0, reset_optimizer: bool = False) -> fed.FederationConfig:
    return fed.FederationConfig(
        clients=clients,
        local_epochs=local_epochs or pb_defaults.local_epochs,
        rounds=pb_defaults.global_epochs if rounds is None else rounds,
        lr=lr or pb_defaults.lr,
        client_opt=client_opt,
        seed=seed,
        reset_optimizer=reset_optimizer,
    )


def _row(pb, mode, n, cfg, client, w1, loss, errors):
    return {
        "problem": pb.name, "mode": mode, "n": n, "clients": cfg.clients, "client": client,
        "w1": w1, "loss": loss, "l2_rel_error": errors["l2_rel_error"],
        "l2_rel_error_k": errors.get("l2_rel_error_k", ""),
        "local_epochs": cfg.local_epochs, "rounds": cfg.rounds, "seed": cfg.seed,
    }


def run_mode(st: Setup, mode: str, cfg: fed.FederationConfig, n: int):
    """Train one of the three models; returns (rows, final params)."""
    pb = st.problem
    if mode == "federated":
        res = fed.run_training(cfg, st.objectives(), st.params0)
        loss = float(np.mean(res.history[-1].client_losses)) if res.history else math.nan
        return [_row(pb, mode, n, cfg, "server", st.w1, loss, pb.errors(res.params))], [res.params]
    if mode == "centralized":
        obj = st.union_objective()
        res = fed.run_centralized_twin(cfg, obj, st.params0)
        return [_row(pb, mode, n, cfg, "centralized", st.w1, obj.loss(res.params), pb.errors(res.params))], [res.params]
    if mode == "extrapolation":
        objs = st.objectives()
        finals = fed.run_extrapolation(cfg, objs, st.params0)
        rows = [_row(pb, mode, n, cfg, k, st.w1, objs[k].loss(p), pb.errors(p)) for k, p in enumerate(finals)]
        return rows, finals
    raise ValueError(f"unknown mode {mode!r}")


def sweep(problem: str, n_list, clients: int, modes=MODES, seed: int = 0, **cfg_kwargs) -> list[dict]:
    rows = []
    for n in n_list:
        st = setup(problem, n, clients, seed)
        cfg = config_for(st.problem.defaults, clients, seed=seed, **cfg_kwargs)
        for mode in modes:
            rows += run_mode(st, mode, cfg, n)[0]
    return rows


def divergence_experiment(problem: str, n: int, clients: int, seed: int = 0, local_epochs=None,
                          rounds=None, lr=None, client_opt: str = "sgd"):
    """Federated run and its same-init centralized twin; returns (trace, report)."""
    if client_opt != "sgd":
        raise fed.BoundHypothesisError(
            "the divergence bound needs plain gradient steps on clients and twin; use --client-opt sgd")
    st = setup(problem, n, clients, seed, with_w1=False)
    cfg = config_for(st.problem.defaults, clients, local_epochs, rounds, lr, client_opt, seed)
    res = fed.run_training(cfg, st.objectives(), st.params0, track_norms=True, keep_snapshots=True)
    twin = fed.run_centralized_twin(cfg, st.union_objective(), st.params0, track_norms=True)
    trace = fed.divergence_trace(res, twin, cfg)
    return trace, fed.check_divergence_bound(trace)


def divergence_rows(trace: fed.DivergenceTrace, report: fed.BoundReport) -> tuple[list[str], list[dict]]:
    layer_names = list(trace.entries[0].layers) if trace.entries else []
    cols = DIVERGENCE_COLUMNS + [f"{name}_abs" for name in layer_names] + [f"{name}_rel" for name in layer_names]
    rows = []
    for e, b in zip(trace.entries, report.bound):
        row = {"round": e.round, "divergence_abs": e.absolute,
               "divergence_rel": "" if e.relative is None else e.relative, "bound": b, "m_hat": trace.m_hat}
        for name, (a, r) in e.layers.items():
            row[f"{name}_abs"] = a
            row[f"{name}_rel"] = "" if r is None else r
        rows.append(row)
    return cols, rows


# ---- operator learning ---------------------------------------------------------

OPERATOR_COLUMNS = ["task", "mode", "n", "clients", "client", "w1_coeff", "operator_error",
                    "local_epochs", "rounds", "seed"]


def coefficient_heterogeneity(setup_: ops.OperatorSetup) -> float:
    """Mean pairwise W1 between the clients' Chebyshev coefficient clouds."""
    if len(setup_.client_data) < 2:
        return 0.0
    return shard_heterogeneity([d.coeffs for d in setup_.client_data])


def train_deeponet(task: str, n: int, clients: int, mode: str = "federated", seed: int = 0,
                   local_epochs=None, rounds=None, lr: float = nn.DEFAULT_LR,
                   train_functions=None, test_functions=None):
    st = ops.setup_operator_task(task, n, clients, seed, train_functions, test_functions)
    t = st.task
    cfg = fed.FederationConfig(clients, local_epochs or t.local_epochs,
                               t.global_epochs if rounds is None else rounds, lr=lr, seed=seed)
    w1 = coefficient_heterogeneity(st)
    base = {"task": task, "mode": mode, "n": n, "clients": clients, "w1_coeff": w1,
            "local_epochs": cfg.local_epochs, "rounds": cfg.rounds, "seed": seed}
    if mode == "federated":
        res = fed.run_training(cfg, st.objectives(), st.params0)
        return [dict(base, client="server", operator_error=ops.operator_error(res.params, st.test))], res.params
    if mode == "centralized":
        res = fed.run_centralized_twin(cfg, ops.OperatorObjective(st.params0, st.union), st.params0)
        return [dict(base, client="centralized", operator_error=ops.operator_error(res.params, st.test))], res.params
    if mode == "extrapolation":
        finals = fed.run_extrapolation(cfg, st.objectives(), st.params0)
        return [dict(base, client=k, operator_error=ops.operator_error(p, st.test))
                for k, p in enumerate(finals)], finals
    raise ValueError(f"unknown mode {mode!r}")
