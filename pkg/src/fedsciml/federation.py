"""FedAvg with pluggable client optimizers, a centralized twin, and weight
divergence tracking.

The orchestration here only relies on two small protocols:

* params: ``arrays()``, ``with_arrays(list)``, ``layer_blocks()``
* objective: ``loss_and_grad(params)``, ``sample_grad_norms(params)``, ``size``

so the same loop drives function fitting, PINNs and DeepONets.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import nn


class FederationError(RuntimeError):
    pass


class BoundHypothesisError(ValueError):
    """The divergence bound only applies to SGD clients with an SGD twin."""


@dataclass(frozen=True)
class FederationConfig:
    clients: int
    local_epochs: int
    rounds: int
    lr: float = nn.DEFAULT_LR
    client_opt: str = "adam"
    participation: float = 1.0
    seed: int = 0
    # Adam moments survive across rounds unless this is set
    reset_optimizer: bool = False
    aggregation: str = "average"  # "average" | "delta"

    def __post_init__(self):
        if self.clients < 1 or self.local_epochs < 1 or self.rounds < 0:
            raise ValueError("need clients >= 1, local_epochs >= 1, rounds >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.client_opt not in ("adam", "sgd"):
            raise ValueError(f"unknown client optimizer {self.client_opt!r}")
        if self.participation != 1.0:
            raise ValueError("only full participation (C = 1) is supported")
        if self.aggregation not in ("average", "delta"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    @property
    def total_epochs(self) -> int:
        return self.local_epochs * self.rounds


@dataclass
class ClientState:
    client_id: int
    objective: object
    params: object = None
    opt_state: nn.AdamState | None = None
    last_loss: float = float("nan")
    max_grad_norm: float = 0.0

    @property
    def size(self) -> int:
        return self.objective.size


@dataclass
class LocalResult:
    client_id: int
    params: object
    delta: list[np.ndarray]
    loss: float
    max_grad_norm: float


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("FEDSCIML_THREADS", "1")))
    except ValueError:
        return 1


def _opt_step(params, grads, state, opt: str, lr: float):
    if opt == "adam":
        return nn.adam_step(params, grads, state, lr)
    return nn.sgd_step(params, grads, lr), state


def _train_steps(objective, params, state, opt, lr, steps, track_norms, on_step=None):
    """``steps`` full-batch optimizer steps.  Returns params, state, last loss, M-hat."""
    loss, m_hat = float("nan"), 0.0
    for i in range(steps):
        if track_norms:
            m_hat = max(m_hat, float(np.max(objective.sample_grad_norms(params))))
        loss, grads = objective.loss_and_grad(params)
        if not math.isfinite(loss):
            raise nn.NonFiniteGradient(f"loss became {loss!r} at step {i}")
        params, state = _opt_step(params, grads, state, opt, lr)
        if on_step is not None:
            on_step(i + 1, params)
    return params, state, loss, m_hat


def broadcast(server_params, clients: Sequence[ClientState], cfg: FederationConfig) -> None:
    """Stage (a): every client starts the round from the server model."""
    for c in clients:
        c.params = server_params.with_arrays([a.copy() for a in server_params.arrays()])
        if cfg.client_opt == "adam" and (c.opt_state is None or cfg.reset_optimizer):
            c.opt_state = nn.AdamState.zeros(server_params)


def local_update(client: ClientState, epochs: int, lr: float, client_opt: str,
                 track_norms: bool = False) -> LocalResult:
    """Stage (b): ``epochs`` full-batch steps on the client's own loss."""
    start = client.params.arrays()
    params, state, loss, m_hat = _train_steps(client.objective, client.params, client.opt_state,
                                              client_opt, lr, epochs, track_norms)
    client.params, client.opt_state, client.last_loss = params, state, loss
    client.max_grad_norm = max(client.max_grad_norm, m_hat)
    delta = [a - b for a, b in zip(params.arrays(), start)]
    return LocalResult(client.client_id, params, delta, loss, m_hat)


def client_weights(sizes: Sequence[int]) -> list[float]:
    total = sum(sizes)
    if total <= 0:
        raise FederationError("clients hold no data")
    return [s / total for s in sizes]


def aggregate(server_params, results: Sequence[LocalResult], sizes: Sequence[int],
              form: str = "average"):
    """Stage (c): N_k/N weighted aggregation in ascending client order.

    ``average`` combines the final local models directly; ``delta`` adds
    the weighted mean change to the server model.  They agree up to
    rounding; only ``average`` keeps a single client bitwise exact.
    """
    order = np.argsort([r.client_id for r in results], kind="stable")
    results = [results[i] for i in order]
    weights = client_weights([sizes[i] for i in order])
    if form == "average":
        return nn.combine([r.params for r in results], weights)
    base = server_params.arrays()
    acc = [weights[0] * d for d in results[0].delta]
    for w, r in zip(weights[1:], results[1:]):
        acc = [a + w * d for a, d in zip(acc, r.delta)]
    return server_params.with_arrays([b + a for b, a in zip(base, acc)])


@dataclass
class RoundRecord:
    round: int
    client_losses: list[float]
    metrics: dict = field(default_factory=dict)


@dataclass
class FedResult:
    params: object
    history: list[RoundRecord]
    snapshots: list  # server params at every round boundary, including the start
    clients: list[ClientState]
    m_hat: float = 0.0


def run_training(cfg: FederationConfig, objectives: Sequence, params0,
                 evaluate: Callable | None = None, eval_every: int = 0,
                 track_norms: bool = False, keep_snapshots: bool = False) -> FedResult:
    """Rounds of broadcast, local updates, aggregation."""
    if len(objectives) != cfg.clients:
        raise ValueError(f"{len(objectives)} objectives for {cfg.clients} clients")
    clients = [ClientState(k, obj) for k, obj in enumerate(objectives)]
    sizes = [c.size for c in clients]
    server = params0
    snaps = [server] if keep_snapshots else []
    history = []
    workers = min(_thread_count(), cfg.clients)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for rnd in range(1, cfg.rounds + 1):
            broadcast(server, clients, cfg)
            args = (cfg.local_epochs, cfg.lr, cfg.client_opt, track_norms)
            if pool is None:
                results = [local_update(c, *args) for c in clients]
            else:
                results = list(pool.map(lambda c: local_update(c, *args), clients))
            server = aggregate(server, results, sizes, cfg.aggregation)
            rec = RoundRecord(rnd, [r.loss for r in results])
            if evaluate is not None and (rnd == cfg.rounds or (eval_every and rnd % eval_every == 0)):
                rec.metrics = evaluate(server)
            history.append(rec)
            if keep_snapshots:
                snaps.append(server)
    finally:
        if pool is not None:
            pool.shutdown()
    m_hat = max([c.max_grad_norm for c in clients], default=0.0)
    return FedResult(server, history, snaps, clients, m_hat)


def run_centralized_twin(cfg: FederationConfig, objective, params0, track_norms: bool = False) -> FedResult:
    """Train on the union of all shards for rounds * E epochs with the
    client optimizer, snapshotting every E epochs (rounds + 1 snapshots)."""
    snaps = [params0]
    state = nn.AdamState.zeros(params0) if cfg.client_opt == "adam" else None
    history = []
    e = cfg.local_epochs

    def on_step(i, p):
        if i % e == 0:
            snaps.append(p)

    params, state, loss, m_hat = _train_steps(objective, params0, state, cfg.client_opt, cfg.lr,
                                              cfg.total_epochs, track_norms, on_step)
    if cfg.rounds:
        history.append(RoundRecord(cfg.rounds, [loss]))
    return FedResult(params, history, snaps, [], m_hat)


def run_extrapolation(cfg: FederationConfig, objectives: Sequence, params0) -> list:
    """Each client trains alone for the whole budget; no aggregation."""
    out = []
    for obj in objectives:
        state = nn.AdamState.zeros(params0) if cfg.client_opt == "adam" else None
        p, _, _, _ = _train_steps(obj, params0, state, cfg.client_opt, cfg.lr, cfg.total_epochs, False)
        out.append(p)
    return out


# ---- weight divergence -------------------------------------------------------

@dataclass
class DivergenceEntry:
    round: int
    absolute: float
    relative: float | None
    layers: dict[str, tuple[float, float | None]]


def _rel(diff: float, ref: float) -> float | None:
    return diff / ref if ref > 1e-12 else None


def weight_divergence(theta_fed, theta_cen, per_layer: bool = True, round_: int = 0) -> DivergenceEntry:
    a, b = theta_fed.arrays(), theta_cen.arrays()
    if [x.shape for x in a] != [x.shape for x in b]:
        raise nn.ShapeError("federated and centralized params do not conform")
    diff2 = [float(np.sum((x - y) ** 2)) for x, y in zip(a, b)]
    ref2 = [float(np.sum(y * y)) for y in b]
    layers = {}
    if per_layer:
        for name, idx in theta_cen.layer_blocks():
            d = math.sqrt(sum(diff2[i] for i in idx))
            layers[name] = (d, _rel(d, math.sqrt(sum(ref2[i] for i in idx))))
    d = math.sqrt(sum(diff2))
    return DivergenceEntry(round_, d, _rel(d, math.sqrt(sum(ref2))), layers)


@dataclass
class DivergenceTrace:
    entries: list[DivergenceEntry]
    m_hat: float
    client_opt: str
    lr: float
    local_epochs: int


def divergence_trace(fed: FedResult, twin: FedResult, cfg: FederationConfig) -> DivergenceTrace:
    if len(fed.snapshots) != len(twin.snapshots):
        raise ValueError("federated and twin runs must both keep rounds + 1 snapshots")
    entries = [weight_divergence(f, c, True, r) for r, (f, c) in enumerate(zip(fed.snapshots, twin.snapshots))]
    return DivergenceTrace(entries, max(fed.m_hat, twin.m_hat), cfg.client_opt, cfg.lr, cfg.local_epochs)


@dataclass
class BoundReport:
    rounds: list[int]
    observed: list[float]
    bound: list[float]
    m_hat: float

    @property
    def margins(self) -> list[float]:
        return [b - o for o, b in zip(self.observed, self.bound)]

    @property
    def satisfied(self) -> bool:
        return all(o <= b for o, b in zip(self.observed, self.bound))


def check_divergence_bound(trace: DivergenceTrace) -> BoundReport:
    """Observed divergence against 2 * lr * M-hat * E * l at every round."""
    if trace.client_opt != "sgd":
        raise BoundHypothesisError(
            "the linear divergence bound assumes plain gradient steps on clients and twin; "
            f"this trace was produced with {trace.client_opt!r}")
    rounds = [e.round for e in trace.entries]
    observed = [e.absolute for e in trace.entries]
    bound = [2.0 * trace.lr * trace.m_hat * trace.local_epochs * l for l in rounds]
    return BoundReport(rounds, observed, bound, trace.m_hat)


def with_rounds(cfg: FederationConfig, rounds: int, local_epochs: int | None = None) -> FederationConfig:
    return replace(cfg, rounds=rounds, local_epochs=local_epochs or cfg.local_epochs)
