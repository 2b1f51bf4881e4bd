"""Dense networks, their parameters, and the client optimizers.

Parameter containers all expose the same small protocol so that the
optimizers and the federation code never look inside them:

* ``arrays()`` returns the float64 arrays in a fixed order,
* ``with_arrays(arrays)`` builds a new container of the same layout,
* ``layer_blocks()`` names groups of array indices (one per dense layer).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import autodiff as ad

ACTIVATIONS = ("tanh", "sin", "relu")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LR = 1e-3

# the networks are tiny; one intra-op thread is fastest and keeps
# reductions in a fixed order
torch.set_num_threads(1)


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def rng_stream(seed: int, *names: str | int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``.

    The stream id is a hash of ``names`` so independent consumers (init,
    sampling, partition, per-client data) never share a sequence.
    """
    digest = hashlib.sha256(repr(tuple(str(n) for n in names)).encode()).digest()
    stream = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), stream]))


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        if min(self.layer_widths) < 1:
            raise ShapeError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    @classmethod
    def hidden(cls, n_in: int, width: int, depth: int, n_out: int = 1, activation="tanh", seed=0):
        return cls((n_in, *([width] * depth), n_out), activation, seed)


@dataclass(frozen=True)
class MlpParams:
    widths: tuple[int, ...]
    activation: str
    weights: tuple[np.ndarray, ...]  # weights[i] has shape (fan_in, fan_out)
    biases: tuple[np.ndarray, ...]

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        arrays = list(arrays)
        if len(arrays) != 2 * self.layer_count:
            raise ShapeError("array count does not match the layer layout")
        for new, old in zip(arrays, self.arrays()):
            if np.shape(new) != old.shape:
                raise ShapeError(f"shape {np.shape(new)} != {old.shape}")
        return MlpParams(self.widths, self.activation, tuple(arrays[0::2]), tuple(arrays[1::2]))

    def layer_blocks(self) -> list[tuple[str, list[int]]]:
        return [(f"layer{i}", [2 * i, 2 * i + 1]) for i in range(self.layer_count)]

    def flatten(self) -> np.ndarray:
        return flatten(self.arrays())

    def unflatten(self, flat: np.ndarray) -> "MlpParams":
        return self.with_arrays(unflatten(flat, self.arrays()))

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sBH", b"MLP1", ACTIVATIONS.index(self.activation), len(self.widths))
        head += struct.pack(f"<{len(self.widths)}I", *self.widths)
        return head + self.flatten().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MlpParams":
        magic, act, n = struct.unpack_from("<4sBH", blob, 0)
        if magic != b"MLP1":
            raise ShapeError("not an MLP checkpoint")
        off = struct.calcsize("<4sBH")
        widths = struct.unpack_from(f"<{n}I", blob, off)
        off += 4 * n
        flat = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
        template = zeros_like_spec(MlpSpec(widths, ACTIVATIONS[act]))
        if flat.size != template.flatten().size:
            raise ShapeError("checkpoint payload size does not match its header")
        return template.unflatten(flat)


@dataclass(frozen=True)
class CompositeParams:
    """Several named parameter containers trained as one vector."""

    parts: tuple[tuple[str, object], ...]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for _, p in self.parts:
            out += p.arrays()
        return out

    def with_arrays(self, arrays):
        arrays = list(arrays)
        new, i = [], 0
        for name, p in self.parts:
            k = len(p.arrays())
            new.append((name, p.with_arrays(arrays[i:i + k])))
            i += k
        if i != len(arrays):
            raise ShapeError("array count does not match the composite layout")
        return CompositeParams(tuple(new))

    def layer_blocks(self):
        out, off = [], 0
        for name, p in self.parts:
            for lname, idx in p.layer_blocks():
                out.append((f"{name}.{lname}", [off + i for i in idx]))
            off += len(p.arrays())
        return out

    def __getitem__(self, name):
        return dict(self.parts)[name]

    def flatten(self):
        return flatten(self.arrays())


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(flat: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    need = sum(a.size for a in like)
    if flat.size != need:
        raise ShapeError(f"flat vector has {flat.size} entries, layout needs {need}")
    out, i = [], 0
    for a in like:
        out.append(np.array(flat[i:i + a.size], dtype=np.float64).reshape(a.shape))
        i += a.size
    return out


def zeros_like_spec(spec: MlpSpec) -> MlpParams:
    w = spec.layer_widths
    return MlpParams(w, spec.activation,
                     tuple(np.zeros((w[i], w[i + 1])) for i in range(len(w) - 1)),
                     tuple(np.zeros(w[i + 1]) for i in range(len(w) - 1)))


def init_glorot(spec: MlpSpec, stream: str = "init") -> MlpParams:
    """Glorot-uniform weights, zero biases, reproducible from ``spec.seed``."""
    rng = rng_stream(spec.seed, stream)
    w = spec.layer_widths
    weights = []
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    return MlpParams(w, spec.activation, tuple(weights), tuple(np.zeros(n) for n in w[1:]))


_NP_ACT = {"tanh": np.tanh, "sin": np.sin, "relu": lambda z: np.maximum(z, 0.0)}
_TORCH_ACT = {"tanh": torch.tanh, "sin": torch.sin, "relu": torch.relu}


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Batched numpy forward pass, ``x`` of shape (n, d_in) or (d_in,)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.widths[0]:
        raise ShapeError(f"input width {h.shape[1]} != {params.widths[0]}")
    act = _NP_ACT[params.activation]
    last = params.layer_count - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = act(h)
    return h[0] if single else h


def forward_tape(params: MlpParams, x: Sequence[ad.ADValue],
                 param_leaves: list[ad.ADValue] | None = None) -> list[ad.ADValue]:
    """Scalar-tape forward pass for one input vector.

    If ``param_leaves`` is given (flat order of :func:`flatten`), weights are
    taken from it so the output can be differentiated w.r.t. parameters.
    """
    if len(x) != params.widths[0]:
        raise ShapeError(f"input width {len(x)} != {params.widths[0]}")
    tape = x[0].tape
    it = iter(param_leaves) if param_leaves is not None else None
    h = list(x)
    last = params.layer_count - 1
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        if it is not None:
            wl = [[next(it) for _ in range(w.shape[1])] for _ in range(w.shape[0])]
            bl = [next(it) for _ in range(w.shape[1])]
        else:
            wl = [[tape.constant(v) for v in row] for row in w]
            bl = [tape.constant(v) for v in b]
        out = []
        for j in range(w.shape[1]):
            z = bl[j]
            for i in range(w.shape[0]):
                z = z + h[i] * wl[i][j]
            if li < last:
                z = getattr(ad, params.activation)(z)
            out.append(z)
        h = out
    return h


def torch_mlp(tensors: Sequence[torch.Tensor], activation: str, x: torch.Tensor) -> torch.Tensor:
    """Forward pass with weights supplied as torch tensors (flat W,b order)."""
    act = _TORCH_ACT[activation]
    n = len(tensors) // 2
    h = x
    for i in range(n):
        h = h @ tensors[2 * i] + tensors[2 * i + 1]
        if i < n - 1:
            h = act(h)
    return h


def mse_loss(preds: Sequence[ad.ADValue], targets: Sequence[float]) -> ad.ADValue:
    if len(preds) == 0:
        raise ShapeError("mse of an empty batch")
    if len(preds) != len(targets):
        raise ShapeError("preds and targets differ in length")
    total = None
    for p, t in zip(preds, targets):
        r = p - t
        total = r * r if total is None else total + r * r
    return total / float(len(preds))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros(cls, params, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                   0, beta1, beta2, eps)


def _check_grads(params, grads):
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise ShapeError("gradient list does not match parameter layout")
    for g, a in zip(grads, arrays):
        if np.shape(g) != a.shape:
            raise ShapeError(f"gradient shape {np.shape(g)} != {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient entry")
    return arrays


def adam_step(params, grads: Sequence[np.ndarray], state: AdamState, lr: float = DEFAULT_LR):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    arrays = _check_grads(params, grads)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(a - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), AdamState(new_m, new_v, t, b1, b2, state.eps)


def sgd_step(params, grads: Sequence[np.ndarray], lr: float):
    arrays = _check_grads(params, grads)
    return params.with_arrays([a - lr * g for a, g in zip(arrays, grads)])


def combine(params_list: Sequence, weights: Sequence[float]):
    """Weighted sum of parameter containers, accumulated in list order."""
    if not params_list or len(params_list) != len(weights):
        raise ShapeError("need one weight per parameter set")
    if abs(sum(weights) - 1.0) > 1e-12:
        raise ValueError(f"combination weights sum to {sum(weights)!r}, expected 1")
    ref = params_list[0].arrays()
    for p in params_list[1:]:
        arrs = p.arrays()
        if len(arrs) != len(ref) or any(a.shape != r.shape for a, r in zip(arrs, ref)):
            raise ShapeError("parameter sets do not conform")
    # start from the first weighted term: 1.0 * x == x exactly, so a single
    # model with weight 1 comes back bit-for-bit
    acc = [weights[0] * a for a in ref]
    for p, w in zip(params_list[1:], weights[1:]):
        acc = [s + w * a for s, a in zip(acc, p.arrays())]
    return params_list[0].with_arrays(acc)


def to_torch(arrays: Sequence[np.ndarray], requires_grad=True) -> list[torch.Tensor]:
    return [torch.tensor(a, dtype=torch.float64, requires_grad=requires_grad) for a in arrays]

