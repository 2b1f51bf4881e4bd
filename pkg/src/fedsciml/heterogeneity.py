"""Client shards with a controlled degree of covariate shift.

Spatial datasets are cut into blocks that are dealt to clients in turn;
operator-learning datasets instead restrict which Chebyshev coefficients
each client's input functions may use.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CHEBYSHEV_TERMS = 10


@dataclass(frozen=True)
class PartitionSpec:
    kind: str  # "oneD" | "twoD_x" | "twoD_xy"
    n_total: int
    clients: int

    def __post_init__(self):
        if self.kind not in ("oneD", "twoD_x", "twoD_xy"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.clients < 1 or self.n_total < 1:
            raise ValueError("n_total and clients must be >= 1")
        if self.kind != "twoD_xy" and self.n_total < self.clients:
            raise ValueError(f"n_total={self.n_total} must be >= clients={self.clients}")


@dataclass
class Shard:
    points: np.ndarray
    labels: np.ndarray | None
    client_id: int
    indices: np.ndarray  # rows of the source dataset owned by this client
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p[:, None] if p.ndim == 1 else p


def block_sizes(n_points: int, n_blocks: int) -> list[int]:
    """Near-equal block sizes; the trailing blocks take the remainder."""
    base, rem = divmod(n_points, n_blocks)
    return [base + (1 if j >= n_blocks - rem else 0) for j in range(n_blocks)]


def _deal_blocks(order: np.ndarray, n_total: int, k: int):
    if len(order) < n_total:
        raise ValueError(f"{len(order)} points cannot fill {n_total} blocks")
    owned: list[list[int]] = [[] for _ in range(k)]
    blocks: list[list[int]] = [[] for _ in range(k)]
    start = 0
    for j, size in enumerate(block_sizes(len(order), n_total)):
        owned[j % k].extend(order[start:start + size].tolist())
        blocks[j % k].append(j)
        start += size
    return owned, blocks


def _make_shards(points, labels, owned, blocks, spec) -> list[Shard]:
    shards = []
    for cid, idx in enumerate(owned):
        idx = np.asarray(idx, dtype=int)
        shards.append(Shard(points[idx], None if labels is None else labels[idx], cid, idx,
                            {"kind": spec.kind, "n_total": spec.n_total, "clients": spec.clients,
                             "blocks": blocks[cid]}))
    return shards


def partition_1d(points, n_total: int, clients: int, labels=None) -> list[Shard]:
    """Split points sorted along the first axis into ``n_total`` blocks,
    block j going to client ``j % clients``."""
    spec = PartitionSpec("oneD", n_total, clients)
    pts = _as_points(points)
    lab = None if labels is None else np.asarray(labels)
    order = np.argsort(pts[:, 0], kind="stable")
    owned, blocks = _deal_blocks(order, n_total, clients)
    return _make_shards(pts, lab, owned, blocks, spec)


def partition_2d_x(points, n_total: int, clients: int, labels=None) -> list[Shard]:
    """Vertical stripes: the 1D rule applied to x, y left untouched."""
    spec = PartitionSpec("twoD_x", n_total, clients)
    pts = _as_points(points)
    lab = None if labels is None else np.asarray(labels)
    # ties in x are broken by the remaining coordinates so the split is deterministic
    order = np.lexsort(pts.T[::-1])
    owned, blocks = _deal_blocks(order, n_total, clients)
    return _make_shards(pts, lab, owned, blocks, spec)


def partition_2d_xy(points, n_per_axis: int, clients: int, labels=None, bounds=None) -> list[Shard]:
    """n x n equal-width cells; cell (row, col) goes to client (row + col) % K.

    Rows index y, columns index x, cells are numbered row-major from the
    bottom-left corner.  For K = 2 this is a checkerboard.
    """
    spec = PartitionSpec("twoD_xy", n_per_axis, clients)
    pts = _as_points(points)
    if len(pts) == 0:
        raise ValueError("no points to partition")
    lab = None if labels is None else np.asarray(labels)
    if bounds is None:
        lo, hi = pts[:, :2].min(axis=0), pts[:, :2].max(axis=0)
    else:
        lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    span = np.where(hi > lo, hi - lo, 1.0)
    cell = np.floor((pts[:, :2] - lo) / span * n_per_axis).astype(int)
    cell = np.clip(cell, 0, n_per_axis - 1)
    col, row = cell[:, 0], cell[:, 1]
    owner = (row + col) % clients
    owned, blocks = [], []
    for cid in range(clients):
        owned.append(np.flatnonzero(owner == cid).tolist())
        blocks.append([r * n_per_axis + c for r in range(n_per_axis) for c in range(n_per_axis)
                       if (r + c) % clients == cid])
    return _make_shards(pts, lab, owned, blocks, spec)


def partition(kind: str, points, n: int, clients: int, labels=None) -> list[Shard]:
    fn = {"oneD": partition_1d, "twoD_x": partition_2d_x, "twoD_xy": partition_2d_xy}[kind]
    return fn(points, n, clients, labels=labels)


def radical_inverse(i: int, base: int = 2) -> float:
    inv, f = 0.0, 1.0 / base
    while i > 0:
        i, digit = divmod(i, base)
        inv += digit * f
        f /= base
    return inv


def hammersley(count: int, dim: int = 2) -> np.ndarray:
    """Points (i/count, van-der-Corput(i)) for i = 0..count-1."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if dim != 2:
        raise ValueError("only the 2D Hammersley set is provided")
    i = np.arange(count)
    return np.column_stack([i / count, [radical_inverse(int(k)) for k in i]])


def star_discrepancy_estimate(points: np.ndarray, probes: int = 2000, seed: int = 0) -> float:
    """Lower estimate of the star discrepancy from anchored boxes at the
    points themselves plus random corners."""
    rng = np.random.default_rng(seed)
    corners = np.vstack([points, rng.random((probes, points.shape[1])), np.ones((1, points.shape[1]))])
    worst = 0.0
    n = len(points)
    for c in corners:
        vol = float(np.prod(c))
        open_ = np.mean(np.all(points < c, axis=1))
        closed = np.mean(np.all(points <= c, axis=1))
        worst = max(worst, abs(open_ - vol), abs(closed - vol))
    return worst if n else 0.0


@dataclass(frozen=True)
class ChebyshevSpaceSpec:
    n: int
    mode: str = "forward"  # forward | middle | inverse
    terms: int = CHEBYSHEV_TERMS

    def __post_init__(self):
        if not 1 <= self.n <= self.terms:
            raise ValueError(f"n={self.n} outside [1, {self.terms}]")
        if self.mode not in ("forward", "middle", "inverse"):
            raise ValueError(f"unknown mode {self.mode!r}")


def chebyshev_support(spec: ChebyshevSpaceSpec) -> tuple[int, int]:
    """Inclusive index window [lo, hi] of the active basis functions."""
    m, n = spec.terms, spec.n
    if spec.mode == "forward":
        lo = 0
    elif spec.mode == "inverse":
        lo = m - n
    else:
        lo = (m - n) // 2
    lo = min(max(lo, 0), m - 1)
    return lo, min(lo + n - 1, m - 1)


def client_modes(clients: int) -> list[str]:
    if clients == 1:
        return ["forward"]
    if clients == 2:
        return ["forward", "inverse"]
    if clients == 3:
        return ["forward", "middle", "inverse"]
    raise ValueError("Chebyshev-space heterogeneity is defined for 1-3 clients")


def chebyshev_eval(coeffs: np.ndarray, x) -> np.ndarray:
    """Evaluate sum_k c_k T_k(x) with T_{k+1} = 2x T_k - T_{k-1}.

    ``coeffs`` may be (terms,) or (functions, terms); a batch gives an
    array of shape (functions, *x.shape).
    """
    c = np.asarray(coeffs, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    c2 = c if c.ndim == 2 else c[None, :]
    cols = [c2[:, k].reshape((-1,) + (1,) * x.ndim) for k in range(c2.shape[1])]
    t_prev, t = np.ones_like(x), x
    out = cols[0] * t_prev
    for k in range(1, len(cols)):
        out = out + cols[k] * t
        t_prev, t = t, 2.0 * x * t - t_prev
    return out if c.ndim == 2 else out[0]


@dataclass
class ChebyshevSample:
    coeffs: np.ndarray  # (count, terms)
    spec: ChebyshevSpaceSpec

    def __call__(self, x) -> np.ndarray:
        return chebyshev_eval(self.coeffs, x)

    def function(self, i: int):
        c = self.coeffs[i]
        return lambda x: chebyshev_eval(c, x)


def sample_chebyshev(spec: ChebyshevSpaceSpec, rng: np.random.Generator, count: int) -> ChebyshevSample:
    lo, hi = chebyshev_support(spec)
    coeffs = np.zeros((count, spec.terms))
    coeffs[:, lo:hi + 1] = rng.uniform(-1.0, 1.0, size=(count, hi - lo + 1))
    return ChebyshevSample(coeffs, spec)


def shards_to_csv(shards: Sequence[Shard], path) -> None:
    """One row per point: coordinates, optional label, client id."""
    dim = shards[0].points.shape[1]
    has_label = shards[0].labels is not None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dim)] + (["label"] if has_label else []) + ["client_id"])
        for s in shards:
            for r in range(len(s)):
                row = [repr(float(v)) for v in s.points[r]]
                if has_label:
                    row.append(repr(float(s.labels[r])))
                w.writerow(row + [s.client_id])


def shards_from_csv(path) -> list[Shard]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    coord_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    label_col = header.index("label") if "label" in header else None
    cid_col = header.index("client_id")
    by_client: dict[int, list] = {}
    for r in body:
        by_client.setdefault(int(r[cid_col]), []).append(r)
    shards = []
    for cid in sorted(by_client):
        rs = by_client[cid]
        pts = np.array([[float(r[i]) for i in coord_cols] for r in rs])
        lab = None if label_col is None else np.array([float(r[label_col]) for r in rs])
        shards.append(Shard(pts, lab, cid, np.arange(len(rs)), {"source": str(path)}))
    return shards
