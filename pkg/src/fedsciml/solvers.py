"""Classical reference solutions: ODE integration, finite differences,
and closed-form solutions.  Nothing here touches autodiff."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.integrate import solve_ivp
from scipy.linalg import solve_banded


class SolverError(RuntimeError):
    pass


@dataclass
class SolverReport:
    u: np.ndarray
    x: np.ndarray
    t: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0
    flags: dict = field(default_factory=dict)


def rk45(v: Callable[[float], np.ndarray], queries, rtol=1e-11, atol=1e-12) -> np.ndarray:
    """u(x) = int_0^x v, by Dormand-Prince RK45 with dense output.

    ``v`` maps a scalar x to one value per function, so a whole batch of
    input functions is integrated in a single adaptive solve.  Returns an
    array of shape (functions, len(queries)).
    """
    q = np.asarray(queries, dtype=np.float64)
    v0 = np.atleast_1d(np.asarray(v(0.0), dtype=np.float64))
    x_end = float(q.max()) if q.size else 0.0
    if x_end <= 0.0:
        return np.zeros((v0.size, q.size))
    sol = solve_ivp(lambda x, u: np.atleast_1d(v(x)), (0.0, x_end), np.zeros(v0.size),
                    method="RK45", rtol=rtol, atol=atol, dense_output=True)
    if sol.status != 0:
        raise SolverError(f"RK45 failed: {sol.message}")
    out = sol.sol(np.clip(q, 0.0, x_end))
    out[:, q <= 0.0] = 0.0
    return out


def _laplacian_bands(m: int, h: float, coef: float):
    """Banded form of I - coef * D2 on m interior nodes (Dirichlet)."""
    r = coef / (h * h)
    ab = np.zeros((3, m))
    ab[0, 1:] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[2, :-1] = -r
    return ab


def _d2(u: np.ndarray, h: float, left=0.0, right=0.0) -> np.ndarray:
    """Second difference along the last axis with Dirichlet ghost values."""
    padded = np.concatenate([np.full(u.shape[:-1] + (1,), left), u,
                             np.full(u.shape[:-1] + (1,), right)], axis=-1)
    return (padded[..., 2:] - 2.0 * padded[..., 1:-1] + padded[..., :-2]) / (h * h)


def solve_dr_time(v_source, nx: int = 101, nt: int = 101, diffusion: float = 0.01,
                  reaction: float = 0.01, t_end: float = 1.0, tol: float = 1e-10,
                  max_inner: int = 200) -> SolverReport:
    """u_t = D u_xx + k u^2 + s on [0,1], zero initial and boundary values.

    Crank-Nicolson for diffusion, trapezoidal reaction/source resolved by a
    fixed-point iteration each step; second order in x and t.

    ``v_source`` is either an array of source values on the x grid (shape
    (nx,) or (functions, nx)), or a callable ``s(x, t)`` for
    time-dependent forcing (used by manufactured-solution checks).
    """
    if nx < 3 or nt < 2:
        raise SolverError("grid too small")
    x = np.linspace(0.0, 1.0, nx)
    t = np.linspace(0.0, t_end, nt)
    h, dt = x[1] - x[0], t[1] - t[0]
    xi = x[1:-1]
    if callable(v_source):
        src = v_source
        probe = np.asarray(src(xi, 0.0), dtype=np.float64)
        single = probe.ndim == 1
        batch = np.atleast_2d(probe).shape[0]
    else:
        single = np.ndim(v_source) == 1
        arr = np.atleast_2d(np.asarray(v_source, dtype=np.float64))
        if arr.shape[-1] != nx:
            raise SolverError(f"source has {arr.shape[-1]} nodes, grid has {nx}")
        batch = arr.shape[0]
        interior = arr[:, 1:-1]
        src = lambda _x, _t: interior  # noqa: E731
    ab = _laplacian_bands(nx - 2, h, 0.5 * dt * diffusion)
    u = np.zeros((batch, nx - 2))
    out = np.zeros((batch, nt, nx))
    total_iters = 0

    def react(w, tt):
        return reaction * w * w + src(xi, tt)

    for n in range(nt - 1):
        explicit = u + 0.5 * dt * diffusion * _d2(u, h) + 0.5 * dt * react(u, t[n])
        new = u
        for it in range(max_inner):
            rhs = explicit + 0.5 * dt * react(new, t[n + 1])
            nxt = solve_banded((1, 1), ab, rhs.T).T
            change = float(np.max(np.abs(nxt - new))) if nxt.size else 0.0
            new = nxt
            if change <= tol:
                break
        else:
            raise SolverError(f"fixed-point iteration did not converge at step {n} (change {change:.3e})")
        total_iters += it + 1
        if not np.all(np.isfinite(new)):
            raise SolverError(f"non-finite solution at step {n}")
        u = new
        out[:, n + 1, 1:-1] = u
    # residual of the final step's nonlinear system
    rhs = explicit + 0.5 * dt * react(u, t[-1])
    lhs = u - 0.5 * dt * diffusion * _d2(u, h)
    res = float(np.max(np.abs(lhs - rhs))) if u.size else 0.0
    return SolverReport(out[0] if single else out, x, t, total_iters, res)


def _periodic_rhs(u: np.ndarray, h: float, nu: float) -> np.ndarray:
    up = np.roll(u, -1, axis=-1)
    um = np.roll(u, 1, axis=-1)
    # skew-symmetric split of u u_x: conservative and energy stable
    conv = ((up * up - um * um) / (2.0 * h) + u * (up - um) / (2.0 * h)) / 3.0
    return -conv + nu * (up - 2.0 * u + um) / (h * h)


def burgers_stable_dt(u: np.ndarray, h: float, nu: float) -> float:
    umax = float(np.max(np.abs(u))) if u.size else 0.0
    limits = [h * h / (2.0 * nu)] if nu > 0 else []
    if umax > 0:
        limits.append(h / umax)
    return min(limits) if limits else np.inf


def solve_burgers(v_init, nx: int = 101, nt: int = 101, nu: float = 0.1, t_end: float = 1.0,
                  dt: float | None = None, safety: float = 0.5) -> SolverReport:
    """Periodic viscous Burgers on [0,1): central differences, RK4 in time.

    ``v_init`` is a callable on x or an array on the ``nx`` output nodes
    (the last node duplicates x=0).  Output shape (functions, nt, nx) for
    batched input, (nt, nx) otherwise.
    """
    n = nx - 1
    if n < 3:
        raise SolverError("grid too small")
    x_out = np.linspace(0.0, 1.0, nx)
    xs = x_out[:-1]
    h = 1.0 / n
    if callable(v_init):
        u0 = np.asarray(v_init(xs), dtype=np.float64)
    else:
        arr = np.asarray(v_init, dtype=np.float64)
        if arr.shape[-1] != nx:
            raise SolverError(f"initial data has {arr.shape[-1]} nodes, grid has {nx}")
        u0 = arr[..., :-1]
    single = u0.ndim == 1
    u = np.atleast_2d(u0).copy()
    t_out = np.linspace(0.0, t_end, nt)
    # max|u| cannot grow for viscous Burgers, so the initial data sets the advective limit
    limit = burgers_stable_dt(u, h, nu)
    if dt is None:
        dt = safety * limit
    elif dt > safety * limit:
        raise SolverError(f"dt={dt:.3e} exceeds the stability limit {safety * limit:.3e}")
    interval = t_out[1] - t_out[0]
    sub = int(np.ceil(interval / dt))
    k = interval / sub
    out = np.empty((u.shape[0], nt, nx))
    out[:, 0, :-1] = u
    steps = 0
    for j in range(1, nt):
        for _ in range(sub):
            k1 = _periodic_rhs(u, h, nu)
            k2 = _periodic_rhs(u + 0.5 * k * k1, h, nu)
            k3 = _periodic_rhs(u + 0.5 * k * k2, h, nu)
            k4 = _periodic_rhs(u + k * k3, h, nu)
            u = u + (k / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            steps += 1
        if not np.all(np.isfinite(u)):
            raise SolverError("Burgers solution blew up")
        out[:, j, :-1] = u
    out[:, :, -1] = out[:, :, 0]
    return SolverReport(out[0] if single else out, x_out, t_out, steps, 0.0, {"dt": k})


def allen_cahn_initial(x):
    return x * x * np.cos(np.pi * x)


def solve_allen_cahn(nx: int = 512, dt: float = 1e-4, d: float = 0.001, nt_out: int = 101,
                     t_end: float = 1.0) -> SolverReport:
    """u_t = d u_xx + 5(u - u^3) on [-1,1], u(+-1,t) = -1, u(x,0) = x^2 cos(pi x).

    Implicit (backward Euler) diffusion, explicit reaction.
    """
    x = np.linspace(-1.0, 1.0, nx)
    h = x[1] - x[0]
    t_out = np.linspace(0.0, t_end, nt_out)
    per_out = int(round((t_out[1] - t_out[0]) / dt))
    if not np.isclose(per_out * dt, t_out[1] - t_out[0]):
        raise SolverError("dt must divide the output interval")
    ab = _laplacian_bands(nx - 2, h, dt * d)
    u = allen_cahn_initial(x)
    u[0] = u[-1] = -1.0
    out = np.empty((nt_out, nx))
    out[0] = u
    inner = u[1:-1].copy()
    bc = np.zeros(nx - 2)
    bc[0] = bc[-1] = dt * d * (-1.0) / (h * h)
    for j in range(1, nt_out):
        for _ in range(per_out):
            rhs = inner + dt * 5.0 * (inner - inner ** 3) + bc
            inner = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(inner)):
            raise SolverError("Allen-Cahn solution blew up")
        out[j, 1:-1] = inner
        out[j, 0] = out[j, -1] = -1.0
    return SolverReport(out, x, t_out, per_out * (nt_out - 1))


DR_LAMBDA = 0.01


def inverse_dr_k(x):
    return 0.1 + np.exp(-0.5 * (np.asarray(x) - 0.5) ** 2 / 0.15 ** 2)


def inverse_dr_source(x):
    return np.sin(2.0 * np.pi * np.asarray(x))


def solve_dr_bvp(k_fn=inverse_dr_k, nodes: int = 1001, lam: float = DR_LAMBDA,
                 f_fn=inverse_dr_source) -> SolverReport:
    """lam u'' - k(x) u = f on [0,1], u(0) = u(1) = 0; tridiagonal FD."""
    x = np.linspace(0.0, 1.0, nodes)
    h = x[1] - x[0]
    xi = x[1:-1]
    k = np.broadcast_to(np.asarray(k_fn(xi), dtype=np.float64), xi.shape)
    f = np.broadcast_to(np.asarray(f_fn(xi), dtype=np.float64), xi.shape)
    r = lam / (h * h)
    ab = np.zeros((3, nodes - 2))
    ab[0, 1:] = r
    ab[1, :] = -2.0 * r - k
    ab[2, :-1] = r
    if np.any(ab[1] == 0.0):
        raise SolverError("singular BVP system")
    ui = solve_banded((1, 1), ab, f)
    u = np.concatenate([[0.0], ui, [0.0]])
    res = lam * _d2(ui, h) - k * ui - f
    return SolverReport(u, x, None, 1, float(np.max(np.abs(res))))


def dr_bvp_spectral(k_fn=inverse_dr_k, degree: int = 96, lam: float = DR_LAMBDA,
                    f_fn=inverse_dr_source) -> C.Chebyshev:
    """Chebyshev collocation solution of the same BVP; a polynomial whose
    derivatives are exact, used as a residual oracle."""
    s = np.cos(np.pi * np.arange(degree + 1) / degree)[::-1]
    x = 0.5 * (s + 1.0)
    eye = np.eye(degree + 1)
    vals = C.chebvander(s, degree)
    d2 = np.column_stack([C.chebval(s, C.chebder(eye[j], 2)) for j in range(degree + 1)]) * 4.0
    a = lam * d2 - k_fn(x)[:, None] * vals
    rhs = np.asarray(f_fn(x), dtype=np.float64).copy()
    a[0], a[-1] = vals[0], vals[-1]
    rhs[0] = rhs[-1] = 0.0
    coef = np.linalg.solve(a, rhs)
    return C.Chebyshev(coef, domain=[0.0, 1.0])


HELMHOLTZ_K0 = 4.0 * np.pi


def poisson1d_u(x):
    x = np.asarray(x, dtype=np.float64)
    return x + sum(np.sin(i * x) / i for i in range(1, 5)) + np.sin(8 * x) / 8


def poisson1d_u_xx(x):
    x = np.asarray(x, dtype=np.float64)
    return -sum(i * np.sin(i * x) for i in range(1, 5)) - 8 * np.sin(8 * x)


def helmholtz2d_u(x, y):
    return np.sin(HELMHOLTZ_K0 * np.asarray(x)) * np.sin(HELMHOLTZ_K0 * np.asarray(y))


def gramacy(x):
    x = np.asarray(x, dtype=np.float64)
    return (x + 0.5) ** 4 - np.sin(10 * np.pi * x) / (2 * x + 3)


def schaffer(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return 0.5 + (np.sin(x * x - y * y) ** 2 - 0.5) / (1 + 0.001 * (x * x + y * y)) ** 2


_ANALYTIC = {
    "poisson1d_u": poisson1d_u,
    "helmholtz2d_u": helmholtz2d_u,
    "inverse_dr_k": inverse_dr_k,
    "gramacy": gramacy,
    "schaffer": schaffer,
}


def analytic_solutions(name: str):
    try:
        return _ANALYTIC[name]
    except KeyError:
        raise KeyError(f"no closed-form solution named {name!r}; known: {sorted(_ANALYTIC)}") from None


def observed_order(errors, ratio: float = 2.0) -> np.ndarray:
    e = np.asarray(errors, dtype=np.float64)
    return np.log(e[:-1] / e[1:]) / np.log(ratio)


def self_convergence_order(coarse, mid, fine) -> float:
    """Order from three solutions on nested grids (already restricted to the
    coarse nodes)."""
    a = np.max(np.abs(coarse - mid))
    b = np.max(np.abs(mid - fine))
    return float(np.log2(a / b))
