import numpy as np
import pytest

from fedsciml import nn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_mlp(rng, widths, activation, seed=0):
    """Glorot weights plus non-zero biases so every layer is exercised."""
    p = nn.init_glorot(nn.MlpSpec(tuple(widths), activation, seed))
    return p.with_arrays([a + (0.3 * rng.standard_normal(a.shape) if a.ndim == 1 else 0.0)
                          for a in p.arrays()])


class Scalar:
    """One-parameter container obeying the params protocol."""

    def __init__(self, v):
        self.v = np.atleast_1d(np.asarray(v, dtype=np.float64))

    def arrays(self):
        return [self.v]

    def with_arrays(self, arrays):
        return Scalar(arrays[0])

    def layer_blocks(self):
        return [("theta", [0])]


class Quadratic:
    """Mean of a_i (theta - c_i)^2 over samples; gradients in closed form."""

    def __init__(self, a, c):
        self.a = np.asarray(a, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        self.size = len(self.a)

    def loss(self, p):
        return float(np.mean(self.a * (p.v[0] - self.c) ** 2))

    def loss_and_grad(self, p):
        return self.loss(p), [np.array([np.mean(2 * self.a * (p.v[0] - self.c))])]

    def sample_grad_norms(self, p):
        return np.abs(2 * self.a * (p.v[0] - self.c))


class Linear:
    """loss = g * theta, constant gradient g."""

    def __init__(self, g, size=1):
        self.g = g
        self.size = size

    def loss(self, p):
        return float(self.g * p.v[0])

    def loss_and_grad(self, p):
        return self.loss(p), [np.array([float(self.g)])]

    def sample_grad_norms(self, p):
        return np.full(self.size, abs(self.g))


# acceptance results, printed as one line per criterion at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
