import numpy as np
import pytest

from sharpminima import net

# PASS/FAIL lines from the acceptance suite, echoed at the end of the run
ACCEPTANCE = []


def random_spec(rng, batchnorm, max_params=2000):
    """Small random MLP with at most ``max_params`` parameters."""
    while True:
        d = int(rng.integers(2, 8))
        k = int(rng.integers(2, 6))
        hidden = [int(h) for h in rng.integers(2, 12, size=int(rng.integers(1, 3)))]
        spec = net.mlp_spec(d, hidden, k, batchnorm)
        if net.build_layout(spec).n <= max_params:
            return spec


def perturbed_params(spec, rng):
    """Initial weights with nonzero biases, BN affine terms and running statistics."""
    p = net.init_params(spec, int(rng.integers(1 << 30)))
    values = p.values + 0.1 * rng.standard_normal(p.n)
    buffers = {i: (0.3 * rng.standard_normal(m.size), 0.5 + rng.random(v.size)) for i, (m, v) in p.buffers.items()}
    return net.ParamVector(values, p.layout, buffers)


def central_difference(f, x):
    g = np.zeros_like(x)
    for i in range(x.size):
        h = 1e-5 * (1.0 + abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
