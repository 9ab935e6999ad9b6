"""Small seeded problems shared by the adaptation and acceptance tests."""
import numpy as np

from csfa.numerics import init_mlp
from csfa.prototypes import PrototypeBank


def small_problem(seed, n=12, d_in=5, hidden=(6, 4), n_classes=4, proto_scale=3.0):
    """Random extractor, random prototype bank and a batch of inputs."""
    rng = np.random.default_rng(seed)
    params = init_mlp(d_in, hidden, seed=int(rng.integers(2**31)))
    params = params.with_theta(params.theta + 0.1 * rng.standard_normal(params.size))
    bank = PrototypeBank(hidden[-1])
    for c in range(n_classes):
        bank.add(c, proto_scale * rng.standard_normal(hidden[-1]))
    x = rng.standard_normal((n, d_in))
    return params, bank, x


class Quadratic:
    """L(theta) = 0.5 * theta' A theta with A symmetric positive definite; ignores the mask."""

    def __init__(self, dim, seed):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((dim, dim))
        self.A = m @ m.T + 0.1 * np.eye(dim)

    def evaluate(self, theta, mask):
        return 0.5 * float(theta @ self.A @ theta), self.A @ theta
