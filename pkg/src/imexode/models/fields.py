"""Explicit parts with closed-form dynamics and no learnable parameters."""

from typing import Optional, Tuple

import numpy as np

from ..utils.errors import ConfigError, DimensionMismatchError
from .netcore import as_block


class ConvectionField:
    """G(u) = -u * D u with the centered periodic first difference D."""

    def __init__(self, d: int, L: float = 1.0):
        if d < 3:
            raise ConfigError(f"Convection needs d >= 3, got {d}")
        self.input_dim = self.output_dim = d
        self.length = L
        self.dx = L / d
        self._params = np.zeros(0)

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def param_count(self) -> int:
        return 0

    def gradient(self, U: np.ndarray) -> np.ndarray:
        return (np.roll(U, -1, axis=0) - np.roll(U, 1, axis=0)) / (2.0 * self.dx)

    def forward(self, U: np.ndarray) -> np.ndarray:
        X, vector = as_block(U, self.input_dim, "state")
        out = -X * self.gradient(X)
        return out.ravel() if vector else out

    def vjp(self, U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        X, vector = as_block(U, self.input_dim, "state")
        W, _ = as_block(V, self.output_dim, "cotangent")
        # D is antisymmetric, so D^T(u*v) = -D(u*v)
        du = -W * self.gradient(X) + self.gradient(X * W)
        return (du.ravel() if vector else du), np.zeros(0)


class QuadraticField:
    """G_i(u) = sum_jk Q[i, j, k] u_j u_k."""

    def __init__(self, Q: np.ndarray):
        Q = np.asarray(Q, dtype=np.float64)
        if Q.ndim != 3 or not (Q.shape[0] == Q.shape[1] == Q.shape[2]):
            raise DimensionMismatchError(f"Q must be d x d x d, got shape {Q.shape}")
        self.Q = Q
        self.input_dim = self.output_dim = Q.shape[0]
        self._params = np.zeros(0)

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def param_count(self) -> int:
        return 0

    def forward(self, U: np.ndarray) -> np.ndarray:
        X, vector = as_block(U, self.input_dim, "state")
        out = np.einsum("ijk,jm,km->im", self.Q, X, X)
        return out.ravel() if vector else out

    def vjp(self, U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        X, vector = as_block(U, self.input_dim, "state")
        W, _ = as_block(V, self.output_dim, "cotangent")
        sym = self.Q + self.Q.transpose(0, 2, 1)
        du = np.einsum("ijk,im,km->jm", sym, W, X)
        return (du.ravel() if vector else du), np.zeros(0)


def stiff_test_problem(fast_rate: Optional[float] = None) -> Tuple[np.ndarray, QuadraticField, np.ndarray]:
    """
    Small split problem for step-size convergence studies.

    J couples three modes with eigenvalues -1, -4 and -8; the quadratic part
    exchanges energy between them and stays bounded for the returned u_0 on
    t in [0, 1].

    Args:
        fast_rate: If set, a fourth mode decaying at this rate is appended,
            uncoupled from the others and starting at 1. At a rate of 500
            explicit schemes need dt below about 0.005; the first three
            components are unchanged.

    Returns:
        (dense J, quadratic explicit part, u_0)
    """
    J = np.array([
        [-1.0, 0.5, 0.0],
        [0.0, -4.0, 1.0],
        [0.0, 0.0, -8.0],
    ])
    Q = np.zeros((3, 3, 3))
    Q[0, 1, 2] = 1.0
    Q[1, 0, 2] = -0.5
    Q[2, 0, 1] = -0.5
    Q[0, 0, 0] = -0.1
    u_0 = np.array([1.0, 0.5, 0.25])
    if fast_rate is None:
        return J, QuadraticField(Q), u_0
    if fast_rate <= 0:
        raise ConfigError(f"fast_rate must be positive, got {fast_rate}")
    J = np.pad(J, ((0, 1), (0, 1)))
    J[3, 3] = -fast_rate
    return J, QuadraticField(np.pad(Q, ((0, 1), (0, 1), (0, 1)))), np.append(u_0, 1.0)
