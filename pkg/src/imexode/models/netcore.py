"""The partitioned right-hand side: a dense MLP for G and fixed stencils for J.

The MLP stores all parameters in one flat vector, layer by layer (weight matrix
row-major, then bias). Its vector-Jacobian product recomputes activations from
the input instead of caching them, so stored trajectories stay proportional to
the state size.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ..utils.errors import ConfigError, DatasetFormatError, DimensionMismatchError
from ..utils.logging import default_logger
from .linalg import ImplicitOperator

MODEL_MAGIC = b"IMEXNN01"


class Activation(str, Enum):
    LINEAR = "linear"
    RELU = "relu"

    @property
    def tag(self) -> int:
        return 0 if self is Activation.LINEAR else 1

    @classmethod
    def from_tag(cls, tag: int) -> "Activation":
        if tag == 0:
            return cls.LINEAR
        if tag == 1:
            return cls.RELU
        raise DatasetFormatError(f"Unknown activation tag {tag}")


class ExplicitField(Protocol):
    """Contract of the explicit part G(u; p)."""

    input_dim: int
    output_dim: int

    @property
    def params(self) -> np.ndarray: ...

    @property
    def param_count(self) -> int: ...

    def forward(self, U: np.ndarray) -> np.ndarray: ...

    def vjp(self, U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...


def as_block(U: np.ndarray, rows: int, what: str) -> Tuple[np.ndarray, bool]:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U.reshape(-1, 1)
        vector = True
    elif U.ndim == 2:
        vector = False
    else:
        raise DimensionMismatchError(f"{what} must be a vector or a 2-D block, got shape {U.shape}")
    if U.shape[0] != rows:
        raise DimensionMismatchError(f"{what} has {U.shape[0]} rows, expected {rows}")
    return U, vector


def count_params(dims: Sequence[int]) -> int:
    """Number of weights and biases of a dense network with layer sizes ``dims``."""
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def default_activations(n_layers: int) -> List[Activation]:
    """ReLU on hidden layers, linear output."""
    return [Activation.RELU] * (n_layers - 1) + [Activation.LINEAR]


@dataclass
class MLPModel:
    """Dense feed-forward network with a flat parameter vector."""

    layer_dims: List[int]
    params: np.ndarray
    activations: List[Activation] = field(default_factory=list)

    def __post_init__(self):
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigError(f"Invalid layer sizes {self.layer_dims}")
        self.layer_dims = [int(n) for n in self.layer_dims]
        n_layers = len(self.layer_dims) - 1
        if not self.activations:
            self.activations = default_activations(n_layers)
        self.activations = [Activation(a) for a in self.activations]
        if len(self.activations) != n_layers:
            raise ConfigError(f"Expected {n_layers} activation tags, got {len(self.activations)}")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (count_params(self.layer_dims),):
            raise DimensionMismatchError(
                f"Parameter vector has shape {self.params.shape}, "
                f"expected ({count_params(self.layer_dims)},)"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def param_count(self) -> int:
        return self.params.size

    def layers(self) -> Iterator[Tuple[np.ndarray, np.ndarray, Activation, slice, slice]]:
        """Yield (W, b, activation, W slice, b slice) as views into ``params``."""
        offset = 0
        for l, act in enumerate(self.activations):
            n_in, n_out = self.layer_dims[l], self.layer_dims[l + 1]
            w_slice = slice(offset, offset + n_out * n_in)
            offset = w_slice.stop
            b_slice = slice(offset, offset + n_out)
            offset = b_slice.stop
            yield (self.params[w_slice].reshape(n_out, n_in), self.params[b_slice], act,
                   w_slice, b_slice)

    def forward(self, U: np.ndarray) -> np.ndarray:
        """Evaluate the network on a vector or on every column of a block."""
        H, vector = as_block(U, self.input_dim, "MLP input")
        for W, b, act, _, _ in self.layers():
            H = W @ H + b[:, None]
            if act is Activation.RELU:
                H = np.maximum(H, 0.0)
        return H.ravel() if vector else H

    def vjp(self, U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Vector-Jacobian products of the network at U.

        Args:
            U: Inputs, vector or d x m
            V: Cotangents of the outputs, same layout as the output

        Returns:
            (du, dp): du per column, dp summed over the batch
        """
        H, vector = as_block(U, self.input_dim, "MLP input")
        V, _ = as_block(V, self.output_dim, "MLP cotangent")
        if V.shape[1] != H.shape[1]:
            raise DimensionMismatchError(f"Cotangent has {V.shape[1]} columns, input has {H.shape[1]}")

        layers = list(self.layers())
        inputs, preacts = [], []
        for W, b, act, _, _ in layers:
            inputs.append(H)
            Z = W @ H + b[:, None]
            preacts.append(Z)
            H = np.maximum(Z, 0.0) if act is Activation.RELU else Z

        dp = np.zeros_like(self.params)
        delta = V
        for (W, b, act, w_slice, b_slice), H_in, Z in zip(reversed(layers), reversed(inputs), reversed(preacts)):
            if act is Activation.RELU:
                delta = delta * (Z > 0.0)
            dp[w_slice] = (delta @ H_in.T).ravel()
            dp[b_slice] = delta.sum(axis=1)
            delta = W.T @ delta

        return (delta.ravel() if vector else delta), dp

    def copy(self) -> "MLPModel":
        return MLPModel(list(self.layer_dims), self.params.copy(), list(self.activations))


def mlp_forward(m: MLPModel, U: np.ndarray) -> np.ndarray:
    return m.forward(U)


def mlp_vjp(m: MLPModel, U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return m.vjp(U, V)


def init_weights(
    dims: Sequence[int],
    sigma: float,
    seed: int,
    activations: Optional[Sequence[Activation]] = None,
) -> MLPModel:
    """
    Build an MLP with N(0, sigma^2) weights and zero biases.

    Weights are drawn layer by layer from a Philox counter-based generator, so
    the same seed gives the same parameters on every platform.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    rng = np.random.Generator(np.random.Philox(seed))
    model = MLPModel(list(dims), np.zeros(count_params(dims)), list(activations or []))
    for W, _, _, w_slice, _ in model.layers():
        model.params[w_slice] = rng.normal(0.0, sigma, size=W.size)
    return model


def save_model(path: str, model: MLPModel) -> None:
    """Write ``IMEXNN01``: u32 layer count, u32 dims, u8 activation tags, f64 parameters."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_layers = len(model.layer_dims) - 1
    header = MODEL_MAGIC + struct.pack(f"<I{n_layers + 1}I", n_layers, *model.layer_dims)
    header += struct.pack(f"<{n_layers}B", *(a.tag for a in model.activations))
    with out.open("wb") as handle:
        handle.write(header)
        handle.write(model.params.astype("<f8").tobytes())
    default_logger.debug(f"Saved model {model.layer_dims} ({model.param_count} params) to {out}")


def load_model(path: str) -> MLPModel:
    """Read a model written by ``save_model``."""
    blob = Path(path).read_bytes()
    if blob[:8] != MODEL_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:8]!r}, expected {MODEL_MAGIC!r}")
    pos = 8
    if len(blob) < pos + 4:
        raise DatasetFormatError(f"{path}: truncated header")
    (n_layers,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    need = pos + 4 * (n_layers + 1) + n_layers
    if n_layers < 1 or len(blob) < need:
        raise DatasetFormatError(f"{path}: truncated header")
    dims = list(struct.unpack_from(f"<{n_layers + 1}I", blob, pos))
    pos += 4 * (n_layers + 1)
    tags = struct.unpack_from(f"<{n_layers}B", blob, pos)
    pos += n_layers
    n_params = count_params(dims)
    if len(blob) != pos + 8 * n_params:
        raise DatasetFormatError(
            f"{path}: expected {n_params} parameters, payload has {(len(blob) - pos) / 8:g}"
        )
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    return MLPModel(dims, params, [Activation.from_tag(t) for t in tags])


class StencilOperator(ImplicitOperator):
    """
    Periodic finite-difference stencil as a circulant operator.

    ``(J u)_i = sum_k coeffs[k] * u_{i + k - r}`` with r the stencil half-width
    and indices taken modulo d.
    """

    def __init__(self, coeffs: Sequence[float], dim: int):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.ndim != 1 or coeffs.size % 2 == 0:
            raise ConfigError(f"Stencil needs an odd number of taps, got {coeffs.size}")
        if dim < coeffs.size:
            raise ConfigError(f"Grid of {dim} points is smaller than the {coeffs.size}-point stencil")
        super().__init__(dim)
        self.coeffs = coeffs
        self.radius = coeffs.size // 2
        self.is_symmetric = bool(np.array_equal(coeffs, coeffs[::-1]))

    @staticmethod
    def _apply(coeffs: np.ndarray, X: np.ndarray) -> np.ndarray:
        r = coeffs.size // 2
        Y = np.zeros_like(X)
        for k, c in enumerate(coeffs):
            if c != 0.0:
                Y += c * np.roll(X, r - k, axis=0)
        return Y

    def _matmat(self, X):
        return self._apply(self.coeffs, np.asarray(X, dtype=np.float64))

    def _rmatmat(self, X):
        return self._apply(self.coeffs[::-1], np.asarray(X, dtype=np.float64))

    def transpose_operator(self) -> "StencilOperator":
        return StencilOperator(self.coeffs[::-1], self.dim)

    def eigenvalues(self) -> np.ndarray:
        """Circulant spectrum, indexed by wavenumber q = 0..d-1."""
        q = np.arange(self.dim)[:, None]
        offsets = np.arange(self.coeffs.size)[None, :] - self.radius
        return np.exp(2j * np.pi * q * offsets / self.dim) @ self.coeffs


def make_ks_stencil(d: int, L: float = 22.0) -> StencilOperator:
    """Linear Kuramoto-Sivashinsky part -u_xx - u_xxxx as a 5-point periodic stencil."""
    if d < 5:
        raise ConfigError(f"KS stencil needs d >= 5, got {d}")
    dx = L / d
    a, b = 1.0 / dx ** 4, 1.0 / dx ** 2
    return StencilOperator([-a, 4 * a - b, -6 * a + 2 * b, 4 * a - b, -a], d)


def make_burgers_diffusion(d: int, L: float = 1.0, nu: float = 8e-4) -> StencilOperator:
    """Viscous term nu*u_xx as the periodic 3-point stencil nu/dx^2 [1, -2, 1]."""
    if d < 3:
        raise ConfigError(f"Diffusion stencil needs d >= 3, got {d}")
    dx = L / d
    scale = nu / dx ** 2
    return StencilOperator([scale, -2.0 * scale, scale], d)


@dataclass
class PartitionedODE:
    """du/dt = G(u; p) + J u with a learnable explicit part and a fixed linear part."""

    g: ExplicitField
    j: ImplicitOperator

    def __post_init__(self):
        d = self.j.dim
        if self.g.input_dim != d or self.g.output_dim != d:
            raise DimensionMismatchError(
                f"Explicit part maps {self.g.input_dim} -> {self.g.output_dim}, implicit part is {d} x {d}"
            )

    @property
    def dim(self) -> int:
        return self.j.dim

    @property
    def params(self) -> np.ndarray:
        return self.g.params

    @property
    def param_count(self) -> int:
        return self.g.param_count

    def explicit(self, U: np.ndarray) -> np.ndarray:
        return self.g.forward(U)

    def implicit(self, U: np.ndarray) -> np.ndarray:
        return self.j.apply(U)

    def rhs(self, U: np.ndarray) -> np.ndarray:
        return self.g.forward(U) + self.j.apply(U)

    def explicit_vjp(self, U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.g.vjp(U, V)

    def implicit_transpose(self, V: np.ndarray) -> np.ndarray:
        return self.j.apply_transpose(V)

    def implicit_param_vjp(self, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Parameter cotangent of J u; J carries no parameters, so always zero."""
        return np.zeros(self.param_count)
