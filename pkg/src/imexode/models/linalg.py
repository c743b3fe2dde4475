"""Linear algebra for the implicit stage systems.

Every IMEX stage reduces to (I - alpha*J) X = B, where the batch columns of B
are independent right-hand sides of one d x d system. Two routes are offered:
a cached LU factorization of the dense shifted matrix, and restarted GMRES on
the matrix-free operator.
"""

import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Literal, Optional, Tuple

import numpy as np
import scipy.linalg as scla
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from ..utils.config import Config
from ..utils.errors import DimensionMismatchError, KrylovConvergenceError, SingularShiftError
from ..utils.logging import default_logger

if TYPE_CHECKING:
    from .integrator import NfeCounter


class ImplicitOperator(LinearOperator):
    """
    Square real operator J with transpose action and a version stamp.

    Subclasses implement ``_matmat`` and ``_rmatmat`` on 2-D blocks. ``version``
    must be bumped whenever the operator's entries change, so cached
    factorizations of I - alpha*J are not reused stale.
    """

    is_symmetric = False

    def __init__(self, dim: int):
        super().__init__(dtype=np.float64, shape=(dim, dim))
        self.version = 0

    @property
    def dim(self) -> int:
        return self.shape[0]

    def _matvec(self, x):
        return self._matmat(np.asarray(x).reshape(-1, 1)).ravel()

    def _rmatvec(self, x):
        return self._rmatmat(np.asarray(x).reshape(-1, 1)).ravel()

    def apply(self, X: np.ndarray) -> np.ndarray:
        """J @ X for a vector or a d x m block."""
        X = np.asarray(X, dtype=np.float64)
        _check_rows(self.dim, X)
        return self._matvec(X) if X.ndim == 1 else self._matmat(X)

    def apply_transpose(self, X: np.ndarray) -> np.ndarray:
        """J^T @ X for a vector or a d x m block."""
        X = np.asarray(X, dtype=np.float64)
        _check_rows(self.dim, X)
        return self._rmatvec(X) if X.ndim == 1 else self._rmatmat(X)

    def to_dense(self) -> np.ndarray:
        return self._matmat(np.eye(self.dim))

    def bump_version(self) -> None:
        self.version += 1


class DenseOperator(ImplicitOperator):
    """J held as a dense row-major matrix."""

    def __init__(self, matrix: np.ndarray):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatchError(f"Implicit operator must be square, got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("Implicit operator has non-finite entries")
        super().__init__(matrix.shape[0])
        self.matrix = matrix
        self.is_symmetric = bool(np.array_equal(matrix, matrix.T))

    def _matmat(self, X):
        return self.matrix @ X

    def _rmatmat(self, X):
        return self.matrix.T @ X

    def to_dense(self) -> np.ndarray:
        return self.matrix.copy()

    def update(self, matrix: np.ndarray) -> None:
        """Replace the entries and bump the version."""
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.shape != self.matrix.shape:
            raise DimensionMismatchError(f"Expected shape {self.matrix.shape}, got {matrix.shape}")
        self.matrix = matrix
        self.is_symmetric = bool(np.array_equal(matrix, matrix.T))
        self.bump_version()


class ShiftedOperator(LinearOperator):
    """Matrix-free (I - alpha*J), or (I - alpha*J^T) when ``transposed``."""

    def __init__(self, J: ImplicitOperator, alpha: float, transposed: bool = False):
        super().__init__(dtype=np.float64, shape=J.shape)
        self.J = J
        self.alpha = float(alpha)
        self.transposed = transposed

    def _matvec(self, x):
        x = np.asarray(x).ravel()
        Jx = self.J.apply_transpose(x) if self.transposed else self.J.apply(x)
        return x - self.alpha * Jx

    def _matmat(self, X):
        JX = self.J.apply_transpose(X) if self.transposed else self.J.apply(X)
        return X - self.alpha * JX

    def _rmatvec(self, x):
        x = np.asarray(x).ravel()
        Jx = self.J.apply(x) if self.transposed else self.J.apply_transpose(x)
        return x - self.alpha * Jx


def _check_rows(dim: int, B: np.ndarray) -> None:
    if B.ndim not in (1, 2) or B.shape[0] != dim:
        raise DimensionMismatchError(f"Expected {dim} rows, got array of shape {B.shape}")


def _as_matrix(J) -> np.ndarray:
    if isinstance(J, ImplicitOperator):
        return J.to_dense()
    return np.asarray(J, dtype=np.float64)


# --- direct solves -----------------------------------------------------------

@dataclass(frozen=True)
class LUFactorization:
    """Packed LU factors of (I - alpha*J) (or its transpose) with row pivots."""

    lu: np.ndarray
    pivots: np.ndarray
    alpha: float
    transposed: bool = False

    @property
    def dim(self) -> int:
        return self.lu.shape[0]

    def solve(self, B: np.ndarray) -> np.ndarray:
        return lu_solve(self, B)


def lu_factor(J, alpha: float, transposed: bool = False) -> LUFactorization:
    """
    Factor I - alpha*J with partial pivoting.

    Args:
        J: Square matrix or ImplicitOperator
        alpha: Shift, dt times the implicit diagonal coefficient
        transposed: Factor I - alpha*J^T instead

    Returns:
        LUFactorization

    Raises:
        SingularShiftError: a pivot is zero to working precision
    """
    matrix = _as_matrix(J)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatchError(f"J must be square, got shape {matrix.shape}")
    d = matrix.shape[0]
    M = np.eye(d) - alpha * (matrix.T if transposed else matrix)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scla.LinAlgWarning)
        lu, piv = scla.lu_factor(M, check_finite=True)

    pivots = np.abs(np.diag(lu))
    scale = max(np.abs(M).max(), 1.0)
    bad = np.flatnonzero(pivots <= d * np.finfo(np.float64).eps * scale)
    if bad.size:
        default_logger.error(f"Singular shifted operator: alpha={alpha:.6g}, column {int(bad[0])}")
        raise SingularShiftError(int(bad[0]), alpha)
    return LUFactorization(lu=lu, pivots=piv, alpha=float(alpha), transposed=transposed)


def lu_solve(f: LUFactorization, B: np.ndarray) -> np.ndarray:
    """Solve for every column of B with the stored factors; columns never interact."""
    B = np.asarray(B, dtype=np.float64)
    _check_rows(f.dim, B)
    return scla.lu_solve((f.lu, f.pivots), B, check_finite=False)


class FactorizationCache:
    """
    LU factorizations of one operator keyed by (J version, alpha, transposed).

    Symmetric operators share one entry for the forward and transposed shift.
    Single writer: callers must not insert concurrently.
    """

    def __init__(self, J: ImplicitOperator):
        self.J = J
        self.factorizations = 0
        self._entries: Dict[Tuple[int, float, bool], LUFactorization] = {}

    def get(self, j_version: int, alpha: float, transposed: bool = False) -> LUFactorization:
        """Cached factorization for the key, factoring on a miss."""
        if self.J.is_symmetric:
            transposed = False
        key = (int(j_version), float(alpha), bool(transposed))
        entry = self._entries.get(key)
        if entry is None:
            entry = lu_factor(self.J, alpha, transposed=transposed)
            self._entries[key] = entry
            self.factorizations += 1
            default_logger.debug(
                f"LU factorization #{self.factorizations}: version={j_version} alpha={alpha:.6g} "
                f"transposed={transposed}"
            )
        return entry

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        self._entries.clear()


def factorization_cache_get(cache: FactorizationCache, j_version: int, alpha: float,
                            transposed: bool = False) -> LUFactorization:
    return cache.get(j_version, alpha, transposed)


# --- Krylov solves -----------------------------------------------------------

class SolverConfig(BaseModel):
    """Linear solver selection for the stage systems."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["direct", "krylov"] = "direct"
    krylov_tol: float = Field(default=Config.KRYLOV_TOL, gt=0)
    krylov_maxit: int = Field(default=Config.KRYLOV_MAXIT, ge=1)
    restart: int = Field(default=Config.KRYLOV_RESTART, ge=1)


def _gmres_column(A, b, x0, tol, maxit, restart):
    """Restarted GMRES with Givens rotations for one right-hand side.

    Returns (x, iterations, relative residual).
    """
    d = b.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(d), 0, 0.0

    x = np.zeros(d) if x0 is None else np.array(x0, dtype=np.float64)
    iterations = 0
    best_x, best_res = x.copy(), np.inf

    while True:
        r = b - A.matvec(x)
        beta = np.linalg.norm(r)
        relres = beta / bnorm
        if relres < best_res:
            best_x, best_res = x.copy(), relres
        if relres <= tol or iterations >= maxit:
            break

        m = min(restart, maxit - iterations, d)
        V = np.zeros((m + 1, d))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta

        k = 0
        for j in range(m):
            w = A.matvec(V[j])
            # Modified Gram-Schmidt
            for i in range(j + 1):
                H[i, j] = V[i] @ w
                w = w - H[i, j] * V[i]
            hnext = np.linalg.norm(w)
            H[j + 1, j] = hnext

            for i in range(j):
                hij = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = hij
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                k = j
                break
            cs[j] = H[j, j] / denom
            sn[j] = H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]

            iterations += 1
            k = j + 1
            if abs(g[j + 1]) / bnorm <= tol or hnext == 0.0:
                break
            V[j + 1] = w / hnext

        if k == 0:
            break
        y = scla.solve_triangular(H[:k, :k], g[:k], lower=False, check_finite=False)
        x = x + V[:k].T @ y

    return best_x, iterations, best_res


def gmres(
    A,
    B: np.ndarray,
    tol: float = Config.KRYLOV_TOL,
    maxit: int = Config.KRYLOV_MAXIT,
    restart: int = Config.KRYLOV_RESTART,
    X0: Optional[np.ndarray] = None,
    raise_on_failure: bool = True,
) -> Tuple[np.ndarray, int]:
    """
    Restarted GMRES, one column of B at a time.

    Args:
        A: Square operator (anything scipy's ``aslinearoperator`` accepts)
        B: Right-hand sides, vector or d x m
        tol: Relative residual target per column
        maxit: Maximum Arnoldi iterations per column
        restart: Krylov subspace size between restarts
        X0: Optional initial guess of B's shape
        raise_on_failure: Raise when a column misses ``tol``; otherwise return the best iterate

    Returns:
        (X, total iterations over all columns)

    Raises:
        KrylovConvergenceError: carries the best residual and best iterate
    """
    op = aslinearoperator(A)
    B = np.asarray(B, dtype=np.float64)
    _check_rows(op.shape[0], B)
    vector = B.ndim == 1
    B2 = B.reshape(-1, 1) if vector else B
    X0_2 = None if X0 is None else np.asarray(X0, dtype=np.float64).reshape(B2.shape)

    X = np.zeros_like(B2)
    total = 0
    for col in range(B2.shape[1]):
        x0 = None if X0_2 is None else X0_2[:, col]
        x, its, relres = _gmres_column(op, B2[:, col], x0, tol, maxit, restart)
        X[:, col] = x
        total += its
        if relres > tol:
            default_logger.debug(f"GMRES column {col}: residual {relres:.3e} after {its} iterations")
            if raise_on_failure:
                raise KrylovConvergenceError(relres, total, column=col,
                                             solution=X.ravel() if vector else X)
    return (X.ravel() if vector else X), total


def gmres_solve(op, B: np.ndarray, cfg: SolverConfig) -> Tuple[np.ndarray, int]:
    """GMRES on a shifted operator with the tolerances of ``cfg``."""
    return gmres(op, B, tol=cfg.krylov_tol, maxit=cfg.krylov_maxit, restart=cfg.restart)


class LinearSolver:
    """
    Solves (I - alpha*J) X = B or (I - alpha*J^T) X = B for the integrator and adjoint.

    Direct mode goes through a FactorizationCache; Krylov mode runs GMRES on a
    ShiftedOperator. alpha == 0 is an assignment and touches neither.
    """

    def __init__(self, J: ImplicitOperator, cfg: Optional[SolverConfig] = None,
                 counter: Optional["NfeCounter"] = None):
        self.J = J
        self.cfg = cfg or SolverConfig()
        self.counter = counter
        self.cache = FactorizationCache(J)
        self.solves = 0

    def solve(self, alpha: float, B: np.ndarray, transposed: bool = False,
              counter: Optional["NfeCounter"] = None) -> np.ndarray:
        """Solve the shifted system for every column of B; ``counter`` overrides the bound one."""
        B = np.asarray(B, dtype=np.float64)
        _check_rows(self.J.dim, B)
        if alpha == 0.0:
            return B.copy()

        counter = counter if counter is not None else self.counter
        self.solves += 1
        if self.cfg.kind == "direct":
            before = self.cache.factorizations
            f = self.cache.get(self.J.version, alpha, transposed)
            if counter is not None:
                counter.lu_factorizations += self.cache.factorizations - before
            return f.solve(B)

        op = ShiftedOperator(self.J, alpha, transposed=transposed)
        X, its = gmres_solve(op, B, self.cfg)
        if counter is not None:
            counter.krylov_iters += its
        return X
