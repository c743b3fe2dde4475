"""Ground-truth trajectories and the dataset file format.

Kuramoto-Sivashinsky data comes from a Fourier spectral ETDRK4 integrator
with 2/3-rule dealiasing, Burgers data from a fine-step IMEX-RK5 reference run
of the same semi-discrete system the models learn.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from ..utils.errors import DatasetFormatError, DimensionMismatchError, StateBlowUpError
from ..utils.logging import default_logger
from .fields import ConvectionField
from .integrator import NfeCounter, rollout
from .linalg import LinearSolver, SolverConfig
from .netcore import PartitionedODE, make_burgers_diffusion
from .tableaux import SchemeId

DATASET_MAGIC = b"SINODS01"
DATASET_VERSION = 1
_HEADER = struct.Struct("<IIQQddQ")


# --- FFT ---------------------------------------------------------------------

def _check_pow2(n: int) -> None:
    if n < 1 or n & (n - 1):
        raise DimensionMismatchError(f"FFT length must be a power of two, got {n}")


def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Radix-2 decimation-in-time DFT along the last axis (unnormalised)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    _check_pow2(n)
    lead = x.shape[:-1]
    a = x[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(*lead, n // size, size)
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * twiddle
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        a = blocks.reshape(*lead, n)
        size *= 2
    return a


def ifft(x: np.ndarray) -> np.ndarray:
    """Inverse of ``fft``: conj(fft(conj(x))) / n."""
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


# --- datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetHeader:
    version: int
    grid: int
    n_traj: int
    n_times: int
    length: float
    dt_sample: float
    n_train: int

    @property
    def payload_bytes(self) -> int:
        return 8 * self.n_traj * self.n_times * self.grid


@dataclass
class Dataset:
    """Snapshots of shape (n_traj, n_times, grid); the first n_train trajectories train."""

    grid: int
    length: float
    dt_sample: float
    data: np.ndarray
    n_train: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != self.grid:
            raise DimensionMismatchError(
                f"Dataset payload has shape {self.data.shape}, expected (n_traj, n_times, {self.grid})"
            )
        if not 0 <= self.n_train <= self.data.shape[0]:
            raise DimensionMismatchError(f"n_train={self.n_train} outside 0..{self.data.shape[0]}")

    @property
    def n_traj(self) -> int:
        return self.data.shape[0]

    @property
    def n_times(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_times) * self.dt_sample

    @property
    def splits(self) -> list:
        return ["train" if i < self.n_train else "test" for i in range(self.n_traj)]

    def split_data(self, split: str) -> np.ndarray:
        if split == "train":
            return self.data[:self.n_train]
        if split == "test":
            return self.data[self.n_train:]
        raise ValueError(f"Unknown split '{split}'")

    def header(self) -> DatasetHeader:
        return DatasetHeader(DATASET_VERSION, self.grid, self.n_traj, self.n_times,
                             self.length, self.dt_sample, self.n_train)


def write_dataset(path: str, dataset: Dataset) -> None:
    """Write the ``SINODS01`` format: magic, little-endian header, f64 payload [traj][time][space]."""
    if not np.all(np.isfinite(dataset.data)):
        raise DatasetFormatError("Refusing to write a dataset with non-finite values")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    h = dataset.header()
    with out.open("wb") as handle:
        handle.write(DATASET_MAGIC)
        handle.write(_HEADER.pack(h.version, h.grid, h.n_traj, h.n_times, h.length, h.dt_sample, h.n_train))
        handle.write(dataset.data.astype("<f8").tobytes())
    default_logger.debug(f"Wrote dataset {out}: {h.n_traj} x {h.n_times} x {h.grid}")


def read_dataset_header(path: str) -> DatasetHeader:
    """Metadata of a dataset file without reading the payload."""
    with open(path, "rb") as handle:
        head = handle.read(len(DATASET_MAGIC) + _HEADER.size)
    if head[:8] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {head[:8]!r}, expected {DATASET_MAGIC!r}")
    if len(head) < 8 + _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    header = DatasetHeader(*_HEADER.unpack_from(head, 8))
    if header.version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {header.version}")
    return header


def read_dataset(path: str) -> Dataset:
    header = read_dataset_header(path)
    offset = 8 + _HEADER.size
    blob = Path(path).read_bytes()
    if len(blob) - offset < header.payload_bytes:
        raise DatasetFormatError(
            f"{path}: truncated payload ({len(blob) - offset} of {header.payload_bytes} bytes)"
        )
    if len(blob) - offset > header.payload_bytes:
        raise DatasetFormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64)
    return Dataset(
        grid=header.grid,
        length=header.length,
        dt_sample=header.dt_sample,
        data=data.reshape(header.n_traj, header.n_times, header.grid),
        n_train=header.n_train,
    )


# --- Kuramoto-Sivashinsky ----------------------------------------------------

def ks_grid(d: int, L: float) -> np.ndarray:
    return np.arange(d) * (L / d)


def ks_initial_condition(d: int, L: float = 22.0) -> np.ndarray:
    """u(x, 0) = cos(x/L) (1 + sin(x/L)) on x_j = j L / d."""
    x = ks_grid(d, L)
    return np.cos(x / L) * (1.0 + np.sin(x / L))


class KSSpectralSolver:
    """
    ETDRK4 for u_t = -u u_x - u_xx - u_xxxx on a periodic domain of length L.

    The phi-function coefficients are real parts of contour-integral means over
    32 points on the upper half of a unit circle around each h*lambda_k, which
    stays accurate when h*lambda_k is near zero.
    """

    n_contour = 32

    def __init__(self, d: int, L: float = 22.0, h: float = 0.05):
        _check_pow2(d)
        self.d, self.L, self.h = d, L, h
        q = np.concatenate([np.arange(0, d // 2), [-d // 2], np.arange(-d // 2 + 1, 0)]).astype(np.float64)
        self.dealias = np.abs(q) < d / 3.0
        q[d // 2] = 0.0
        self.k = 2.0 * np.pi / L * q
        lin = self.k ** 2 - self.k ** 4

        self.E = np.exp(h * lin)
        self.E2 = np.exp(h * lin / 2.0)
        roots = np.exp(1j * np.pi * (np.arange(1, self.n_contour + 1) - 0.5) / self.n_contour)
        LR = h * lin[:, None] + roots[None, :]
        eLR = np.exp(LR)
        self.Q = h * np.real(np.mean((np.exp(LR / 2.0) - 1.0) / LR, axis=1))
        self.f1 = h * np.real(np.mean((-4.0 - LR + eLR * (4.0 - 3.0 * LR + LR ** 2)) / LR ** 3, axis=1))
        self.f2 = h * np.real(np.mean((2.0 + LR + eLR * (-2.0 + LR)) / LR ** 3, axis=1))
        self.f3 = h * np.real(np.mean((-4.0 - 3.0 * LR - LR ** 2 + eLR * (4.0 - LR)) / LR ** 3, axis=1))
        self.g = -0.5j * self.k * self.dealias
        self.mirror = (-np.arange(d)) % d

    def nonlinear(self, v: np.ndarray) -> np.ndarray:
        u = np.real(ifft(v))
        return self.g * fft(u * u)

    def hermitian(self, v: np.ndarray) -> np.ndarray:
        """Spectrum of the real part of ifft(v), i.e. v[k] = conj(v[-k])."""
        return 0.5 * (v + np.conj(v[self.mirror]))

    def step(self, v: np.ndarray) -> np.ndarray:
        """One ETDRK4 step; the result is projected back onto real signals."""
        Nv = self.nonlinear(v)
        a = self.E2 * v + self.Q * Nv
        Na = self.nonlinear(a)
        b = self.E2 * v + self.Q * Na
        Nb = self.nonlinear(b)
        c = self.E2 * a + self.Q * (2.0 * Nb - Nv)
        Nc = self.nonlinear(c)
        return self.hermitian(self.E * v + Nv * self.f1 + 2.0 * (Na + Nb) * self.f2 + Nc * self.f3)

    def run(self, u0: np.ndarray, n_steps: int, every: int = 1) -> np.ndarray:
        """Snapshots (n_steps // every + 1, d) starting with the dealiased u0."""
        v = self.hermitian(fft(np.asarray(u0, dtype=np.float64)) * self.dealias)
        snapshots = [np.real(ifft(v))]
        for n in range(n_steps):
            v = self.step(v)
            if not np.all(np.isfinite(v)):
                default_logger.error(f"KS spectral state became non-finite at step {n}")
                raise StateBlowUpError(n)
            if (n + 1) % every == 0:
                snapshots.append(np.real(ifft(v)))
        return np.stack(snapshots)


def generate_ks(
    d: int = 64,
    L: float = 22.0,
    seed: int = 0,
    h: float = 0.05,
    transient: float = 1000.0,
    span: float = 200.0,
    sample_interval: float = 0.2,
) -> Dataset:
    """
    Single post-transient KS trajectory.

    The initial condition is deterministic, so ``seed`` only enters the run
    provenance. States on [0, transient] are discarded, then one snapshot is
    kept every ``sample_interval`` over ``span``.
    """
    per_sample = int(round(sample_interval / h))
    if per_sample < 1 or abs(per_sample * h - sample_interval) > 1e-12:
        raise ValueError(f"Sampling interval {sample_interval} is not a multiple of h={h}")
    solver = KSSpectralSolver(d, L, h)
    n_transient = int(round(transient / h))
    n_samples = int(round(span / sample_interval))

    default_logger.info(f"KS d={d} L={L}: {n_transient} transient steps, {n_samples} samples (seed {seed})")
    start = solver.run(ks_initial_condition(d, L), n_transient, every=max(n_transient, 1))[-1]
    snapshots = solver.run(start, n_samples * per_sample, every=per_sample)
    return Dataset(grid=d, length=L, dt_sample=sample_interval, data=snapshots[None], n_train=1)


# --- Burgers -----------------------------------------------------------------

def burgers_initial_conditions(
    d: int,
    n_traj: int,
    seed: int,
    L: float = 1.0,
    modes: int = 4,
    peak: float = 0.5,
) -> np.ndarray:
    """
    Random smooth periodic states sum_k a_k sin(2 pi k x / L + phi_k), shape (n_traj, d).

    a_k ~ N(0, (1/k)^2) and phi_k ~ U[0, 2 pi), each trajectory from its own
    child of the master SeedSequence. Every state is then rescaled so that
    max |u0| = peak; at the default viscosity and d >= 512 this keeps the
    cell Reynolds number max|u| dx / nu below 2.
    """
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    x = np.arange(d) * (L / d)
    out = np.zeros((n_traj, d))
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_traj)):
        rng = np.random.Generator(np.random.Philox(child))
        for k in range(1, modes + 1):
            amp = rng.normal(0.0, 1.0 / k)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            out[i] += amp * np.sin(2.0 * np.pi * k * x / L + phase)
        top = np.max(np.abs(out[i]))
        if top > 0.0:
            out[i] *= peak / top
    return out


def burgers_reference_ode(d: int, L: float = 1.0, nu: float = 8e-4) -> PartitionedODE:
    """Semi-discrete viscous Burgers: centered convection plus periodic diffusion."""
    return PartitionedODE(g=ConvectionField(d, L), j=make_burgers_diffusion(d, L, nu))


def generate_burgers(
    d: int = 512,
    L: float = 1.0,
    nu: float = 8e-4,
    n_traj: int = 100,
    seed: int = 0,
    n_train: Optional[int] = None,
    t_final: float = 5.0,
    sample_interval: float = 0.1,
    internal_dt: float = 1e-3,
    initial: Optional[np.ndarray] = None,
) -> Dataset:
    """
    Burgers trajectories from the IMEX-RK5 reference integration.

    All trajectories advance together as the columns of one block. By default
    the first 80% of trajectories are tagged train.

    Args:
        initial: Optional (n_traj, d) initial states replacing the random ones
    """
    per_sample = int(round(sample_interval / internal_dt))
    n_samples = int(round(t_final / sample_interval))
    if per_sample < 1 or abs(per_sample * internal_dt - sample_interval) > 1e-12:
        raise ValueError(f"Sampling interval {sample_interval} is not a multiple of dt={internal_dt}")

    u0 = burgers_initial_conditions(d, n_traj, seed, L) if initial is None else np.asarray(initial, float)
    if u0.shape != (n_traj, d):
        raise DimensionMismatchError(f"Initial states have shape {u0.shape}, expected ({n_traj}, {d})")
    if n_train is None:
        n_train = (4 * n_traj) // 5 if n_traj > 1 else n_traj

    ode = burgers_reference_ode(d, L, nu)
    ctr = NfeCounter()
    solver = LinearSolver(ode.j, SolverConfig(kind="direct"), ctr)
    default_logger.info(f"Burgers d={d} nu={nu:g}: {n_traj} trajectories, {n_samples * per_sample} steps")
    snapshots = rollout(ode, SchemeId.IMEX_RK5, u0.T, internal_dt, n_samples * per_sample,
                        every=per_sample, solver=solver, ctr=ctr)
    default_logger.debug(f"Burgers reference: {ctr.forward_g_evals} G evaluations, {ctr.lu_factorizations} LU")
    data = np.transpose(snapshots, (2, 0, 1))
    return Dataset(grid=d, length=L, dt_sample=sample_interval, data=data, n_train=n_train)


def bounds(dataset: Dataset) -> Tuple[float, float]:
    return float(dataset.data.min()), float(dataset.data.max())


def synthetic_dataset(
    d: int,
    L: float,
    dt_sample: float,
    n_pairs: int,
    seed: int = 0,
    amplitude: float = 0.1,
) -> Dataset:
    """
    One trajectory of independent smooth random states, for work-count benchmarks.

    The snapshots are not a solution of anything; only the number of training
    pairs matters to the counters.
    """
    if n_pairs < 1:
        raise ValueError(f"Need at least one pair, got {n_pairs}")
    states = burgers_initial_conditions(d, n_pairs + 1, seed, L, peak=amplitude)
    return Dataset(grid=d, length=L, dt_sample=dt_sample, data=states[None], n_train=1)
