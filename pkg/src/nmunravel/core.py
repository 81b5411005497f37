"""Dense complex linear algebra primitives for small Hilbert spaces.

Provides the uniform time grid with trapezoid quadrature, Hermitian system
operators and their interaction-picture transport, the four elementary
superoperator actions (left/right multiplication, anticommutator,
commutator), and complete-positivity / trace-preservation diagnostics via
the Choi matrix.

Everything here is a pure function of immutable inputs; target dimensions
are small (d <= 64), so storage is dense throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from ._accel import expm_small

HERMITICITY_TOL = 1e-12


class DimensionMismatchError(ValueError):
    """Operands act on different Hilbert-space dimensions."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [0, t_max] with n_steps slices.

    Nodes are tau_i = i * dt for i = 0..n_steps.  Single integrals over
    [0, t_max] use trapezoid weights (dt/2 at the endpoints); causal double
    integrals use, for each outer node i, trapezoid weights on [0, tau_i],
    which realizes the half weight of coincident-time (theta(0) = 1/2)
    contributions at the running upper limit.
    """

    t_max: float
    n_steps: int

    def __post_init__(self):
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.t_max / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_nodes) * self.dt

    def trap_weights(self) -> np.ndarray:
        """Trapezoid weights on [0, t_max] over all nodes."""
        w = np.full(self.n_nodes, self.dt)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def causal_weights(self, i: int) -> np.ndarray:
        """Trapezoid weights on [0, tau_i] over nodes 0..i (zero beyond).

        For i = 0 the interval has zero length and all weights vanish.
        """
        w = np.zeros(self.n_nodes)
        if i > 0:
            w[: i + 1] = self.dt
            w[0] = 0.5 * self.dt
            w[i] = 0.5 * self.dt
        return w

    def causal_weight_matrix(self) -> np.ndarray:
        """Stack of causal_weights(i) for every node i, shape (n_nodes, n_nodes)."""
        return np.stack([self.causal_weights(i) for i in range(self.n_nodes)])

    def segment_weights(self, lo: int, hi: int) -> np.ndarray:
        """Trapezoid weights on [tau_lo, tau_hi] over all nodes (zero outside)."""
        w = np.zeros(self.n_nodes)
        if hi > lo:
            w[lo : hi + 1] = self.dt
            w[lo] = 0.5 * self.dt
            w[hi] = 0.5 * self.dt
        return w

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t_max, self.n_steps * factor)


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class HermitianOperator:
    """A Hermitian d x d matrix, symmetrized at construction.

    Asymmetry beyond HERMITICITY_TOL triggers a warning (quadrature noise
    accumulates in long pipelines; silent symmetrization of grossly
    non-Hermitian input would hide bugs).
    """

    matrix: np.ndarray

    def __init__(self, matrix):
        m = _as_matrix(matrix)
        asym = np.max(np.abs(m - m.conj().T))
        if asym > HERMITICITY_TOL:
            warnings.warn(
                f"operator symmetrized; Hermiticity defect {asym:.3e} exceeds "
                f"{HERMITICITY_TOL:.0e}",
                stacklevel=2,
            )
        m = 0.5 * (m + m.conj().T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


class OperatorFamily:
    """Free Hamiltonian plus labelled Hermitian coupling operators.

    Interaction-picture transport f(t) = exp(iH0 t) f exp(-iH0 t) is done
    through the cached eigendecomposition of H0, so each evaluation is exact
    up to the eigensolve.
    """

    def __init__(self, h0: HermitianOperator, ops: dict[str, HermitianOperator]):
        if not ops:
            raise ValueError("need at least one coupling operator")
        self.h0 = h0
        dims = {op.dim for op in ops.values()} | {h0.dim}
        if len(dims) != 1:
            raise DimensionMismatchError(f"inconsistent operator dimensions: {dims}")
        self.ops = dict(ops)
        self.labels = tuple(ops.keys())
        self.dim = h0.dim
        self._evals, self._evecs = np.linalg.eigh(h0.matrix)
        self._grid_cache: dict[tuple, np.ndarray] = {}

    def scaled(self, factor: float) -> "OperatorFamily":
        """Same family with every coupling operator multiplied by `factor`."""
        return OperatorFamily(
            self.h0,
            {lbl: HermitianOperator(factor * op.matrix) for lbl, op in self.ops.items()},
        )

    def interaction_matrix(self, label: str, t: float) -> np.ndarray:
        if label not in self.ops:
            raise KeyError(f"unknown operator label {label!r}")
        if t < 0:
            raise ValueError("t must be non-negative")
        phase = np.exp(1j * self._evals * t)
        u = self._evecs * phase  # columns scaled: U(t) = V e^{i lambda t} V^dag
        ut = u @ self._evecs.conj().T
        return ut @ self.ops[label].matrix @ ut.conj().T

    def ops_on_grid(self, grid: TimeGrid) -> np.ndarray:
        """Interaction-picture operators at every node: (n_nodes, L, d, d)."""
        key = (grid.t_max, grid.n_steps)
        cached = self._grid_cache.get(key)
        if cached is not None:
            return cached
        out = np.empty((grid.n_nodes, len(self.labels), self.dim, self.dim), dtype=np.complex128)
        for i, t in enumerate(grid.nodes):
            for a, lbl in enumerate(self.labels):
                out[i, a] = self.interaction_matrix(lbl, t)
        out.setflags(write=False)
        self._grid_cache[key] = out
        return out


def interaction_op(family: OperatorFamily, label: str, t: float) -> HermitianOperator:
    """Interaction-picture coupling operator exp(iH0 t) f exp(-iH0 t)."""
    return HermitianOperator(family.interaction_matrix(label, t))


class SuperoperatorTag(Enum):
    LEFT = "left"      # f rho
    RIGHT = "right"    # rho f
    PLUS = "plus"      # f rho + rho f
    MINUS = "minus"    # f rho - rho f


def apply_superop(tag: SuperoperatorTag, f: np.ndarray, rho: np.ndarray) -> np.ndarray:
    f = _as_matrix(f)
    rho = _as_matrix(rho)
    if f.shape != rho.shape:
        raise DimensionMismatchError(f"operator {f.shape} vs state {rho.shape}")
    if tag is SuperoperatorTag.LEFT:
        return f @ rho
    if tag is SuperoperatorTag.RIGHT:
        return rho @ f
    if tag is SuperoperatorTag.PLUS:
        return f @ rho + rho @ f
    return f @ rho - rho @ f


def superop_matrix(tag: SuperoperatorTag, f: np.ndarray) -> np.ndarray:
    """The d^2 x d^2 matrix of the tagged action on row-major vec(rho)."""
    f = _as_matrix(f)
    d = f.shape[0]
    eye = np.eye(d)
    left = np.kron(f, eye)
    right = np.kron(eye, f.T)
    if tag is SuperoperatorTag.LEFT:
        return left
    if tag is SuperoperatorTag.RIGHT:
        return right
    if tag is SuperoperatorTag.PLUS:
        return left + right
    return left - right


def vec(rho: np.ndarray) -> np.ndarray:
    """Row-major vectorization matching `superop_matrix`."""
    return np.asarray(rho, dtype=np.complex128).reshape(-1)


def unvec(v: np.ndarray, d: int | None = None) -> np.ndarray:
    v = np.asarray(v)
    if d is None:
        d = int(round(np.sqrt(v.size)))
    return v.reshape(d, d)


def matrix_unit(d: int, i: int, j: int) -> np.ndarray:
    e = np.zeros((d, d), dtype=np.complex128)
    e[i, j] = 1.0
    return e


@dataclass(frozen=True)
class ChoiMatrix:
    """Choi matrix C = sum_ij |i><j| (x) map(|i><j|) of a linear map."""

    matrix: np.ndarray
    dim: int

    def min_eigenvalue(self) -> float:
        h = 0.5 * (self.matrix + self.matrix.conj().T)
        return float(np.linalg.eigvalsh(h)[0])

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T)))


MapFn = Callable[[np.ndarray], np.ndarray]


def choi_of(map_fn: MapFn, d: int) -> ChoiMatrix:
    c = np.zeros((d * d, d * d), dtype=np.complex128)
    for i in range(d):
        for j in range(d):
            block = np.asarray(map_fn(matrix_unit(d, i, j)), dtype=np.complex128)
            c[i * d : (i + 1) * d, j * d : (j + 1) * d] = block
    return ChoiMatrix(c, d)


@dataclass(frozen=True)
class CPTPReport:
    min_eig: float
    max_trace_deviation: float
    tol: float

    @property
    def completely_positive(self) -> bool:
        return self.min_eig >= -self.tol

    @property
    def trace_preserving(self) -> bool:
        return self.max_trace_deviation <= self.tol

    @property
    def passed(self) -> bool:
        return self.completely_positive and self.trace_preserving


def cptp_report(choi: ChoiMatrix, map_fn: MapFn, tol: float = 1e-10) -> CPTPReport:
    d = choi.dim
    dev = 0.0
    for i in range(d):
        for j in range(d):
            tr = np.trace(map_fn(matrix_unit(d, i, j)))
            dev = max(dev, abs(tr - (1.0 if i == j else 0.0)))
    return CPTPReport(choi.min_eigenvalue(), float(dev), tol)


def superop_to_map(mat: np.ndarray) -> MapFn:
    d = int(round(np.sqrt(mat.shape[0])))

    def apply(rho: np.ndarray) -> np.ndarray:
        return unvec(mat @ vec(rho), d)

    return apply


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential used throughout (backend-stable algorithm)."""
    return expm_small(a)


def dag(a: np.ndarray) -> np.ndarray:
    return a.conj().T


def max_abs(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def random_density_matrix(d: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    rho = g @ g.conj().T
    return rho / np.trace(rho)


def random_hermitian(d: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return 0.5 * (g + g.conj().T)


# Pauli matrices, handy in tests and scenario builders.
SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.complex128)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=np.complex128)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=np.complex128)


def boson_ops(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Truncated annihilation / creation operators on a Fock space."""
    a = np.diag(np.sqrt(np.arange(1, dim, dtype=np.float64)), k=1).astype(np.complex128)
    return a, a.conj().T
