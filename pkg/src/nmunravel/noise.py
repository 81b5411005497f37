"""Synthesis of complex colored Gaussian process ensembles on a time grid.

A noise model is specified by per-label mean functions and two families of
two-time kernels: the covariance A(t,s) = <phi*(t) phi(s)> - mu* mu and the
pseudo-covariance S(t,s) = <phi(t) phi(s)> - mu mu.  Sampling goes through
the real embedding of (Re phi, Im phi), factorized once by Hermitian
eigendecomposition with small negative eigenvalues clipped (tabulated
kernels are often borderline positive after discretization; a Cholesky
factor would fail there).

Streams are counter-based: path `index` under `master_seed` is drawn from
``Philox(key=(master_seed, index))``, so sampling is a pure function of
(model, master_seed, index), independent across indices, and reproducible
bit-for-bit regardless of batching or evaluation order.

The module also provides the drift kernel of the trace-preserving
unravelling and a small polynomial-of-Gaussian family (centered squares of
a real process) whose third and fourth cumulants are known in closed form,
used to exercise the non-Gaussian checks.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import TimeGrid

CLIP_TOL = 1e-10


class NonPositiveCovariance(ValueError):
    """The requested kernels do not define a valid (PSD) Gaussian law."""


# ---------------------------------------------------------------------------
# Kernel specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WhiteKernel:
    """Delta-correlated kernel; on the grid, amplitude/dt on the diagonal."""

    amplitude: float

    def evaluate(self, grid: TimeGrid) -> np.ndarray:
        return (self.amplitude / grid.dt) * np.eye(grid.n_nodes)


@dataclass(frozen=True)
class ExponentialKernel:
    """Ornstein-Uhlenbeck kernel amplitude * exp(-|t-s|/correlation_time)."""

    amplitude: float
    correlation_time: float

    def evaluate(self, grid: TimeGrid) -> np.ndarray:
        t = grid.nodes
        return self.amplitude * np.exp(-np.abs(t[:, None] - t[None, :]) / self.correlation_time)


@dataclass(frozen=True)
class TabulatedKernel:
    """Kernel given directly as a node-by-node matrix."""

    values: np.ndarray

    def evaluate(self, grid: TimeGrid) -> np.ndarray:
        v = np.asarray(self.values, dtype=np.complex128)
        if v.shape != (grid.n_nodes, grid.n_nodes):
            raise ValueError(
                f"tabulated kernel shape {v.shape} does not match grid ({grid.n_nodes} nodes)"
            )
        return v


@dataclass(frozen=True)
class ZeroKernel:
    def evaluate(self, grid: TimeGrid) -> np.ndarray:
        return np.zeros((grid.n_nodes, grid.n_nodes))


Kernel = WhiteKernel | ExponentialKernel | TabulatedKernel | ZeroKernel


def read_kernel_csv(path) -> dict[tuple[str, str], np.ndarray]:
    """Read tabulated kernels from CSV columns (i, j, alpha, beta, Re, Im).

    Rows are expected row-major over node indices; one matrix per (alpha,
    beta) pair is returned.
    """
    blocks: dict[tuple[str, str], dict[tuple[int, int], complex]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip().lower() for h in header[:6]] != ["i", "j", "alpha", "beta", "re", "im"]:
            raise ValueError(f"unexpected kernel CSV header: {header}")
        for row in reader:
            i, j = int(row[0]), int(row[1])
            key = (row[2], row[3])
            blocks.setdefault(key, {})[(i, j)] = float(row[4]) + 1j * float(row[5])
    out = {}
    for key, entries in blocks.items():
        n = 1 + max(max(i, j) for i, j in entries)
        m = np.zeros((n, n), dtype=np.complex128)
        for (i, j), v in entries.items():
            m[i, j] = v
        out[key] = m
    return out


def write_kernel_csv(path, blocks: Mapping[tuple[str, str], np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "alpha", "beta", "Re", "Im"])
        for (alpha, beta), m in blocks.items():
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    v = complex(m[i, j])
                    writer.writerow([i, j, alpha, beta, repr(float(v.real)), repr(float(v.imag))])


# ---------------------------------------------------------------------------
# Noise model
# ---------------------------------------------------------------------------


def _mean_array(mean, grid: TimeGrid) -> np.ndarray:
    if mean is None:
        return np.zeros(grid.n_nodes, dtype=np.complex128)
    if callable(mean):
        return np.asarray([mean(t) for t in grid.nodes], dtype=np.complex128)
    arr = np.asarray(mean, dtype=np.complex128)
    if arr.ndim == 0:
        return np.full(grid.n_nodes, complex(arr), dtype=np.complex128)
    if arr.shape != (grid.n_nodes,):
        raise ValueError("mean array does not match the grid")
    return arr


class NoiseModel:
    """Means and second cumulants of a set of complex processes on a grid.

    ``a_mat`` and ``s_mat`` are flattened over the (label, node) index
    p = label_index * n_nodes + node_index.  A must be Hermitian positive
    semidefinite and S symmetric; jointly they must embed into a PSD real
    covariance of (Re phi, Im phi), checked at factorization time.
    """

    def __init__(self, labels: Sequence[str], grid: TimeGrid, mean: np.ndarray,
                 a_mat: np.ndarray, s_mat: np.ndarray):
        self.labels = tuple(labels)
        self.grid = grid
        self.mean = np.asarray(mean, dtype=np.complex128)
        n = grid.n_nodes
        m = len(self.labels) * n
        self.a_mat = np.asarray(a_mat, dtype=np.complex128)
        self.s_mat = np.asarray(s_mat, dtype=np.complex128)
        if self.mean.shape != (len(self.labels), n):
            raise ValueError("mean has wrong shape")
        if self.a_mat.shape != (m, m) or self.s_mat.shape != (m, m):
            raise ValueError("kernel matrices have wrong shape")
        if np.max(np.abs(self.a_mat - self.a_mat.conj().T)) > 1e-10:
            raise ValueError("covariance A must be Hermitian")
        if np.max(np.abs(self.s_mat - self.s_mat.T)) > 1e-10:
            raise ValueError("pseudo-covariance S must be symmetric")
        self._factor: np.ndarray | None = None

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    @property
    def is_real(self) -> bool:
        """Structurally real process: A == S entrywise and real mean."""
        return (
            np.array_equal(self.a_mat, self.s_mat)
            and np.all(self.a_mat.imag == 0)
            and np.all(self.mean.imag == 0)
        )

    def block(self, which: str, alpha: str, beta: str) -> np.ndarray:
        """(n_nodes, n_nodes) block of A or S for a label pair."""
        mat = self.a_mat if which == "a" else self.s_mat
        ia, ib = self.labels.index(alpha), self.labels.index(beta)
        n = self.n_nodes
        return mat[ia * n : (ia + 1) * n, ib * n : (ib + 1) * n]

    def real_embedding(self) -> np.ndarray:
        """Covariance of (Re phi, Im phi) stacked over (label, node)."""
        s, a = self.s_mat, self.a_mat
        cxx = 0.5 * (s + a).real
        cyy = 0.5 * (a - s).real
        cxy = 0.5 * (s + a).imag
        cyx = 0.5 * (s - a).imag
        big = np.block([[cxx, cxy], [cyx, cyy]])
        asym = np.max(np.abs(big - big.T))
        if asym > 1e-10:
            raise NonPositiveCovariance(
                f"real embedding is not symmetric (defect {asym:.2e}); "
                "check the kernel specification"
            )
        return 0.5 * (big + big.T)

    def factorize(self) -> np.ndarray:
        """Eigenfactor L with L L^T = real embedding, negative tail clipped."""
        if self._factor is not None:
            return self._factor
        if self.is_real:
            cov = self.a_mat.real
        else:
            cov = self.real_embedding()
        evals, evecs = np.linalg.eigh(cov)
        scale = max(1.0, float(evals[-1])) if evals.size else 1.0
        if evals[0] < -CLIP_TOL * scale:
            raise NonPositiveCovariance(
                f"most negative eigenvalue {evals[0]:.3e} below clip tolerance; "
                "the kernel choice is unphysical"
            )
        self._factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
        return self._factor


def build_noise(
    labels: Sequence[str],
    grid: TimeGrid,
    a_kernels: Mapping[tuple[str, str], Kernel],
    s_kernels: Mapping[tuple[str, str], Kernel] | str = "same",
    means: Mapping[str, complex | Callable[[float], complex] | np.ndarray] | None = None,
) -> NoiseModel:
    """Assemble a NoiseModel from per-pair kernel specifications.

    `a_kernels` maps label pairs to kernels for A; missing pairs are zero
    and Hermitian completion fills (beta, alpha) from (alpha, beta).
    `s_kernels` follows the same layout for S, or the shorthand strings
    "same" (real noise, S = A) and "zero" (circular noise).
    """
    labels = tuple(labels)
    n = grid.n_nodes
    m = len(labels) * n

    def assemble(kernels: Mapping[tuple[str, str], Kernel], hermitian: bool) -> np.ndarray:
        out = np.zeros((m, m), dtype=np.complex128)
        for (la, lb), ker in kernels.items():
            ia, ib = labels.index(la), labels.index(lb)
            blockval = ker.evaluate(grid).astype(np.complex128)
            out[ia * n : (ia + 1) * n, ib * n : (ib + 1) * n] = blockval
            if ia != ib:
                other = blockval.conj().T if hermitian else blockval.T
                out[ib * n : (ib + 1) * n, ia * n : (ia + 1) * n] = other
        return out

    a_mat = assemble(a_kernels, hermitian=True)
    if isinstance(s_kernels, str):
        if s_kernels == "same":
            s_mat = a_mat.copy()
        elif s_kernels == "zero":
            s_mat = np.zeros_like(a_mat)
        else:
            raise ValueError(f"unknown s_kernels shorthand {s_kernels!r}")
    else:
        s_mat = assemble(s_kernels, hermitian=False)

    mean = np.stack([_mean_array((means or {}).get(lbl), grid) for lbl in labels])
    model = NoiseModel(labels, grid, mean, a_mat, s_mat)
    model.factorize()
    return model


def ou_model(
    grid: TimeGrid,
    amplitude: float,
    correlation_time: float,
    kind: str = "real",
    label: str = "0",
    mean: complex | Callable[[float], complex] | None = None,
) -> NoiseModel:
    """Single-label Ornstein-Uhlenbeck model, real (A = S) or circular (S = 0)."""
    ker = ExponentialKernel(amplitude, correlation_time)
    s: Mapping | str = "same" if kind == "real" else "zero"
    if kind not in ("real", "circular"):
        raise ValueError("kind must be 'real' or 'circular'")
    return build_noise([label], grid, {(label, label): ker}, s, {label: mean} if mean is not None else None)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoisePath:
    """One realization of the process family; (label, node) complex values."""

    values: np.ndarray
    labels: tuple[str, ...]
    master_seed: int
    index: int

    def __getitem__(self, label: str) -> np.ndarray:
        return self.values[self.labels.index(label)]


def _stream(master_seed: int, index: int) -> np.random.Generator:
    key = np.array([master_seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample(model: NoiseModel, master_seed: int, index: int) -> NoisePath:
    """Draw path `index` of the ensemble keyed by `master_seed`."""
    vals = sample_block(model, master_seed, [index])[0]
    return NoisePath(vals, model.labels, master_seed, index)


def sample_block(model: NoiseModel, master_seed: int, indices: Sequence[int]) -> np.ndarray:
    """Stack of paths (len(indices), n_labels, n_nodes), one stream each.

    Every index draws its normals from its own counter-based stream, so the
    result does not depend on how indices are grouped into blocks.
    """
    factor = model.factorize()
    nl, n = model.n_labels, model.n_nodes
    m = factor.shape[0]
    z = np.empty((len(indices), m))
    for k, idx in enumerate(indices):
        z[k] = _stream(master_seed, idx).standard_normal(m)
    v = z @ factor.T
    if model.is_real:
        vals = v.reshape(len(indices), nl, n).astype(np.complex128)
    else:
        vals = (v[:, : nl * n] + 1j * v[:, nl * n :]).reshape(len(indices), nl, n)
    return vals + model.mean[None, :, :]


# ---------------------------------------------------------------------------
# Empirical cumulants
# ---------------------------------------------------------------------------


def _batch_se(estimates: np.ndarray) -> np.ndarray:
    """Standard error of the mean of per-batch estimates along axis 0."""
    b = estimates.shape[0]
    dev = estimates - estimates.mean(axis=0)
    return np.sqrt((np.abs(dev) ** 2).sum(axis=0) / (b * (b - 1)))


@dataclass
class EmpiricalCumulants:
    """Estimates of cumulants of the sampled process with standard errors.

    Orders 1 and 2 are the standard unbiased estimators (sample mean and
    1/(n-1) centered second moments).  Orders 3 and 4 are plug-in central
    moment estimates on caller-supplied node tuples.  Standard errors come
    from disjoint-batch resampling.
    """

    labels: tuple[str, ...]
    n_paths: int
    mean: np.ndarray
    mean_se: np.ndarray
    a_hat: np.ndarray
    a_se: np.ndarray
    s_hat: np.ndarray
    s_se: np.ndarray
    third: dict | None = None
    fourth: dict | None = None


def empirical_cumulants(
    values: np.ndarray,
    labels: Sequence[str],
    max_order: int = 2,
    tuples3: Sequence[tuple] | None = None,
    tuples4: Sequence[tuple] | None = None,
    n_batches: int = 20,
) -> EmpiricalCumulants:
    """Estimate cumulants from an ensemble array (n_paths, n_labels, n_nodes).

    `tuples3` / `tuples4` list index tuples ((a1, i1), (a2, i2), ...) of
    (label index, node index) pairs at which the third and fourth joint
    cumulants of the plain (unconjugated) variables are estimated.
    """
    if not 1 <= max_order <= 4:
        raise ValueError("max_order must be between 1 and 4")
    n_paths = values.shape[0]
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    nl, nn = values.shape[1], values.shape[2]
    flat = values.reshape(n_paths, nl * nn)
    mu = flat.mean(axis=0)
    centered = flat - mu

    bounds = np.linspace(0, n_paths, n_batches + 1).astype(int)
    batches = [slice(bounds[k], bounds[k + 1]) for k in range(n_batches)]

    mean_batches = np.stack([flat[sl].mean(axis=0) for sl in batches])
    out = EmpiricalCumulants(
        labels=tuple(labels),
        n_paths=n_paths,
        mean=mu.reshape(nl, nn),
        mean_se=_batch_se(mean_batches).reshape(nl, nn),
        a_hat=np.zeros(0),
        a_se=np.zeros(0),
        s_hat=np.zeros(0),
        s_se=np.zeros(0),
    )
    if max_order >= 2:
        out.a_hat = centered.conj().T @ centered / (n_paths - 1)
        out.s_hat = centered.T @ centered / (n_paths - 1)
        a_b, s_b = [], []
        for sl in batches:
            c = flat[sl] - flat[sl].mean(axis=0)
            k = c.shape[0]
            a_b.append(c.conj().T @ c / (k - 1))
            s_b.append(c.T @ c / (k - 1))
        out.a_se = _batch_se(np.stack(a_b))
        out.s_se = _batch_se(np.stack(s_b))

    def central_products(tuples, order):
        cols = np.stack(
            [np.prod([centered[:, a * nn + i] for (a, i) in tup], axis=0) for tup in tuples],
            axis=1,
        )
        assert cols.shape == (n_paths, len(tuples)) and order in (3, 4)
        return cols

    if max_order >= 3 and tuples3:
        cols = central_products(tuples3, 3)
        est = cols.mean(axis=0)
        se = _batch_se(np.stack([cols[sl].mean(axis=0) for sl in batches]))
        out.third = {"tuples": list(tuples3), "values": est, "se": se}
    if max_order >= 4 and tuples4:
        cols = central_products(tuples4, 4)
        # subtract the three pair-pairings of centered second moments
        corr = []
        for tup in tuples4:
            idx = [a * nn + i for (a, i) in tup]
            c2 = lambda p, q: (centered[:, p] * centered[:, q]).mean()
            corr.append(
                c2(idx[0], idx[1]) * c2(idx[2], idx[3])
                + c2(idx[0], idx[2]) * c2(idx[1], idx[3])
                + c2(idx[0], idx[3]) * c2(idx[1], idx[2])
            )
        est = cols.mean(axis=0) - np.asarray(corr)
        se = _batch_se(np.stack([cols[sl].mean(axis=0) for sl in batches]))
        out.fourth = {"tuples": list(tuples4), "values": est, "se": se}
    return out


# ---------------------------------------------------------------------------
# Drift kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftKernel:
    """Causal memory kernel of the trace-preserving unravelling.

    ``values[a, b, i, j]`` is (A - S)(alpha_a t_i, beta_b t_j) for i >= j and
    zero above the diagonal.  This is the kernel that multiplies the operator
    pair in the propagator exponent: the drift compensates noise fluctuations
    accumulated from both sides of the conjugation pair, hence it is twice
    the half-difference kernel (1/2)(<phi* phi> - <phi phi>) theta, which is
    exposed as ``half`` for reporting.
    """

    values: np.ndarray
    labels: tuple[str, ...]

    @property
    def half(self) -> np.ndarray:
        return 0.5 * self.values

    @property
    def n_nodes(self) -> int:
        return self.values.shape[-1]

    def is_zero(self) -> bool:
        return not np.any(self.values)


def drift_kernel(model: NoiseModel) -> DriftKernel:
    nl, n = model.n_labels, model.n_nodes
    vals = np.zeros((nl, nl, n, n), dtype=np.complex128)
    tri = np.tril(np.ones((n, n)))
    for a in range(nl):
        for b in range(nl):
            la, lb = model.labels[a], model.labels[b]
            diff = model.block("a", la, lb) - model.block("s", la, lb)
            vals[a, b] = diff * tri
    return DriftKernel(vals, model.labels)


def zero_drift(labels: Sequence[str], grid: TimeGrid) -> DriftKernel:
    nl, n = len(labels), grid.n_nodes
    return DriftKernel(np.zeros((nl, nl, n, n), dtype=np.complex128), tuple(labels))


def kernel_from_matrix(values: np.ndarray, labels: Sequence[str]) -> DriftKernel:
    """Wrap a causal (L, L, N, N) array; entries above the diagonal are zeroed."""
    v = np.asarray(values, dtype=np.complex128).copy()
    n = v.shape[-1]
    v *= np.tril(np.ones((n, n)))
    return DriftKernel(v, tuple(labels))


# ---------------------------------------------------------------------------
# Polynomial-of-Gaussian family: centered squares of a real process
# ---------------------------------------------------------------------------


class SquaredGaussianFamily:
    """psi(t) = g(t)^2 - <g(t)^2> for a real Gaussian g with covariance c.

    All joint cumulants are known: the order-k cumulant is
    2^(k-1) * sum over directed Hamiltonian cycles of products of c along
    the cycle, which the checks of the higher-order machinery rely on.
    """

    def __init__(self, base: NoiseModel, label: str = "0"):
        if not base.is_real or base.n_labels != 1:
            raise ValueError("base model must be a single-label real Gaussian process")
        self.base = base
        self.label = label
        self.cov = base.a_mat.real  # (n, n) since single label

    def sample_block(self, master_seed: int, indices: Sequence[int]) -> np.ndarray:
        g = sample_block(self.base, master_seed, indices).real
        psi = g**2 - np.diag(self.cov)[None, None, :]
        return psi.astype(np.complex128)

    def cumulant(self, nodes: Sequence[int]) -> float:
        """Joint cumulant of psi at the given node indices (any order >= 1)."""
        k = len(nodes)
        if k == 1:
            return 0.0
        total = 0.0
        rest = list(nodes[1:])
        for perm in itertools.permutations(rest):
            cycle = [nodes[0], *perm, nodes[0]]
            prod = 1.0
            for u, v in zip(cycle[:-1], cycle[1:]):
                prod *= self.cov[u, v]
            total += prod
        return float(2 ** (k - 1) * total)

    def moment(self, nodes: Sequence[int]) -> float:
        """Raw moment <psi(t_1)...psi(t_k)> via the cumulant-partition sum."""
        from .cumulants import moments_from_cumulants

        return moments_from_cumulants(lambda sub: self.cumulant(sub), list(nodes))
