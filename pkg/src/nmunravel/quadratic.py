"""Quadratic-bosonic specialization: c-number contractions and the
time-local form of the unravelling.

When the free dynamics is quadratic, commutators of interaction-picture
couplings are scalars.  Resumming the contraction ladder turns the memory
drift into a single effective kernel, giving an evolution generator that is
local in time: bare noise, a kernel-dressed operator term, and a
contraction-filtered noise functional.

Conventions: the stored contraction is c[b, a, i, j] = scalar of
[f_b(t_i), f_a(t_j)] for t_i >= t_j (zero above the diagonal).  The
recursion and the generator consume it with the later time in the second
slot, i.e. through the swapped view; ties carry half weight like every
other causal kernel here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _accel
from .core import OperatorFamily, TimeGrid
from .gaussian import TrajectoryEnsemble, TrajectoryState, _finalize, _reduce_psis
from .noise import DriftKernel, NoiseModel, NoisePath, sample_block


class NotCNumber(ValueError):
    """Commutators of the family are not scalar: not quadratic-bosonic."""


class NonConvergent(RuntimeError):
    """The contraction-kernel series does not decay."""


@dataclass(frozen=True)
class ContractionKernel:
    """Scalar commutators c[b, a, i, j] = [f_b(t_i), f_a(t_j)], causal."""

    values: np.ndarray
    labels: tuple[str, ...]

    def is_zero(self) -> bool:
        return not np.any(self.values)


def wick_contractions(
    family: OperatorFamily,
    grid: TimeGrid,
    interior_margin: int = 2,
    tol: float = 1e-6,
) -> ContractionKernel:
    """Extract scalar commutators of the interaction-picture couplings.

    The scalar is read off the (0, 0) entry after verifying proportionality
    to the identity on the interior block (the top `interior_margin` levels
    are excluded: a hard Fock truncation corrupts them).
    """
    ops = family.ops_on_grid(grid)
    nl, nn, d = len(family.labels), grid.n_nodes, family.dim
    # the margin masks Fock-truncation damage; small spaces are not
    # truncations, so they are checked in full
    if d - interior_margin < 3:
        interior_margin = 0
    sl = slice(0, d - interior_margin)
    eye = np.eye(d - interior_margin)
    vals = np.zeros((nl, nl, nn, nn), dtype=np.complex128)
    worst = 0.0
    for b in range(nl):
        for a in range(nl):
            for i in range(nn):
                for j in range(i + 1):
                    comm = ops[i, b] @ ops[j, a] - ops[j, a] @ ops[i, b]
                    c = comm[0, 0]
                    dev = float(np.max(np.abs(comm[sl, sl] - c * eye)))
                    worst = max(worst, dev)
                    if dev > tol:
                        raise NotCNumber(
                            f"commutator [{family.labels[b]}(t{i}), "
                            f"{family.labels[a]}(t{j})] deviates from a scalar "
                            f"by {dev:.2e} on the interior block"
                        )
                    vals[b, a, i, j] = c
    return ContractionKernel(vals, family.labels)


@dataclass
class KernelSeries:
    """Orders of the resummed memory kernel and their partial sum."""

    orders: list[np.ndarray]
    total: np.ndarray
    sup_norms: list[float]
    converged: bool
    eps: float
    labels: tuple[str, ...]

    @property
    def n_orders(self) -> int:
        return len(self.orders)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["order", "i", "j", "alpha", "beta", "Re", "Im"])
            for n, arr in enumerate(self.orders, start=1):
                nl = arr.shape[0]
                for a in range(nl):
                    for b in range(nl):
                        for i in range(arr.shape[2]):
                            for j in range(arr.shape[3]):
                                v = arr[a, b, i, j]
                                if v != 0.0:
                                    w.writerow(
                                        [n, i, j, self.labels[a], self.labels[b],
                                         repr(float(v.real)), repr(float(v.imag))]
                                    )


def _causal_sup(arr: np.ndarray) -> float:
    """Largest modulus on the used sector (second time not later than first)."""
    nn = arr.shape[-1]
    tri = np.tril(np.ones((nn, nn)))
    return float(np.max(np.abs(arr * tri)))


def kernel_recursion(
    kernel: DriftKernel,
    contraction: ContractionKernel,
    grid: TimeGrid,
    n_max: int = 12,
    eps: float | None = None,
) -> KernelSeries:
    """Iterate K_n(t, tau) = double integral of K_{n-1} c Kbar up to decay.

    Kbar symmetrizes the drift kernel in its slots; integration runs over
    [0, t]^2 with trapezoid weights and coincidence half weights folded into
    the swapped contraction.  Stops when the causal sup norm falls below eps
    (default 1e-8 times the input's sup); three consecutive non-decreasing
    orders raise NonConvergent.
    """
    k1 = kernel.values.astype(np.complex128)
    nl, nn = k1.shape[0], k1.shape[-1]
    sup1 = _causal_sup(k1)
    if eps is None:
        eps = 1e-8 * max(sup1, 1e-300)
    kbar = k1 + k1.transpose(1, 0, 3, 2)
    # recursion slot order: contraction with the later time second
    cswap = np.ascontiguousarray(contraction.values.transpose(1, 0, 3, 2))
    half = np.ones((nn, nn))
    np.fill_diagonal(half, 0.5)
    cswap = cswap * half
    wmat = grid.causal_weight_matrix()

    orders = [k1]
    sups = [sup1]
    converged = sup1 <= eps
    rising = 0
    while not converged and len(orders) < n_max:
        nxt = _accel.kernel_recursion_step(
            np.ascontiguousarray(orders[-1]), cswap,
            np.ascontiguousarray(kbar), wmat, grid.n_steps
        )
        orders.append(nxt)
        sups.append(_causal_sup(nxt))
        if sups[-1] <= eps:
            converged = True
            break
        rising = rising + 1 if sups[-1] >= sups[-2] else 0
        if rising >= 3:
            raise NonConvergent(
                "kernel series stopped decaying: sup norms "
                + ", ".join(f"{s:.3e}" for s in sups)
            )
    total = np.sum(orders, axis=0)
    return KernelSeries(orders, total, sups, converged, eps, kernel.labels)


# ---------------------------------------------------------------------------
# Time-local evolution
# ---------------------------------------------------------------------------


@dataclass
class TimeLocalOperators:
    """Path-independent pieces of the time-local generator."""

    base_ops: np.ndarray   # (n_steps, d, d): -f K (-i f) term, no dt
    rker: np.ndarray       # (L, L, n_nodes, n_nodes) noise contraction filter
    weights: np.ndarray    # causal weight rows
    f_ops: np.ndarray      # (n_steps, L, d, d)


def timelocal_operators(
    series: KernelSeries,
    contraction: ContractionKernel,
    family: OperatorFamily,
    grid: TimeGrid,
) -> TimeLocalOperators:
    ops = family.ops_on_grid(grid)
    nl, d = len(family.labels), family.dim
    nn, ns = grid.n_nodes, grid.n_steps
    wmat = grid.causal_weight_matrix()
    ktot = series.total

    base = np.zeros((ns, d, d), dtype=np.complex128)
    for i in range(ns):
        acc = np.zeros((d, d), dtype=np.complex128)
        for a in range(nl):
            inner = np.zeros((d, d), dtype=np.complex128)
            for b in range(nl):
                coefs = wmat[i] * ktot[a, b, i]
                if np.any(coefs):
                    inner += np.tensordot(coefs, ops[:, b], axes=(0, 0))
            acc += ops[i, a] @ inner
        base[i] = -acc  # (-i) f * K * (-i) f = - f K f

    # noise filter: mem_a(i) = sum_{a1, j1} w(j1|i) R[a, a1, i, j1] phi_a1(j1)
    # with R[a, a1, i, j1] = sum_{b, j} w(j|i) K_ab(i, j) c~[a1, b, j1, j]
    half = np.ones((nn, nn))
    np.fill_diagonal(half, 0.5)
    chalf = contraction.values * half  # c~[a1, b, j1, j], causal in (j1, j)
    rker = np.zeros((nl, nl, nn, nn), dtype=np.complex128)
    for i in range(ns):
        kw = ktot[:, :, i, :] * wmat[i][None, None, :]  # (a, b, j)
        rker[:, :, i, :] = np.einsum("abj,cbmj->acm", kw, chalf)
    return TimeLocalOperators(base, rker, wmat, np.ascontiguousarray(ops[:ns]))


def timelocal_generator(
    i: int,
    path: NoisePath,
    tl_ops: TimeLocalOperators,
) -> np.ndarray:
    """Generator G(t_i) with d psi/dt = G psi (no dt factor)."""
    f_ops = tl_ops.f_ops
    nl, d = f_ops.shape[1], f_ops.shape[2]
    g = tl_ops.base_ops[i].copy()
    for a in range(nl):
        mem = 0.0 + 0.0j
        for b in range(nl):
            mem += np.sum(tl_ops.weights[i, : i + 1] * tl_ops.rker[a, b, i, : i + 1]
                          * path.values[b, : i + 1])
        g += -1j * (path.values[a, i] + mem) * f_ops[i, a]
    return g


def evolve_timelocal(
    path: NoisePath,
    series: KernelSeries,
    contraction: ContractionKernel,
    family: OperatorFamily,
    grid: TimeGrid,
    psi0: np.ndarray,
    tl_ops: TimeLocalOperators | None = None,
) -> TrajectoryState:
    """First-order exponential stepping of the time-local generator."""
    if tl_ops is None:
        tl_ops = timelocal_operators(series, contraction, family, grid)
    psi0 = np.asarray(psi0, dtype=np.complex128)
    out = np.empty((1, grid.n_nodes, family.dim), dtype=np.complex128)
    _accel.evolve_timelocal_chunk(
        np.ascontiguousarray(path.values[None, :, :]),
        tl_ops.f_ops,
        np.ascontiguousarray(tl_ops.base_ops),
        np.ascontiguousarray(tl_ops.rker),
        np.ascontiguousarray(tl_ops.weights),
        grid.dt,
        psi0,
        out,
    )
    return TrajectoryState(out[0], path.master_seed, path.index)


def run_timelocal_ensemble(
    model: NoiseModel,
    series: KernelSeries,
    contraction: ContractionKernel,
    family: OperatorFamily,
    grid: TimeGrid,
    psi0: np.ndarray,
    n_traj: int,
    master_seed: int,
    chunk_size: int = 256,
) -> TrajectoryEnsemble:
    """Chunked, bitwise-reproducible ensemble of time-local trajectories."""
    psi0 = np.asarray(psi0, dtype=np.complex128)
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise ValueError("ensemble initial state must be normalized")
    tl_ops = timelocal_operators(series, contraction, family, grid)
    d, nn = family.dim, grid.n_nodes
    s1 = np.zeros((nn, d, d), dtype=np.complex128)
    s2 = np.zeros((nn, d, d))
    t1 = np.zeros(nn, dtype=np.complex128)
    t2 = np.zeros(nn)
    drift = 0.0
    base = np.ascontiguousarray(tl_ops.base_ops)
    rker = np.ascontiguousarray(tl_ops.rker)
    for lo in range(0, n_traj, chunk_size):
        hi = min(lo + chunk_size, n_traj)
        phis = sample_block(model, master_seed, range(lo, hi))
        out = np.empty((hi - lo, nn, d), dtype=np.complex128)
        _accel.evolve_timelocal_chunk(
            phis, tl_ops.f_ops, base, rker, tl_ops.weights, grid.dt, psi0, out
        )
        cs1, cs2, ct1, ct2 = _reduce_psis(out)
        s1 += cs1
        s2 += cs2
        t1 += ct1
        t2 += ct2
        drift = max(drift, float(np.max(np.abs(np.linalg.norm(out, axis=2) - 1.0))))
    ens = _finalize(n_traj, s1, s2, t1, t2, None, None)
    ens.norm_drift = drift
    return ens


def fidelity(psi_a: np.ndarray, psi_b: np.ndarray) -> float:
    """Normalized overlap |<a|b>| / (|a| |b|)."""
    na, nb = np.linalg.norm(psi_a), np.linalg.norm(psi_b)
    return float(abs(np.vdot(psi_a, psi_b)) / (na * nb))
