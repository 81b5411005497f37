"""Linear Gaussian non-Markovian unravelling.

Each trajectory evolves a pure state through per-slice exponentials of

    -i dt f_a(t_i) [ phi_a(t_i) - i sum_j w_j kappa_ab(t_i, t_j) f_b(t_j) ]

where kappa is the causal drift kernel (A - S) theta and w_j are trapezoid
weights on [0, t_i] (diagonal half weight).  The memory term is a pure
operator sum, identical for all trajectories, so it is precomputed once per
scenario; only the multiplicative noise varies per path.

The state is not normalized along the way (linear unravelling); physical
density matrices arise from the fixed-order ensemble average.  Trajectory
reductions are chunked: every chunk is reduced internally in index order
and chunks are combined in index order, which makes the result bitwise
reproducible at any worker-thread count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _accel
from .core import OperatorFamily, TimeGrid
from .noise import (
    DriftKernel,
    NoiseModel,
    NoisePath,
    NonPositiveCovariance,
    kernel_from_matrix,
    sample_block,
)

DEFAULT_CHUNK = 256


@dataclass
class TrajectoryState:
    """Pure-state trajectory on the grid; norm may wander (linear scheme)."""

    psi: np.ndarray  # (n_nodes, d)
    master_seed: int | None = None
    index: int | None = None

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.psi, axis=1)

    def density(self) -> np.ndarray:
        return np.einsum("ni,nj->nij", self.psi, self.psi.conj())


def memory_operators(kernel: DriftKernel | None, family: OperatorFamily, grid: TimeGrid) -> np.ndarray:
    """State-independent drift operators D_i = f_a(t_i) sum_j w_j kappa f_b(t_j)."""
    d = family.dim
    out = np.zeros((grid.n_steps, d, d), dtype=np.complex128)
    if kernel is None or kernel.is_zero():
        return out
    ops = family.ops_on_grid(grid)
    nl = len(family.labels)
    wmat = grid.causal_weight_matrix()
    for i in range(grid.n_steps):
        acc = np.zeros((d, d), dtype=np.complex128)
        for a in range(nl):
            inner = np.zeros((d, d), dtype=np.complex128)
            for b in range(nl):
                coefs = wmat[i] * kernel.values[a, b, i]
                if np.any(coefs):
                    inner += np.tensordot(coefs, ops[:, b], axes=(0, 0))
            acc += ops[i, a] @ inner
        out[i] = acc
    return out


def evolve_xi(
    path: NoisePath,
    kernel: DriftKernel | None,
    family: OperatorFamily,
    grid: TimeGrid,
    psi0: np.ndarray,
    drift_ops: np.ndarray | None = None,
) -> TrajectoryState:
    """Evolve one trajectory of the ordered-product discretization."""
    psi0 = np.asarray(psi0, dtype=np.complex128)
    if psi0.shape != (family.dim,):
        raise ValueError("psi0 has wrong dimension")
    if drift_ops is None:
        drift_ops = memory_operators(kernel, family, grid)
    f_ops = np.ascontiguousarray(family.ops_on_grid(grid)[: grid.n_steps])
    out = np.empty((1, grid.n_nodes, family.dim), dtype=np.complex128)
    _accel.evolve_xi_chunk(
        np.ascontiguousarray(path.values[None, :, :]),
        f_ops,
        np.ascontiguousarray(drift_ops),
        grid.dt,
        psi0,
        out,
    )
    return TrajectoryState(out[0], path.master_seed, path.index)


@dataclass
class TrajectoryEnsemble:
    """Fixed-order reduction of an ensemble of linear trajectories.

    rho_bar is the plain average of psi psi^dag per node.  Standard errors
    are delete-one jackknife values; for a plain mean those coincide with
    the usual sqrt(Var/N) estimator, which is how they are accumulated.
    """

    n_traj: int
    rho_bar: np.ndarray        # (n_nodes, d, d)
    entry_se: np.ndarray       # (n_nodes, d, d) real
    trace_se: np.ndarray       # (n_nodes,)
    norm_drift: float          # max over trajectories/nodes of | ||psi|| - 1 |
    states: list[TrajectoryState] | None = None

    @property
    def dim(self) -> int:
        return self.rho_bar.shape[-1]

    def trace_defect(self) -> float:
        traces = np.einsum("nii->n", self.rho_bar)
        return float(np.max(np.abs(traces - 1.0)))

    def trace_defects(self) -> np.ndarray:
        return np.abs(np.einsum("nii->n", self.rho_bar) - 1.0)

    def to_csv(self, path) -> None:
        import csv

        d = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "i", "j", "Re", "Im", "stderr"])
            for node in range(self.rho_bar.shape[0]):
                for i in range(d):
                    for j in range(d):
                        v = self.rho_bar[node, i, j]
                        w.writerow(
                            [node, i, j, repr(float(v.real)), repr(float(v.imag)),
                             repr(float(self.entry_se[node, i, j]))]
                        )


def _reduce_psis(psis: np.ndarray):
    """Per-chunk sums used by the ensemble accumulator."""
    dens = np.einsum("cni,cnj->cnij", psis, psis.conj())
    s1 = dens.sum(axis=0)
    s2 = (np.abs(dens) ** 2).sum(axis=0)
    traces = np.einsum("cnii->cn", dens)
    t1 = traces.sum(axis=0)
    t2 = (np.abs(traces) ** 2).sum(axis=0)
    return s1, s2, t1, t2


def average(states: Sequence[TrajectoryState]) -> TrajectoryEnsemble:
    """Fixed-order average of explicit trajectory states."""
    if len(states) < 2:
        raise ValueError("need at least two trajectories")
    psis = np.stack([s.psi for s in states])
    s1, s2, t1, t2 = _reduce_psis(psis)
    return _finalize(len(states), s1, s2, t1, t2, psis, list(states))


def _finalize(n, s1, s2, t1, t2, psis, states) -> TrajectoryEnsemble:
    rho = s1 / n
    var = np.maximum(s2 / n - np.abs(rho) ** 2, 0.0)
    entry_se = np.sqrt(var / max(n - 1, 1))
    tmean = t1 / n
    tvar = np.maximum(t2 / n - np.abs(tmean) ** 2, 0.0)
    trace_se = np.sqrt(tvar / max(n - 1, 1))
    drift = float(np.max(np.abs(np.linalg.norm(psis, axis=2) - 1.0))) if psis is not None else 0.0
    return TrajectoryEnsemble(n, rho, entry_se, trace_se, drift, states)


def run_ensemble(
    model: NoiseModel,
    kernel: DriftKernel | None,
    family: OperatorFamily,
    grid: TimeGrid,
    psi0: np.ndarray,
    n_traj: int,
    master_seed: int,
    chunk_size: int = DEFAULT_CHUNK,
    store_states: bool = False,
) -> TrajectoryEnsemble:
    """Evolve and reduce n_traj trajectories, bitwise reproducibly.

    Chunks are fixed-size windows of the index range; each worker evolves
    the trajectories of a chunk independently (accelerated backend), and
    reductions run in index order inside and across chunks.
    """
    psi0 = np.asarray(psi0, dtype=np.complex128)
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-10:
        raise ValueError("ensemble initial state must be normalized")
    if n_traj < 2:
        raise ValueError("need at least two trajectories")
    d = family.dim
    nn = grid.n_nodes
    drift_ops = np.ascontiguousarray(memory_operators(kernel, family, grid))
    f_ops = np.ascontiguousarray(family.ops_on_grid(grid)[: grid.n_steps])

    s1 = np.zeros((nn, d, d), dtype=np.complex128)
    s2 = np.zeros((nn, d, d))
    t1 = np.zeros(nn, dtype=np.complex128)
    t2 = np.zeros(nn)
    norm_drift = 0.0
    kept: list[TrajectoryState] = []
    for lo in range(0, n_traj, chunk_size):
        hi = min(lo + chunk_size, n_traj)
        phis = sample_block(model, master_seed, range(lo, hi))
        out = np.empty((hi - lo, nn, d), dtype=np.complex128)
        _accel.evolve_xi_chunk(phis, f_ops, drift_ops, grid.dt, psi0, out)
        cs1, cs2, ct1, ct2 = _reduce_psis(out)
        s1 += cs1
        s2 += cs2
        t1 += ct1
        t2 += ct2
        norm_drift = max(norm_drift, float(np.max(np.abs(np.linalg.norm(out, axis=2) - 1.0))))
        if store_states:
            kept.extend(
                TrajectoryState(out[k].copy(), master_seed, lo + k) for k in range(hi - lo)
            )
    ens = _finalize(n_traj, s1, s2, t1, t2, None, kept if store_states else None)
    ens.norm_drift = norm_drift
    return ens


# ---------------------------------------------------------------------------
# Bath matching
# ---------------------------------------------------------------------------


def match_bath(
    d_corr: np.ndarray,
    means: np.ndarray,
    grid: TimeGrid,
    labels: Sequence[str],
    split: str = "auto",
) -> tuple[NoiseModel, DriftKernel]:
    """Noise statistics whose averaged unravelling reproduces the bath map.

    Trace preservation pins the effective drift kernel to (A - S) theta and
    matching the averaged generator to the bath one pins A(t, s) = D(t, s);
    the pseudo-covariance S is residual gauge, constrained only by positivity
    of the real embedding:

    - "circular": S = 0 (always embeddable, D being a Gram kernel);
    - "real": S = A = D, valid exactly when Im D vanishes (real noise,
       zero drift);
    - "symmetric": S = Re D, A = Re D + 2i Im D; kept because it makes the
      half-difference kernel equal i Im D theta, but its embedding fails for
      any genuinely complex D (raises NonPositiveCovariance);
    - "auto": "real" when Im D ~ 0, else "circular".
    """
    labels = tuple(labels)
    nl, nn = len(labels), grid.n_nodes
    if d_corr.shape != (nl, nl, nn, nn):
        raise ValueError("d_corr shape mismatch")
    if np.max(np.abs(means.imag if np.iscomplexobj(means) else np.zeros(1))) > 1e-12:
        raise ValueError("bath coupling means must be real")
    flat = d_corr.transpose(0, 2, 1, 3).reshape(nl * nn, nl * nn)
    herm_defect = np.max(np.abs(flat - flat.conj().T))
    if herm_defect > 1e-8:
        raise ValueError(f"bath correlation is not Hermitian (defect {herm_defect:.2e})")
    if split == "auto":
        split = "real" if np.max(np.abs(flat.imag)) < 1e-12 else "circular"
    if split == "circular":
        a_mat = flat
        s_mat = np.zeros_like(flat)
    elif split == "real":
        if np.max(np.abs(flat.imag)) > 1e-10:
            raise NonPositiveCovariance(
                "the real split needs a real bath correlation; use 'circular'"
            )
        a_mat = flat.real.astype(np.complex128)
        s_mat = a_mat.copy()
    elif split == "symmetric":
        a_mat = flat.real + 2j * flat.imag
        s_mat = flat.real.astype(np.complex128)
    else:
        raise ValueError(f"unknown split {split!r}")
    mean = np.asarray(means, dtype=np.complex128).reshape(nl, nn)
    model = NoiseModel(labels, grid, mean, a_mat, s_mat)
    model.factorize()  # raises NonPositiveCovariance for unphysical splits
    diff = (a_mat - s_mat).reshape(nl, nn, nl, nn).transpose(0, 2, 1, 3)
    kernel = kernel_from_matrix(diff, labels)
    return model, kernel


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    evals = np.linalg.eigvalsh(rho - sigma)
    return 0.5 * float(np.sum(np.abs(evals)))


def mc_distance_bound(ens: TrajectoryEnsemble, node: int) -> float:
    """Crude 1-sigma bound on the trace-distance error of the node average."""
    d = ens.dim
    return 0.5 * float(np.sqrt(d * np.sum(ens.entry_se[node] ** 2)))
