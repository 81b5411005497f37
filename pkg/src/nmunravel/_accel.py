"""Hot numeric kernels, compiled with numba when available.

Every kernel has a pure-numpy implementation; the numba-compiled variant is
selected at import time unless the environment variable ``NMUNRAVEL_NO_NUMBA``
is set (any non-empty value) or numba is missing.  ``backend_name()`` reports
which path is active so benchmarks and logs can record it.

Both backends run the same matrix-exponential algorithm (fixed-order Taylor
with scaling and squaring); the numba path steps trajectories one by one in
parallel, the numpy path batches them, so results agree to floating-point
reassociation.  Within one backend, outputs are bitwise reproducible at any
thread count: parallel work is split per trajectory into preallocated slots
and every reduction runs in fixed index order.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = bool(os.environ.get("NMUNRAVEL_NO_NUMBA"))

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via NMUNRAVEL_NO_NUMBA
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED

# Taylor order 18 at scaled norm <= 0.5 leaves a remainder below 1e-22.
_TAYLOR_TERMS = 18


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def set_threads(n: int) -> None:
    """Cap the worker thread count of the compiled backend."""
    if USE_NUMBA:
        numba.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------------------
# Matrix exponentials
# ---------------------------------------------------------------------------


def _expm_py(a):
    n = a.shape[0]
    nrm = 0.0
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += abs(a[i, j])
        if s > nrm:
            nrm = s
    sq = 0
    while nrm > 0.5:
        nrm *= 0.5
        sq += 1
    m = a / (2.0 ** sq)
    out = np.eye(n, dtype=np.complex128)
    term = np.eye(n, dtype=np.complex128)
    for k in range(1, _TAYLOR_TERMS + 1):
        term = (term @ m) / k
        out = out + term
    for _ in range(sq):
        out = out @ out
    return out


def _expm_batch_numpy(a: np.ndarray) -> np.ndarray:
    """exp of a stack (m, d, d); same Taylor/squaring algorithm, batched."""
    nrm = np.abs(a).sum(axis=2).max(axis=1)
    biggest = float(nrm.max(initial=0.0))
    sq = 0
    while biggest > 0.5:
        biggest *= 0.5
        sq += 1
    m = a / (2.0 ** sq)
    out = np.broadcast_to(np.eye(a.shape[1], dtype=np.complex128), a.shape).copy()
    term = out.copy()
    for k in range(1, _TAYLOR_TERMS + 1):
        term = (term @ m) / k
        out = out + term
    for _ in range(sq):
        out = out @ out
    return out


def expm_small(a: np.ndarray) -> np.ndarray:
    """exp(a) for a small dense complex matrix (Taylor + scaling/squaring)."""
    return _expm(np.ascontiguousarray(a, dtype=np.complex128))


# ---------------------------------------------------------------------------
# Trajectory stepping
# ---------------------------------------------------------------------------


def _evolve_xi_chunk_numpy(phis, f_ops, drift_ops, dt, psi0, out):
    """Evolve a chunk of trajectories through per-slice exponentials.

    phis      : (m, L, n_nodes) complex noise values per trajectory
    f_ops     : (n_steps, L, d, d) interaction-picture operators at slice nodes
    drift_ops : (n_steps, d, d) memory-drift operator per slice (state free)
    out       : (m, n_nodes, d) storage for the state at every node
    """
    m = phis.shape[0]
    n_steps = f_ops.shape[0]
    psi = np.broadcast_to(psi0, (m, psi0.shape[0])).copy()
    out[:, 0] = psi
    for i in range(n_steps):
        g = np.einsum("ma,aij->mij", -1j * dt * phis[:, :, i], f_ops[i])
        g -= dt * drift_ops[i]
        psi = np.einsum("mij,mj->mi", _expm_batch_numpy(g), psi)
        out[:, i + 1] = psi
    return out


def _evolve_timelocal_chunk_numpy(phis, f_ops, base_ops, rker, weights, dt, psi0, out):
    """Chunked stepping of the time-local generator.

    base_ops : (n_steps, d, d) path-independent memory term of the generator
    rker     : (L, L, n_nodes, n_nodes) contraction-filtered noise kernel; the
               memory scalar at slice i is sum_{b,j} weights[i,j] *
               rker[a,b,i,j] * phi_b(j)
    weights  : (n_nodes, n_nodes) causal quadrature weight rows
    """
    m = phis.shape[0]
    n_steps = f_ops.shape[0]
    psi = np.broadcast_to(psi0, (m, psi0.shape[0])).copy()
    out[:, 0] = psi
    for i in range(n_steps):
        wr = weights[i, : i + 1][None, :] * rker[:, :, i, : i + 1]
        mem = np.einsum("abj,mbj->ma", wr, phis[:, :, : i + 1])
        coef = -1j * dt * (phis[:, :, i] + mem)
        g = np.einsum("ma,aij->mij", coef, f_ops[i]) + dt * base_ops[i]
        psi = np.einsum("mij,mj->mi", _expm_batch_numpy(g), psi)
        out[:, i + 1] = psi
    return out


# ---------------------------------------------------------------------------
# Kernel recursion
# ---------------------------------------------------------------------------


def _kernel_recursion_step_numpy(prev, cswap, kbar, weights, n_steps):
    """One order of the memory-kernel recursion.

    out[a, b, i, m] = sum_{a1,a2,j1,j2<=i} w(j2|i) w(j1|i)
                      prev[a,a2,i,j2] cswap[a2,a1,j2,j1] kbar[a1,b,j1,m]

    cswap carries the contraction in recursion slot order (later time in the
    second slot) with coincidence half weights already folded in.
    """
    out = np.zeros_like(prev)
    for i in range(1, n_steps + 1):
        w = weights[i]
        pw = prev[:, :, i, :] * w[None, None, :]
        t1 = np.einsum("axj,xbjm->abm", pw, cswap) * w[None, None, :]
        out[:, :, i, :] = np.einsum("axj,xbjm->abm", t1, kbar)
    return out


if USE_NUMBA:
    _expm = njit(cache=True)(_expm_py)

    @njit(cache=True, parallel=True)
    def _evolve_xi_chunk_nb(phis, f_ops, drift_ops, dt, psi0, out):
        m = phis.shape[0]
        n_steps = f_ops.shape[0]
        n_lab = f_ops.shape[1]
        d = f_ops.shape[2]
        for traj in prange(m):
            psi = psi0.copy()
            for k in range(d):
                out[traj, 0, k] = psi[k]
            for i in range(n_steps):
                g = np.zeros((d, d), dtype=np.complex128)
                for a in range(n_lab):
                    coef = -1j * dt * phis[traj, a, i]
                    for r in range(d):
                        for c in range(d):
                            g[r, c] += coef * f_ops[i, a, r, c]
                for r in range(d):
                    for c in range(d):
                        g[r, c] -= dt * drift_ops[i, r, c]
                psi = _expm(g) @ psi
                for k in range(d):
                    out[traj, i + 1, k] = psi[k]
        return out

    @njit(cache=True, parallel=True)
    def _evolve_timelocal_chunk_nb(phis, f_ops, base_ops, rker, weights, dt, psi0, out):
        m = phis.shape[0]
        n_steps = f_ops.shape[0]
        n_lab = f_ops.shape[1]
        d = f_ops.shape[2]
        for traj in prange(m):
            psi = psi0.copy()
            for k in range(d):
                out[traj, 0, k] = psi[k]
            for i in range(n_steps):
                g = np.zeros((d, d), dtype=np.complex128)
                for r in range(d):
                    for c in range(d):
                        g[r, c] = dt * base_ops[i, r, c]
                for a in range(n_lab):
                    mem = 0.0 + 0.0j
                    for b in range(n_lab):
                        for j in range(i + 1):
                            mem += weights[i, j] * rker[a, b, i, j] * phis[traj, b, j]
                    coef = -1j * dt * (phis[traj, a, i] + mem)
                    for r in range(d):
                        for c in range(d):
                            g[r, c] += coef * f_ops[i, a, r, c]
                psi = _expm(g) @ psi
                for k in range(d):
                    out[traj, i + 1, k] = psi[k]
        return out

    # the recursion step is matmul-bound already; numpy serves both backends
    kernel_recursion_step = _kernel_recursion_step_numpy
    evolve_xi_chunk = _evolve_xi_chunk_nb
    evolve_timelocal_chunk = _evolve_timelocal_chunk_nb
else:
    _expm = _expm_py
    evolve_xi_chunk = _evolve_xi_chunk_numpy
    evolve_timelocal_chunk = _evolve_timelocal_chunk_numpy
    kernel_recursion_step = _kernel_recursion_step_numpy
