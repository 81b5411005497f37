"""Reference reduced dynamics and truncated generator maps.

The oracle propagates the joint system-environment unitary exactly per
factor (Strang splitting between the free and coupling Hamiltonians, each
exponentiated through its eigendecomposition), traces out the environment
at every grid node, and returns the reduced map in superoperator form.
Everything downstream is checked against it.

The truncated map builder exponentiates, slice by slice, the ordered
generator assembled from cumulant tensors; with quantum tensors the leading
factor of every string is a commutator, which makes the construction trace
preserving by structure.  Truncation can break positivity; that defect is
the signal and is reported, never projected away.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._accel import expm_small
from .core import (
    OperatorFamily,
    SuperoperatorTag,
    TimeGrid,
    boson_ops,
    superop_matrix,
    vec,
)
from .cumulants import MINUS, PLUS, flip, sign_arrays
from .noise import DriftKernel

JOINT_DIM_CAP = 4096
ENV_DIM_CAP = 512


class ResourceLimitError(ValueError):
    """Joint or environment dimension beyond the desk-scale caps."""


# ---------------------------------------------------------------------------
# Environment specification
# ---------------------------------------------------------------------------


@dataclass
class EnvironmentSpec:
    """Finite environment: Hamiltonian, Hermitian couplings, initial state."""

    h_env: np.ndarray
    couplings: dict[str, np.ndarray]
    rho_env: np.ndarray
    mode_dims: tuple[int, ...] = ()

    def __post_init__(self):
        self.h_env = np.asarray(self.h_env, dtype=np.complex128)
        self.rho_env = np.asarray(self.rho_env, dtype=np.complex128)
        de = self.h_env.shape[0]
        if de > ENV_DIM_CAP:
            raise ResourceLimitError(f"environment dimension {de} exceeds {ENV_DIM_CAP}")
        if self.rho_env.shape != (de, de):
            raise ValueError("rho_env shape mismatch")
        tr = np.trace(self.rho_env)
        if abs(tr - 1.0) > 1e-10:
            raise ValueError(f"rho_env trace {tr} != 1")
        evals = np.linalg.eigvalsh(0.5 * (self.rho_env + self.rho_env.conj().T))
        if evals[0] < -1e-10:
            raise ValueError("rho_env is not positive semidefinite")
        for lbl, op in self.couplings.items():
            op = np.asarray(op, dtype=np.complex128)
            if np.max(np.abs(op - op.conj().T)) > 1e-10:
                raise ValueError(f"coupling {lbl!r} is not Hermitian")
            self.couplings[lbl] = op

    @property
    def dim(self) -> int:
        return self.h_env.shape[0]


@dataclass(frozen=True)
class BosonMode:
    """One harmonic mode; couplings map labels to amplitudes of x = (a+a†)/√2."""

    frequency: float
    dim: int
    couplings: Mapping[str, float]
    occupation: float = 0.0  # thermal occupation; 0 is the vacuum


def bosonic_environment(modes: Sequence[BosonMode]) -> EnvironmentSpec:
    """Tensor product of truncated harmonic modes with linear x couplings."""
    h = np.zeros((1, 1), dtype=np.complex128)
    rho = np.ones((1, 1), dtype=np.complex128)
    ops: dict[str, np.ndarray] = {}
    dim_so_far = 1
    for mode in modes:
        a, adag = boson_ops(mode.dim)
        num = adag @ a
        h_mode = mode.frequency * num
        if mode.occupation > 0:
            w = np.exp(-np.arange(mode.dim) * np.log1p(1.0 / mode.occupation))
            rho_mode = np.diag(w / w.sum()).astype(np.complex128)
        else:
            rho_mode = np.zeros((mode.dim, mode.dim), dtype=np.complex128)
            rho_mode[0, 0] = 1.0
        x = (a + adag) / np.sqrt(2.0)
        h = np.kron(h, np.eye(mode.dim)) + np.kron(np.eye(dim_so_far), h_mode)
        rho = np.kron(rho, rho_mode)
        new_ops = {}
        for lbl in set(ops) | set(mode.couplings):
            prev = ops.get(lbl, np.zeros((dim_so_far, dim_so_far)))
            cur = mode.couplings.get(lbl, 0.0) * x
            new_ops[lbl] = np.kron(prev, np.eye(mode.dim)) + np.kron(
                np.eye(dim_so_far), cur
            )
        ops = new_ops
        dim_so_far *= mode.dim
    return EnvironmentSpec(h, ops, rho, tuple(m.dim for m in modes))


# ---------------------------------------------------------------------------
# Map storage
# ---------------------------------------------------------------------------


@dataclass
class MapOnGrid:
    """rho -> rho(t_i) as a d^2 x d^2 matrix per node; node 0 is the identity."""

    mats: np.ndarray
    dim: int
    grid: TimeGrid
    refinement_defect: float | None = None

    def apply(self, i: int, rho: np.ndarray) -> np.ndarray:
        return (self.mats[i] @ vec(rho)).reshape(self.dim, self.dim)

    def map_fn(self, i: int):
        return lambda rho: self.apply(i, rho)

    def node_distance(self, other: "MapOnGrid") -> np.ndarray:
        return np.array(
            [np.max(np.abs(self.mats[i] - other.mats[i])) for i in range(len(self.mats))]
        )

    def to_csv(self, path) -> None:
        d = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "i", "j", "k", "l", "Re", "Im"])
            for node in range(self.mats.shape[0]):
                for i in range(d):
                    for j in range(d):
                        for k in range(d):
                            for l in range(d):
                                v = self.mats[node, i * d + j, k * d + l]
                                w.writerow([node, i, j, k, l, repr(float(v.real)), repr(float(v.imag))])

    @classmethod
    def from_csv(cls, path, grid: TimeGrid) -> "MapOnGrid":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = [(int(r[0]), int(r[1]), int(r[2]), int(r[3]), int(r[4]),
                     float(r[5]) + 1j * float(r[6])) for r in reader]
        n_nodes = 1 + max(r[0] for r in rows)
        d = 1 + max(r[1] for r in rows)
        mats = np.zeros((n_nodes, d * d, d * d), dtype=np.complex128)
        for node, i, j, k, l, v in rows:
            mats[node, i * d + j, k * d + l] = v
        return cls(mats, d, grid)


def tp_defect(map_on_grid: MapOnGrid) -> float:
    """max over nodes and basis units of |tr(map(E_ij)) - delta_ij|."""
    d = map_on_grid.dim
    tvec = vec(np.eye(d))
    worst = 0.0
    for m in map_on_grid.mats:
        worst = max(worst, float(np.max(np.abs(tvec @ m - tvec))))
    return worst


# ---------------------------------------------------------------------------
# Oracle: joint unitary propagation and partial trace
# ---------------------------------------------------------------------------


def _factor_expm(h: np.ndarray, scale: float) -> np.ndarray:
    evals, evecs = np.linalg.eigh(h)
    return (evecs * np.exp(-1j * scale * evals)) @ evecs.conj().T


def oracle_map(
    family: OperatorFamily,
    env: EnvironmentSpec,
    grid: TimeGrid,
    check_refinement: bool = False,
) -> MapOnGrid:
    """Reduced dynamical map from second-order split-step joint propagation.

    Free and coupling parts are exponentiated exactly (eigendecompositions
    computed once), composed as a symmetric split per slice; the reduced map
    at each node is assembled from the Kraus blocks of the interaction
    picture joint unitary.  CP/TP hold to machine precision by construction;
    the splitting only limits accuracy against the true dynamics, which the
    optional refinement check reports.
    """
    ds, de = family.dim, env.dim
    if ds * de > JOINT_DIM_CAP:
        raise ResourceLimitError(f"joint dimension {ds * de} exceeds {JOINT_DIM_CAP}")
    labels = [lbl for lbl in family.labels if lbl in env.couplings]
    if set(family.labels) - set(env.couplings):
        missing = set(family.labels) - set(env.couplings)
        raise ValueError(f"environment lacks couplings for labels {sorted(missing)}")
    dt = grid.dt

    v = np.zeros((ds * de, ds * de), dtype=np.complex128)
    for lbl in labels:
        v += np.kron(family.ops[lbl].matrix, env.couplings[lbl])
    half_s = _factor_expm(family.h0.matrix, dt / 2.0)
    half_e = _factor_expm(env.h_env, dt / 2.0)
    half_free = np.kron(half_s, half_e)
    v_step = _factor_expm(v, dt)
    step = half_free @ v_step @ half_free

    env_evals, env_evecs = np.linalg.eigh(0.5 * (env.rho_env + env.rho_env.conj().T))
    keep = env_evals > 1e-14
    probs = env_evals[keep]
    kets = env_evecs[:, keep]
    weighted = kets * np.sqrt(probs)

    s_evals, s_evecs = np.linalg.eigh(family.h0.matrix)
    e_evals, e_evecs = np.linalg.eigh(env.h_env)

    mats = np.empty((grid.n_nodes, ds * ds, ds * ds), dtype=np.complex128)
    u = np.eye(ds * de, dtype=np.complex128)
    for node, t in enumerate(grid.nodes):
        if node > 0:
            u = step @ u
        # interaction picture: undo the free phases at the current node
        us = (s_evecs * np.exp(1j * s_evals * t)) @ s_evecs.conj().T
        ue = (e_evecs * np.exp(1j * e_evals * t)) @ e_evecs.conj().T
        u_int = np.kron(us, ue) @ u
        u4 = u_int.reshape(ds, de, ds, de)
        kraus = np.einsum("aebm,mk->keab", u4, weighted)
        kraus = kraus.reshape(-1, ds, ds)
        m = np.zeros((ds * ds, ds * ds), dtype=np.complex128)
        for kmat in kraus:
            m += np.kron(kmat, kmat.conj())
        mats[node] = m
    out = MapOnGrid(mats, ds, grid)
    if check_refinement:
        fine = oracle_map(family, env, grid.refine(), check_refinement=False)
        out.refinement_defect = float(
            np.max(out.node_distance(MapOnGrid(fine.mats[::2], ds, grid)))
        )
    return out


def env_correlation(env: EnvironmentSpec, labels: Sequence[str], grid: TimeGrid):
    """Means m_a(t_i) and centered correlations D_ab(t_i, t_j) of the bath.

    Heisenberg transport of the couplings runs through the eigenbasis of the
    environment Hamiltonian; D is returned on the full node-by-node grid
    (both orders), Hermitian under joint swap.
    """
    evals, evecs = np.linalg.eigh(env.h_env)
    rho_t = evecs.conj().T @ env.rho_env @ evecs
    phase = np.exp(1j * np.outer(grid.nodes, evals))  # (N, de)
    nl, nn, de = len(labels), grid.n_nodes, env.dim
    means = np.zeros((nl, nn))
    d_corr = np.zeros((nl, nl, nn, nn), dtype=np.complex128)
    phis = []
    for lbl in labels:
        phis.append(evecs.conj().T @ env.couplings[lbl] @ evecs)
    # Phi_a(t) entrywise: phi[a] * exp(i(lam_r - lam_c) t)
    for a in range(nl):
        # mean: Tr[Phi_a(t) rho] = sum_rc phi_rc e^{i(l_r - l_c)t} rho_cr
        w = phis[a] * rho_t.T
        means[a] = np.real(np.einsum("nr,rc,nc->n", phase, w, phase.conj()))
    for a in range(nl):
        pa = np.einsum("nr,rc,nc->nrc", phase, phis[a], phase.conj())
        for b in range(nl):
            pb = np.einsum("nr,rc,nc->nrc", phase, phis[b], phase.conj())
            pb_rho = np.einsum("nrc,ck->nrk", pb, rho_t)
            d_corr[a, b] = np.einsum("irc,jcr->ij", pa, pb_rho)
            d_corr[a, b] -= np.outer(means[a], means[b])
    return means, d_corr


def dephasing_decay(d_corr: np.ndarray, grid: TimeGrid, quadrature: str = "trapezoid") -> np.ndarray:
    """Coherence decay exponent of the commuting (pure-dephasing) model.

    Gamma(t_i) = 4 * iterated integral of Re D over the ordered sector up to
    t_i.  quadrature "trapezoid" nests trapezoid rules (second order, for
    oracle comparisons); "propagator" uses the rectangle-outer rule of the
    trajectory stepper so ensemble checks are quadrature-consistent.
    """
    re_d = d_corr[0, 0].real
    nn = grid.n_nodes
    gamma = np.zeros(nn)
    inner = np.array([grid.causal_weights(j)[: nn] @ re_d[j] for j in range(nn)])
    if quadrature == "trapezoid":
        for i in range(nn):
            gamma[i] = 4.0 * (grid.causal_weights(i) @ inner)
    elif quadrature == "propagator":
        for i in range(1, nn):
            gamma[i] = gamma[i - 1] + 4.0 * grid.dt * inner[i - 1]
    else:
        raise ValueError("quadrature must be 'trapezoid' or 'propagator'")
    return gamma


# ---------------------------------------------------------------------------
# Truncated ordered-generator map
# ---------------------------------------------------------------------------


def cumulant_map(order_max: int, source, family: OperatorFamily, grid: TimeGrid) -> MapOnGrid:
    """Time-stepped ordered exponential of the truncated cumulant generator.

    Per slice, the generator collects every string whose latest leg sits at
    the slice node, with earlier legs summed over the ordered sector through
    nested trapezoid weights; the map is then multiplied by the slice
    exponential.  Strings lead with the full sign range for stochastic
    sources and are restricted by vanishing leading-minus cumulants for
    quantum Gaussian ones.
    """
    if not 1 <= order_max <= 4:
        raise ValueError("order_max must be in 1..4")
    d = family.dim
    nl = len(family.labels)
    nn = grid.n_nodes
    ops = family.ops_on_grid(grid)
    sup = {
        PLUS: np.stack([[superop_matrix(SuperoperatorTag.PLUS, ops[i, a]) for a in range(nl)] for i in range(nn)]),
        MINUS: np.stack([[superop_matrix(SuperoperatorTag.MINUS, ops[i, a]) for a in range(nl)] for i in range(nn)]),
    }
    tensors = {n: source.tensor(n) for n in range(1, order_max + 1)}
    wmat = grid.causal_weight_matrix()

    # generator density at each node: every string with its leading leg
    # there, earlier legs integrated over the ordered sector
    dd = d * d
    lead = np.zeros((nn, dd, dd), dtype=np.complex128)
    prefac = {n: (-1j) ** n for n in range(1, order_max + 1)}
    for i in range(nn):
        for n in range(1, order_max + 1):
            data = tensors[n].data
            for signs_l in itertools.product((PLUS, MINUS), repeat=n):
                c_signs = tuple(flip(s) for s in signs_l)
                arr = data[c_signs]
                if not np.any(arr):
                    continue
                for labs in itertools.product(range(nl), repeat=n):
                    term = _ordered_tail_sum(arr[labs], signs_l, labs, i, sup, wmat, n)
                    if term is not None:
                        lead[i] += prefac[n] * term
    mats = np.empty((nn, dd, dd), dtype=np.complex128)
    mats[0] = np.eye(dd)
    for i in range(grid.n_steps):
        # trapezoid over the slice for the leading-time integral
        g = 0.5 * grid.dt * (lead[i] + lead[i + 1])
        mats[i + 1] = expm_small(g) @ mats[i]
    return MapOnGrid(mats, d, grid)


def _ordered_tail_sum(block, signs_l, labs, i, sup, wmat, n):
    """sum over ordered earlier legs of C(i, j2..jn) F^{l2}(j2) ... F^{ln}(jn),
    left-multiplied by F^{l1}(i)."""
    lead = sup[signs_l[0]][i, labs[0]]
    if n == 1:
        c = block[i]
        if c == 0.0:
            return None
        return c * lead
    if n == 2:
        coefs = wmat[i] * block[i]
        if not np.any(coefs):
            return None
        tail = np.tensordot(coefs, sup[signs_l[1]][:, labs[1]], axes=(0, 0))
        return lead @ tail
    # orders 3..4: explicit nested ordered sums (small grids only)
    dim2 = lead.shape[0]
    tail = np.zeros((dim2, dim2), dtype=np.complex128)
    idx_ranges = range(i + 1)
    if n == 3:
        for j2 in idx_ranges:
            w2 = wmat[i, j2]
            if w2 == 0.0:
                continue
            inner = np.zeros_like(tail)
            nonzero = False
            for j3 in range(j2 + 1):
                c = block[i, j2, j3] * wmat[j2, j3]
                if c != 0.0:
                    inner += c * sup[signs_l[2]][j3, labs[2]]
                    nonzero = True
            if nonzero:
                tail += w2 * (sup[signs_l[1]][j2, labs[1]] @ inner)
    else:  # n == 4
        for j2 in idx_ranges:
            w2 = wmat[i, j2]
            if w2 == 0.0:
                continue
            mid = np.zeros_like(tail)
            any2 = False
            for j3 in range(j2 + 1):
                w3 = wmat[j2, j3]
                if w3 == 0.0:
                    continue
                inner = np.zeros_like(tail)
                nonzero = False
                for j4 in range(j3 + 1):
                    c = block[i, j2, j3, j4] * wmat[j3, j4]
                    if c != 0.0:
                        inner += c * sup[signs_l[3]][j4, labs[3]]
                        nonzero = True
                if nonzero:
                    mid += w3 * (sup[signs_l[2]][j3, labs[2]] @ inner)
                    any2 = True
            if any2:
                tail += w2 * (sup[signs_l[1]][j2, labs[1]] @ mid)
    if not np.any(tail):
        return None
    return lead @ tail


# ---------------------------------------------------------------------------
# Trace-preservation correction operators
# ---------------------------------------------------------------------------


@dataclass
class TPCorrection:
    """Anti-Hermitian counterterms restoring trace preservation at one order.

    anti[...] holds A_n on the ordered node tuples (dense for orders 1 and 2,
    a tuple-keyed dict for order 3).  The exponent of the corrected
    propagator acquires -(i/2) A_n integrated over the ordered sector; the
    optional Hermitian part (the unravelling-matching freedom) is stored
    alongside for the Gaussian case.  ah_defect records how far the raw
    assembly was from anti-Hermitian before projection.
    """

    order: int
    anti: np.ndarray | dict
    ah_defect: float
    herm: np.ndarray | dict | None = None


def _right_string(ops_grid, labs, nodes, signs_tail):
    """f(t1) then successive right-acting factors M -> M f + s f M."""
    m = ops_grid[nodes[0], labs[0]]
    for k, s in enumerate(signs_tail, start=1):
        f = ops_grid[nodes[k], labs[k]]
        m = m @ f + (1.0 if s == PLUS else -1.0) * (f @ m)
    return m


def build_tp_correction(
    order: int,
    source,
    family: OperatorFamily,
    grid: TimeGrid,
    tuples: Sequence[tuple] | None = None,
) -> TPCorrection:
    """Assemble the order-n anti-Hermitian counterterm from cumulants.

    A_n(tau) = -2i (-i)^n sum over sign tails and labels of the right-acting
    string f f<-^{l2} ... f<-^{ln} weighted by the leading-minus cumulant.
    The result is projected onto its anti-Hermitian part; the projection
    defect (nonzero only for inconsistent cumulant data) is recorded.
    """
    if not 1 <= order <= 3:
        raise ValueError("correction orders 1..3 supported")
    ops = family.ops_on_grid(grid)
    nl, nn, d = len(family.labels), grid.n_nodes, family.dim
    pref = -2j * (-1j) ** order

    def raw_at(nodes):
        m = np.zeros((d, d), dtype=np.complex128)
        for tail in sign_arrays(order - 1):
            c_signs = (MINUS,) + tuple(flip(l) for l in tail)
            for labs in itertools.product(range(nl), repeat=order):
                c = source.value(c_signs, labs, nodes)
                if c != 0.0:
                    m += c * _right_string(ops, labs, nodes, tail)
        return pref * m

    defect = 0.0

    def project(m):
        nonlocal defect
        anti = 0.5 * (m - m.conj().T)
        defect = max(defect, float(np.max(np.abs(m - anti))))
        return anti

    if order == 1:
        anti = np.stack([project(raw_at((i,))) for i in range(nn)])
    elif order == 2:
        anti = np.zeros((nn, nn, d, d), dtype=np.complex128)
        for i in range(nn):
            for j in range(i + 1):
                anti[i, j] = project(raw_at((i, j)))
    else:
        if tuples is None:
            step = max(1, grid.n_steps // 4)
            probe = list(range(0, nn, step))
            tuples = [
                t for t in itertools.combinations(sorted(probe, reverse=True), 3)
            ]
        anti = {tuple(t): project(raw_at(tuple(t))) for t in tuples}
    return TPCorrection(order, anti, defect)


def kernel_tp_correction(kernel: DriftKernel, family: OperatorFamily, grid: TimeGrid) -> TPCorrection:
    """Order-2 correction assembled directly from the drift kernel.

    The TP-active (Hermitian-exponent) content of the memory drift
    -kappa f(t1) f(t2) is -(kappa f1 f2 + kappa* f2 f1)/2; scaled by 2i it
    gives the anti-Hermitian A_2, and the anti-Hermitian remainder scaled the
    same way gives the Hermitian matching part H_2.
    """
    ops = family.ops_on_grid(grid)
    nl, nn, d = len(family.labels), grid.n_nodes, family.dim
    anti = np.zeros((nn, nn, d, d), dtype=np.complex128)
    herm = np.zeros_like(anti)
    for i in range(nn):
        for j in range(i + 1):
            m = np.zeros((d, d), dtype=np.complex128)
            for a in range(nl):
                for b in range(nl):
                    k = kernel.values[a, b, i, j]
                    if k != 0.0:
                        m += -k * (ops[i, a] @ ops[j, b])
            anti[i, j] = 2j * 0.5 * (m + m.conj().T)
            herm[i, j] = 2j * 0.5 * (m - m.conj().T)
    return TPCorrection(2, anti, 0.0, herm=herm)
