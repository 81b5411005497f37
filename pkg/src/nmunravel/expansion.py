"""Perturbative representation of the unravelling: explicit ordered-sum
terms, formal inverse coefficients, and the time-local generator series.

Terms are graded by the power of coupling operators they carry.  A term of
order n collects, over fully ordered time tuples, strings of n interaction
operators with k causal kernel pairings and n - 2k noise factors; its
matrix carries the (-i)^n prefactor, so the term series sums directly to
the propagator.  Quadratures mirror the propagator discretization (slice
rectangle for noise legs, trapezoid for kernel legs), which makes orders
one and two match it exactly and leaves only O(dt) mismatch from operator
interleaving at higher orders.

The inverse and generator coefficients come from the defining identities
    sum_k M_k xi_{n-k} = [n == 0],     Lambda Xi = i dXi/dt - f phi Xi,
whose order-by-order solutions are
    M_n = -sum_{k<n} M_k xi_{n-k},     L_n = d_n - sum_{0<k<n} L_k xi_{n-k}.
These are verification instruments, not production evolution paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .core import OperatorFamily, TimeGrid
from .gaussian import TrajectoryState
from .noise import DriftKernel, NoisePath

MAX_ORDER = 4


@dataclass(frozen=True)
class ExpansionTerm:
    """Order-n term evaluated at one grid node for one noise path."""

    order: int
    t_index: int
    matrix: np.ndarray


def _legs(path: NoisePath, kernel: DriftKernel | None, family: OperatorFamily, grid: TimeGrid):
    """Flattened (node, label) legs: operators, noise, weighted kernel."""
    ops = family.ops_on_grid(grid)
    nl, nn, d = len(family.labels), grid.n_nodes, family.dim
    f = np.ascontiguousarray(ops.reshape(nn * nl, d, d))
    phi = np.ascontiguousarray(path.values.T.reshape(nn * nl))
    kw = np.zeros((nn * nl, nn * nl), dtype=np.complex128)
    if kernel is not None and not kernel.is_zero():
        wmat = grid.causal_weight_matrix()
        for a in range(nl):
            for b in range(nl):
                kw[a::nl, b::nl] = kernel.values[a, b] * wmat
    return f, phi, kw, nl


# leg index c encodes node c // nl and label c % nl; ordering and ties are
# decided by the node part

def _run_weight(nodes) -> float:
    """1 / prod m! over runs of coincident nodes in a descending tuple."""
    w = 1.0
    run = 1
    for k in range(1, len(nodes)):
        if nodes[k] == nodes[k - 1]:
            run += 1
            w /= run
        else:
            run = 1
    return w


def _xi_matrix_py(n, f, phi, kw, nl, dt, t_idx, d):
    top = t_idx * nl  # legs strictly below the query node
    eye = np.eye(d, dtype=np.complex128)
    if n == 0:
        return eye
    acc = np.zeros((d, d), dtype=np.complex128)
    if n == 1:
        for c in range(top):
            acc += (dt * phi[c]) * f[c]
        return (-1j) * acc
    if n == 2:
        acc += _noise2_py(f, phi, nl, dt, top, d)
        for c1 in range(top):
            for c2 in range((c1 // nl + 1) * nl):
                if kw[c1, c2] != 0.0:
                    acc += dt * kw[c1, c2] * (f[c1] @ f[c2])
        return (-1j) ** 2 * acc
    if n == 3:
        acc += _noise3_py(f, phi, nl, dt, top, d)
        acc += _pair_noise_py(f, phi, kw, nl, dt, top, d)
        return (-1j) ** 3 * acc
    acc += _noise4_py(f, phi, nl, dt, top, d)
    acc += _pair_noise2_py(f, phi, kw, nl, dt, top, d)
    acc += _pair_pair_py(f, kw, nl, dt, top, d)
    return (-1j) ** 4 * acc


# noise legs descend by node; at coincident nodes every label sequence is
# visited and the run weight supplies the 1/m! of the exponential expansion

def _noise2_py(f, phi, nl, dt, top, d):
    acc = np.zeros((d, d), dtype=np.complex128)
    for c1 in range(top):
        p1 = phi[c1]
        if p1 == 0.0:
            continue
        inner = np.zeros((d, d), dtype=np.complex128)
        for c2 in range(min((c1 // nl + 1) * nl, top)):
            w = _run_weight((c1 // nl, c2 // nl))
            inner += (w * dt * phi[c2]) * f[c2]
        acc += (dt * p1) * (f[c1] @ inner)
    return acc


def _noise3_py(f, phi, nl, dt, top, d):
    acc = np.zeros((d, d), dtype=np.complex128)
    for c1 in range(top):
        p1 = phi[c1]
        if p1 == 0.0:
            continue
        for c2 in range(min((c1 // nl + 1) * nl, top)):
            p2 = p1 * phi[c2]
            if p2 == 0.0:
                continue
            m12 = f[c1] @ f[c2]
            for c3 in range(min((c2 // nl + 1) * nl, top)):
                w = _run_weight((c1 // nl, c2 // nl, c3 // nl))
                acc += (dt**3 * p2 * phi[c3] * w) * (m12 @ f[c3])
    return acc


def _noise4_py(f, phi, nl, dt, top, d):
    acc = np.zeros((d, d), dtype=np.complex128)
    for c1 in range(top):
        if phi[c1] == 0.0:
            continue
        for c2 in range(min((c1 // nl + 1) * nl, top)):
            p2 = phi[c1] * phi[c2]
            if p2 == 0.0:
                continue
            m12 = f[c1] @ f[c2]
            for c3 in range(min((c2 // nl + 1) * nl, top)):
                p3 = p2 * phi[c3]
                if p3 == 0.0:
                    continue
                m123 = m12 @ f[c3]
                for c4 in range(min((c3 // nl + 1) * nl, top)):
                    w = _run_weight((c1 // nl, c2 // nl, c3 // nl, c4 // nl))
                    acc += (dt**4 * p3 * phi[c4] * w) * (m123 @ f[c4])
    return acc


def _ordered_product(f, idx_desc, d):
    m = f[idx_desc[0]].copy()
    for c in idx_desc[1:]:
        m = m @ f[c]
    return m


def _pair_noise_py(f, phi, kw, nl, dt, top, d):
    """One kernel pair and one noise leg, fully interleaved.

    A noise leg coincident with a kernel leg enters symmetrized at half
    weight per ordering (the midpoint reading of the step function), which
    keeps the commuting-family generator identities exact.
    """
    acc = np.zeros((d, d), dtype=np.complex128)
    for a in range(top):
        for b in range((a // nl + 1) * nl):
            kv = kw[a, b]
            if kv == 0.0:
                continue
            for s in range(top):
                ps = phi[s]
                if ps == 0.0:
                    continue
                tie_a = s // nl == a // nl
                tie_b = s // nl == b // nl
                if tie_a and tie_b:
                    continue  # triple coincidence: measure-zero corner
                if tie_a:
                    m = 0.5 * ((f[s] @ f[a] + f[a] @ f[s]) @ f[b])
                elif tie_b:
                    m = 0.5 * (f[a] @ (f[s] @ f[b] + f[b] @ f[s]))
                elif s > a:
                    m = f[s] @ f[a] @ f[b]
                elif s < b:
                    m = f[a] @ f[b] @ f[s]
                else:
                    m = f[a] @ f[s] @ f[b]
                acc += (dt**2 * kv * ps) * m
    return acc


def _pair_noise2_py(f, phi, kw, nl, dt, top, d):
    acc = np.zeros((d, d), dtype=np.complex128)
    for a in range(top):
        for b in range((a // nl + 1) * nl):
            kv = kw[a, b]
            if kv == 0.0:
                continue
            for s1 in range(top):
                p1 = phi[s1]
                if p1 == 0.0 or s1 // nl in (a // nl, b // nl):
                    continue
                for s2 in range(min((s1 // nl + 1) * nl, top)):
                    p = p1 * phi[s2] * _run_weight((s1 // nl, s2 // nl))
                    if p == 0.0 or s2 // nl in (a // nl, b // nl):
                        continue
                    order = sorted([a, b, s1, s2], reverse=True)
                    acc += (dt**3 * kv * p) * _ordered_product(f, order, d)
    return acc


def _pair_pair_py(f, kw, nl, dt, top, d):
    acc = np.zeros((d, d), dtype=np.complex128)
    for a1 in range(top):
        for b1 in range((a1 // nl + 1) * nl):
            k1 = kw[a1, b1]
            if k1 == 0.0:
                continue
            for a2 in range(a1):
                if a2 // nl == a1 // nl:
                    continue
                for b2 in range((a2 // nl + 1) * nl):
                    k2 = kw[a2, b2]
                    if k2 == 0.0:
                        continue
                    order = sorted([a1, b1, a2, b2], reverse=True)
                    acc += (dt**2 * k1 * k2) * _ordered_product(f, order, d)
    return acc


def _d_matrix_py(n, f, phi, kw, nl, t_idx, dt, d):
    """Order-n coefficient of i dXi/dt - f phi Xi (leading leg anchored)."""
    if n < 2:
        return np.zeros((d, d), dtype=np.complex128)
    acc = np.zeros((d, d), dtype=np.complex128)
    top = t_idx * nl
    for lead in range(t_idx * nl, (t_idx + 1) * nl):
        for b in range(top + nl):  # anchored kernel leg, nodes 0..t_idx
            kv = kw[lead, b]
            if kv == 0.0:
                continue
            if n == 2:
                acc += kv * (f[lead] @ f[b])
            elif n == 3:
                for s in range(top):
                    ps = phi[s]
                    if ps == 0.0:
                        continue
                    if s // nl == b // nl:
                        inner = 0.5 * (f[s] @ f[b] + f[b] @ f[s])
                    elif s > b:
                        inner = f[s] @ f[b]
                    else:
                        inner = f[b] @ f[s]
                    acc += (dt * kv * ps) * (f[lead] @ inner)
            else:
                # two extra noise legs
                for s1 in range(top):
                    p1 = phi[s1]
                    if p1 == 0.0 or s1 // nl == b // nl:
                        continue
                    for s2 in range(min((s1 // nl + 1) * nl, top)):
                        p = p1 * phi[s2] * _run_weight((s1 // nl, s2 // nl))
                        if p == 0.0 or s2 // nl == b // nl:
                            continue
                        order = sorted([b, s1, s2], reverse=True)
                        acc += (dt**2 * kv * p) * (f[lead] @ _ordered_product(f, order, d))
                # one extra kernel pair
                for a2 in range(top):
                    if a2 // nl == b // nl:
                        continue
                    for b2 in range((a2 // nl + 1) * nl):
                        k2 = kw[a2, b2]
                        if k2 == 0.0 or b2 // nl == b // nl:
                            continue
                        order = sorted([b, a2, b2], reverse=True)
                        acc += (dt * kv * k2) * (f[lead] @ _ordered_product(f, order, d))
    return (-1j) ** (n - 1) * acc


def xi_term(
    order: int,
    path: NoisePath,
    kernel: DriftKernel | None,
    family: OperatorFamily,
    grid: TimeGrid,
    t_index: int | None = None,
) -> ExpansionTerm:
    """Ordered-sum term of the propagator expansion at one node.

    matrix carries the (-i)^order prefactor: summing terms over orders
    approximates the propagator itself.
    """
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in 0..{MAX_ORDER}")
    t_idx = grid.n_steps if t_index is None else t_index
    f, phi, kw, nl = _legs(path, kernel, family, grid)
    m = _xi_matrix_py(order, f, phi, kw, nl, grid.dt, t_idx, family.dim)
    return ExpansionTerm(order, t_idx, m)


def d_term(
    order: int,
    path: NoisePath,
    kernel: DriftKernel | None,
    family: OperatorFamily,
    grid: TimeGrid,
    t_index: int | None = None,
) -> ExpansionTerm:
    """Order-n residual term of (i d/dt - f phi) applied to the propagator.

    Orders are operator powers: the lowest nonzero term is order 2,
    -i f(t) integral of kernel(t, tau) f(tau).
    """
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in 1..{MAX_ORDER}")
    t_idx = grid.n_steps if t_index is None else t_index
    f, phi, kw, nl = _legs(path, kernel, family, grid)
    m = _d_matrix_py(order, f, phi, kw, nl, t_idx, grid.dt, family.dim)
    return ExpansionTerm(order, t_idx, m)


def inverse_terms(xi_terms: list[ExpansionTerm]) -> list[np.ndarray]:
    """Formal-inverse coefficients: M_0 = 1, sum_k M_k xi_{n-k} = 0 (n >= 1)."""
    if not xi_terms or xi_terms[0].order != 0:
        raise ValueError("xi terms must start at order 0")
    d = xi_terms[0].matrix.shape[0]
    ms = [np.eye(d, dtype=np.complex128)]
    for n in range(1, len(xi_terms)):
        acc = np.zeros((d, d), dtype=np.complex128)
        for k in range(n):
            acc += ms[k] @ xi_terms[n - k].matrix
        ms.append(-acc)
    return ms


def l_terms(d_terms: list[ExpansionTerm], xi_terms: list[ExpansionTerm]) -> list[np.ndarray]:
    """Generator coefficients: L_n = d_n - sum_{0<k<n} L_k xi_{n-k}.

    d_terms[n] must hold the order-(n+1) term? no: d_terms[k] is the order
    (k+1) entry of the input list indexed from order 1; see tests.  Input
    lists are aligned by order: d_terms[0] is order 1 (zero), xi_terms[0] is
    order 0 (identity).
    """
    if not xi_terms or xi_terms[0].order != 0:
        raise ValueError("xi terms must start at order 0")
    d = xi_terms[0].matrix.shape[0]
    ls: list[np.ndarray] = []
    for n in range(1, len(d_terms) + 1):
        acc = d_terms[n - 1].matrix.copy()
        for k in range(1, n):
            acc -= ls[k - 1] @ xi_terms[n - k].matrix
        ls.append(acc)
    return ls


def generator_terms_at(
    t_index: int,
    order_max: int,
    path: NoisePath,
    kernel: DriftKernel | None,
    family: OperatorFamily,
    grid: TimeGrid,
) -> list[np.ndarray]:
    """L_1..L_order_max evaluated at one node."""
    xis = [xi_term(n, path, kernel, family, grid, t_index) for n in range(order_max)]
    ds = [d_term(n, path, kernel, family, grid, t_index) for n in range(1, order_max + 1)]
    return l_terms(ds, xis)


def evolve_generator(
    path: NoisePath,
    kernel: DriftKernel | None,
    family: OperatorFamily,
    grid: TimeGrid,
    psi0: np.ndarray,
    order_max: int,
) -> TrajectoryState:
    """Step with i dpsi/dt = [f phi + sum_n L_n] psi, exponential slices."""
    from ._accel import expm_small

    ops = family.ops_on_grid(grid)
    nl = len(family.labels)
    psi = np.asarray(psi0, dtype=np.complex128).copy()
    out = np.empty((grid.n_nodes, family.dim), dtype=np.complex128)
    out[0] = psi
    for s in range(grid.n_steps):
        g = np.zeros((family.dim, family.dim), dtype=np.complex128)
        for a in range(nl):
            g += path.values[a, s] * ops[s, a]
        for lmat in generator_terms_at(s, order_max, path, kernel, family, grid):
            g += lmat
        psi = expm_small(-1j * grid.dt * g) @ psi
        out[s + 1] = psi
    return TrajectoryState(out, path.master_seed, path.index)


def per_order_norms(terms: list[ExpansionTerm]) -> dict[int, float]:
    return {t.order: float(np.max(np.abs(t.matrix))) for t in terms}
