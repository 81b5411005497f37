"""Ordered-cumulant engine: set partitions, moment/cumulant inversion,
superoperator string assembly, and the trace-preservation conditions.

Cumulants here are always joint cumulants of the half-variables
phi^{s}/2 with s in {+, -}, phi^+ = phi + phi*, phi^- = phi - phi*,
restricted to decreasing time order.  For the quantum side the same
formulas apply with phi^{+/-} the anticommutator/commutator superoperators
of the environment coupling and the average the environment trace; the two
provenances share all machinery but differ in their two-point tables.

Sign arrays are tuples of '+'/'-' characters labelling the cumulant
superscripts; the superoperator strings of the generator carry the flipped
signs, and the assembly functions own that flip.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import OperatorFamily, SuperoperatorTag, TimeGrid, apply_superop
from .noise import NoiseModel

BELL = (1, 1, 2, 5, 15, 52, 203)

PLUS, MINUS = "+", "-"


def flip(sign: str) -> str:
    return MINUS if sign == PLUS else PLUS


def sign_arrays(k: int) -> list[tuple[str, ...]]:
    """All sign arrays of length k, canonical (lexicographic, '+' first)."""
    return list(itertools.product((PLUS, MINUS), repeat=k))


@dataclass(frozen=True)
class SetPartition:
    """Disjoint blocks covering {0..n-1}; blocks ordered by least element."""

    blocks: tuple[tuple[int, ...], ...]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def partitions(n: int) -> list[SetPartition]:
    """All Bell(n) set partitions of {0..n-1} in canonical order."""
    if not 1 <= n <= 6:
        raise ValueError("partition order must be between 1 and 6")
    out: list[SetPartition] = []

    def grow(k: int, blocks: list[list[int]]):
        if k == n:
            out.append(SetPartition(tuple(tuple(b) for b in blocks)))
            return
        for b in blocks:
            b.append(k)
            grow(k + 1, blocks)
            b.pop()
        blocks.append([k])
        grow(k + 1, blocks)
        blocks.pop()

    grow(0, [])
    assert len(out) == BELL[n]
    return out


def theta_weight(nodes: Sequence[int], tie_half: bool = True) -> float:
    """Decreasing-order indicator; coincident neighbours weigh 1/2 each."""
    w = 1.0
    for a, b in zip(nodes[:-1], nodes[1:]):
        if a < b:
            return 0.0
        if a == b:
            if not tie_half:
                continue
            w *= 0.5
    return w


MomentFn = Callable[[Sequence[str], Sequence[int], Sequence[int]], complex]


def ursell(
    moment_fn: MomentFn,
    signs: Sequence[str],
    labels: Sequence[int],
    nodes: Sequence[int],
    tie_half: bool = True,
) -> complex:
    """Ordered cumulant from time-ordered moments by the partition sum.

    moment_fn(signs, labels, nodes) must return the time-ordered moment of
    the half-variables for any sub-multiset of the arguments.  The result is
    sum over set partitions of (|P|-1)! (-1)^(|P|-1) prod of block moments,
    multiplied by the decreasing-order indicator of `nodes`.
    """
    n = len(signs)
    if not (len(labels) == len(nodes) == n):
        raise ValueError("signs, labels and nodes must have equal length")
    th = theta_weight(nodes, tie_half)
    if th == 0.0:
        return 0.0
    total = 0.0 + 0.0j
    for part in partitions(n):
        prod = 1.0 + 0.0j
        for block in part.blocks:
            prod *= moment_fn(
                [signs[p] for p in block], [labels[p] for p in block], [nodes[p] for p in block]
            )
        k = part.n_blocks
        total += ((-1.0) ** (k - 1)) * float(math.factorial(k - 1)) * prod
    return th * total


def moments_from_cumulants(cumulant_fn: Callable[[list], complex], items: Sequence) -> complex:
    """Inverse direction: moment = sum over partitions of cumulant products."""
    total = 0.0 + 0.0j
    for part in partitions(len(items)):
        prod = 1.0 + 0.0j
        for block in part.blocks:
            prod *= cumulant_fn([items[p] for p in block])
        total += prod
    return total


# ---------------------------------------------------------------------------
# Gaussian moment sources
# ---------------------------------------------------------------------------


class GaussianMomentSource:
    """Time-ordered moments of jointly Gaussian half-variables.

    ``mean(s, a, i)`` and ``pair(s1, a1, i1, s2, a2, i2)`` (with i1 >= i2)
    define the first two ordered cumulants; moments follow from the pairing
    rule with means.  Works for both provenances: stochastic pair tables are
    order-symmetric, quantum ones are supplied on the ordered sector and the
    recursion only ever evaluates them there.
    """

    def __init__(self, mean_fn, pair_fn, gaussian: bool = True):
        self._mean = mean_fn
        self._pair = pair_fn
        self.gaussian = gaussian

    def moment(self, signs: Sequence[str], labels: Sequence[int], nodes: Sequence[int]) -> complex:
        order = sorted(range(len(signs)), key=lambda p: -nodes[p])
        vs = [(signs[p], labels[p], nodes[p]) for p in order]
        return self._moment_ordered(tuple(vs))

    __call__ = moment

    def _moment_ordered(self, vs) -> complex:
        if not vs:
            return 1.0 + 0.0j
        head, rest = vs[0], vs[1:]
        total = self._mean(*head) * self._moment_ordered(rest)
        for j, other in enumerate(rest):
            c = self._pair(*head, *other)
            if c != 0.0:
                total += c * self._moment_ordered(rest[:j] + rest[j + 1 :])
        return total


def stochastic_gaussian_source(model: NoiseModel) -> GaussianMomentSource:
    """Moment source of the half-variables of a Gaussian NoiseModel."""
    n = model.n_nodes
    a_mat, s_mat, mu = model.a_mat, model.s_mat, model.mean

    def mean(s, a, i):
        m = mu[a, i]
        return complex(m.real) if s == PLUS else 1j * m.imag

    def pair(s1, a1, i1, s2, a2, i2):
        p, q = a1 * n + i1, a2 * n + i2
        s_val = s_mat[p, q]
        a_fwd = a_mat[p, q]          # <phi_a1*(t1) phi_a2(t2)> centered
        a_bwd = a_mat[q, p]          # <phi_a2*(t2) phi_a1(t1)> centered
        sgn1 = 1.0 if s1 == PLUS else -1.0
        sgn2 = 1.0 if s2 == PLUS else -1.0
        # (phi1 + sgn1 phi1*)(phi2 + sgn2 phi2*) / 4, centered
        return 0.25 * (s_val + sgn2 * a_bwd + sgn1 * a_fwd + sgn1 * sgn2 * np.conj(s_val))

    return GaussianMomentSource(mean, pair)


def quantum_gaussian_source(
    d_corr: np.ndarray, means: np.ndarray | None = None
) -> GaussianMomentSource:
    """Moment source of a Gaussian environment.

    d_corr[a, b, i, j] is the centered bath correlation <phi_a(t_i) phi_b(t_j)>
    (environment trace, Heisenberg operators); only the ordered sector
    i >= j is read.  means[a, i], when given, is the (real) coupling mean.
    """
    nl = d_corr.shape[0]
    nn = d_corr.shape[2]
    if means is None:
        means = np.zeros((nl, nn))

    def mean(s, a, i):
        return complex(means[a, i]) if s == PLUS else 0.0 + 0.0j

    def pair(s1, a1, i1, s2, a2, i2):
        if s1 == MINUS:
            return 0.0 + 0.0j  # trace of a leading commutator
        d = d_corr[a1, a2, i1, i2]
        return complex(d.real) if s2 == PLUS else 1j * d.imag

    return GaussianMomentSource(mean, pair)


class SquaredGaussianMomentSource:
    """Moment source for the centered-square family (real, non-Gaussian)."""

    gaussian = False

    def __init__(self, family):
        self.family = family

    def moment(self, signs, labels, nodes):
        if MINUS in signs:
            return 0.0 + 0.0j  # phi is real, so phi^- vanishes identically
        return complex(self.family.moment(list(nodes)))


# ---------------------------------------------------------------------------
# Cumulant source and dense tensors
# ---------------------------------------------------------------------------

_TENSOR_LIMIT = 20_000_000


@dataclass
class CumulantTensor:
    """Dense ordered cumulants of one order: data[signs] has one axis of
    length n_labels and one of n_nodes per slot, zero off the sorted sector."""

    order: int
    labels: tuple[str, ...]
    provenance: str
    data: dict[tuple[str, ...], np.ndarray]

    def value(self, signs, label_idx, nodes) -> complex:
        return complex(self.data[tuple(signs)][tuple(label_idx) + tuple(nodes)])


class CumulantSource:
    """Pointwise ordered cumulants of a moment source, with caching.

    `gaussian` marks sources whose cumulants of order >= 3 vanish
    identically; the tensors are then built as structural zeros without
    running the partition sum.
    """

    def __init__(self, moment_source, labels: Sequence[str], grid: TimeGrid, provenance: str):
        self.moments = moment_source
        self.labels = tuple(labels)
        self.grid = grid
        self.provenance = provenance
        self._cache: dict = {}

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def value(self, signs, label_idx, nodes, tie_half: bool = False) -> complex:
        """Ordered cumulant; plain ties by default (quadrature owns them)."""
        key = (tuple(signs), tuple(label_idx), tuple(nodes), tie_half)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if getattr(self.moments, "gaussian", False) and len(signs) > 2:
            val = 0.0 + 0.0j
        else:
            val = ursell(self.moments.moment, signs, label_idx, nodes, tie_half)
        self._cache[key] = val
        return val

    def tensor(self, order: int, nodes: Sequence[int] | None = None) -> CumulantTensor:
        return dense_tensor(self, order, nodes)


class SyntheticCumulantSource:
    """Cumulants given directly as a callable; for structural tests."""

    def __init__(self, fn, labels: Sequence[str], grid: TimeGrid, provenance: str = "stochastic"):
        self._fn = fn
        self.labels = tuple(labels)
        self.grid = grid
        self.provenance = provenance

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def value(self, signs, label_idx, nodes, tie_half: bool = False) -> complex:
        th = theta_weight(nodes, tie_half)
        if th == 0.0:
            return 0.0
        return th * self._fn(tuple(signs), tuple(label_idx), tuple(nodes))

    def tensor(self, order: int, nodes: Sequence[int] | None = None) -> CumulantTensor:
        return dense_tensor(self, order, nodes)


def dense_tensor(source, order: int, nodes: Sequence[int] | None = None) -> CumulantTensor:
    """Dense cumulant tensor of a source over all sign arrays.

    Values live on the sorted node sector (plain ties; quadrature owns the
    coincidence half-weights); everything else is a structural zero.
    """
    node_list = list(range(source.grid.n_nodes)) if nodes is None else list(nodes)
    nn, nl = len(node_list), source.n_labels
    size = (2 * nl) ** order * nn**order
    if size > _TENSOR_LIMIT:
        raise ValueError(f"dense order-{order} tensor too large ({size} entries)")
    gaussian_zero = (
        getattr(getattr(source, "moments", None), "gaussian", False) and order > 2
    )
    data = {}
    for signs in sign_arrays(order):
        arr = np.zeros((nl,) * order + (nn,) * order, dtype=np.complex128)
        if not gaussian_zero:
            for lab in itertools.product(range(nl), repeat=order):
                for pos in itertools.combinations_with_replacement(range(nn), order):
                    tup = tuple(sorted(pos, reverse=True))
                    real_nodes = [node_list[p] for p in tup]
                    v = source.value(signs, lab, real_nodes, tie_half=False)
                    if v != 0.0:
                        arr[lab + tup] = v
        data[signs] = arr
    return CumulantTensor(order, source.labels, source.provenance, data)


# ---------------------------------------------------------------------------
# Superoperator strings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuperopString:
    """An ordered product of tagged superoperators with a scalar weight.

    factors are (tag, label index, node index), leftmost factor latest in
    time; apply() composes them onto a state right-to-left.
    """

    factors: tuple[tuple[SuperoperatorTag, int, int], ...]
    coefficient: complex

    def apply(self, rho: np.ndarray, ops_grid: np.ndarray) -> np.ndarray:
        out = rho
        for tag, lab, node in reversed(self.factors):
            out = apply_superop(tag, ops_grid[node, lab], out)
        return self.coefficient * out

    @property
    def leading_tag(self) -> SuperoperatorTag:
        return self.factors[0][0]


_TAG_OF_SIGN = {PLUS: SuperoperatorTag.PLUS, MINUS: SuperoperatorTag.MINUS}


def assemble_k(
    order: int,
    which: str,
    source,
    family: OperatorFamily,
    node_tuple: Sequence[int],
    drop_zero: bool = True,
) -> list[SuperopString]:
    """Generator strings at one ordered node tuple.

    which = "quantum": strings lead with the commutator tag and carry
    cumulants with leading '+' superscript; which = "stochastic": the leading
    tag ranges over both signs.  The i^order prefactor of the exponent is not
    included; callers building generators multiply by (-i)^order.
    """
    if order > 4:
        raise ValueError("string assembly capped at order 4")
    nodes = tuple(node_tuple)
    if any(a < b for a, b in zip(nodes[:-1], nodes[1:])):
        raise ValueError("node tuple must be in decreasing time order")
    n_lab = len(family.labels)
    out = []
    if which == "quantum":
        lead_signs: tuple[str, ...] = (MINUS,)
    elif which == "stochastic":
        lead_signs = (PLUS, MINUS)
    else:
        raise ValueError("which must be 'quantum' or 'stochastic'")
    for lead in lead_signs:
        for tail in sign_arrays(order - 1):
            l_arr = (lead,) + tail
            c_signs = tuple(flip(l) for l in l_arr)
            for lab in itertools.product(range(n_lab), repeat=order):
                coef = source.value(c_signs, lab, nodes)
                if drop_zero and coef == 0.0:
                    continue
                factors = tuple(
                    (_TAG_OF_SIGN[l], lab[p], nodes[p]) for p, l in enumerate(l_arr)
                )
                out.append(SuperopString(factors, complex(coef)))
    return out


# ---------------------------------------------------------------------------
# Trace-preservation condition and the two-unknown solvability system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TPConditionReport:
    max_abs: float
    per_order: dict
    tol: float

    @property
    def satisfied(self) -> bool:
        return self.max_abs <= self.tol


def tp_condition_check(
    source,
    max_order: int,
    tol: float = 1e-10,
    probe_nodes: Sequence[int] | None = None,
) -> TPConditionReport:
    """Largest cumulant with leading '-' superscript over orders <= max_order.

    All such cumulants vanishing is the condition for the plain averaged map
    to preserve the trace.  probe_nodes restricts the scan (orders >= 3 on a
    full grid are otherwise prohibitive); default is a 9-node subsample.
    """
    grid = source.grid
    if probe_nodes is None:
        step = max(1, grid.n_nodes // 8)
        probe_nodes = sorted(set(list(range(0, grid.n_nodes, step)) + [grid.n_nodes - 1]))
    per_order = {}
    worst = 0.0
    for n in range(1, max_order + 1):
        biggest = 0.0
        for tail in sign_arrays(n - 1):
            signs = (MINUS,) + tail
            for lab in itertools.product(range(source.n_labels), repeat=n):
                for pos in itertools.combinations_with_replacement(range(len(probe_nodes)), n):
                    tup = tuple(sorted((probe_nodes[p] for p in pos), reverse=True))
                    biggest = max(biggest, abs(source.value(signs, lab, tup)))
        per_order[n] = biggest
        worst = max(worst, biggest)
    return TPConditionReport(worst, per_order, tol)


@dataclass(frozen=True)
class SolvabilityReport:
    order: int
    solvable: bool
    residual: float
    k_plus: complex
    k_minus: complex


def solvability_system(order: int, c_values: Mapping[tuple[str, ...], complex],
                       tol: float = 1e-10) -> SolvabilityReport:
    """Least-squares solve of the two-unknown matching system at one tuple.

    c_values maps the sign tail (the cumulant superscripts after the leading
    '-') to the cumulant value.  Each equation assigns the value to K+ or K-
    according to the parity of the plus count of the underlying superoperator
    array; with 2^(order-1) equations and two unknowns the system is solvable
    only when values agree within each parity class.
    """
    if order > 4:
        raise ValueError("solvability check capped at order 4")
    classes: dict[int, list[complex]] = {0: [], 1: []}
    for tail in sign_arrays(order - 1):
        val = complex(c_values[tail])
        # leading superoperator sign is '+' (forced by the trace); tail
        # superoperators carry flipped superscripts
        q_plus = 1 + sum(1 for s in tail if s == MINUS)
        classes[q_plus % 2].append(val)
    sols = {}
    residual = 0.0
    scale = max((abs(v) for v in itertools.chain(*classes.values())), default=0.0)
    for parity, vals in classes.items():
        if vals:
            sol = sum(vals) / len(vals)
            residual = max(residual, max(abs(v - sol) for v in vals))
        else:
            sol = 0.0 + 0.0j
        sols[parity] = sol
    ok = residual <= tol * max(1.0, scale)
    return SolvabilityReport(order, ok, residual, sols.get(0, 0j), sols.get(1, 0j))


def solvability_from_source(source, order: int, node_tuple: Sequence[int],
                            label_idx: Sequence[int] | None = None,
                            tol: float = 1e-10) -> SolvabilityReport:
    lab = tuple(label_idx) if label_idx is not None else (0,) * order
    vals = {
        tail: source.value((MINUS,) + tail, lab, tuple(node_tuple))
        for tail in sign_arrays(order - 1)
    }
    return solvability_system(order, vals, tol)
