import numpy as np
import pytest

from nmunravel.core import SIGMA_X, SIGMA_Z, TimeGrid, expm
from nmunravel.expansion import (
    ExpansionTerm,
    d_term,
    evolve_generator,
    generator_terms_at,
    inverse_terms,
    l_terms,
    per_order_norms,
    xi_term,
)
from nmunravel.gaussian import evolve_xi, memory_operators
from nmunravel.noise import NoisePath, drift_kernel, kernel_from_matrix, ou_model, sample, zero_drift

from conftest import qubit_family

PSI0 = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0)


def scenario(n_steps=60, t_max=1.2, amplitude=1.0, tau=0.8, seed=3, idx=0, h0_scale=0.5):
    grid = TimeGrid(t_max, n_steps)
    fam = qubit_family(h0=h0_scale * SIGMA_Z, x=SIGMA_X)
    model = ou_model(grid, amplitude, tau, kind="circular")
    kernel = drift_kernel(model)
    path = sample(model, seed, idx)
    return grid, fam, model, kernel, path


def scaled_inputs(path, kernel, g):
    """Noise scaled by g, kernel by g^2 (the coupling-strength grading)."""
    spath = NoisePath(g * path.values, path.labels, path.master_seed, path.index)
    sker = kernel_from_matrix(g**2 * kernel.values, kernel.labels)
    return spath, sker


def propagator_matrix(path, kernel, fam, grid, t_index=None):
    """Full propagator as a matrix, columns evolved basis states."""
    d = fam.dim
    cols = []
    for k in range(d):
        e = np.zeros(d, dtype=complex)
        e[k] = 1.0
        cols.append(evolve_xi(path, kernel, fam, grid, e).psi)
    psis = np.stack(cols, axis=-1)  # (nodes, d, d)
    return psis if t_index is None else psis[t_index]


class TestXiTerms:
    def test_order_zero_identity(self):
        grid, fam, _, kernel, path = scenario()
        t = xi_term(0, path, kernel, fam, grid)
        np.testing.assert_array_equal(t.matrix, np.eye(2))

    def test_order_one_is_first_dyson_term(self):
        grid, fam, _, kernel, path = scenario()
        t = xi_term(1, path, kernel, fam, grid)
        ops = fam.ops_on_grid(grid)
        expected = (-1j * grid.dt) * sum(
            path.values[0, s] * ops[s, 0] for s in range(grid.n_steps)
        )
        np.testing.assert_allclose(t.matrix, expected, atol=1e-14)

    def test_orders_one_two_match_finite_difference_oracle(self):
        # central finite differences of the propagator in the coupling
        grid, fam, _, kernel, path = scenario(n_steps=40)
        h = 1e-3
        xs = {}
        for g in (h, -h, 2 * h, -2 * h, 0.0):
            sp, sk = scaled_inputs(path, kernel, g)
            xs[g] = propagator_matrix(sp, sk, fam, grid, -1)
        d1 = (8 * (xs[h] - xs[-h]) - (xs[2 * h] - xs[-2 * h])) / (12 * h)
        d2 = (16 * (xs[h] + xs[-h]) - (xs[2 * h] + xs[-2 * h]) - 30 * xs[0.0]) / (12 * h**2)
        t1 = xi_term(1, path, kernel, fam, grid)
        t2 = xi_term(2, path, kernel, fam, grid)
        np.testing.assert_allclose(t1.matrix, d1, atol=1e-9)
        np.testing.assert_allclose(t2.matrix, d2 / 2.0, atol=1e-6)

    def test_order_two_zero_noise_pure_pairing(self):
        grid, fam, _, kernel, path = scenario()
        silent = NoisePath(np.zeros_like(path.values), path.labels, 0, 0)
        t = xi_term(2, silent, kernel, fam, grid)
        # the pairing term is minus the summed memory operators of the
        # propagator discretization
        drift = memory_operators(kernel, fam, grid)
        expected = -grid.dt * drift.sum(axis=0)
        np.testing.assert_allclose(t.matrix, expected, atol=1e-13)

    @pytest.mark.parametrize("order", [1, 2, 3, 4])
    def test_noise_grading_homogeneity(self, order):
        grid, fam, _, kernel, path = scenario(n_steps=24)
        lam = 0.7
        base = xi_term(order, path, kernel, fam, grid).matrix
        sp, sk = scaled_inputs(path, kernel, lam)
        scaled = xi_term(order, sp, sk, fam, grid).matrix
        np.testing.assert_allclose(scaled, lam**order * base, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_family_grading_homogeneity(self, order):
        grid, fam, _, kernel, path = scenario(n_steps=24)
        lam = 1.3
        base = xi_term(order, path, kernel, fam, grid).matrix
        scaled = xi_term(order, path, kernel, fam.scaled(lam), grid).matrix
        np.testing.assert_allclose(scaled, lam**order * base, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("n_kept", [2, 3])
    def test_series_residual_scaling(self, n_kept):
        grid, fam, _, kernel, path = scenario(n_steps=120, seed=7)
        terms = [xi_term(n, path, kernel, fam, grid).matrix for n in range(n_kept + 1)]
        gs = [0.05, 0.1, 0.2]
        res = []
        for g in gs:
            sp, sk = scaled_inputs(path, kernel, g)
            full = propagator_matrix(sp, sk, fam, grid, -1)
            approx = sum(g**n * terms[n] for n in range(n_kept + 1))
            res.append(np.max(np.abs(full - approx)))
        slope = np.polyfit(np.log(gs), np.log(res), 1)[0]
        assert slope == pytest.approx(n_kept + 1, abs=0.3)


class TestDTerms:
    def test_lowest_memory_term(self):
        grid, fam, _, kernel, path = scenario()
        t = d_term(2, path, kernel, fam, grid)
        ops = fam.ops_on_grid(grid)
        w = grid.causal_weights(grid.n_steps)
        expected = -1j * ops[-1, 0] @ np.tensordot(
            w * kernel.values[0, 0, grid.n_steps], ops[:, 0], axes=(0, 0)
        )
        np.testing.assert_allclose(t.matrix, expected, atol=1e-13)
        assert np.all(d_term(1, path, kernel, fam, grid).matrix == 0)

    def test_zero_kernel_all_vanish(self):
        grid, fam, _, kernel, path = scenario()
        nothing = zero_drift(fam.labels, grid)
        for n in (2, 3, 4):
            assert np.all(d_term(n, path, nothing, fam, grid).matrix == 0)

    def test_forward_difference_residual_tracks_d2(self):
        # i (Xi_{s+1} - Xi_s)/dt - f phi Xi_s equals d_2 Xi_s up to the
        # quadratic slice remainder, which scales like g^2 dt
        grid, fam, _, kernel, path = scenario(n_steps=80)
        s = 50
        gs = [0.05, 0.1, 0.2]
        rs = []
        for g in gs:
            sp, sk = scaled_inputs(path, kernel, g)
            psis = propagator_matrix(sp, sk, fam, grid)
            fd = 1j * (psis[s + 1] - psis[s]) / grid.dt
            ops = fam.ops_on_grid(grid)
            fd -= g * path.values[0, s] * ops[s, 0] @ psis[s]
            dmat = d_term(2, sp, sk, fam, grid, t_index=s).matrix
            rs.append(np.max(np.abs(fd - dmat @ psis[s])))
        slope = np.polyfit(np.log(gs), np.log(rs), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.35)


class TestInverse:
    def test_low_order_formal_identities(self):
        grid, fam, _, kernel, path = scenario(n_steps=30)
        xis = [xi_term(n, path, kernel, fam, grid) for n in range(3)]
        ms = inverse_terms(xis)
        np.testing.assert_allclose(ms[1], -xis[1].matrix, atol=1e-15)
        np.testing.assert_allclose(
            ms[2], xis[1].matrix @ xis[1].matrix - xis[2].matrix, atol=1e-13
        )

    def test_inverse_contract_scaling(self):
        grid, fam, _, kernel, path = scenario(n_steps=60)
        n_kept = 3
        xis = [xi_term(n, path, kernel, fam, grid) for n in range(n_kept + 1)]
        ms = inverse_terms(xis)
        gs = [0.05, 0.1, 0.2]
        res = []
        for g in gs:
            tot_xi = sum(g**n * xis[n].matrix for n in range(n_kept + 1))
            tot_m = sum(g**n * ms[n] for n in range(n_kept + 1))
            res.append(np.max(np.abs(tot_m @ tot_xi - np.eye(2))))
        slope = np.polyfit(np.log(gs), np.log(res), 1)[0]
        assert slope == pytest.approx(n_kept + 1, abs=0.35)


class TestGeneratorTerms:
    def test_lowest_orders(self):
        grid, fam, _, kernel, path = scenario(n_steps=30)
        xis = [xi_term(n, path, kernel, fam, grid) for n in range(2)]
        ds = [d_term(n, path, kernel, fam, grid) for n in (1, 2)]
        ls = l_terms(ds, xis)
        assert np.all(ls[0] == 0)  # order 1: no memory at leading order
        np.testing.assert_allclose(ls[1], ds[1].matrix, atol=1e-15)

    def test_commuting_family_truncates_exactly(self):
        grid = TimeGrid(1.2, 40)
        fam = qubit_family(h0=np.zeros((2, 2)), z=SIGMA_Z)
        model = ou_model(grid, 0.5, 0.7, kind="circular", label="z")
        kernel = drift_kernel(model)
        path = sample(model, 5, 2)
        end = grid.n_steps
        ls = generator_terms_at(end, 4, path, kernel, fam, grid)
        ops = fam.ops_on_grid(grid)
        w = grid.causal_weights(end)
        expected_l2 = -1j * ops[end, 0] @ np.tensordot(
            w * kernel.values[0, 0, end], ops[:, 0], axes=(0, 0)
        )
        np.testing.assert_allclose(ls[1], expected_l2, atol=1e-13)
        assert np.max(np.abs(ls[2])) < 1e-12
        # the remaining order is a pure coincidence-set correction, O(dt)
        # relative to the generic term size
        scale = np.max(np.abs(expected_l2))
        assert np.max(np.abs(ls[3])) < 0.2 * grid.dt * scale / grid.dt * grid.dt

    @pytest.mark.parametrize("n_kept", [2, 3])
    def test_generator_residual_scaling(self, n_kept):
        grid, fam, _, kernel, path = scenario(n_steps=100, t_max=1.0, seed=11)
        gs = [0.05, 0.1, 0.2]
        res = []
        for g in gs:
            sp, sk = scaled_inputs(path, kernel, g)
            ref = evolve_xi(sp, sk, fam, grid, PSI0)
            gen = evolve_generator(sp, sk, fam, grid, PSI0, n_kept)
            res.append(np.linalg.norm(ref.psi[-1] - gen.psi[-1]))
        slope = np.polyfit(np.log(gs), np.log(res), 1)[0]
        assert slope == pytest.approx(n_kept + 1, abs=0.3)

    def test_per_order_norm_report(self):
        grid, fam, _, kernel, path = scenario(n_steps=20)
        terms = [xi_term(n, path, kernel, fam, grid) for n in range(3)]
        norms = per_order_norms(terms)
        assert set(norms) == {0, 1, 2}
        assert norms[0] == 1.0
