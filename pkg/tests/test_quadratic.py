import numpy as np
import pytest

from nmunravel.core import (
    SIGMA_X,
    SIGMA_Z,
    HermitianOperator,
    OperatorFamily,
    TimeGrid,
    boson_ops,
)
from nmunravel.gaussian import evolve_xi, mc_distance_bound, run_ensemble, trace_distance
from nmunravel.maps import BosonMode, bosonic_environment, env_correlation, oracle_map
from nmunravel.noise import drift_kernel, ou_model, sample
from nmunravel.quadratic import (
    ContractionKernel,
    NonConvergent,
    NotCNumber,
    evolve_timelocal,
    fidelity,
    kernel_recursion,
    run_timelocal_ensemble,
    timelocal_generator,
    timelocal_operators,
    wick_contractions,
)

from conftest import qubit_family


def oscillator_family(omega=1.0, dim=12, static=False):
    a, adag = boson_ops(dim)
    x = (a + adag) / np.sqrt(2.0)
    h0 = np.zeros((dim, dim)) if static else omega * (adag @ a)
    return OperatorFamily(HermitianOperator(h0), {"x": HermitianOperator(x)})


def ground_state(dim):
    psi = np.zeros(dim, dtype=complex)
    psi[0] = 1.0
    return psi


class TestWickContractions:
    def test_oscillator_sine_closed_form(self):
        omega = 1.3
        grid = TimeGrid(2.0, 24)
        fam = oscillator_family(omega, dim=10)
        ck = wick_contractions(fam, grid)
        t = grid.nodes
        for i in range(grid.n_nodes):
            for j in range(i + 1):
                expected = -1j * np.sin(omega * (t[i] - t[j]))
                assert ck.values[0, 0, i, j] == pytest.approx(expected, abs=1e-8)
        # at omega (t - s) = pi/2 the magnitude is 1/(m omega) = 1 in these units
        steps_quarter = round(np.pi / 2 / omega / grid.dt)
        i = steps_quarter + 2
        assert abs(ck.values[0, 0, i, 2]) == pytest.approx(
            abs(np.sin(omega * grid.dt * steps_quarter)), abs=1e-8
        )

    def test_equal_times_single_label_zero(self):
        grid = TimeGrid(1.0, 8)
        fam = oscillator_family(0.9, dim=8)
        ck = wick_contractions(fam, grid)
        np.testing.assert_allclose(np.diagonal(ck.values[0, 0]), 0, atol=1e-12)

    def test_qubit_family_rejected(self):
        grid = TimeGrid(1.0, 4)
        fam = qubit_family(h0=0.7 * SIGMA_Z, x=SIGMA_X)
        with pytest.raises(NotCNumber):
            wick_contractions(fam, grid)

    def test_antisymmetry_with_slot_and_label_swap(self):
        omega = 1.1
        grid = TimeGrid(1.5, 12)
        dim = 10
        a, adag = boson_ops(dim)
        x = (a + adag) / np.sqrt(2.0)
        p = 1j * (adag - a) / np.sqrt(2.0)
        fam = OperatorFamily(
            HermitianOperator(omega * (adag @ a)),
            {"x": HermitianOperator(x), "p": HermitianOperator(p)},
        )
        ck = wick_contractions(fam, grid)
        ops = fam.ops_on_grid(grid)
        for i in range(0, grid.n_nodes, 3):
            for j in range(0, i + 1, 2):
                for b in range(2):
                    for a_ in range(2):
                        comm_swapped = ops[j, a_] @ ops[i, b] - ops[i, b] @ ops[j, a_]
                        assert ck.values[b, a_, i, j] == pytest.approx(
                            -comm_swapped[0, 0], abs=1e-8
                        )


class TestKernelRecursion:
    def test_commuting_family_truncates(self):
        grid = TimeGrid(1.0, 16)
        fam = oscillator_family(1.0, dim=8, static=True)  # h0 = 0: contractions vanish
        ck = wick_contractions(fam, grid)
        assert ck.is_zero()
        model = ou_model(grid, 0.3, 1.0, kind="circular", label="x")
        dk = drift_kernel(model)
        series = kernel_recursion(dk, ck, grid)
        assert series.n_orders >= 1
        np.testing.assert_array_equal(series.orders[0], dk.values)
        for arr in series.orders[1:]:
            np.testing.assert_allclose(arr, 0, atol=1e-300)
        np.testing.assert_allclose(series.total, dk.values, atol=1e-300)

    def test_first_order_is_input_bitwise(self):
        grid = TimeGrid(2.0, 20)
        fam = oscillator_family(1.0, dim=10)
        ck = wick_contractions(fam, grid)
        model = ou_model(grid, 0.04, 1.0, kind="circular", label="x")
        dk = drift_kernel(model)
        series = kernel_recursion(dk, ck, grid)
        assert np.array_equal(series.orders[0], dk.values)

    def test_per_order_coupling_scaling(self):
        # noise amplitude scales as g^2; each order carries one more kernel
        # factor, so sup norms scale as g^(2n) (slope 2 per order, exactly)
        grid = TimeGrid(2.0, 24)
        fam = oscillator_family(1.0, dim=10)
        ck = wick_contractions(fam, grid)
        gs = [0.05, 0.1, 0.2]
        sups = []
        for g in gs:
            model = ou_model(grid, g**2, 1.0, kind="circular", label="x")
            series = kernel_recursion(drift_kernel(model), ck, grid, n_max=4, eps=1e-300)
            sups.append(series.sup_norms[:4])
        sups = np.array(sups)
        for n in range(4):
            slope = np.polyfit(np.log(gs), np.log(sups[:, n]), 1)[0]
            assert slope == pytest.approx(2.0 * (n + 1), abs=1e-6)
        # one more order multiplies the scaling by g^2: slope exactly 2 per order
        for n in range(1, 4):
            inc = np.polyfit(np.log(gs), np.log(sups[:, n] / sups[:, n - 1]), 1)[0]
            assert inc == pytest.approx(2.0, abs=1e-6)

    def test_geometric_decay_weak_coupling(self):
        grid = TimeGrid(2.0, 32)
        fam = oscillator_family(1.0, dim=10)
        ck = wick_contractions(fam, grid)
        model = ou_model(grid, 0.04, 1.0, kind="circular", label="x")
        series = kernel_recursion(drift_kernel(model), ck, grid)
        assert series.converged
        ratios = [b / a for a, b in zip(series.sup_norms, series.sup_norms[1:])]
        assert all(r < 0.5 for r in ratios)

    def test_nonconvergent_strong_coupling(self):
        grid = TimeGrid(4.0, 40)
        fam = oscillator_family(1.0, dim=10)
        ck = wick_contractions(fam, grid)
        model = ou_model(grid, 30.0, 2.0, kind="circular", label="x")
        with pytest.raises(NonConvergent):
            kernel_recursion(drift_kernel(model), ck, grid, n_max=12)

    def test_csv_dump(self, tmp_path):
        grid = TimeGrid(1.0, 8)
        fam = oscillator_family(1.0, dim=8)
        ck = wick_contractions(fam, grid)
        model = ou_model(grid, 0.04, 1.0, kind="circular", label="x")
        series = kernel_recursion(drift_kernel(model), ck, grid)
        p = tmp_path / "series.csv"
        series.to_csv(p)
        header = open(p).readline().strip()
        assert header == "order,i,j,alpha,beta,Re,Im"


class TestTimeLocal:
    def test_zero_kernel_bare_noise_generator(self):
        grid = TimeGrid(1.0, 10)
        fam = oscillator_family(1.0, dim=8)
        ck = wick_contractions(fam, grid)
        from nmunravel.noise import zero_drift

        series = kernel_recursion(zero_drift(("x",), grid), ck, grid)
        tl = timelocal_operators(series, ck, fam, grid)
        model = ou_model(grid, 0.1, 1.0, kind="circular", label="x")
        path = sample(model, 3, 1)
        ops = fam.ops_on_grid(grid)
        for i in (0, 4, 9):
            g = timelocal_generator(i, path, tl)
            np.testing.assert_allclose(g, -1j * path.values[0, i] * ops[i, 0], atol=1e-14)

    def test_commuting_family_reduces_to_nonlocal_evolution(self):
        # h0 = 0 makes the contraction vanish; the time-local stepper then
        # evolves with the exact dephasing generator -i f phi - f^2 K-sum and
        # coincides with the ordered-product scheme
        grid = TimeGrid(1.5, 40)
        fam = oscillator_family(1.0, dim=6, static=True)
        ck = wick_contractions(fam, grid)
        model = ou_model(grid, 0.3, 0.8, kind="circular", label="x")
        dk = drift_kernel(model)
        series = kernel_recursion(dk, ck, grid)
        path = sample(model, 11, 7)
        psi0 = ground_state(6)
        # spread the state so the coupling acts nontrivially
        psi0 = np.ones(6, dtype=complex) / np.sqrt(6)
        a = evolve_xi(path, dk, fam, grid, psi0)
        b = evolve_timelocal(path, series, ck, fam, grid, psi0)
        np.testing.assert_allclose(a.psi, b.psi, atol=1e-12)

    def test_per_path_equivalence_oscillator(self):
        grid = TimeGrid(2.0, 160)
        fam = oscillator_family(1.0, dim=12)
        ck = wick_contractions(fam, grid)
        model = ou_model(grid, 0.04, 1.0, kind="circular", label="x")  # g = 0.2
        dk = drift_kernel(model)
        series = kernel_recursion(dk, ck, grid)
        assert series.converged
        psi0 = ground_state(12)
        tl = timelocal_operators(series, ck, fam, grid)
        for idx in range(6):
            path = sample(model, 21, idx)
            a = evolve_xi(path, dk, fam, grid, psi0)
            b = evolve_timelocal(path, series, ck, fam, grid, psi0, tl_ops=tl)
            assert fidelity(a.psi[-1], b.psi[-1]) >= 1 - 1e-4

    def test_timelocal_ensemble_matches_oracle(self):
        omega = 1.0
        grid = TimeGrid(2.0, 80)
        dim = 8
        fam = oscillator_family(omega, dim=dim)
        env = bosonic_environment([BosonMode(1.4, 6, {"x": 0.2})])
        oracle = oracle_map(fam, env, grid)
        means, d_corr = env_correlation(env, ["x"], grid)
        from nmunravel.gaussian import match_bath

        model, dk = match_bath(d_corr, means, grid, ["x"])
        ck = wick_contractions(fam, grid)
        series = kernel_recursion(dk, ck, grid)
        psi0 = ground_state(dim)
        ens = run_timelocal_ensemble(model, series, ck, fam, grid, psi0, 2000, master_seed=5)
        rho0 = np.outer(psi0, psi0.conj())
        for node in (40, 80):
            dist = trace_distance(ens.rho_bar[node], oracle.apply(node, rho0))
            assert dist <= max(3.0 * mc_distance_bound(ens, node), 0.02)
