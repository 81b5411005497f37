import itertools

import numpy as np
import pytest

from nmunravel.core import (
    SIGMA_X,
    SIGMA_Z,
    HermitianOperator,
    OperatorFamily,
    TimeGrid,
    choi_of,
    cptp_report,
    random_density_matrix,
)
from nmunravel.cumulants import (
    MINUS,
    PLUS,
    CumulantSource,
    SyntheticCumulantSource,
    quantum_gaussian_source,
    stochastic_gaussian_source,
)
from nmunravel.maps import (
    BosonMode,
    EnvironmentSpec,
    MapOnGrid,
    ResourceLimitError,
    bosonic_environment,
    build_tp_correction,
    cumulant_map,
    dephasing_decay,
    env_correlation,
    kernel_tp_correction,
    oracle_map,
    tp_defect,
)
from nmunravel.noise import drift_kernel, ou_model

from conftest import qubit_family


def one_mode_env(coupling=0.6, omega=1.1, dim=10, label="x", occupation=0.0):
    return bosonic_environment([BosonMode(omega, dim, {label: coupling}, occupation)])


class TestEnvironment:
    def test_vacuum_correlation_closed_form(self):
        c, omega = 0.6, 1.1
        grid = TimeGrid(3.0, 30)
        env = one_mode_env(c, omega)
        means, d_corr = env_correlation(env, ["x"], grid)
        np.testing.assert_allclose(means, 0, atol=1e-12)
        t = grid.nodes
        expected = 0.5 * c**2 * np.exp(-1j * omega * (t[:, None] - t[None, :]))
        np.testing.assert_allclose(d_corr[0, 0], expected, atol=1e-10)

    def test_thermal_correlation_closed_form(self):
        c, omega, nbar = 0.4, 0.9, 0.7
        grid = TimeGrid(2.0, 20)
        env = one_mode_env(c, omega, dim=24, occupation=nbar)
        _, d_corr = env_correlation(env, ["x"], grid)
        t = grid.nodes
        dt = t[:, None] - t[None, :]
        expected = 0.5 * c**2 * ((nbar + 1) * np.exp(-1j * omega * dt) + nbar * np.exp(1j * omega * dt))
        np.testing.assert_allclose(d_corr[0, 0], expected, atol=1e-6)

    def test_dimension_caps(self):
        with pytest.raises(ResourceLimitError):
            bosonic_environment([BosonMode(1.0, 600, {"x": 1.0})])

    def test_multi_mode_additive_correlation(self):
        grid = TimeGrid(1.0, 8)
        env12 = bosonic_environment(
            [BosonMode(1.0, 5, {"x": 0.3}), BosonMode(1.7, 5, {"x": 0.4})]
        )
        _, d12 = env_correlation(env12, ["x"], grid)
        _, d1 = env_correlation(one_mode_env(0.3, 1.0, 5), ["x"], grid)
        _, d2 = env_correlation(one_mode_env(0.4, 1.7, 5), ["x"], grid)
        np.testing.assert_allclose(d12[0, 0], d1[0, 0] + d2[0, 0], atol=1e-10)


class TestOracleMap:
    def test_zero_coupling_identity(self):
        grid = TimeGrid(1.0, 10)
        fam = qubit_family(h0=0.5 * SIGMA_Z, x=SIGMA_X)
        env = one_mode_env(0.0, 1.0, 4)
        mog = oracle_map(fam, env, grid)
        for m in mog.mats:
            np.testing.assert_allclose(m, np.eye(4), atol=1e-12)

    def test_dephasing_populations_constant(self):
        grid = TimeGrid(3.0, 60)
        fam = qubit_family(h0=np.zeros((2, 2)), z=SIGMA_Z)
        env = bosonic_environment([BosonMode(1.1, 12, {"z": 0.6})])
        mog = oracle_map(fam, env, grid)
        rho0 = np.array([[0.3, 0.25 + 0.1j], [0.25 - 0.1j, 0.7]])
        for i in range(grid.n_nodes):
            rho = mog.apply(i, rho0)
            assert abs(rho[0, 0] - 0.3) < 1e-8
            assert abs(rho[1, 1] - 0.7) < 1e-8

    def test_dephasing_coherence_matches_analytic_decay(self):
        c, omega = 0.6, 1.1
        grid = TimeGrid(3.0, 150)
        fam = qubit_family(h0=np.zeros((2, 2)), z=SIGMA_Z)
        env = bosonic_environment([BosonMode(omega, 14, {"z": c})])
        mog = oracle_map(fam, env, grid)
        rho0 = 0.5 * np.ones((2, 2), dtype=complex)
        t = grid.nodes
        gamma_analytic = 2.0 * c**2 * (1 - np.cos(omega * t)) / omega**2
        coh = np.array([mog.apply(i, rho0)[0, 1] for i in range(grid.n_nodes)])
        np.testing.assert_allclose(np.abs(coh) / 0.5, np.exp(-gamma_analytic), atol=2e-4)
        # the quadrature version of the decay exponent agrees with the
        # closed form at second order in dt
        _, d_corr = env_correlation(env, ["z"], grid)
        gamma_q = dephasing_decay(d_corr, grid)
        np.testing.assert_allclose(gamma_q, gamma_analytic, atol=5e-4)

    def test_oracle_is_cptp(self):
        grid = TimeGrid(2.0, 25)
        fam = qubit_family(h0=0.4 * SIGMA_Z, x=SIGMA_X)
        env = one_mode_env(0.5, 1.0, 8)
        mog = oracle_map(fam, env, grid)
        assert tp_defect(mog) <= 1e-8
        for i in (5, 12, 25):
            rep = cptp_report(choi_of(mog.map_fn(i), 2), mog.map_fn(i), tol=1e-8)
            assert rep.min_eig >= -1e-8
            assert rep.passed

    def test_refinement_report(self):
        grid = TimeGrid(1.0, 50)
        fam = qubit_family(h0=0.4 * SIGMA_Z, x=SIGMA_X)
        env = one_mode_env(0.5, 1.2, 6)
        mog = oracle_map(fam, env, grid, check_refinement=True)
        assert mog.refinement_defect is not None
        assert mog.refinement_defect < 1e-4

    def test_joint_cap(self):
        grid = TimeGrid(1.0, 4)
        h0 = np.zeros((16, 16))
        ops = {"x": HermitianOperator(np.diag(np.arange(16.0)))}
        fam = OperatorFamily(HermitianOperator(h0), ops)
        env = one_mode_env(0.1, 1.0, 400)
        with pytest.raises(ResourceLimitError):
            oracle_map(fam, env, grid)


class TestCumulantMap:
    def test_zero_cumulants_identity(self):
        grid = TimeGrid(1.0, 12)
        fam = qubit_family()
        src = SyntheticCumulantSource(lambda s, l, n: 0.0, fam.labels, grid)
        mog = cumulant_map(3, src, fam, grid)
        for m in mog.mats:
            np.testing.assert_allclose(m, np.eye(4), atol=1e-13)

    def test_quantum_gaussian_order2_trace_preserving(self):
        grid = TimeGrid(2.0, 40)
        fam = qubit_family(h0=0.3 * SIGMA_Z, x=SIGMA_X)
        env = one_mode_env(0.5, 1.0, 8)
        _, d_corr = env_correlation(env, ["x"], grid)
        src = CumulantSource(quantum_gaussian_source(d_corr), fam.labels, grid, "quantum")
        mog = cumulant_map(2, src, fam, grid)
        assert tp_defect(mog) <= 1e-8

    def test_weak_coupling_cubic_convergence_to_oracle(self):
        omega = 1.0
        grid = TimeGrid(2.0, 40)
        fam = qubit_family(h0=0.3 * SIGMA_Z, x=SIGMA_X)
        couplings = [0.05, 0.1, 0.2]
        _, d_unit = env_correlation(one_mode_env(1.0, omega, 8), ["x"], grid)
        dists = []
        for g in couplings:
            env = one_mode_env(g, omega, 8)
            fine = oracle_map(fam, env, grid.refine(4))
            oracle = MapOnGrid(fine.mats[::4], 2, grid)
            src = CumulantSource(
                quantum_gaussian_source(g**2 * d_unit), fam.labels, grid, "quantum"
            )
            approx = cumulant_map(2, src, fam, grid)
            dists.append(np.max(approx.node_distance(oracle)))
        slope = np.polyfit(np.log(couplings), np.log(dists), 1)[0]
        # at least third order; for a Gaussian environment the order-3
        # cumulants vanish identically, so the residual is even smaller
        # (splitting error ~ g^4 dt) and the fitted slope may exceed 3
        assert slope >= 2.6

    def test_synthetic_order3_still_trace_preserving_for_quantum_structure(self):
        # with vanishing leading-minus cumulants every string leads with a
        # commutator and the stepped map stays TP
        grid = TimeGrid(1.0, 8)
        fam = qubit_family()

        def cum(signs, labels, nodes):
            if signs[0] == MINUS:
                return 0.0
            return 0.3 / (1 + nodes[0] - nodes[-1])

        src = SyntheticCumulantSource(cum, fam.labels, grid)
        mog = cumulant_map(3, src, fam, grid)
        assert tp_defect(mog) <= 1e-10


class TestTPCorrection:
    def test_real_noise_correction_vanishes(self):
        grid = TimeGrid(1.0, 6)
        fam = qubit_family()
        model = ou_model(grid, 0.5, 1.0, kind="real")
        src = CumulantSource(stochastic_gaussian_source(model), fam.labels, grid, "stochastic")
        for order in (1, 2):
            corr = build_tp_correction(order, src, fam, grid)
            arrs = corr.anti if isinstance(corr.anti, np.ndarray) else corr.anti.values()
            assert np.max(np.abs(np.asarray(list(arrs) if not isinstance(corr.anti, np.ndarray) else corr.anti))) == 0.0

    def test_order1_mean_shift_counterterm(self):
        grid = TimeGrid(1.0, 6)
        fam = qubit_family(h0=np.zeros((2, 2)), x=SIGMA_X)
        mu = 0.3 + 0.45j
        model = ou_model(grid, 0.2, 1.0, kind="circular", mean=mu)
        src = CumulantSource(stochastic_gaussian_source(model), fam.labels, grid, "stochastic")
        corr = build_tp_correction(1, src, fam, grid)
        assert corr.ah_defect < 1e-12
        for i in range(grid.n_nodes):
            np.testing.assert_allclose(
                corr.anti[i], -2j * mu.imag * SIGMA_X, atol=1e-12
            )

    def test_order2_matches_drift_kernel_assembly(self):
        grid = TimeGrid(1.5, 10)
        fam = qubit_family(h0=0.4 * SIGMA_Z, x=SIGMA_X)
        model = ou_model(grid, 0.5, 0.8, kind="circular")
        src = CumulantSource(stochastic_gaussian_source(model), fam.labels, grid, "stochastic")
        corr = build_tp_correction(2, src, fam, grid)
        assert corr.ah_defect < 1e-12
        ker = kernel_tp_correction(drift_kernel(model), fam, grid)
        np.testing.assert_allclose(corr.anti, ker.anti, atol=1e-12)
        # anti-Hermiticity of every stored block
        for i in range(grid.n_nodes):
            for j in range(i + 1):
                blk = corr.anti[i, j]
                np.testing.assert_allclose(blk, -blk.conj().T, atol=1e-12)
        # the Hermitian matching freedom is Hermitian
        for i in range(grid.n_nodes):
            for j in range(i + 1):
                blk = ker.herm[i, j]
                np.testing.assert_allclose(blk, blk.conj().T, atol=1e-12)


def test_map_csv_round_trip(tmp_path):
    grid = TimeGrid(1.0, 3)
    fam = qubit_family(h0=0.2 * SIGMA_Z, x=SIGMA_X)
    env = one_mode_env(0.4, 1.0, 4)
    mog = oracle_map(fam, env, grid)
    p = tmp_path / "map.csv"
    mog.to_csv(p)
    back = MapOnGrid.from_csv(p, grid)
    np.testing.assert_array_equal(back.mats, mog.mats)
