import numpy as np
import pytest

from robustfl import (
    CostModel,
    FederationConfig,
    HINGE_SVM,
    LINEAR_REGRESSION,
    LOGISTIC_BINARY,
    LabeledDataset,
    MatrixSizeError,
    ProtectionSpec,
    SolverConfig,
    UnsupportedModelError,
    build_upsilon,
    estimate_c_sm,
    gap_report,
    gradient,
    hessian_block,
    is_p_matrix,
    run_diagnostics,
    run_federation,
    synth_quadratic,
    vi_mapping,
    weight_grid,
)


def refute_p_matrix(m: np.ndarray, draws: int = 100_000, seed: int = 0) -> bool:
    """Definitional refuter: look for x != 0 with x_n (Mx)_n <= 0 for all n."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(draws, m.shape[0]))
    products = X * (X @ m.T)
    return bool(np.any(np.all(products <= 0, axis=1)))


class TestViMapping:
    def test_single_user_equals_gradient(self):
        rng = np.random.default_rng(0)
        model = CostModel(LINEAR_REGRESSION, 3)
        data = LabeledDataset(rng.normal(size=(8, 3)), rng.normal(size=8))
        w = rng.normal(size=3)
        out = vi_mapping(model, w, [data])
        assert out.shape == (1, 3)
        np.testing.assert_array_equal(out[0], gradient(model, w, data))

    def test_affine_for_quadratics(self):
        rng = np.random.default_rng(1)
        model = CostModel(LINEAR_REGRESSION, 2)
        users = [
            LabeledDataset(rng.normal(size=(6, 2)), rng.normal(size=6)) for _ in range(3)
        ]
        w = rng.normal(size=2)
        out = vi_mapping(model, w, users)
        for n, data in enumerate(users):
            H = hessian_block(model, np.zeros(2), data)
            linear = gradient(model, np.zeros(2), data)
            np.testing.assert_allclose(out[n], H @ w + linear, atol=1e-12)

    def test_perturbed_mapping_bounded(self):
        rng = np.random.default_rng(2)
        model = CostModel(LINEAR_REGRESSION, 2)
        users = [
            LabeledDataset(rng.normal(size=(5, 2)), rng.normal(size=5)) for _ in range(4)
        ]
        specs = [ProtectionSpec(p=2, epsilon=0.25) for _ in users]
        anchor = rng.normal(size=2)
        sup = 0.0
        for _ in range(30):
            w = rng.normal(size=2)
            plain = vi_mapping(model, w, users)
            perturbed = vi_mapping(model, w, users, specs=specs, anchor=anchor)
            sup = max(sup, float(np.linalg.norm(perturbed - plain, axis=1).max()))
        assert 0.0 < sup <= 0.25 + 1e-12

    def test_non_smooth_rejected(self):
        model = CostModel(HINGE_SVM, 2)
        data = LabeledDataset(np.ones((2, 2)), np.array([1, -1]))
        with pytest.raises(UnsupportedModelError):
            vi_mapping(model, np.zeros(2), [data])


class TestBuildUpsilon:
    def test_linear_regression_grid_independent(self):
        users, _ = synth_quadratic(3, 2, 0.5, seed=0)
        model = CostModel(LINEAR_REGRESSION, 2)
        small = build_upsilon(model, users, weight_grid(2, num=2, seed=1))
        large = build_upsilon(model, users, weight_grid(2, num=50, seed=2))
        np.testing.assert_allclose(small.alpha_min, large.alpha_min, atol=1e-12)

    def test_single_user_scalar(self):
        users, _ = synth_quadratic(1, 2, 0.0, seed=1)
        model = CostModel(LINEAR_REGRESSION, 2)
        ups = build_upsilon(model, users, weight_grid(2, num=4))
        assert ups.entries.shape == (1, 1)
        assert ups.entries[0, 0] >= 0

    def test_nested_grid_monotonicity(self):
        rng = np.random.default_rng(3)
        model = CostModel(LOGISTIC_BINARY, 2)
        users = [
            LabeledDataset(rng.normal(size=(10, 2)), rng.choice([-1, 1], size=10))
            for _ in range(2)
        ]
        coarse_grid = weight_grid(2, num=8, seed=5)
        fine_grid = np.vstack([coarse_grid, weight_grid(2, num=24, seed=6)])
        coarse = build_upsilon(model, users, coarse_grid)
        fine = build_upsilon(model, users, fine_grid)
        assert np.all(fine.alpha_min <= coarse.alpha_min + 1e-15)

    def test_protection_coupling_fills_offdiagonal(self):
        users, _ = synth_quadratic(3, 2, 0.5, seed=2)
        model = CostModel(LINEAR_REGRESSION, 2)
        specs = [ProtectionSpec(p=2, epsilon=e) for e in (0.1, 0.2, 0.3)]
        ups = build_upsilon(model, users, weight_grid(2, num=4), specs=specs)
        assert ups.entries[0, 1] == pytest.approx(-0.1)
        assert ups.entries[2, 0] == pytest.approx(-0.3)
        np.testing.assert_array_equal(np.diag(ups.beta_max), np.zeros(3))


class TestIsPMatrix:
    def test_identity(self):
        assert is_p_matrix(np.eye(4))

    def test_known_counterexample(self):
        # principal minors 1, 1, -3
        assert not is_p_matrix(np.array([[1.0, -2.0], [-2.0, 1.0]]))

    def test_nonpositive_diagonal(self):
        m = np.eye(3)
        m[1, 1] = 0.0
        assert not is_p_matrix(m)

    def test_nonsymmetric_p_matrix(self):
        assert is_p_matrix(np.array([[2.0, -1.0], [0.5, 2.0]]))

    def test_size_cap(self):
        with pytest.raises(MatrixSizeError):
            is_p_matrix(np.eye(13))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            is_p_matrix(np.ones((2, 3)))

    def test_agreement_with_definitional_refuter(self):
        rng = np.random.default_rng(7)
        refuted_false = 0
        for trial in range(60):
            if trial % 2 == 0:
                m = rng.normal(size=(5, 5))
            else:
                m = rng.normal(size=(5, 5)) + np.eye(5) * rng.uniform(2, 5)
            verdict = is_p_matrix(m)
            refuted = refute_p_matrix(m, draws=20_000, seed=trial)
            if verdict:
                assert not refuted  # a true P-matrix admits no violating x
            elif refuted:
                refuted_false += 1
        assert refuted_false > 0  # the refuter does find witnesses


class TestEstimateCsm:
    def test_exact_for_diagonal_hessian(self):
        # X'X/m = diag(2, 5) via two scaled axis samples
        X = np.array([[2.0, 0.0], [0.0, np.sqrt(10.0)]])
        model = CostModel(LINEAR_REGRESSION, 2)
        data = LabeledDataset(X, np.zeros(2))
        assert estimate_c_sm(model, data, weight_grid(2, num=4)) == pytest.approx(2.0)

    def test_matches_eigen_solve(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(30, 4))
        model = CostModel(LINEAR_REGRESSION, 4)
        data = LabeledDataset(X, rng.normal(size=30))
        expected = np.linalg.eigvalsh(X.T @ X / 30)[0]
        assert estimate_c_sm(model, data, weight_grid(4, num=2)) == pytest.approx(
            expected, abs=1e-8
        )

    def test_logistic_sampled_positive_on_bounded_grid(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 3))
        model = CostModel(LOGISTIC_BINARY, 3)
        data = LabeledDataset(X, rng.choice([-1, 1], size=40))
        grid = weight_grid(3, num=150, radius=1.0, seed=9)  # ~11k pairs
        estimate = estimate_c_sm(model, data, grid)
        assert estimate > 0

    def test_sampled_estimate_upper_bounds_tighter_grids(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(25, 2))
        model = CostModel(LOGISTIC_BINARY, 2)
        data = LabeledDataset(X, rng.choice([-1, 1], size=25))
        coarse = weight_grid(2, num=10, seed=1)
        fine = np.vstack([coarse, weight_grid(2, num=40, seed=2)])
        assert estimate_c_sm(model, data, fine) <= estimate_c_sm(model, data, coarse) + 1e-15


class TestGapReport:
    def test_identical_solutions(self):
        w = np.array([1.0, 2.0])
        report = gap_report(w, w.copy(), np.array([0.1, 0.1]), c_sm=1.0)
        assert report.delta == 0.0
        assert report.bound_holds

    def test_arithmetic_example(self):
        report = gap_report(
            np.array([0.0, 0.0]), np.array([3.0, 4.0]), np.array([1.0, 1.0]), c_sm=2.0
        )
        assert report.delta == pytest.approx(5.0)
        assert report.bound == pytest.approx(np.sqrt(2) / 2)
        assert not report.bound_holds

    def test_nonpositive_csm_rejected(self):
        with pytest.raises(ValueError):
            gap_report(np.zeros(2), np.ones(2), np.ones(2), c_sm=0.0)

    def test_delta_symmetry_and_triangle(self):
        rng = np.random.default_rng(8)
        a, b, c = rng.normal(size=(3, 4))
        eps = np.ones(2)
        d_ab = gap_report(a, b, eps, 1.0).delta
        d_ba = gap_report(b, a, eps, 1.0).delta
        d_ac = gap_report(a, c, eps, 1.0).delta
        d_cb = gap_report(c, b, eps, 1.0).delta
        assert d_ab == d_ba
        assert d_ab <= d_ac + d_cb + 1e-12


class TestRunDiagnostics:
    def make_solved_instance(self, eps, num_users=4, dim=2, seed=0):
        users, optimum = synth_quadratic(num_users, dim, 0.5, seed=seed)
        model = CostModel(LINEAR_REGRESSION, dim)
        specs = [ProtectionSpec(p=2, epsilon=eps) for _ in range(num_users)]
        config = FederationConfig(
            num_users=num_users,
            rounds=2000,
            local_config=SolverConfig(step_size=0.05, tolerance=1e-10, seed=seed),
            protection=tuple(specs),
            algorithm="robust-fed",
            local_epochs=5,
            convergence_tol=1e-9,
        )
        state = run_federation(model, users, config)
        return model, users, specs, optimum, state

    def test_report_fields(self):
        model, users, specs, optimum, state = self.make_solved_instance(0.05)
        report = run_diagnostics(model, users, specs, optimum, state.aggregate)
        assert report.c_sm_exact
        assert report.c_sm > 0
        assert report.gap is not None
        assert report.perturbation_sup <= max(s.epsilon for s in specs) + 1e-12
        assert 0.0 <= report.componentwise_le_fraction <= 1.0
        payload = report.to_dict()
        assert payload["p_matrix"] == report.p_matrix
        assert payload["bound_holds"] == report.gap.bound_holds

    def test_small_epsilon_p_matrix_and_bound(self):
        model, users, specs, optimum, state = self.make_solved_instance(0.01)
        report = run_diagnostics(model, users, specs, optimum, state.aggregate)
        assert report.p_matrix
        assert report.gap.bound_holds

    def test_unique_solution_when_p_matrix(self):
        model, users, specs, optimum, state = self.make_solved_instance(0.02)
        report = run_diagnostics(model, users, specs, optimum, state.aggregate)
        assert report.p_matrix
        # step large enough that the stopping residual sits well inside 10*tol
        config = FederationConfig(
            num_users=len(users),
            rounds=3000,
            local_config=SolverConfig(step_size=0.18, tolerance=1e-10, seed=0),
            protection=tuple(specs),
            algorithm="robust-fed",
            local_epochs=5,
            convergence_tol=1e-9,
        )
        rng = np.random.default_rng(123)
        finals = []
        for _ in range(10):
            init = rng.uniform(-1, 1, size=model.param_dim)
            finals.append(run_federation(model, users, config, init=init).aggregate)
        for w in finals[1:]:
            assert np.linalg.norm(w - finals[0]) <= 10 * config.convergence_tol
