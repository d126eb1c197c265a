"""SKI operator, CG solver, GP fit/predict, and the exact dense oracle."""

import json

import numpy as np
import pytest
import scipy.sparse

from skigrid.grids import build_sparse_grid
from skigrid.interp import BaseRule, WeightMatrix, assemble_W
from skigrid.kernels import ProductKernel
from skigrid.sgmvm import build_plan, sg_mvm_batched
from skigrid.ski import (
    CgConfig,
    CgFailure,
    CgStats,
    DomainMap,
    GpConfig,
    SkiOperator,
    cg_solve,
    exact_gp_oracle,
    fit,
    load_model,
    materialize_ski,
    predict_mean,
    read_xy_csv,
    ski_matvec,
)


def small_instance(seed, n=100, ell=3, d=2, sigma2=0.1):
    rng = np.random.default_rng(seed)
    kernel = ProductKernel(
        lengthscales=rng.uniform(0.25, 0.8, d),
        output_scale=rng.uniform(0.5, 2.0),
    )
    grid = build_sparse_grid(ell, d)
    plan = build_plan(ell, d, kernel)
    X = rng.uniform(0, 1, (n, d))
    W = assemble_W(X, grid)
    op = SkiOperator(W, lambda v: sg_mvm_batched(plan, v), sigma2,
                     k0=kernel.output_scale)
    dense = materialize_ski(W, kernel.pairwise(grid.points()), sigma2)
    return rng, op, dense


class _DiagOp:
    def __init__(self, diag):
        self.diag = np.asarray(diag, dtype=np.float64)

    def matvec(self, v):
        return self.diag * v

    def jacobi_diagonal(self):
        return self.diag.copy()


class TestSkiOperator:
    def test_matvec_matches_dense_materialization(self):
        for seed in range(3):
            rng, op, dense = small_instance(seed)
            v = rng.standard_normal(op.n)
            got = ski_matvec(op, v)
            assert np.abs(got - dense @ v).max() < 1e-10

    def test_zero_weight_rows_leave_noise_only(self):
        # all-zero W: the operator degenerates to sigma^2 I
        empty = scipy.sparse.csr_matrix((4, 17))
        W = WeightMatrix(empty, BaseRule("simplicial"), "rect", 1, 2)
        op = SkiOperator(W, lambda v: v, sigma2=1.0)
        v = np.arange(4.0)
        np.testing.assert_array_equal(op.matvec(v), v)

    def test_unit_vector_probes_symmetric(self):
        _, op, _ = small_instance(7)
        ei = np.zeros(op.n)
        ej = np.zeros(op.n)
        ei[3] = 1.0
        ej[11] = 1.0
        assert op.matvec(ei)[11] == pytest.approx(op.matvec(ej)[3], rel=1e-12)

    def test_quadratic_form_dominates_noise(self):
        rng, op, _ = small_instance(9, sigma2=0.3)
        for _ in range(5):
            v = rng.standard_normal(op.n)
            assert v @ op.matvec(v) >= 0.3 * (v @ v) - 1e-8

    def test_negative_sigma_rejected(self):
        empty = scipy.sparse.csr_matrix((2, 3))
        W = WeightMatrix(empty, BaseRule("simplicial"), "rect", 1, 1)
        with pytest.raises(ValueError):
            SkiOperator(W, lambda v: v, sigma2=-0.1)


class TestCg:
    def test_zero_rhs(self):
        alpha, stats = cg_solve(_DiagOp([2.0, 3.0]), np.zeros(2))
        np.testing.assert_array_equal(alpha, 0.0)
        assert stats.converged and stats.n_iters == 0

    def test_scaled_identity_one_iteration(self):
        y = np.array([1.0, -2.0, 0.5])
        alpha, stats = cg_solve(_DiagOp([4.0, 4.0, 4.0]), y)
        np.testing.assert_allclose(alpha, y / 4.0, rtol=1e-14)
        assert stats.converged and stats.n_iters == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_matches_direct_dense_solve(self):
        rng, op, dense = small_instance(13)
        y = rng.standard_normal(op.n)
        alpha, stats = cg_solve(op, y, CgConfig(rel_tolerance=1e-10,
                                                max_iters=500))
        assert stats.converged
        np.testing.assert_allclose(alpha, np.linalg.solve(dense, y),
                                   atol=1e-6)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_budget_exhaustion_reported_not_raised(self):
        rng, op, _ = small_instance(17)
        y = rng.standard_normal(op.n)
        alpha, stats = cg_solve(op, y, CgConfig(rel_tolerance=1e-12,
                                                max_iters=2))
        assert not stats.converged
        assert not stats.diverged
        assert stats.n_iters == 2
        assert np.isfinite(alpha).all()

    def test_indefinite_operator_flagged_as_divergence(self):
        y = np.ones(3)
        alpha, stats = cg_solve(_DiagOp([-1.0, -1.0, -1.0]), y)
        assert stats.diverged and not stats.converged

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_jacobi_preconditioner_converges_to_same_solution(self):
        # seed 19 trips the 10x divergence guard on its first jacobi step
        # (row-norm diagonal estimate is rough); seed 3 is well behaved.
        rng, op, dense = small_instance(3)
        y = rng.standard_normal(op.n)
        cfg = CgConfig(rel_tolerance=1e-10, max_iters=500,
                       preconditioner="jacobi")
        alpha, stats = cg_solve(op, y, cfg)
        assert stats.converged
        np.testing.assert_allclose(alpha, np.linalg.solve(dense, y),
                                   atol=1e-6)

    def test_monotonicity_soft_check_warns_but_solves(self):
        rng, op, dense = small_instance(0)  # known to oscillate early
        y = rng.standard_normal(op.n)
        with pytest.warns(RuntimeWarning, match="residual increased"):
            alpha, stats = cg_solve(op, y, CgConfig(rel_tolerance=1e-10,
                                                    max_iters=500))
        assert stats.converged

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_deterministic(self):
        rng, op, _ = small_instance(23)
        y = rng.standard_normal(op.n)
        a1, s1 = cg_solve(op, y, CgConfig(rel_tolerance=1e-8, max_iters=200))
        a2, s2 = cg_solve(op, y, CgConfig(rel_tolerance=1e-8, max_iters=200))
        np.testing.assert_array_equal(a1, a2)
        assert s1.residual_norms == s2.residual_norms

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_residual_history_tracked(self):
        rng, op, _ = small_instance(29)
        y = rng.standard_normal(op.n)
        _, stats = cg_solve(op, y, CgConfig(rel_tolerance=1e-6, max_iters=300))
        assert len(stats.residual_norms) == stats.n_iters
        assert stats.final_rel_residual <= 1e-6

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CgConfig(rel_tolerance=0.0)
        with pytest.raises(ValueError):
            CgConfig(max_iters=0)
        with pytest.raises(ValueError):
            CgConfig(preconditioner="ssor")


class TestDomainMap:
    def test_maps_data_inside_grid_hull(self):
        rng = np.random.default_rng(31)
        X = rng.uniform(-5, 12, (200, 3))
        delta = 2.0**-5
        dm = DomainMap.fit(X, delta)
        U = dm.forward(X)
        assert (U > delta - 1e-12).all() and (U < 1 - delta + 1e-12).all()
        # the 1% margin keeps the extremes strictly inside
        assert U.min() > delta
        assert U.max() < 1 - delta

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(37)
        X = rng.uniform(-3, 3, (50, 2))
        dm = DomainMap.fit(X, 2.0**-4)
        np.testing.assert_allclose(dm.inverse(dm.forward(X)), X, atol=1e-14)

    def test_zero_range_dimension_centres(self):
        X = np.array([[1.0, 4.0], [2.0, 4.0], [3.0, 4.0]])
        dm = DomainMap.fit(X, 0.125)
        U = dm.forward(X)
        np.testing.assert_array_equal(U[:, 1], 0.5)

    def test_json_roundtrip(self):
        dm = DomainMap.fit(np.array([[0.0, 1.0], [2.0, 5.0]]), 0.25)
        dm2 = DomainMap.from_json(dm.to_json())
        np.testing.assert_array_equal(dm2.lo, dm.lo)
        np.testing.assert_array_equal(dm2.width, dm.width)
        assert dm2.delta == dm.delta


def quick_cfg(d, ell=3, sigma2=0.01, ls=0.35, tol=1e-8, **kw):
    return GpConfig(
        kernel=ProductKernel(lengthscales=np.full(d, ls)),
        sigma2=sigma2,
        resolution=ell,
        cg=CgConfig(rel_tolerance=tol, max_iters=2000),
        **kw,
    )


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
class TestFitPredict:
    def test_single_point_scalar_solve(self):
        X = np.array([[0.3, 0.8]])
        y = np.array([2.5])
        cfg = quick_cfg(2, sigma2=0.5)
        model = fit(cfg, X, y)
        grid = build_sparse_grid(3, 2)
        plan_kernel = cfg.kernel
        W = assemble_W(model.domain_map.forward(X), grid)
        K_G = plan_kernel.pairwise(grid.points())
        k11 = materialize_ski(W, K_G, 0.0)[0, 0]
        assert model.alpha[0] == pytest.approx(2.5 / (k11 + 0.5), rel=1e-8)

    def test_noiseless_interpolation_recovers_prior_sample(self):
        rng = np.random.default_rng(41)
        n, d, ell = 80, 2, 3
        X = rng.uniform(-1, 1, (n, d))
        cfg = quick_cfg(d, ell, sigma2=1e-8, tol=1e-12)
        grid = build_sparse_grid(ell, d)
        dm = DomainMap.fit(X, 2.0 ** -(ell + 1))
        W = assemble_W(dm.forward(X), grid)
        Kt = materialize_ski(W, cfg.kernel.pairwise(grid.points()), 1e-8)
        y = np.linalg.cholesky(Kt + 1e-10 * np.eye(n)) @ rng.standard_normal(n)
        model = fit(cfg, X, y)
        np.testing.assert_allclose(model.predict_mean(X), y, atol=1e-3)

    def test_far_test_points_revert_to_prior_mean(self):
        # two training clusters; probe the empty middle with a short scale
        rng = np.random.default_rng(43)
        lo = rng.uniform(0.0, 0.1, (100, 2))
        hi = rng.uniform(0.9, 1.0, (100, 2))
        X = np.vstack([lo, hi])
        y = np.concatenate([np.full(100, 3.0), np.full(100, -3.0)])
        cfg = quick_cfg(2, ell=5, sigma2=0.01, ls=0.02, tol=1e-6)
        model = fit(cfg, X, y)
        mid = model.predict_mean(np.array([[0.5, 0.5]]))
        assert abs(mid[0]) < 1e-6

    def test_rmse_within_twice_exact_oracle(self):
        rng = np.random.default_rng(53)
        n, d = 2000, 2
        f = lambda P: np.cos(np.abs(P).sum(axis=1))
        X = rng.uniform(0, 1, (n, d))
        y = f(X) + 0.05 * rng.standard_normal(n)
        Xte = rng.uniform(0, 1, (500, d))
        cfg = GpConfig(
            kernel=ProductKernel(lengthscales=[0.3, 0.3]),
            sigma2=0.05**2,
            resolution=4,
            cg=CgConfig(rel_tolerance=1e-6, max_iters=2000),
        )
        model = fit(cfg, X, y)
        rmse = float(np.sqrt(np.mean((model.predict_mean(Xte) - f(Xte)) ** 2)))
        mu_ex, _ = exact_gp_oracle(X, y, Xte, cfg.kernel, cfg.sigma2)
        rmse_ex = float(np.sqrt(np.mean((mu_ex - f(Xte)) ** 2)))
        assert rmse <= 3 * 0.05
        assert rmse <= 2 * rmse_ex

    def test_fast_predictor_equals_materialized_predictor(self):
        # small random instances: CG + fast MVM vs dense-materialized SKI
        for seed in range(6):
            rng = np.random.default_rng(100 + seed)
            d = int(rng.integers(1, 4))
            ell = int(rng.integers(1, 4))
            n = int(rng.integers(30, 300))
            X = rng.uniform(-1, 1, (n, d))
            y = np.sin(X.sum(axis=1)) + 0.1 * rng.standard_normal(n)
            cfg = GpConfig(
                kernel=ProductKernel(lengthscales=np.full(d, 0.5)),
                sigma2=0.05,
                resolution=ell,
                cg=CgConfig(rel_tolerance=1e-10, max_iters=3000),
            )
            model = fit(cfg, X, y)
            Xs = rng.uniform(-1, 1, (40, d))
            grid = build_sparse_grid(ell, d)
            W = assemble_W(model.domain_map.forward(X), grid)
            Ws = assemble_W(model.domain_map.forward(Xs), grid)
            K_G = cfg.kernel.pairwise(grid.points())
            Kt = materialize_ski(W, K_G, cfg.sigma2)
            alpha = np.linalg.solve(Kt, y)
            dense_mean = Ws.matrix @ (K_G @ (W.matrix.T @ alpha))
            np.testing.assert_allclose(model.predict_mean(Xs), dense_mean,
                                       atol=1e-8)

    def test_subsampled_method(self):
        rng = np.random.default_rng(59)
        X = rng.uniform(0, 1, (120, 2))
        y = np.cos(X.sum(axis=1))
        model = fit(quick_cfg(2, method="subsampled"), X, y)
        assert np.isfinite(model.predict_mean(X[:5])).all()

    def test_dense_grid_backend(self):
        rng = np.random.default_rng(61)
        X = rng.uniform(0, 1, (150, 2))
        y = np.cos(X.sum(axis=1)) + 0.02 * rng.standard_normal(150)
        cfg = GpConfig(
            kernel=ProductKernel(lengthscales=[0.5, 0.5]),
            sigma2=0.01, grid="dense", dense_count=9, rule="linear",
            cg=CgConfig(rel_tolerance=1e-8, max_iters=2000),
        )
        model = fit(cfg, X, y)
        rmse = float(np.sqrt(np.mean((model.predict_mean(X) - y) ** 2)))
        assert rmse < 0.2

    def test_fit_validation(self):
        cfg = quick_cfg(2)
        with pytest.raises(ValueError, match="finite"):
            fit(cfg, np.array([[np.nan, 0.0]]), np.array([1.0]))
        with pytest.raises(ValueError, match="noise floor"):
            fit(quick_cfg(2, sigma2=1e-12), np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError, match="one target"):
            fit(cfg, np.zeros((3, 2)), np.zeros(2))
        with pytest.raises(ValueError, match="kernel dim"):
            fit(cfg, np.zeros((3, 4)), np.zeros(3))
        with pytest.raises(ValueError):
            GpConfig(kernel=cfg.kernel, sigma2=0.1, grid="hex")

    def test_cg_failure_surfaces_with_stats(self):
        rng = np.random.default_rng(67)
        X = rng.uniform(0, 1, (50, 2))
        y = rng.standard_normal(50)
        cfg = quick_cfg(2, tol=1e-14)
        bad = GpConfig(kernel=cfg.kernel, sigma2=cfg.sigma2, resolution=3,
                       cg=CgConfig(rel_tolerance=1e-14, max_iters=1))
        with pytest.raises(CgFailure) as err:
            fit(bad, X, y)
        assert isinstance(err.value.stats, CgStats)
        assert err.value.stats.n_iters == 1

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(71)
        X = rng.uniform(-2, 5, (100, 2))
        y = np.sin(X.sum(axis=1))
        model = fit(quick_cfg(2), X, y)
        path = tmp_path / "model.json"
        model.save(path)
        loaded = load_model(path)
        Xs = rng.uniform(-2, 5, (30, 2))
        np.testing.assert_array_equal(loaded.predict_mean(Xs),
                                      model.predict_mean(Xs))
        payload = json.loads(path.read_text())
        assert payload["format"] == "skigrid-gp-1"

    def test_load_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "bogus.json"
        path.write_text(json.dumps({"format": "other"}))
        with pytest.raises(ValueError, match="format"):
            load_model(path)


class TestExactOracle:
    def test_single_point_closed_form(self):
        kernel = ProductKernel(lengthscales=[0.5], output_scale=1.3)
        X = np.array([[0.4]])
        y = np.array([0.9])
        var = 1.3 + 0.2
        mean, logp = exact_gp_oracle(X, y, X, kernel, 0.2)
        want = -0.5 * 0.9**2 / var - 0.5 * np.log(2 * np.pi * var)
        assert logp == pytest.approx(want, rel=1e-12)
        assert mean[0] == pytest.approx(0.9 * 1.3 / var, rel=1e-12)

    def test_interpolates_at_zero_noise(self):
        rng = np.random.default_rng(73)
        X = rng.uniform(0, 1, (30, 2))
        y = rng.standard_normal(30)
        kernel = ProductKernel(lengthscales=[0.4, 0.4])
        mean, _ = exact_gp_oracle(X, y, X, kernel, 0.0)
        np.testing.assert_allclose(mean, y, atol=1e-6)

    def test_logp_matches_direct_inverse(self):
        rng = np.random.default_rng(79)
        n = 50
        X = rng.uniform(0, 1, (n, 3))
        y = rng.standard_normal(n)
        kernel = ProductKernel(lengthscales=[0.3, 0.5, 0.7], output_scale=1.2)
        s2 = 0.1
        _, logp = exact_gp_oracle(X, y, X[:1], kernel, s2)
        K = kernel.pairwise(X) + s2 * np.eye(n)
        direct = float(-0.5 * y @ np.linalg.inv(K) @ y
                       - 0.5 * np.linalg.slogdet(K)[1]
                       - 0.5 * n * np.log(2 * np.pi))
        assert logp == pytest.approx(direct, abs=1e-6)

    def test_jitter_retry_on_singular_covariance(self):
        X = np.array([[0.3, 0.3], [0.3, 0.3], [0.7, 0.1]])  # duplicated row
        y = np.array([1.0, 1.0, -1.0])
        kernel = ProductKernel(lengthscales=[0.5, 0.5])
        mean, logp = exact_gp_oracle(X, y, X, kernel, 0.0)
        assert np.isfinite(mean).all() and np.isfinite(logp)

    def test_point_cap(self):
        kernel = ProductKernel(lengthscales=[0.5])
        X = np.zeros((11, 1))
        with pytest.raises(ValueError, match="limited"):
            exact_gp_oracle(X, np.zeros(11), X, kernel, 0.1, point_cap=10)


class TestReadCsv:
    def test_with_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,x2,y\n0.1,0.2,1.5\n0.3,0.4,-2.0\n")
        X, y = read_xy_csv(p)
        np.testing.assert_allclose(X, [[0.1, 0.2], [0.3, 0.4]])
        np.testing.assert_allclose(y, [1.5, -2.0])

    def test_without_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.1,0.2,1.5\n0.3,0.4,-2.0\n")
        X, y = read_xy_csv(p)
        assert X.shape == (2, 2)

    def test_malformed_cell_names_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.1,0.2,1.0\n0.3,oops,2.0\n")
        with pytest.raises(ValueError, match="line 2"):
            read_xy_csv(p)

    def test_ragged_row_names_line(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.1,0.2,1.0\n0.3,2.0\n")
        with pytest.raises(ValueError, match="line 2"):
            read_xy_csv(p)

    def test_single_column_rejected(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1.0\n2.0\n")
        with pytest.raises(ValueError, match="2 columns"):
            read_xy_csv(p)

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y\n")
        with pytest.raises(ValueError, match="no data"):
            read_xy_csv(p)

    def test_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.1,1.0\n\n0.2,2.0\n")
        X, y = read_xy_csv(p)
        assert len(y) == 2
