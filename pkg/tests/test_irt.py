import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from conftest import panel, simulate_matrix
from difkit import kernels
from difkit.data import ItemSpec, ResponseMatrix
from difkit.errors import DegenerateItem, NonConvergence, SingularInformation, ValidationError
from difkit.irt import (
    ConstraintPlan,
    FitOptions,
    GroupDist,
    ItemParams,
    Quadrature,
    eap_scores,
    fit_mml_em,
    icc_table,
    irf,
    marginal_loglik,
)
from difkit.irt.covariance import hessian_fd, hessian_louis
from difkit.irt.em import Problem, State
from difkit.irt.model import item_grad_info, item_objective, log_tables


class TestIrf:
    def test_symmetry_point(self):
        assert irf(0.0, ItemParams(1.0, 0.0)) == 0.5

    def test_lower_asymptote(self):
        item = ItemParams.from_difficulty(1.0, 0.0, 0.2)
        assert abs(irf(-30.0, item) - 0.2) < 1e-9

    def test_direct_value(self):
        assert irf(1.0, ItemParams(2.0, 0.0)) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)
        assert irf(1.0, ItemParams(2.0, 0.0)) == pytest.approx(0.880797, abs=1e-6)

    def test_difficulty_is_derived(self):
        item = ItemParams.from_difficulty(1.7, -0.4, 0.25)
        assert item.b == pytest.approx(-0.4)
        assert item.g == pytest.approx(0.25)
        assert item.c == pytest.approx(0.68)

    @given(st.floats(0.05, 4), st.floats(-6, 6), st.floats(0.01, 0.5), st.floats(-8, 8))
    def test_range(self, a, c, g, theta):
        p = float(irf(theta, ItemParams(a, c)))
        assert 0.0 <= p <= 1.0
        item = ItemParams(a, c, math.log(g / (1 - g)))
        assert g - 1e-12 <= float(irf(theta, item)) <= 1.0

    def test_log_tables_agree(self):
        nodes = np.linspace(-6, 6, 49)
        a, c, z = np.array([1.2, 0.7]), np.array([0.3, -1.0]), np.array([0.0, -1.1])
        is3 = np.array([False, True])
        logp, log1mp = log_tables(nodes, a, c, z, is3)
        for j in range(2):
            p = irf(nodes, ItemParams(a[j], c[j], z[j] if is3[j] else None))
            np.testing.assert_allclose(np.exp(logp[j]), p, rtol=1e-12)
            np.testing.assert_allclose(np.exp(log1mp[j]), 1 - p, rtol=1e-10)


class TestItemDerivatives:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 100_000))
    def test_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        nodes = np.linspace(-6, 6, 49)
        n = rng.uniform(1, 50, (2, 49))
        r = n * rng.uniform(0.05, 0.95, (2, 49))
        x = np.array([rng.uniform(0.5, 2.5), rng.uniform(-2, 2), rng.uniform(-2.5, 0)])
        is3 = np.array([True])

        def f(v):
            return item_objective(nodes, r[:1], n[:1], v[:1], v[1:2], v[2:3], is3)[0]

        grad, _ = item_grad_info(nodes, r[:1], n[:1], x[:1], x[1:2], x[2:3], is3)
        fd = np.empty(3)
        for k in range(3):
            h = 1e-6 * max(1, abs(x[k]))
            e = np.zeros(3)
            e[k] = h
            fd[k] = (f(x + e) - f(x - e)) / (2 * h)
        np.testing.assert_allclose(grad[0], fd, rtol=1e-5, atol=1e-5)

    def test_information_is_psd(self):
        nodes = np.linspace(-6, 6, 49)
        n = np.full((1, 49), 10.0)
        _, info = item_grad_info(nodes, n * 0.5, n, np.array([1.0]), np.array([0.0]),
                                 np.array([-1.1]), np.array([True]))
        assert np.linalg.eigvalsh(info[0]).min() > 0


class TestMarginalLoglik:
    def test_coin_item(self):
        d = ResponseMatrix([[1]], [0], ("A",), ("i",))
        ll = marginal_loglik(d, [ItemSpec("i")], [ItemParams(0.0, 0.0)], [GroupDist()])
        assert ll == pytest.approx(math.log(0.5), abs=1e-12)

    def test_empty_row_contributes_nothing(self):
        specs = [ItemSpec("i"), ItemSpec("j")]
        params = [ItemParams(1.1, 0.2), ItemParams(0.8, -0.5)]
        full = ResponseMatrix([[1, 0], [-1, -1]], [0, 0], ("A",), ("i", "j"))
        one = ResponseMatrix([[1, 0]], [0], ("A",), ("i", "j"))
        assert marginal_loglik(full, specs, params, [GroupDist()]) == pytest.approx(
            marginal_loglik(one, specs, params, [GroupDist()]), abs=1e-12)

    def test_dense_grid_oracle(self):
        specs = [ItemSpec("i"), ItemSpec("j", "3PL")]
        params = [ItemParams(1.3, 0.4), ItemParams.from_difficulty(0.9, 0.5, 0.2)]
        d = ResponseMatrix([[1, 0], [0, 1]], [0, 0], ("A",), ("i", "j"))
        theta = np.linspace(-10, 10, 1001)
        dens = np.exp(-0.5 * theta**2) / math.sqrt(2 * math.pi)
        oracle = 0.0
        for row in d.cells:
            like = np.ones_like(theta)
            for p, x in zip(params, row):
                pj = irf(theta, p)
                like *= pj if x == 1 else 1 - pj
            oracle += math.log(np.trapezoid(like * dens, theta))
        ll = marginal_loglik(d, specs, params, [GroupDist()], penalized=False)
        assert ll == pytest.approx(oracle, abs=1e-6)

    def test_prior_penalty(self):
        specs = [ItemSpec("j", "3PL")]
        params = [ItemParams(1.0, 0.0, -1.1)]
        d = ResponseMatrix([[1]], [0], ("A",), ("j",))
        pen = marginal_loglik(d, specs, params, [GroupDist()])
        raw = marginal_loglik(d, specs, params, [GroupDist()], penalized=False)
        assert pen - raw == pytest.approx(-math.log(0.5 * math.sqrt(2 * math.pi)))

    def test_per_group_params(self):
        specs = [ItemSpec("i")]
        d = ResponseMatrix([[1], [1]], [0, 1], ("A", "B"), ("i",))
        shared = marginal_loglik(d, specs, [ItemParams(1.0, 0.0)], [GroupDist(), GroupDist()])
        split = marginal_loglik(d, specs, [[ItemParams(1.0, 0.0), ItemParams(1.0, 0.0)]],
                                [GroupDist(), GroupDist()])
        assert shared == pytest.approx(split)


def _fit(data, specs, plan=None, **kw):
    plan = plan or ConstraintPlan.equal_items(data.items, data.n_groups)
    return fit_mml_em(data, specs, plan, FitOptions(**kw) if kw else None)


class TestFit:
    def test_recovery_single_group(self):
        params, specs = panel(20, 1, seed=2)
        data = simulate_matrix(params, [(0, 1)], 3000, seed=3)
        fit = _fit(data, specs)
        assert fit.converged
        a = np.array([p[0].a for p in params])
        b = np.array([p[0].b for p in params])
        assert np.sqrt(np.mean((fit.A[:, 0] - a) ** 2)) < 0.15
        assert np.sqrt(np.mean((fit.B[:, 0] - b) ** 2)) < 0.12

    def test_duplicated_group_matches(self):
        # 2PL only: the guessing prior would count once against doubled data
        params, specs = panel(8, 1, seed=4, three_pl=())
        one = simulate_matrix(params, [(0, 1)], 800, seed=5)
        two = ResponseMatrix(np.vstack([one.cells, one.cells]), np.r_[np.zeros(800, int), np.ones(800, int)],
                             ("A", "B"), one.item_ids)
        f1 = _fit(one, specs, tol=1e-7)
        f2 = _fit(two, specs, tol=1e-7)
        np.testing.assert_allclose(f2.A[:, 0], f1.A[:, 0], atol=1e-6)
        np.testing.assert_allclose(f2.C[:, 0], f1.C[:, 0], atol=1e-6)
        assert f2.mu[1] == pytest.approx(0.0, abs=1e-6)
        assert f2.sd[1] == pytest.approx(1.0, abs=1e-6)

    def test_monotone_loglik(self, small_panel):
        data, specs = small_panel
        fit = _fit(data, specs)
        diffs = np.diff(fit.loglik_trace)
        assert diffs.min() >= -1e-9 * abs(fit.loglik)

    def test_monotone_without_acceleration(self, small_panel):
        data, specs = small_panel
        fit = _fit(data, specs, accelerate=False, polish_after=None, max_cycles=60,
                   raise_on_nonconvergence=False)
        assert np.diff(fit.loglik_trace).min() >= -1e-9 * abs(fit.loglik)

    def test_reference_fixed(self, small_panel):
        data, specs = small_panel
        fit = _fit(data, specs)
        assert (fit.mu[0], fit.sd[0]) == (0.0, 1.0)
        assert fit.mu[1] == pytest.approx(0.3, abs=0.15)
        assert fit.mu[2] == pytest.approx(-0.2, abs=0.15)

    def test_nonconvergence_carries_partial(self, small_panel):
        data, specs = small_panel
        with pytest.raises(NonConvergence) as exc:
            _fit(data, specs, max_cycles=3, polish_after=None)
        assert exc.value.partial is not None
        assert exc.value.partial.cycles == 3
        assert not exc.value.partial.converged

    def test_degenerate_item(self):
        cells = np.random.default_rng(0).integers(0, 2, (30, 3))
        cells[:, 1] = 1
        d = ResponseMatrix(cells, np.zeros(30, int), ("A",), ("a", "b", "c"))
        with pytest.raises(DegenerateItem):
            _fit(d, [ItemSpec(i) for i in "abc"])

    def test_plan_must_match(self, small_panel):
        data, specs = small_panel
        with pytest.raises(ValidationError):
            fit_mml_em(data, specs, ConstraintPlan.equal_items(data.items, 2))

    def test_reference_must_be_fixed(self):
        with pytest.raises(ValidationError):
            ConstraintPlan(np.zeros((2, 3), bool), (None, None))
        with pytest.raises(ValidationError):
            ConstraintPlan(np.ones((2, 3), bool), (GroupDist(), None), anchors=(0,))

    def test_reparameterized_start(self, small_panel):
        data, specs = small_panel
        fit = _fit(data, specs, tol=1e-6)
        st = fit.state
        # rebuild the intercept from reported difficulties
        restart = State(st.A.copy(), -st.A * fit.B, st.Z.copy(), st.mu.copy(), st.sd.copy())
        refit = fit_mml_em(data, specs, ConstraintPlan.equal_items(data.items, 3),
                           FitOptions(tol=1e-6), start=restart)
        assert refit.loglik == pytest.approx(fit.loglik, abs=1e-6)

    def test_quadrature_stability(self, small_panel):
        data, specs = small_panel
        f49 = _fit(data, specs)
        f101 = _fit(data, specs, n_nodes=101)
        assert abs(f49.loglik - f101.loglik) < 1e-3

    def test_slopes_positive(self, small_panel):
        data, specs = small_panel
        fit = _fit(data, specs)
        assert (fit.A >= 1e-3).all()


class TestGradient:
    @pytest.fixture(scope="class")
    @staticmethod
    def problem(small_panel):
        data, specs = small_panel
        plan = ConstraintPlan.anchored(data.items, 3, [0])
        return Problem(data, specs, plan, Quadrature())

    def test_matches_central_differences(self, problem):
        rng = np.random.default_rng(7)
        base = problem.start_state()
        for _ in range(5):
            x = problem.pack(base) + rng.normal(0, 0.15, problem.n_params)
            st = problem.unpack(x, base)
            grad = problem.gradient(st)
            fd = np.empty_like(grad)
            for k in range(x.size):
                h = 1e-5 * max(1.0, abs(x[k]))
                up, dn = x.copy(), x.copy()
                up[k] += h
                dn[k] -= h
                fd[k] = (problem.loglik(problem.unpack(up, base)) - problem.loglik(problem.unpack(dn, base))) / (2 * h)
            assert np.abs(grad - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


class TestCovariance:
    @pytest.fixture(scope="class")
    @staticmethod
    def fit(small_panel):
        data, specs = small_panel
        return fit_mml_em(data, specs, ConstraintPlan.anchored(data.items, 3, [0]), FitOptions(tol=1e-6))

    def test_symmetric_psd(self, fit):
        cov = fit.covariance("fd")
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= -1e-8

    def test_louis_matches_fd(self, fit):
        h_fd = hessian_fd(fit.problem, fit.state)
        h_lo = hessian_louis(fit.problem, fit.state)
        assert np.abs(h_fd - h_lo).max() <= 1e-5 * np.abs(h_fd).max()

    def test_sem_matches_fd(self, fit):
        fd = np.diag(fit.covariance("fd"))
        sem = np.diag(fit.covariance("sem"))
        np.testing.assert_allclose(sem, fd, rtol=0.05)

    def test_requires_convergence(self, small_panel):
        data, specs = small_panel
        f = _fit(data, specs, max_cycles=2, polish_after=None, raise_on_nonconvergence=False)
        with pytest.raises(ValueError):
            f.covariance()

    def test_unknown_method(self, fit):
        with pytest.raises(ValueError):
            fit.covariance("bootstrap")

    def test_single_item_is_unidentified(self):
        d = simulate_matrix([[ItemParams(1.0, 0.2)]], [(0, 1)], 5000, seed=1)
        fit = _fit(d, [ItemSpec("I01")])
        with pytest.raises(SingularInformation):
            fit.covariance("fd")

    @pytest.mark.slow
    def test_matches_sampling_variance(self):
        params, specs = panel(10, 1, seed=5)
        est, var = [], []
        for r in range(1000):
            d = simulate_matrix(params, [(0, 1)], 1000, seed=100 + r)
            f = _fit(d, specs)
            c = f.covariance("louis")
            sa, sc = f.problem.slot_of[0, 0, 0], f.problem.slot_of[0, 1, 0]
            est.append((f.A[0, 0], f.C[0, 0]))
            var.append((c[sa, sa], c[sc, sc]))
        ratio = np.var(est, axis=0, ddof=1) / np.mean(var, axis=0)
        np.testing.assert_allclose(ratio, 1.0, atol=0.1)

    def test_variance_scales_with_n(self):
        params, specs = panel(10, 1, seed=6)
        ratios = []
        for r in range(20):
            small = _fit(simulate_matrix(params, [(0, 1)], 1000, seed=500 + r), specs)
            big = _fit(simulate_matrix(params, [(0, 1)], 2000, seed=700 + r), specs)
            ratios.append(np.diag(big.covariance("louis")) / np.diag(small.covariance("louis")))
        assert 0.4 <= float(np.mean(ratios)) <= 0.6


class TestEap:
    @pytest.fixture(scope="class")
    @staticmethod
    def fit():
        params = [[ItemParams(1.5, c)] for c in (-1.0, -0.5, 0.0, 0.5, 1.0)]
        specs = [ItemSpec(f"I{j + 1:02d}") for j in range(5)]
        data = simulate_matrix(params, [(0, 1)], 1500, seed=9)
        return fit_mml_em(data, specs, ConstraintPlan.equal_items(5, 1))

    def test_no_responses_returns_prior(self):
        params, specs = panel(4, 2, seed=1)
        data = simulate_matrix(params, [(0, 1), (0.5, 1.2)], 300, seed=2)
        fit = _fit(data, specs)
        cells = np.full((2, 4), -1, np.int8)
        empty = ResponseMatrix(cells, [0, 1], data.group_names, data.item_ids)
        score, sd = eap_scores(empty, fit)
        assert score[1] == pytest.approx(fit.mu[1], abs=1e-6)
        assert sd[1] == pytest.approx(fit.sd[1], abs=1e-3)
        assert score[0] == pytest.approx(0.0, abs=1e-9)

    def test_complementary_patterns(self):
        params = [[ItemParams(1.3, 0.0)] for _ in range(4)]
        specs = [ItemSpec(f"I{j + 1:02d}") for j in range(4)]
        data = simulate_matrix(params, [(0, 1)], 400, seed=3)
        fit = _fit(data, specs)
        sym = State(np.full((4, 1), 1.3), np.zeros((4, 1)), np.zeros((4, 1)), np.zeros(1), np.ones(1))
        fit.A[:], fit.C[:] = sym.A, sym.C
        x = np.array([[1, 0, 1, 1], [0, 1, 0, 0]], np.int8)
        score, _ = eap_scores(ResponseMatrix(x, [0, 0], ("REF",), data.item_ids), fit)
        assert score[0] == pytest.approx(-score[1], abs=1e-9)

    def test_dense_grid_oracle(self, fit):
        x = np.array([[1, 1, 0, 0, 1], [0, 0, 0, 0, 0], [1, 1, 1, 1, 0]], np.int8)
        data = ResponseMatrix(x, [0, 0, 0], ("REF",), fit.item_ids)
        score, sd = eap_scores(data, fit)
        theta = np.linspace(-6, 6, 2001)
        for i, row in enumerate(x):
            w = np.exp(-0.5 * theta**2)
            for j, v in enumerate(row):
                p = irf(theta, fit.params(j, 0))
                w = w * (p if v else 1 - p)
            m = np.sum(w * theta) / w.sum()
            s = math.sqrt(np.sum(w * theta**2) / w.sum() - m * m)
            assert score[i] == pytest.approx(m, abs=1e-5)
            assert sd[i] == pytest.approx(s, abs=1e-5)


class TestIcc:
    def test_shape_and_monotone(self, small_panel):
        data, specs = small_panel
        fit = fit_mml_em(data, specs, ConstraintPlan.anchored(data.items, 3, [0]))
        table = icc_table(fit)
        assert table.prob.shape == (data.items, 3, 81)
        assert table.theta[0] == -4 and table.theta[-1] == 4
        assert np.all(np.diff(table.prob, axis=2) >= 0)
        # anchor constrained equal across groups
        np.testing.assert_array_equal(table.prob[0, 0], table.prob[0, 1])
        rows = list(table.rows(["I01"]))
        assert len(rows) == 3 * 81 and rows[0][:2] == ("I01", "REF")

    def test_lower_asymptote(self):
        item = ItemParams(2.0, -14.0, math.log(0.2 / 0.8))

        class Fit:
            A = np.array([[item.a]])
            C = np.array([[item.c]])
            item_ids, group_names = ("I01",), ("REF",)

            def params(self, j, g):
                return item

        table = icc_table(Fit())
        assert abs(table.prob[0, 0, 0] - 0.2) < 1e-9


class TestKernels:
    def test_backends_agree(self):
        try:
            compiled = kernels.get_backend("compiled")
        except ImportError:
            pytest.skip("compiled kernel not built")
        python = kernels.get_backend("python")
        rng = np.random.default_rng(0)
        cells = rng.choice([0, 1, -1], size=(300, 12), p=[0.45, 0.45, 0.1]).astype(np.int8)
        nodes = np.linspace(-6, 6, 49)
        logp, log1mp = log_tables(nodes, rng.uniform(0.5, 2, 12), rng.normal(size=12),
                                  np.full(12, -1.1), rng.random(12) < 0.5)
        logw = Quadrature().log_weights(0.2, 1.1)
        a = python.estep(python.prepare(cells), logp, log1mp, logw)
        b = compiled.estep(compiled.prepare(cells), logp, log1mp, logw)
        assert a[0] == pytest.approx(b[0], rel=1e-13)
        for x, y in zip(a[1:], b[1:]):
            np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-12)
        pa, pb = python.posterior(python.prepare(cells), logp, log1mp, logw), \
            compiled.posterior(compiled.prepare(cells), logp, log1mp, logw)
        np.testing.assert_allclose(pa[0], pb[0], rtol=1e-12)
        np.testing.assert_allclose(pa[1], pb[1], atol=1e-13)

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.get_backend("gpu")

    def test_counts_conserve_mass(self):
        rng = np.random.default_rng(1)
        cells = rng.integers(0, 2, size=(50, 5)).astype(np.int8)
        nodes = np.linspace(-6, 6, 49)
        logp, log1mp = log_tables(nodes, np.ones(5), np.zeros(5), np.zeros(5), np.zeros(5, bool))
        _, r, n, nq = kernels.estep(kernels.prepare(cells), logp, log1mp, Quadrature().log_weights())
        assert nq.sum() == pytest.approx(50)
        np.testing.assert_allclose(r.sum(axis=1), cells.sum(axis=0), rtol=1e-10)
        np.testing.assert_allclose(expit(0) * 0 + n.sum(axis=1), 50, rtol=1e-10)

    @pytest.mark.parametrize("env,expected", [("python", "python"), ("", None)])
    def test_environment_override(self, env, expected):
        import os
        import subprocess
        import sys

        out = subprocess.run(
            [sys.executable, "-c", "from difkit import kernels; print(kernels.BACKEND)"],
            env={**os.environ, "DIFKIT_KERNEL": env}, capture_output=True, text=True, check=True,
        ).stdout.strip()
        assert out == (expected or kernels.BACKEND)
