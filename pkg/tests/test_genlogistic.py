import math

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import panel, simulate_matrix, swaminathan_rogers
from difkit.data import ResponseMatrix, observed_scores
from difkit.errors import NestingViolation, PurificationNonConvergence, SeparationDetected, ValidationError
from difkit.genlogistic import (
    GenLogResult,
    LogisticModel,
    adjust_results,
    coefficients_table,
    design_matrix,
    fit_logistic,
    lr_lambda,
    purify_and_test,
)
from difkit.genlogistic import test_item as lr_test_item
from difkit.irt import ItemParams
from difkit.simulate import bundled_scenario, generate


def _dif_panel(seed, n=500, G=3, shift=0.0, items=(3,)):
    params, _ = panel(10, G, seed=40)
    for j in items:
        for g in range(1, G):
            base = params[j][g]
            params[j][g] = ItemParams(base.a, base.c - shift)
    return simulate_matrix(params, [(0, 1)] * G, n, seed=seed)


class TestFitLogistic:
    @pytest.fixture(scope="class")
    @staticmethod
    def toy():
        return _toy()

    @pytest.mark.parametrize("model", list(LogisticModel))
    def test_matches_statsmodels(self, toy, model):
        y, s, grp = toy
        fit = fit_logistic(y, s, grp, model)
        X, _ = design_matrix(s, grp, 3, model)
        ref = sm.Logit(y, X).fit(method="newton", tol=1e-14, disp=False)
        np.testing.assert_allclose(fit.coef, ref.params, atol=1e-7)
        np.testing.assert_allclose(fit.cov, ref.cov_params(), rtol=1e-6)
        assert fit.loglik == pytest.approx(ref.llf, abs=1e-9)

    def test_names(self, toy):
        fit = fit_logistic(*toy, LogisticModel.FULL)
        assert fit.names == ("alpha", "beta", "alpha_1", "alpha_2", "beta_1", "beta_2")

    def test_brute_force_loglik(self):
        y = np.array([1, 0, 1, 0])
        s = np.array([0.5, -0.2, -1.0, 1.3])
        fit = fit_logistic(y, s, np.zeros(4, int), LogisticModel.COMMON)
        a, b = fit.coef
        ll = sum(math.log(1 / (1 + math.exp(-(a + b * si)))) if yi else math.log(1 - 1 / (1 + math.exp(-(a + b * si))))
                 for yi, si in zip(y, s))
        assert fit.loglik == pytest.approx(ll, abs=1e-10)

    def test_symmetric_groups_zero_terms(self):
        s = np.tile(np.linspace(-2, 2, 9), 6)
        y = np.tile([0, 0, 1, 0, 1, 0, 1, 1, 1, 0, 0, 0, 1, 1, 0, 1, 1, 1], 3)
        grp = np.r_[np.zeros(27, int), np.ones(27, int)]
        s, y = np.r_[s[:27], s[:27]], np.r_[y[:27], y[:27]]
        fit = fit_logistic(y, s, grp, LogisticModel.FULL)
        assert abs(fit.get("alpha_1")[0]) < 1e-6
        assert abs(fit.get("beta_1")[0]) < 1e-6

    def test_separation(self):
        s = np.linspace(-1, 1, 40)
        y = (s > 0).astype(float)
        with pytest.raises(SeparationDetected):
            fit_logistic(y, s, np.zeros(40, int), LogisticModel.COMMON)

    def test_needs_score_variation(self):
        with pytest.raises(ValidationError):
            fit_logistic([0, 1, 1], [1.0, 1.0, 1.0], [0, 0, 0], LogisticModel.COMMON)

    def test_needs_every_group(self):
        with pytest.raises(ValidationError):
            fit_logistic([0, 1, 1, 0], [0.0, 1.0, 2.0, 3.0], [0, 0, 2, 2], LogisticModel.FULL, n_groups=3)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.2, 5))
    def test_affine_score(self, m, scale):
        y, s, grp = _toy()
        for model in LogisticModel:
            a = fit_logistic(y, s, grp, model).loglik
            b = fit_logistic(y, (s - m) / scale, grp, model).loglik
            assert b == pytest.approx(a, abs=1e-6)


def _toy():
    rng = np.random.default_rng(0)
    n = 900
    grp = np.repeat([0, 1, 2], n // 3)
    s = rng.normal(size=n)
    eta = -0.2 + 1.1 * s + 0.4 * (grp == 1) - 0.3 * (grp == 2) * s
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return y, s, grp


class TestLrLambda:
    def test_equal(self):
        assert lr_lambda(-50.0, -50.0) == 0.0

    def test_arithmetic(self):
        assert lr_lambda(-100.0, -97.0) == 6.0

    def test_roundoff_clipped(self):
        assert lr_lambda(-100.0 + 1e-9, -100.0) == 0.0

    def test_nesting_violation(self):
        with pytest.raises(NestingViolation):
            lr_lambda(-90.0, -100.0)


class TestItemTest:
    @pytest.fixture(scope="class")
    @staticmethod
    def data():
        return _dif_panel(seed=1, shift=0.8)

    def test_additivity(self, data):
        for j in range(data.items):
            r = lr_test_item(data, j, range(data.items))
            assert r.lambda_nudif + r.lambda_udif == pytest.approx(r.lambda_all, abs=1e-8)
            assert (r.df_all, r.df_nudif, r.df_udif) == (4, 2, 2)

    def test_detects_shift(self, data):
        assert lr_test_item(data, 3, range(10)).flag_all

    def test_basis_includes_item(self, data):
        a = lr_test_item(data, 3, [0, 1, 2])
        b = lr_test_item(data, 3, [0, 1, 2, 3])
        assert a.lambda_all == b.lambda_all

    def test_coefficients_shape(self, data):
        r = lr_test_item(data, 3, range(10))
        assert set(r.coefficients) == {"alpha", "beta", "alpha_1", "alpha_2", "beta_1", "beta_2"}
        assert r.coefficients["alpha_1"][0] < 0

    def test_relabel_equivariance(self, data):
        swap = np.array([0, 2, 1])[data.group_of]
        other = ResponseMatrix(data.cells, swap, ("REF", "F2", "F1"), data.item_ids)
        for j in (0, 3, 6):
            a = lr_test_item(data, j, range(10))
            b = lr_test_item(other, j, range(10))
            for name in ("lambda_all", "lambda_nudif", "lambda_udif", "p_all"):
                assert getattr(b, name) == pytest.approx(getattr(a, name), abs=1e-8)
            np.testing.assert_allclose(b.coefficients["alpha_1"], a.coefficients["alpha_2"], atol=1e-8)
            np.testing.assert_allclose(b.coefficients["beta_2"], a.coefficients["beta_1"], atol=1e-8)

    def test_untestable_on_separation(self):
        cells = np.zeros((60, 3), np.int8)
        cells[30:, :] = 1
        data = ResponseMatrix(cells, np.tile([0, 1], 30), ("A", "B"), ("a", "b", "c"))
        r = lr_test_item(data, 0, range(3))
        assert not r.testable and np.isnan(r.p_all) and not r.flag_all
        assert "untestable" in r.note

    @pytest.mark.parametrize("fixture", range(5))
    def test_two_group_reduction(self, fixture):
        data = _dif_panel(seed=100 + fixture, n=400, G=2, shift=0.5 * fixture)
        for j in range(data.items):
            r = lr_test_item(data, j, range(data.items))
            s = observed_scores(data, range(data.items), "incorrect")
            s = (s - s.mean()) / s.std()
            ref = swaminathan_rogers(data.cells[:, j], s, data.group_of)
            np.testing.assert_allclose([r.lambda_all, r.lambda_nudif, r.lambda_udif], ref, atol=1e-8)

    @pytest.mark.slow
    def test_null_rejection(self):
        rejected = tested = 0
        for rep in range(200):
            data = _dif_panel(seed=2000 + rep, n=300)
            for j in range(data.items):
                r = lr_test_item(data, j, range(data.items))
                tested += 1
                rejected += r.p_all < 0.05
        rate = rejected / tested
        assert abs(rate - 0.05) < 3 * math.sqrt(0.05 * 0.95 / tested) + 0.005

    def test_uniform_power(self):
        hits = 0
        for rep in range(100):
            data = _dif_panel(seed=5000 + rep, n=1000, shift=0.6)
            r = lr_test_item(data, 3, range(data.items))
            hits += r.flag_udif or r.flag_all
        assert hits >= 80


def _stub_result(item_id, p):
    return GenLogResult(item_id, 0.0, 0.0, 0.0, 2, 1, 1, p, p, p)


class TestPurification:
    def test_immediate_fixed_point(self):
        data = _dif_panel(seed=3, n=200)
        results, trace = purify_and_test(data)
        assert trace.converged and trace.reason == "fixed point"
        assert trace.iterations == ((),)
        assert len(trace.score_basis) == 1

    def test_cycle(self):
        data = _dif_panel(seed=3, n=50)

        def tester(data, j, basis, alpha, policy):
            # flag item 0 on the full basis, item 1 once item 0 is removed, and back
            flagged = 0 if (0 in basis) else 1
            return _stub_result(data.item_ids[j], 0.0 if j == flagged else 1.0)

        with pytest.raises(PurificationNonConvergence) as exc:
            purify_and_test(data, tester=tester)
        trace = exc.value.trace
        assert trace.reason == "cycle" and not trace.converged
        assert trace.iterations == (("I01",), ("I02",), ("I01",))
        assert len(exc.value.results) == data.items

    def test_every_item_flagged(self):
        data = _dif_panel(seed=3, n=50)
        tester = lambda data, j, basis, alpha, policy: _stub_result(data.item_ids[j], 0.0)
        results, trace = purify_and_test(data, tester=tester, raise_on_nonconvergence=False)
        assert trace.reason == "every item flagged"
        assert all(r.flag_all for r in results)

    def test_iteration_limit(self):
        data = _dif_panel(seed=3, n=50)
        calls = []

        def tester(data, j, basis, alpha, policy):
            if j == 0:
                calls.append(1)
            return _stub_result(data.item_ids[j], 0.0 if j == len(calls) % 9 else 1.0)

        with pytest.raises(PurificationNonConvergence) as exc:
            purify_and_test(data, max_iter=4, tester=tester)
        assert exc.value.trace.reason == "iteration limit"
        assert len(exc.value.trace.iterations) == 4

    def test_converged_means_repeat(self):
        data = _dif_panel(seed=4, shift=1.0, items=(2, 5))
        _, trace = purify_and_test(data)
        assert trace.converged
        prior = trace.iterations[-2] if len(trace.iterations) > 1 else ()
        assert trace.iterations[-1] == prior
        assert set(trace.iterations[-1]) >= {"I03", "I06"}
        excluded = set(data.item_ids) - set(trace.score_basis[-1])
        assert excluded == set(trace.iterations[-1])

    def test_needs_groups(self):
        data = _dif_panel(seed=3, n=50, G=1)
        with pytest.raises(ValidationError):
            purify_and_test(data)

    @pytest.mark.slow
    def test_recovers_planted_items(self):
        sc = bundled_scenario("uniform_dif_g3")
        planted = set(sc.dif_items())
        good = 0
        reps = 50
        for rep in range(reps):
            data = generate(sc, rep)
            try:
                _, trace = purify_and_test(data)
            except PurificationNonConvergence as exc:
                trace = exc.trace
            if not trace.converged:
                continue
            good += len(planted - set(trace.score_basis[-1])) >= 3
        assert good >= 0.8 * reps


class TestAdjustment:
    def test_holm_flags(self):
        raw = [_stub_result(f"i{j}", p) for j, p in enumerate([0.01, 0.02, 0.03, 0.5])]
        out = adjust_results(raw, 0.05, "holm")
        assert [r.flag_all for r in out] == [True, False, False, False]
        assert out[0].p_adj_all == pytest.approx(0.04)
        assert all(r.p_adj_all >= r.p_all for r in out)
        assert out[0].adjustment == "holm"

    def test_bh_flags(self):
        raw = [_stub_result(f"i{j}", p) for j, p in enumerate([0.01, 0.02, 0.03, 0.5])]
        out = adjust_results(raw, 0.05, "bh")
        assert [r.flag_all for r in out] == [True, True, True, False]


class TestCoefficientsTable:
    def test_empty(self):
        assert coefficients_table([_stub_result("a", 0.5)]) == []

    def test_shape_and_se(self):
        data = _dif_panel(seed=1, shift=0.8)
        r = lr_test_item(data, 3, range(10))
        (row,) = coefficients_table([r])
        assert len(row.alpha) == 2 and len(row.beta) == 2
        s = observed_scores(data, range(10), "incorrect")
        s = (s - s.mean()) / s.std()
        fit = fit_logistic(data.cells[:, 3], s, data.group_of, LogisticModel.FULL)
        for g in (1, 2):
            est, se = row.alpha[g - 1]
            i = fit.names.index(f"alpha_{g}")
            assert est == pytest.approx(fit.coef[i], abs=1e-12)
            assert se == pytest.approx(math.sqrt(fit.cov[i, i]), abs=1e-10)
