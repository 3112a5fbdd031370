import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from varflow.dclin import build_susceptance
from varflow.grid import Generator, make_figure1_case, figure1_indices
from varflow.stochastic import (ParticipationMatrix, PatternK, StochasticModel,
                                StochasticModelError, dump_stochastic_json,
                                gamma_matrix, generation_stats, line_variances,
                                load_stochastic_json, nu_from_epsilon,
                                validate_participation)

from helpers import (random_connected_grid, random_participation, random_psd,
                     tri_cycle)


def pattern(participants, sources, **kw):
    return PatternK(tuple(participants), tuple(sources), **kw)


class TestStochasticModel:
    def test_rejects_asymmetric_cov(self):
        with pytest.raises(StochasticModelError, match="symmetric"):
            StochasticModel((0, 1), np.zeros(2), np.array([[1.0, 0.5], [0.1, 1.0]]), (2,))

    def test_rejects_indefinite_cov(self):
        with pytest.raises(StochasticModelError, match="negative eigenvalue"):
            StochasticModel((0, 1), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), (2,))

    def test_clips_roundoff_negative_eigenvalue(self):
        v = np.array([1.0, -1.0])
        cov = np.outer(v, v)  # rank one, eigenvalue 0 up to roundoff
        model = StochasticModel((0, 1), np.zeros(2), cov, (2,))
        F = model.cov_factor
        np.testing.assert_allclose(F @ F, cov, atol=1e-12)

    def test_mu_full_scatter(self):
        model = StochasticModel((2, 0), np.array([5.0, 1.0]), np.eye(2), (1,))
        np.testing.assert_allclose(model.mu_full(4), [1.0, 0.0, 5.0, 0.0])

    def test_duplicate_sources_rejected(self):
        with pytest.raises(StochasticModelError, match="duplicate"):
            StochasticModel((1, 1), np.zeros(2), np.eye(2), (0,))


class TestValidateParticipation:
    def test_single_source_split_ok(self):
        A = ParticipationMatrix(np.array([[0.4], [0.6]]), pattern([1, 2], [0]))
        assert validate_participation(A).ok

    def test_deficient_share_flagged(self):
        A = ParticipationMatrix(np.array([[0.5], [0.4]]), pattern([1, 2], [0]))
        report = validate_participation(A)
        assert not report.ok
        assert report.violations[0][0] == "column_sum"
        assert "0.9" in report.violations[0][1]

    def test_global_policy_violation(self):
        A = ParticipationMatrix(np.array([[0.3, 0.7], [0.7, 0.3]]),
                                pattern([1, 2], [0, 3], policy="global"))
        report = validate_participation(A)
        assert any(code == "global_policy" for code, _ in report.violations)

    def test_global_policy_satisfied(self):
        A = ParticipationMatrix(np.array([[0.3, 0.3], [0.7, 0.7]]),
                                pattern([1, 2], [0, 3], policy="global"))
        assert validate_participation(A).ok

    def test_bounds_enforced(self):
        A = ParticipationMatrix(np.array([[1.2], [-0.2]]),
                                pattern([1, 2], [0], lower=0.0, upper=1.0))
        assert any(code == "bounds" for code, _ in validate_participation(A).violations)


class TestGammaMatrix:
    def test_self_absorption_cancels(self):
        sys_ = build_susceptance(tri_cycle())
        A = ParticipationMatrix(np.array([[1.0]]), pattern([0], [0]))
        D, gamma = gamma_matrix(sys_, A)
        np.testing.assert_allclose(D[:, 0], sys_.breve_column(0))
        np.testing.assert_allclose(gamma, 0.0, atol=1e-12)

    def test_absorption_at_reduction_bus(self):
        # responder sits on the reduction bus: its response column is zero
        sys_ = build_susceptance(tri_cycle())
        A = ParticipationMatrix(np.array([[1.0]]), pattern([2], [0]))
        D, gamma = gamma_matrix(sys_, A)
        np.testing.assert_allclose(D, 0.0, atol=1e-12)
        assert gamma[0, 0] == pytest.approx(1 / 3)  # line 1-2

    def test_gamma_rearrangement_identity(self):
        rng = np.random.default_rng(23)
        grid = random_connected_grid(rng, 9)
        sys_ = build_susceptance(grid)
        pat = pattern([1, 4, 6], [0, 3])
        A = random_participation(rng, pat)
        D, gamma = gamma_matrix(sys_, A)
        for li, ln in enumerate(grid.lines):
            for kp, k in enumerate(pat.sources):
                pi_k = sys_.breve_column(k)[ln.from_bus] - sys_.breve_column(k)[ln.to_bus]
                expect = pi_k - D[ln.from_bus, kp] + D[ln.to_bus, kp]
                assert gamma[li, kp] == pytest.approx(expect, abs=1e-12)


class TestLineVariances:
    def test_remote_absorption_derived_value(self):
        sys_ = build_susceptance(tri_cycle())
        A = ParticipationMatrix(np.array([[1.0]]), pattern([2], [0]))
        var = line_variances(sys_, A, np.array([[1.0]]))
        assert var[0] == pytest.approx(1 / 9)

    def test_monte_carlo_oracle(self):
        sys_ = build_susceptance(tri_cycle())
        A = ParticipationMatrix(np.array([[1.0]]), pattern([2], [0]))
        var = line_variances(sys_, A, np.array([[1.0]]))
        rng = np.random.default_rng(99)
        omega = rng.standard_normal(200_000)
        # per sample: +omega at bus 0, -omega absorbed at bus 2
        inj = np.zeros((len(omega), 3))
        inj[:, 0] = omega
        inj[:, 2] = -omega
        from varflow.dclin import line_factor
        f01 = inj @ line_factor(sys_, 0).pi
        assert f01.var() == pytest.approx(var[0], abs=4 * np.sqrt(2 / len(omega)) * var[0])

    def test_self_absorption_zeroes_variance(self):
        sys_ = build_susceptance(tri_cycle())
        A = ParticipationMatrix(np.array([[1.0]]), pattern([0], [0]))
        np.testing.assert_allclose(line_variances(sys_, A, np.array([[2.5]])), 0.0,
                                   atol=1e-12)

    def test_figure1_candidate_exposure(self):
        k, D, L, mu, sigma = 10, 10, 800.0, 200.0, 100.0
        grid, stoch = make_figure1_case(k, D, L, mu, sigma)
        sys_ = build_susceptance(grid)
        idx = figure1_indices(k, D)
        entries = np.array([[1.0 / k]] * k + [[0.0]])
        A = ParticipationMatrix(entries, PatternK.for_model(stoch))
        var = line_variances(sys_, A, stoch.cov)
        assert var[idx["line_ab"]] == pytest.approx(sigma ** 2, rel=1e-10)
        assert var.sum() == pytest.approx(sigma ** 2 * (1 + 1 / k), rel=1e-10)

    def test_methods_agree_lemma_identity(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            n = int(rng.integers(4, 21))
            grid = random_connected_grid(rng, n)
            nb = list(rng.choice(n, size=min(n, 5), replace=False))
            pat = pattern(nb[:3], nb[1:4] if len(nb) >= 4 else nb[:1])
            A = random_participation(rng, pat)
            cov = random_psd(rng, len(pat.sources), scale=rng.uniform(0.1, 5.0))
            sys_ = build_susceptance(grid)
            v1 = line_variances(sys_, A, cov, method="gamma_form")
            v2 = line_variances(sys_, A, cov, method="pi_form")
            np.testing.assert_allclose(v1, v2, rtol=1e-10, atol=1e-12)

    def test_gauge_invariance_under_reduction_change(self):
        rng = np.random.default_rng(37)
        grid = random_connected_grid(rng, 10)
        pat = pattern([2, 5], [1, 7])
        A = random_participation(rng, pat)
        cov = random_psd(rng, 2)
        ref = line_variances(build_susceptance(grid, reduction_bus=9), A, cov)
        for red in (0, 4):
            v = line_variances(build_susceptance(grid, reduction_bus=red), A, cov)
            np.testing.assert_allclose(v, ref, rtol=1e-9, atol=1e-12)


class TestVarianceAlongBlend:
    def quad_fit(self, v0, vh, v1):
        a = 2 * v0 - 4 * vh + 2 * v1
        b = -3 * v0 + 4 * vh - v1
        return a, b, v0

    def test_quadratic_interpolation_at_quarter(self):
        rng = np.random.default_rng(41)
        for _ in range(10):
            grid = random_connected_grid(rng, int(rng.integers(4, 12)))
            pat = pattern([0, 2], [1])
            A0 = random_participation(rng, pat)
            A1 = random_participation(rng, pat)
            cov = random_psd(rng, 1)
            sys_ = build_susceptance(grid)
            v = {t: line_variances(sys_, A0.blend(A1, t), cov)
                 for t in (0.0, 0.25, 0.5, 1.0)}
            for li in range(grid.n_lines):
                a, b, c = self.quad_fit(v[0.0][li], v[0.5][li], v[1.0][li])
                interp = a * 0.0625 + b * 0.25 + c
                assert interp == pytest.approx(v[0.25][li], abs=1e-10 * (1 + abs(interp)))

    def test_convexity_in_t(self):
        rng = np.random.default_rng(43)
        for _ in range(10):
            grid = random_connected_grid(rng, 8)
            pat = pattern([0, 3, 5], [2, 6])
            A0 = random_participation(rng, pat)
            A1 = random_participation(rng, pat)
            cov = random_psd(rng, 2)
            sys_ = build_susceptance(grid)
            v = {t: line_variances(sys_, A0.blend(A1, t), cov) for t in (0.0, 0.5, 1.0)}
            lead = 2 * v[0.0] - 4 * v[0.5] + 2 * v[1.0]
            assert np.all(lead >= -1e-12 * (1 + np.abs(lead)))


class TestGenerationStats:
    def test_zero_row(self):
        gen = Generator(5, 0.0, 10.0, cost_c0=1.0, cost_c1=1.0)
        A = ParticipationMatrix(np.array([[1.0]]), pattern([2], [0]))
        var, cost = generation_stats(A, np.array([[4.0]]), gen, 2.0)
        assert var == 0.0
        assert cost == pytest.approx(1.0 * 4 + 1.0 * 2)

    def test_direct_substitution(self):
        gen = Generator(2, 0.0, 10.0, cost_c0=1.0, cost_c1=1.0, cost_c2=0.0,
                        participating=True)
        A = ParticipationMatrix(np.array([[0.5]]), pattern([2], [0]))
        var, cost = generation_stats(A, np.array([[1.0]]), gen, 2.0)
        assert var == pytest.approx(0.25)
        assert cost == pytest.approx((4 + 0.25) + 2)  # 6.25

    def test_equal_split_variance(self):
        k, sigma2 = 8, 4.0
        pat = pattern(list(range(1, k + 1)), [0])
        A = ParticipationMatrix(np.full((k, 1), 1.0 / k), pat)
        gen = Generator(3, 0.0, 10.0, participating=True)
        var, _ = generation_stats(A, np.array([[sigma2]]), gen, 1.0)
        assert var == pytest.approx(sigma2 / k ** 2)


class TestNuFromEpsilon:
    def test_median(self):
        assert nu_from_epsilon(0.5) == pytest.approx(0.0, abs=1e-12)

    def test_three_sigma(self):
        # high-precision inverse-erf oracle
        import mpmath
        eps = 0.0013499
        oracle = float(mpmath.sqrt(2) * mpmath.erfinv(1 - 2 * mpmath.mpf(str(eps))))
        got = nu_from_epsilon(eps)
        assert got == pytest.approx(oracle, abs=1e-10)
        assert got == pytest.approx(3.0, abs=1e-4)

    def test_five_percent(self):
        import mpmath
        oracle = float(mpmath.sqrt(2) * mpmath.erfinv(1 - 2 * mpmath.mpf("0.05")))
        assert nu_from_epsilon(0.05) == pytest.approx(oracle, abs=1e-10)
        assert nu_from_epsilon(0.05) == pytest.approx(1.6449, abs=1e-4)

    @given(st.floats(min_value=1e-6, max_value=1 - 1e-6))
    def test_matches_mpmath_everywhere(self, eps):
        import mpmath
        oracle = float(mpmath.sqrt(2) * mpmath.erfinv(1 - 2 * mpmath.mpf(eps)))
        assert nu_from_epsilon(eps) == pytest.approx(oracle, abs=1e-10)

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, eps):
        with pytest.raises(ValueError):
            nu_from_epsilon(eps)


class TestJsonInterface:
    def test_round_trip_identity_correlation(self):
        grid = tri_cycle()
        stoch = StochasticModel((0,), np.array([1.0]), np.array([[2.25]]), (1, 2))
        text = dump_stochastic_json(stoch, grid)
        back = load_stochastic_json(text, grid)
        assert back.sources == stoch.sources
        assert back.participants == stoch.participants
        np.testing.assert_allclose(back.cov, stoch.cov)
        assert json.loads(text)["correlation"] == "identity"

    def test_correlation_matrix_assembly(self):
        grid = tri_cycle()
        text = json.dumps({
            "sources": [{"bus": 1, "mean": 0.0, "std": 2.0},
                        {"bus": 2, "mean": 1.0, "std": 3.0}],
            "correlation": [[1.0, 0.5], [0.5, 1.0]],
            "participants": [3],
        })
        stoch = load_stochastic_json(text, grid)
        np.testing.assert_allclose(stoch.cov, [[4.0, 3.0], [3.0, 9.0]])

    def test_unknown_bus_rejected(self):
        grid = tri_cycle()
        text = json.dumps({"sources": [{"bus": 9, "mean": 0, "std": 1}],
                           "participants": [1]})
        with pytest.raises(StochasticModelError, match="unknown bus"):
            load_stochastic_json(text, grid)
