import numpy as np
import pytest

from adfgof import limit_laws as ll
from adfgof.errors import ValidationError

from . import oracles


class TestSupBM:
    @pytest.mark.parametrize("x", [0.3, 0.8, 0.999, 1.0, 1.5, 2.2414, 3.5])
    def test_series_vs_oracle(self, x):
        assert ll.sup_bm_cdf_series(x) == pytest.approx(float(oracles.sup_bm_cdf(x)), abs=1e-13)

    def test_known_quantiles(self):
        law = ll.sup_bm_law()
        # upper points of sup |W| on [0, 1]
        assert law.quantile(0.05) == pytest.approx(2.2414, abs=5e-4)
        assert law.quantile(0.01) == pytest.approx(2.8070, abs=5e-4)

    def test_sf_edges(self):
        assert ll.sup_bm_sf(0.0) == 1.0
        assert ll.sup_bm_sf(-1.0) == 1.0
        assert ll.sup_bm_sf(10.0) < 1e-20
        with pytest.raises(ValidationError):
            ll.sup_bm_cdf_series(0.0)

    def test_monotone(self):
        law = ll.sup_bm_law()
        assert np.all(np.diff(law.cdf_values) >= 0)


class TestPoisson:
    def test_huge_boundary(self):
        assert ll.sup_bm_cdf_poisson(50.0, 100) == pytest.approx(1.0, abs=1e-12)

    def test_small_boundary(self):
        assert ll.sup_bm_cdf_poisson(0.05, 500) < 1e-6

    @pytest.mark.parametrize("x", [1.64, 1.96, 2.24])
    def test_matches_series(self, x):
        assert abs(ll.sup_bm_cdf_poisson(x, 5000) - ll.sup_bm_cdf_series(x)) < 5e-3

    def test_invalid(self):
        with pytest.raises(ValidationError):
            ll.sup_bm_cdf_poisson(1.0, 0)


class TestBivariateNormal:
    @pytest.mark.parametrize("r", [-0.9, -0.5, 0.0, 0.3, 0.95])
    def test_against_quadrature(self, r):
        for x1, x2 in [(-1.0, 0.5), (0.2, 0.2), (2.5, -1.7), (-3.0, -2.0)]:
            assert ll.bvn_cdf(x1, x2, r) == pytest.approx(float(oracles.bvn_cdf(x1, x2, r)), abs=1e-12)

    @pytest.mark.parametrize("r", [-0.7, 0.0, 0.4])
    def test_sheppard(self, r):
        assert ll.bvn_cdf(0.0, 0.0, r) == pytest.approx(0.25 + np.arcsin(r) / (2 * np.pi), abs=1e-14)

    def test_infinite_arguments(self):
        assert ll.bvn_cdf(np.inf, 0.3, 0.5) == pytest.approx(0.6179114221889527)
        assert ll.bvn_cdf(-np.inf, 0.3, 0.5) == 0.0
        assert ll.bvn_cdf(np.inf, np.inf, 0.5) == 1.0

    def test_invalid_r(self):
        with pytest.raises(ValidationError):
            ll.bvn_cdf(0.0, 0.0, 1.0)


class TestCopula:
    @pytest.mark.parametrize("r", [-0.5, 0.0, 0.5])
    def test_margins_and_symmetry(self, r):
        s = np.linspace(0.0, 1.0, 11)
        np.testing.assert_allclose(ll.copula_H_r(s, 1.0, r), s, atol=1e-14)
        np.testing.assert_allclose(ll.copula_H_r(0.0, s, r), 0.0, atol=1e-14)
        a, b = np.meshgrid(s[1:-1], s[1:-1])
        np.testing.assert_allclose(ll.copula_H_r(a, b, r), ll.copula_H_r(b, a, r), atol=1e-14)

    @pytest.mark.parametrize("r", [-0.5, 0.5])
    def test_two_increasing(self, r):
        g = np.random.default_rng(0)
        s = np.sort(g.random((100, 2)), axis=1)
        t = np.sort(g.random((100, 2)), axis=1)
        mass = (ll.copula_H_r(s[:, 1], t[:, 1], r) - ll.copula_H_r(s[:, 0], t[:, 1], r)
                - ll.copula_H_r(s[:, 1], t[:, 0], r) + ll.copula_H_r(s[:, 0], t[:, 0], r))
        assert np.all(mass >= -1e-14)

    def test_domain(self):
        with pytest.raises(ValidationError):
            ll.copula_H_r(1.5, 0.5, 0.0)

    def test_table_interpolation(self):
        table = ll._CopulaTable(0.5, 257)
        g = np.random.default_rng(1)
        s, t = g.random(200), g.random(200)
        assert np.max(np.abs(np.diag(table(s, t)) - ll.copula_H_r(s, t, 0.5))) < 1e-4


class TestLimitLaw:
    def test_simulation_lookup(self):
        law = ll.LimitLaw("test", np.array([1.0, 2.0, 3.0, 4.0]), np.arange(1, 5) / 4, "simulation")
        assert law.cdf(2.5) == 0.5
        assert law.pvalue(4.0) == 0.0
        assert law.quantile(0.5) == pytest.approx(2.0)
        assert law.quantile(0.375) == pytest.approx(2.5)
        with pytest.raises(ValidationError):
            law.quantile(0.9)
        with pytest.raises(ValidationError):
            law.quantile(1.0)


class TestLr:
    ARGS = dict(n_intensity=100, m_reps=40, grid=65, seed=3)

    def test_deterministic_and_cached(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ll.CACHE_ENV, str(tmp_path))
        a = ll.l_r_cdf(0.3, **self.ARGS)
        files = list(tmp_path.iterdir())
        assert len(files) == 1
        b = ll.l_r_cdf(0.3, **self.ARGS)
        c = ll.l_r_cdf(0.3, use_cache=False, **self.ARGS)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.x, c.x)
        assert np.all(np.diff(a.x) >= 0) and a.x[0] > 0

    def test_workers_agree(self):
        one = ll.simulate_field_sups(0.0, 100, 12, 5, grid=65)
        two = ll.simulate_field_sups(0.0, 100, 12, 5, grid=65, workers=2)
        np.testing.assert_array_equal(one, two)

    def test_stale_cache_ignored(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ll.CACHE_ENV, str(tmp_path))
        a = ll.l_r_cdf(0.0, **self.ARGS)
        path = next(tmp_path.iterdir())
        lines = path.read_text().splitlines()
        path.write_text("\n".join([lines[0].replace("m_reps=40", "m_reps=41")] + lines[1:]) + "\n")
        b = ll.l_r_cdf(0.0, **self.ARGS)
        np.testing.assert_array_equal(a.x, b.x)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            ll.l_r_cdf(0.0, n_intensity=0)
