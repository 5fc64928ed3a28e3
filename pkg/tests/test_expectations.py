import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from mpqlab.expectations import (
    REFERENCE_MOMENTS,
    REFERENCE_RECON,
    ExpectationRow,
    empirical_ratio_check,
    gaussian_expectations,
    k_value,
    monte_carlo_expectations,
    recon_ratio_table,
)
from mpqlab.numerics import make_rng

TABLE = recon_ratio_table()


def scalar_delta(x: float, bits: int, lo: float = -3.0, hi: float = 3.0) -> float:
    s = (hi - lo) / (2**bits - 1)
    z = lo / s + 2 ** (bits - 1)
    q = min(max(math.floor(x / s - z + 0.5), -(2 ** (bits - 1))), 2 ** (bits - 1) - 1)
    return s * (q + z) - x


def quad_moments(bits: int, lo: float = -3.0, hi: float = 3.0) -> tuple[float, float]:
    """Adaptive quadrature with every cell edge passed as a breakpoint."""
    s = 6.0 / (2**bits - 1)
    edges = [-3.0 + s * (j + 0.5) for j in range(2**bits - 1)]
    pts = [e for e in edges if lo < e < hi]
    f_xd = lambda x: x * scalar_delta(x, bits) * norm.pdf(x)
    f_dd = lambda x: scalar_delta(x, bits) ** 2 * norm.pdf(x)
    kw = dict(points=pts or None, limit=4 * len(pts) + 50, epsabs=1e-13, epsrel=1e-12)
    return integrate.quad(f_xd, lo, hi, **kw)[0], integrate.quad(f_dd, lo, hi, **kw)[0]


class TestMoments:
    def test_one_bit_closed_form(self):
        phi0, phi3, mass = norm.pdf(0), norm.pdf(3), 2 * norm.cdf(3) - 1
        second = mass - 6 * phi3  # integral of x^2 phi over [-3, 3]
        first_abs = 2 * (phi0 - phi3)  # integral of |x| phi over [-3, 3]
        row = gaussian_expectations(1)
        assert row.e_xd == pytest.approx(3 * first_abs - second, abs=1e-12)
        assert row.e_dd == pytest.approx(9 * mass - 6 * first_abs + second, abs=1e-12)

    @pytest.mark.parametrize("bits", range(1, 9))
    def test_against_adaptive_quadrature(self, bits):
        row = gaussian_expectations(bits)
        xd, dd = quad_moments(bits)
        assert row.e_xd == pytest.approx(xd, abs=1e-9)
        assert row.e_dd == pytest.approx(dd, abs=1e-9)

    def test_full_domain_adds_the_tails(self):
        row = gaussian_expectations(2, domain="full")
        xd, dd = quad_moments(2, -8.0, 8.0)
        assert (row.e_xd, row.e_dd) == (pytest.approx(xd, abs=1e-9), pytest.approx(dd, abs=1e-9))
        assert row.e_dd > gaussian_expectations(2).e_dd

    @pytest.mark.parametrize("bits", [1, 2])
    def test_reference_values(self, bits):
        row = gaussian_expectations(bits)
        ref_xd, ref_dd = REFERENCE_MOMENTS[bits]
        assert row.e_xd == pytest.approx(ref_xd, rel=0.01)
        assert row.e_dd == pytest.approx(ref_dd, rel=0.01)

    def test_reference_table(self):
        for bits, (ref_xd, ref_dd) in REFERENCE_MOMENTS.items():
            row = gaussian_expectations(bits)
            assert row.e_xd == pytest.approx(ref_xd, rel=0.01)
            assert row.e_dd == pytest.approx(ref_dd, rel=0.01)

    def test_error_shrinks_with_bits(self):
        dd = [gaussian_expectations(b).e_dd for b in range(1, 12)]
        assert all(a > b > 0 for a, b in zip(dd, dd[1:]))

    def test_monte_carlo_agrees(self):
        x = make_rng(0).standard_normal(10**6)
        for bits in range(1, 9):
            mc = monte_carlo_expectations(bits, x)
            q = gaussian_expectations(bits)
            assert abs(mc.row.e_xd - q.e_xd) < 3 * mc.se_xd
            assert abs(mc.row.e_dd - q.e_dd) < 3 * mc.se_dd
            assert mc.samples == 10**6

    def test_bad_domain(self):
        with pytest.raises(ValueError):
            gaussian_expectations(2, domain="half")
        with pytest.raises(ValueError):
            monte_carlo_expectations(2, np.zeros(3), domain="half")


class TestK:
    def test_zero_rows(self):
        zero = ExpectationRow(8, 1.0, 0.0, 0.0)
        assert k_value(zero, zero) == 0.0

    def test_symmetric_closed_form(self):
        for bits in range(1, 9):
            row = gaussian_expectations(bits)
            a, b = row.e_xd, row.e_dd
            assert k_value(row, row) == pytest.approx(2 * b + b * b + 2 * a * a + 4 * a * b, rel=1e-14)

    def test_table_structure(self):
        assert TABLE.bits == list(range(1, 9))
        assert TABLE.normalized[1] == 1.0
        ks = [TABLE.k[b] for b in TABLE.bits]
        assert all(a > b > 0 for a, b in zip(ks, ks[1:]))
        for b in range(2, 9):
            assert TABLE.ratio[b] == pytest.approx(ks[b - 2] / ks[b - 1])

    def test_ratios_against_reference(self):
        assert TABLE.ratio[2] == pytest.approx(REFERENCE_RECON[2][1], rel=0.10)
        for b in (6, 7, 8):
            assert 3.8 <= TABLE.ratio[b] <= 4.35
        assert 3.8 <= TABLE.ratio[8] <= 4.3

    def test_neighbor_ratio(self):
        assert TABLE.neighbor_ratio(4, 3) == TABLE.ratio[4]
        assert TABLE.neighbor_ratio(3, 4) == 1 / TABLE.ratio[4]
        assert TABLE.neighbor_ratio(8, 9) == 0.25
        assert TABLE.neighbor_ratio(10, 9) == 4.0
        assert TABLE.neighbor_ratio(1, 0) is None
        with pytest.raises(ValueError):
            TABLE.neighbor_ratio(4, 2)

    def test_non_contiguous_range(self):
        with pytest.raises(ValueError):
            recon_ratio_table([1, 3])

    def test_serializable(self):
        d = TABLE.to_dict()
        assert set(d) == {"bits", "rows", "k", "normalized", "ratio"}
        assert d["normalized"]["1"] == 1.0


class TestEmpiricalRatio:
    def test_four_bits(self):
        r = empirical_ratio_check(make_rng(0), 4)
        assert r.defined and len(r.trials) == 20
        assert abs(r.measured / r.predicted - 1) < 0.25
        assert r.predicted == TABLE.ratio[4]

    def test_deterministic(self):
        a = empirical_ratio_check(make_rng(1), 3, trials=4)
        b = empirical_ratio_check(make_rng(1), 3, trials=4)
        assert a == b

    def test_exact_quantization_is_flagged(self):
        r = empirical_ratio_check(make_rng(0), 32, trials=2)
        assert not r.defined and math.isnan(r.measured)

    def test_needs_two_bits(self):
        with pytest.raises(ValueError):
            empirical_ratio_check(make_rng(0), 1)
