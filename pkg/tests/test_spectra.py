import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from mpmath import mp, mpf, power

from section_forge.spectra import (
    HyperbolicSpec,
    InvalidSpecError,
    check_codim_one,
    check_main,
    check_reversed,
    derive_constants,
    feasibility,
    pick_admissible,
    reverse,
)


def make(mu_m=0.3, mu_p=0.4, lam_m=2.0, lam_p=2.0, c=1.0, n_s=1, n_u=1, theta=0.5, alpha=None):
    return HyperbolicSpec(mu_m, mu_p, lam_m, lam_p, c, n_s, n_u, theta, alpha)


@st.composite
def specs(draw, n_u=None, with_alpha=False):
    mu_m = draw(st.floats(0.02, 0.98))
    mu_p = draw(st.floats(mu_m, 0.99))
    lam_m = draw(st.floats(1.01, 50.0))
    lam_p = draw(st.floats(lam_m, 60.0))
    return HyperbolicSpec(
        mu_m, mu_p, lam_m, lam_p, draw(st.floats(1.0, 5.0)),
        draw(st.integers(1, 12)), n_u if n_u is not None else draw(st.integers(1, 12)),
        draw(st.floats(0.01, 1.0)), draw(st.floats(0.01, 1.0)) if with_alpha else None,
    )


def mp_main(spec):
    mp.dps = 60
    lhs = power(mpf(spec.mu_plus), (spec.n_s - 1) * mpf(spec.theta)) * power(
        mpf(spec.lambda_plus), (spec.n_u - 1) * mpf(spec.theta))
    rhs = power(mpf(spec.mu_minus), 2 * (1 - mpf(spec.theta)))
    return lhs, rhs


class TestSpecValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(mu_m=0.5, mu_p=0.4), dict(mu_p=1.0), dict(lam_m=1.0), dict(lam_m=3.0, lam_p=2.0),
        dict(c=0.5), dict(n_s=0), dict(theta=0.0), dict(theta=1.5), dict(alpha=0.0),
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(InvalidSpecError):
            make(**kwargs)

    def test_json_roundtrip(self):
        spec = make(n_s=3, alpha=0.7)
        text = spec.to_json()
        assert set(json.loads(text)) == {"mu_minus", "mu_plus", "lambda_minus", "lambda_plus",
                                         "c", "n_s", "n_u", "theta", "alpha"}
        assert HyperbolicSpec.from_json(text) == spec

    def test_json_unknown_field(self):
        with pytest.raises(InvalidSpecError):
            HyperbolicSpec.from_json('{"mu_minus": 0.3, "bogus": 1}')


class TestCheckMain:
    def test_codim3_fails(self):
        v = check_main(make(n_s=1, n_u=1, theta=0.5, mu_m=0.3))
        assert not v.holds
        assert v.margin == pytest.approx(math.log(0.3))

    def test_theta_one(self):
        assert check_main(make(n_s=3, n_u=1, theta=1.0, mu_p=0.4)).holds

    def test_derived_example(self):
        spec = make(mu_m=0.3, mu_p=0.4, lam_p=2.0, n_s=4, n_u=2, theta=0.9)
        lhs, rhs = mp_main(spec)
        assert float(lhs) == pytest.approx(0.157213, abs=1e-6)
        assert float(rhs) == pytest.approx(0.786003, abs=1e-6)
        v = check_main(spec)
        assert v.holds
        assert v.margin == pytest.approx(float(mp.log(rhs) - mp.log(lhs)), rel=1e-12)

    def test_boundary_is_false(self):
        # theta = 1 and n_s = n_u = 1 gives lhs = rhs = 0
        v = check_main(make(theta=1.0))
        assert v.margin == 0.0 and not v.holds

    def test_log_space_survives_underflow(self):
        spec = make(mu_m=0.01, mu_p=0.01, n_s=400, n_u=1, theta=0.9)
        assert spec.mu_plus ** ((spec.n_s - 1) * spec.theta) == 0.0
        assert check_main(spec).holds

    @settings(max_examples=300, deadline=None)
    @given(specs())
    def test_agrees_with_direct_powers(self, spec):
        lhs = spec.mu_plus ** ((spec.n_s - 1) * spec.theta) * spec.lambda_plus ** ((spec.n_u - 1) * spec.theta)
        rhs = spec.mu_minus ** (2 * (1 - spec.theta))
        if 1e-300 < lhs < 1e300 and rhs > 1e-300 and abs(math.log(lhs) - math.log(rhs)) > 1e-9:
            assert check_main(spec).holds == (lhs < rhs)


class TestVariants:
    def test_codim_examples(self):
        assert check_codim_one(make(n_s=2, theta=1.0, mu_p=0.5)).holds
        assert not check_codim_one(make(n_s=1, theta=0.7)).holds
        v = check_codim_one(make(mu_m=0.5, mu_p=0.5, n_s=3, theta=0.8))
        assert v.holds
        assert v.margin == pytest.approx(math.log(0.5 ** 0.4) - math.log(0.5 ** 1.6))

    def test_codim_rejects_nu(self):
        with pytest.raises(InvalidSpecError):
            check_codim_one(make(n_u=2))

    def test_reversed_examples(self):
        assert check_reversed(make(alpha=1.0, n_u=3, n_s=1, lam_m=2.0, lam_p=3.0)).holds
        assert not check_reversed(make(n_u=1, n_s=1, alpha=0.5, lam_m=2.0, lam_p=2.0)).holds
        with pytest.raises(InvalidSpecError):
            check_reversed(make())

    def test_reversed_golden(self):
        g = (3 + math.sqrt(5)) / 2
        spec = make(mu_m=1 / g, mu_p=1 / g, lam_m=g, lam_p=g, n_u=2, n_s=1, alpha=0.9)
        # direct: lambda_+^(0.2) < lambda_-^(0.9) mu_-^0
        direct = g ** 0.2 < g ** 0.9
        assert check_reversed(spec).holds == direct == check_main(reverse(spec)).holds

    @settings(max_examples=1000, deadline=None)
    @given(specs(n_u=1))
    def test_codim_equals_main(self, spec):
        assert check_codim_one(spec).holds == check_main(spec).holds

    @settings(max_examples=1000, deadline=None)
    @given(specs(with_alpha=True))
    def test_reversed_equals_reversed_main(self, spec):
        assert check_reversed(spec).holds == check_main(reverse(spec)).holds


class TestDeriveConstants:
    def test_unit(self):
        led = derive_constants(1, 1, 1, 1, 1, 1, 3)
        assert (led.D, led.K, led.H) == (3, 1, 12)

    def test_general(self):
        led = derive_constants(A=2, B=3, C=0.5, c=2, L=1.5, b=1.2, n=5)
        assert led.D == pytest.approx(2.0)
        assert led.K == pytest.approx(1.5)
        # oracle: 4 * max(2^2 * 2, 1.5 * 1.5 * (1.2 * 2)^2)
        assert led.H == pytest.approx(4 * max(8.0, 1.5 * 1.5 * 2.4 ** 2))
        assert led.H == pytest.approx(51.84)

    @pytest.mark.parametrize("bad", [dict(A=0), dict(C=-1), dict(b=0)])
    def test_positivity(self, bad):
        args = dict(A=1, B=1, C=1, c=1, L=1, b=1, n=3) | bad
        with pytest.raises(ValueError):
            derive_constants(**args)


def brute_force_nonempty(spec, H, log_eps, t_grid):
    """Scan the two original inequalities on an (epsilon, t) grid; one bool per epsilon row."""
    eps = np.exp(log_eps)[:, None]
    t = t_grid[None, :]
    q = spec.mu_plus ** (spec.n_s - 1) * spec.lambda_plus ** (spec.n_u - 1)
    with np.errstate(over="ignore", under="ignore"):
        first = H * eps ** (spec.theta - 1) * q ** t < 1
        second = H * eps ** spec.theta * spec.mu_minus ** (-2 * t) < 1
    return np.any(first & second, axis=1)


class TestFeasibility:
    def test_derived_example(self):
        spec = make(mu_m=0.3, mu_p=0.4, lam_p=2.0, n_s=4, n_u=2, theta=0.9)
        reg = feasibility(spec, 10.0, [1e-6])
        eps, lo, hi = reg.samples[0]
        assert lo == pytest.approx(1.79213470760749, rel=1e-12)
        assert hi == pytest.approx(4.20747643666504, rel=1e-12)
        assert reg.nonempty[0]
        assert reg.nonempty_below is not None and reg.criterion_agrees

    def test_theta_one_eps_independent_lower(self):
        spec = make(mu_m=0.3, mu_p=0.4, n_s=3, n_u=1, theta=1.0)
        eps = np.logspace(-2, -12, 6)
        reg = feasibility(spec, 5.0, eps)
        assert np.allclose(reg.samples[:, 1], reg.samples[0, 1])
        assert np.all(np.diff(reg.samples[:, 2]) > 0)
        assert reg.nonempty[-1]

    def test_degenerate_cat_map(self):
        g = (3 + math.sqrt(5)) / 2
        spec = make(mu_m=1 / g, mu_p=1 / g, lam_m=g, lam_p=g, theta=0.5)
        reg = feasibility(spec, 0.1, [0.5, 0.02, 1e-3])
        assert reg.degenerate
        # H eps^(-1/2) < 1  <=>  eps > 0.01
        assert list(reg.nonempty) == [True, True, False]
        assert reg.samples[0, 1] == -np.inf and reg.samples[2, 1] == np.inf
        assert reg.nonempty_below is None

    def test_failing_spec_empty_below_threshold(self):
        spec = make(mu_m=0.3, mu_p=0.9, lam_p=3.0, n_s=2, n_u=2, theta=0.5)
        assert not check_main(spec).holds
        log_eps = np.linspace(np.log(1e-2), np.log(1e-150), 200)
        reg = feasibility(spec, 10.0, np.exp(log_eps))
        assert not reg.nonempty[-50:].any()
        assert not brute_force_nonempty(spec, 10.0, log_eps[-50:], np.logspace(-3, 4, 200)).any()

    def test_rejects(self):
        with pytest.raises(ValueError):
            feasibility(make(), 0.0, [0.1])
        with pytest.raises(ValueError):
            feasibility(make(), 1.0, [1.5])

    def test_csv(self):
        reg = feasibility(make(n_s=3, theta=0.9), 2.0, [1e-3, 1e-6])
        lines = reg.to_csv().splitlines()
        assert lines[0] == "epsilon,t_lo,t_hi,nonempty"
        assert len(lines) == 3

    def test_pick_admissible(self):
        spec = make(mu_m=0.3, mu_p=0.4, lam_p=2.0, n_s=4, n_u=2, theta=0.9)
        eps, t = pick_admissible(feasibility(spec, 10.0, [1e-6, 1e-8]))
        H = 10.0
        q = 0.4 ** 3 * 2.0
        assert H * eps ** (0.9 - 1) * q ** t < 1 and H * eps ** 0.9 * 0.3 ** (-2 * t) < 1
