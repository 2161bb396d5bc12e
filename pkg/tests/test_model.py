import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sivcharge.model import (
    NEAR_RESONANT_DETUNING_MHZ,
    ChargeModelParams,
    ChargeState,
    Color,
    LaserChannel,
    RateSet,
    build_rates,
    drift_factor,
    effective_bright_to_dark_rate,
    effective_rates,
    excitation_rate,
    hole_flux,
)
from sivcharge.profiles import list_profiles, load_profile, profiles_version

powers = st.floats(0, 2000, allow_nan=False)
volts = st.floats(-300, 300, allow_nan=False)
detunings = st.floats(-5e3, 5e3, allow_nan=False)


def channels_strategy():
    return st.tuples(powers, powers, powers, detunings).map(lambda t: [
        LaserChannel(Color.GREEN, t[0]),
        LaserChannel(Color.RESONANT, t[1], t[3]),
        LaserChannel(Color.NEAR_RESONANT, t[2]),
    ])


class TestTypes:
    def test_three_states(self):
        assert [s.name for s in ChargeState] == ["BRIGHT_GROUND", "BRIGHT_EXCITED", "DARK"]

    def test_default_detunings(self):
        assert LaserChannel(Color.RESONANT, 1.0).detuning == 0.0
        nr = LaserChannel(Color.NEAR_RESONANT, 1.0).detuning
        assert nr == NEAR_RESONANT_DETUNING_MHZ
        assert nr == pytest.approx(1.11e6, rel=0.01)

    @pytest.mark.parametrize("bad", [-1.0, math.nan, math.inf])
    def test_power_validation(self, bad):
        with pytest.raises(ValueError):
            LaserChannel(Color.GREEN, bad)

    def test_zero_power_channel_contributes_nothing(self, params):
        base = build_rates([LaserChannel("green", 300)], 30.0, params)
        more = build_rates([LaserChannel("green", 300), LaserChannel("resonant", 0.0),
                            LaserChannel("near_resonant", 0.0)], 30.0, params)
        assert base == more

    @pytest.mark.parametrize("field,value", [("p_sat", 0.0), ("gamma_0", -1.0), ("zpl_branching", 1.5),
                                             ("k_ion", -1.0), ("f_max", 0.5)])
    def test_param_validation(self, field, value):
        with pytest.raises(ValueError):
            ChargeModelParams().replace(**{field: value})

    def test_params_dict_round_trip(self, params):
        assert ChargeModelParams.from_dict(params.to_dict()) == params
        unq = load_profile("emitter_a_unquenched")
        assert ChargeModelParams.from_dict(unq.to_dict()) == unq

    def test_unknown_param_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ChargeModelParams.from_dict({"gamma": 1.0})

    def test_digest_tracks_values(self, params):
        assert params.digest() == ChargeModelParams().digest()
        assert params.digest() != params.replace(k_ion=1.0).digest()


class TestExcitation:
    def test_zero_power(self, params):
        assert excitation_rate(0.0, 123.0, params) == 0.0

    def test_saturation_limit(self, params):
        assert excitation_rate(1e12 * params.p_sat, 0.0, params) == pytest.approx(params.r_max, rel=1e-9)

    def test_half_max_at_half_broadened_width(self, params):
        p = 3 * params.p_sat
        ratio = excitation_rate(p, params.gamma_0, params) / excitation_rate(p, 0.0, params)
        assert ratio == pytest.approx(0.5, rel=1e-12)

    @given(p=st.floats(0, 1e4), d=detunings)
    def test_symmetric_in_detuning(self, p, d):
        prm = ChargeModelParams()
        assert excitation_rate(p, d, prm) == excitation_rate(p, -d, prm)

    @given(p1=st.floats(0, 1e4), p2=st.floats(0, 1e4), d=detunings)
    def test_monotone_in_power(self, p1, p2, d):
        prm = ChargeModelParams()
        lo, hi = sorted((p1, p2))
        assert excitation_rate(lo, d, prm) <= excitation_rate(hi, d, prm)


class TestHoleFlux:
    def test_no_light(self, params):
        assert hole_flux([], 50.0, params) == 0.0
        assert hole_flux([LaserChannel("green", 0.0)], 50.0, params) == 0.0

    def test_zero_bias(self, params):
        assert hole_flux([LaserChannel("green", 300)], 0.0, params) == params.hole_gen[Color.GREEN] * 300

    def test_half_saturation(self, params):
        ch = [LaserChannel("green", 300)]
        expect = hole_flux(ch, 0.0, params) * (1 + (params.f_max - 1) / 2)
        assert hole_flux(ch, params.v_half, params) == pytest.approx(expect, rel=1e-12)

    @given(v=st.floats(-300, 0))
    def test_drift_is_one_for_non_positive_bias(self, v):
        assert drift_factor(v, ChargeModelParams()) == 1.0


class TestBuildRates:
    def test_dark_at_zero_bias(self, params):
        assert build_rates([], 0.0, params).is_zero()

    def test_field_ionization_only(self, params):
        r = build_rates([], 150.0, params.replace(v_field_ion=120.0))
        assert r.field_ionization > 0
        assert RateSet(field_ionization=r.field_ionization) == r

    def test_bias_raises_capture(self, params):
        ch = [LaserChannel("green", 300)]
        assert build_rates(ch, 50.0, params).capture > build_rates(ch, 0.0, params).capture

    def test_generator_structure(self, params):
        q = build_rates([LaserChannel("resonant", 13.0), LaserChannel("green", 300)], 140.0, params).generator()
        assert np.allclose(q.sum(axis=1), 0.0, atol=1e-6)
        allowed = {(0, 1), (1, 0), (1, 2), (0, 2), (2, 0)}
        for i in range(3):
            for j in range(3):
                if i != j and (i, j) not in allowed:
                    assert q[i, j] == 0.0

    def test_rate_lookup(self, params):
        r = build_rates([LaserChannel("resonant", 13.0)], 0.0, params)
        assert r.rate(ChargeState.BRIGHT_EXCITED, ChargeState.DARK) == params.k_ion
        assert r.rate(ChargeState.DARK, ChargeState.BRIGHT_EXCITED) == 0.0

    @settings(max_examples=200)
    @given(ch=channels_strategy(), v=volts)
    def test_rates_non_negative_and_finite(self, ch, v):
        r = build_rates(ch, v, ChargeModelParams())
        vals = [r.excitation, r.decay, r.photoionization, r.field_ionization, r.capture]
        assert all(x >= 0 and math.isfinite(x) for x in vals)

    @given(p=st.floats(0, 1e3), d=detunings, v=st.floats(-300, 119.999))
    def test_dark_stability(self, p, d, v):
        assert build_rates([LaserChannel("resonant", 0.0, d)], v, ChargeModelParams()).is_zero()

    @given(ch=channels_strategy(), v1=st.floats(0, 120), v2=st.floats(0, 120))
    def test_capture_monotone_in_bias_below_onset(self, ch, v1, v2):
        prm = ChargeModelParams()
        lo, hi = sorted((v1, v2))
        assert build_rates(ch, lo, prm).capture <= build_rates(ch, hi, prm).capture * (1 + 1e-12)

    @given(ch=channels_strategy(), v1=st.floats(0, 300), v2=st.floats(0, 300))
    def test_capture_monotone_in_bias_unquenched(self, ch, v1, v2):
        prm = load_profile("emitter_a_unquenched")
        lo, hi = sorted((v1, v2))
        assert build_rates(ch, lo, prm).capture <= build_rates(ch, hi, prm).capture * (1 + 1e-12)

    @given(ch=channels_strategy(), v=volts, extra=powers, k=st.integers(0, 2))
    def test_capture_monotone_in_power(self, ch, v, extra, k):
        prm = ChargeModelParams()
        boosted = list(ch)
        boosted[k] = LaserChannel(ch[k].color, ch[k].power + extra, ch[k].detuning)
        assert build_rates(ch, v, prm).capture <= build_rates(boosted, v, prm).capture * (1 + 1e-12)

    def test_capture_suppressed_above_onset(self, params):
        ch = [LaserChannel("green", 300)]
        assert build_rates(ch, 180.0, params).capture < 0.02 * build_rates(ch, 120.0, params).capture


class TestEffectiveRate:
    def test_anchor_at_13_uw(self, params):
        rate = effective_bright_to_dark_rate(params, 13.0)
        assert rate >= 400.0
        assert 1e3 / rate <= 2.5

    def test_zero_power(self, params):
        assert effective_bright_to_dark_rate(params, 0.0) == 0.0

    def test_doubling_deep_below_saturation(self, params):
        p = 0.025 * params.p_sat
        assert effective_bright_to_dark_rate(params, 2 * p) == pytest.approx(
            2 * effective_bright_to_dark_rate(params, p), rel=0.05)

    @staticmethod
    def _spread(params, lo, hi):
        ps = np.linspace(lo, hi, 50) * params.p_sat
        ratio = np.array([effective_bright_to_dark_rate(params, p) / p for p in ps])
        return ratio.max() / ratio.min() - 1

    @pytest.mark.xfail(strict=True, reason="saturating excitation bends the rate by ~9% over this decade")
    def test_linear_within_one_percent_over_decade(self, params):
        assert self._spread(params, 0.01, 0.1) <= 0.01

    def test_linear_within_one_percent_deep_below_saturation(self, params):
        assert self._spread(params, 0.001, 0.01) <= 0.01

    def test_matches_effective_rates(self, params):
        r = build_rates([LaserChannel("resonant", 13.0)], 0.0, params)
        assert effective_rates(r).bright_to_dark == pytest.approx(effective_bright_to_dark_rate(params, 13.0))


class TestProfiles:
    def test_listing(self):
        names = [n for n, _ in list_profiles()]
        assert "emitter_a" in names
        assert profiles_version() >= 1

    def test_defaults_equal_calibrated_profile(self):
        assert load_profile("emitter_a") == ChargeModelParams()

    def test_inheritance(self):
        bulk = load_profile("bulk_no_electrodes")
        assert bulk.f_max == 1.0 and bulk.k_ion == ChargeModelParams().k_ion

    def test_unknown(self):
        with pytest.raises(KeyError, match="unknown profile"):
            load_profile("nope")
