from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy import stats

from sivcharge.engine import (
    EnsembleResult,
    bright_population,
    expected_count_rate,
    propagate_populations,
    segment_rates,
    simulate_ensemble,
    simulate_trajectory,
    stochastic_expm,
    steady_state,
)
from sivcharge.model import ChargeModelParams, ChargeState, LaserChannel, RateSet, build_rates, effective_rates
from sivcharge.photonics import DetectorParams, simulate_histogram, window_intensity
from sivcharge.sequence import PulseSequence, Segment, ms, protocol_fig1, protocol_fig3, protocol_ple, us

G, E, D = ChargeState.BRIGHT_GROUND, ChargeState.BRIGHT_EXCITED, ChargeState.DARK
ALLOWED = {(G, E), (E, G), (E, D), (G, D), (D, G)}


def one_segment(duration, channels=(), voltage=0.0):
    return PulseSequence((Segment(duration, tuple(channels), voltage),))


class TestTrajectory:
    def test_absorbing_dark(self, params):
        traj = simulate_trajectory(one_segment(ms(100)), params, D, seed=1)
        assert traj.jumps == [] and traj.emissions == []
        assert traj.initial_state is D

    @pytest.mark.parametrize("mode", ["full", "reduced"])
    def test_deterministic(self, scaled_params, mode):
        seq = protocol_fig3(tau2=2, voltage=50)
        a = simulate_trajectory(seq, scaled_params, D, seed=99, mode=mode)
        b = simulate_trajectory(seq, scaled_params, D, seed=99, mode=mode)
        assert np.array_equal(a.jump_times, b.jump_times)
        assert np.array_equal(a.jump_states, b.jump_states)
        assert np.array_equal(a.emission_times, b.emission_times)
        c = simulate_trajectory(seq, scaled_params, D, seed=100, mode=mode)
        assert not np.array_equal(a.jump_times, c.jump_times)

    def test_jumps_ordered_and_allowed(self, scaled_params):
        seq = protocol_fig3(tau2=2, voltage=140)
        for seed in range(20):
            traj = simulate_trajectory(seq, scaled_params, D, seed=seed, mode="full")
            assert np.all(np.diff(traj.jump_times) > 0)
            assert np.all(np.diff(traj.emission_times) > 0)
            states = [traj.initial_state] + [s for _, s in traj.jumps]
            assert all((a, b) in ALLOWED for a, b in zip(states, states[1:]))
            assert np.all((traj.jump_times >= 0) & (traj.jump_times < seq.period))

    def test_emissions_follow_relaxations(self, scaled_params):
        seq = protocol_ple()
        bands = []
        for seed in range(200):
            traj = simulate_trajectory(seq, scaled_params, G, seed=seed, mode="full")
            prev = [traj.initial_state] + [s for _, s in traj.jumps]
            relax = [t for (t, s), p in zip(traj.jumps, prev) if p is E and s is G]
            assert np.array_equal(np.array(relax, dtype=float), traj.emission_times)
            bands.append(traj.emission_bands)
        bands = np.concatenate(bands)
        assert bands.size > 500
        zpl = np.mean(bands == 0)
        assert abs(zpl - scaled_params.zpl_branching) < 4 * np.sqrt(zpl * (1 - zpl) / bands.size)

    def test_rejects_invalid_sequence(self, params):
        with pytest.raises(ValueError):
            simulate_trajectory(PulseSequence((Segment(0),)), params)

    def test_waiting_times_are_exponential(self, params):
        # Dark -> bright under green light only: a single constant rate
        seq = one_segment(ms(50), [LaserChannel("green", 1.0)])
        rate = build_rates(seq.segments[0].channels, 0.0, params).capture
        waits = []
        for seed in range(10_000):
            traj = simulate_trajectory(seq, params, D, seed=seed)
            if traj.jump_times.size:
                waits.append(traj.jump_times[0])
        waits = np.array(waits) * 1e-9
        censor = 50e-3
        cdf = lambda x: (1 - np.exp(-rate * x)) / (1 - np.exp(-rate * censor))
        assert stats.kstest(waits, cdf).pvalue > 0.01

    def test_boundary_redraw_is_exact(self, params):
        # rate switches at 5 ms; the first jump time has a piecewise exponential law
        c1 = build_rates([LaserChannel("green", 0.5)], 0.0, params).capture
        c2 = build_rates([LaserChannel("green", 2.0)], 0.0, params).capture
        seq = PulseSequence((Segment(ms(5), (LaserChannel("green", 0.5),)),
                             Segment(ms(45), (LaserChannel("green", 2.0),))))
        t = []
        for seed in range(10_000):
            traj = simulate_trajectory(seq, params, D, seed=seed)
            if traj.jump_times.size:
                t.append(traj.jump_times[0] * 1e-9)
        t = np.array(t)
        b, end = 5e-3, 50e-3

        def raw(x):
            x = np.asarray(x)
            return np.where(x < b, 1 - np.exp(-c1 * x), 1 - np.exp(-c1 * b - c2 * (x - b)))

        assert stats.kstest(t, lambda x: raw(x) / raw(end)).pvalue > 0.01

    def test_two_state_emission_mean(self, scaled_params):
        prm = scaled_params.replace(k_ion=0.0, c_capture=0.0, k_field_ion=0.0)
        seq = one_segment(ms(38), [LaserChannel("resonant", 13.0)])
        counts = np.array([len(simulate_trajectory(seq, prm, G, seed=s, mode="full").emission_times)
                           for s in range(2000)])
        r = build_rates(seq.segments[0].channels, 0.0, prm)
        expect = effective_rates(r).emission_rate * 38e-3
        se = counts.std(ddof=1) / np.sqrt(len(counts))
        assert abs(counts.mean() - expect) < 3 * se + 0.01 * expect

    def test_readout_empties_bright_state(self, params):
        prm = params.with_overrides({"hole_gen": {"resonant": 0.0}})
        seq = protocol_fig1(voltage=0.0)
        ens = simulate_ensemble(seq, prm, 20_000, seed=5, checkpoints=[seq.period])
        assert ens.bright_fraction[0] < 1e-3
        _, pops = propagate_populations(seq, prm, [0, 0, 1], seq.period)
        assert bright_population(pops)[-1] < 1e-3


class TestEnsemble:
    def test_independent_of_worker_count(self, params):
        seq = protocol_fig3(voltage=50)
        edges = np.arange(0, seq.period + 1, us(100), dtype=float)
        serial = simulate_ensemble(seq, params, 20_000, 11, checkpoints=[ms(10)], bin_edges=edges, block_size=4096)
        with ProcessPoolExecutor(2) as ex:
            par = simulate_ensemble(seq, params, 20_000, 11, checkpoints=[ms(10)], bin_edges=edges,
                                    block_size=4096, map_fn=ex.map)
        assert np.array_equal(serial.bright_counts, par.bright_counts)
        assert np.array_equal(serial.exposure, par.exposure)

    def test_matches_oracle(self, params):
        seq = protocol_fig1(voltage=50)
        cps = [ms(1), ms(4), ms(6), ms(8), ms(20), ms(44)]
        ens = simulate_ensemble(seq, params, 50_000, 21, checkpoints=cps)
        times, pops = propagate_populations(seq, params, [0, 0, 1], ms(1))
        exact = bright_population(pops)[np.searchsorted(times, cps)]
        sigma = np.sqrt(np.clip(exact * (1 - exact), 1e-5, None) / 50_000)
        assert np.all(np.abs(ens.bright_fraction - exact) < 4 * sigma)

    def test_full_and_reduced_modes_agree(self, scaled_params):
        seq = protocol_fig3(tau2=2, voltage=50)
        cps = [ms(3), ms(7), ms(12), ms(20), ms(26)]
        full = simulate_ensemble(seq, scaled_params, 1500, 3, checkpoints=cps, mode="full")
        red = simulate_ensemble(seq, scaled_params, 50_000, 4, checkpoints=cps)
        p_f, p_r = full.bright_fraction, red.bright_fraction
        sigma = np.sqrt(np.clip(p_r * (1 - p_r), 1e-4, None) * (1 / 1500 + 1 / 50_000))
        assert np.all(np.abs(p_f - p_r) < 4 * sigma)
        assert full.mode == "full" and isinstance(full, EnsembleResult)

    def test_checkpoint_range(self, params):
        with pytest.raises(ValueError):
            simulate_ensemble(protocol_fig1(), params, 10, 0, checkpoints=[-1.0])


class TestOracle:
    def test_zero_generator(self, params):
        times, pops = propagate_populations(one_segment(ms(10)), params, [0.2, 0.3, 0.5], ms(1))
        assert np.allclose(pops, [0.2, 0.3, 0.5], atol=0, rtol=0)

    def test_two_state_steady_state(self):
        a, b = 300.0, 700.0
        q = np.array([[-a, a], [b, -b]])
        p = np.array([0.0, 1.0]) @ stochastic_expm(q, 1.0)
        assert p[0] == pytest.approx(b / (a + b), rel=1e-12)
        assert steady_state(q)[0] == pytest.approx(b / (a + b), rel=1e-12)

    def test_rejects_unnormalized(self, params):
        with pytest.raises(ValueError, match="sum to 1"):
            propagate_populations(protocol_fig1(), params, [0.5, 0.0, 0.4], us(100))
        with pytest.raises(ValueError):
            propagate_populations(protocol_fig1(), params, [0, 0, 1], 0)

    @pytest.mark.parametrize("seq", [protocol_fig1(voltage=0), protocol_fig1(voltage=50),
                                     protocol_fig3(voltage=150), protocol_ple(detuning=100)],
                             ids=["fig1", "fig2", "fig3-150V", "ple"])
    def test_probability_conserved(self, params, seq):
        _, pops = propagate_populations(seq, params, [0, 0, 1], us(37))
        assert np.max(np.abs(pops.sum(axis=1) - 1)) < 1e-10
        assert pops.min() >= -1e-15 and pops.max() <= 1 + 1e-12

    def test_brute_force_fixed_step(self, scaled_params):
        seq = PulseSequence((Segment(ms(1), (LaserChannel("green", 0.001),), 50.0),
                             Segment(ms(1), (LaserChannel("resonant", 13.0),), 50.0)))
        _, pops = propagate_populations(seq, scaled_params, [0, 0, 1], ms(0.5))
        p = np.array([0.0, 0.0, 1.0])
        dt = 1e-9
        for seg, rates in zip(seq.segments, segment_rates(seq, scaled_params)):
            step = np.eye(3) + rates.generator() * dt
            for _ in range(seg.duration):
                p = p @ step
        assert np.allclose(p, pops[-1], atol=2e-4)

    def test_reduced_matches_full_on_ms_scale(self, params):
        for seq in (protocol_fig1(voltage=0), protocol_fig3(voltage=50)):
            _, full = propagate_populations(seq, params, [0, 0, 1], us(100))
            _, red = propagate_populations(seq, params, [0, 1], us(100), mode="reduced")
            bf, br = bright_population(full), bright_population(red)
            assert np.max(np.abs(bf - br)) < 0.01 * max(bf.max(), 1e-12)

    def test_stiff_generator_is_finite(self, params):
        q = build_rates([LaserChannel("resonant", 1e4)], 200.0, params).generator()
        for t in (1e-12, 1e-9, 1e-3, 1.0, 1e3):
            m = stochastic_expm(q, t)
            assert np.all(np.isfinite(m)) and np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


class TestCountRate:
    def test_no_excitation_is_dark_rate(self, params, detector):
        assert expected_count_rate([0.5, 0.0, 0.5], (), params, detector) == detector.dark_rate

    def test_zero_efficiency(self, params):
        det = DetectorParams(efficiency=0.0, dark_rate=700.0)
        assert expected_count_rate([0.0, 1.0, 0.0], (), params, det) == 700.0

    def test_steady_state_plateau_matches_simulation(self, params, detector):
        seq = protocol_ple(detuning=0.0, resonant_power=params.p_sat)
        r = segment_rates(seq, params)[1]
        p = steady_state(r.generator())
        expect = expected_count_rate(p, seq.segments[1].channels, params, detector)
        h = simulate_histogram(seq, params, detector, 2000, seed=8)
        rate, err = window_intensity(h, ms(10), ms(15))
        assert np.isfinite(expect)
        assert abs(rate - expect) < 3 * err
