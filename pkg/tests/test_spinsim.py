import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shuttlesim.analysis import fit_single_tone
from shuttlesim.constants import CONSTANTS
from shuttlesim.landscape import DisorderSpec, ZeemanLandscape, generate_landscape
from shuttlesim.pulsegen import SequenceRequest, Trajectory, build_schedule, trajectory_of
from shuttlesim.spinsim import (
    DephasingModelParams,
    EnsembleModel,
    ExchangeModel,
    TwoLevelState,
    avg_frequency,
    evolve,
    frequency_ratio,
    monte_carlo_ps,
    monte_carlo_scan,
    propagate,
    shuttle_infidelity,
    sigma_for_t2,
    singlet_probability,
    step_unitaries,
    t2_epr_model,
    t2_shuttled,
)

NU = 7.29e6
DG = CONSTANTS.dg_for_frequency(NU, 0.8)


def static(duration):
    return Trajectory(np.array([0.0, duration]), np.array([0.0, 0.0]), ("dqd",), 0.0)


def flat(dg=DG, hf=0.0, L=20.0):
    spec = DisorderSpec(channel_length=L)
    x = spec.positions()
    return ZeemanLandscape(x, np.full(len(x), dg), np.full(len(x), hf), spec)


def test_singlet_probability_examples():
    assert singlet_probability(TwoLevelState(1, 0)) == 1.0
    assert singlet_probability(TwoLevelState(0, 1)) == 0.0
    s = 1 / math.sqrt(2)
    assert singlet_probability(TwoLevelState(s, 1j * s)) == pytest.approx(0.5)


def test_half_period_full_conversion():
    t = 1 / (2 * NU)
    st = evolve(TwoLevelState.singlet(), static(t), flat(), 0.8, dt=0.05e-9)
    assert singlet_probability(st) == pytest.approx(0.0, abs=1e-9)


def test_cos2_over_ten_periods():
    land = flat()
    for t in np.linspace(0, 10 / NU, 23):
        st = evolve(TwoLevelState.singlet(), static(t), land, 0.8, dt=0.1e-9)
        assert abs(singlet_probability(st) - math.cos(math.pi * NU * t) ** 2) < 1e-9


def test_no_splitting_keeps_singlet():
    exch = ExchangeModel(J0=50.0, form="exponential_in_detuning")
    st = evolve(TwoLevelState.singlet(), static(500e-9), flat(dg=0.0), 0.8, exch, detuning=0.0)
    assert singlet_probability(st) == pytest.approx(1.0, abs=1e-12)


def test_norm_preserved_random_steps():
    rng = np.random.default_rng(1)
    n = 10**6
    J = rng.normal(0, 20e6, n)
    d = rng.normal(0, 20e6, n)
    U = step_unitaries(J, d, 1e-9)
    # every step unitary
    UU = np.einsum("nji,njk->nik", U.conj(), U)
    assert np.max(np.abs(UU - np.eye(2))) < 1e-12
    st = propagate(TwoLevelState.singlet(), J, d, 1e-9)
    assert abs(st.norm - 1.0) < 1e-12


def test_too_coarse_step_rejected():
    with pytest.raises(ValueError, match="coarse"):
        evolve(TwoLevelState.singlet(), static(1e-6), flat(), 0.8, dt=10e-9)


def test_avg_frequency_anchor_and_ratio():
    land = flat(dg=6.51e-4)
    assert avg_frequency(land, 10.0, 0.8) == pytest.approx(7.29, rel=1e-3)
    ratio = avg_frequency(land, 10.0, 0.6) / avg_frequency(land, 10.0, 0.8)
    assert ratio == pytest.approx(0.75, rel=1e-14)
    assert frequency_ratio(6.51e-4, 0.0, 0.6, 0.8) == pytest.approx(0.75, rel=1e-14)


def test_hf_only_independent_of_field():
    land = flat(dg=0.0, hf=30.0)
    assert avg_frequency(land, 5.0, 0.3) == avg_frequency(land, 5.0, 1.2)
    assert avg_frequency(land, 5.0, 0.8) == pytest.approx(30e-9 / CONSTANTS.h / 1e6)


def test_linear_in_field_for_random_landscape():
    land = generate_landscape(DisorderSpec(channel_length=300, sigma_dg=4e-5, seed=3))
    for d in (0.0, 13.0, 120.0, 280.0):
        a, b = avg_frequency(land, d, 0.4), avg_frequency(land, d, 1.0)
        assert a / b == pytest.approx(0.4, rel=1e-12)


def test_smoothing_total_variation_decreases():
    spec = DisorderSpec(channel_length=1300, sigma_dg=4e-5, seed=0)
    tv = []
    for d0 in (10, 100, 1000):
        vals = []
        for seed in range(20):
            land = generate_landscape(DisorderSpec(**{**spec.to_dict(), "seed": seed}))
            nu = [avg_frequency(land, d, 0.8) for d in np.linspace(d0, d0 + 50, 26)]
            vals.append(np.sum(np.abs(np.diff(nu))))
        tv.append(np.mean(vals))
    assert tv[0] > tv[1] > tv[2]


def test_dephasing_model_values():
    p = DephasingModelParams()
    assert t2_shuttled(p, 280.0) == pytest.approx(520 * math.sqrt(293 / 13), rel=1e-12)
    assert t2_shuttled(p, 280.0) == pytest.approx(2469, rel=0.01)
    assert t2_epr_model(p, 0.0) == pytest.approx(471, rel=0.01)
    assert t2_epr_model(p, 0.0) == pytest.approx((1110**-2 + 520**-2) ** -0.5, rel=1e-12)


def test_epr_model_monotone_with_asymptote():
    p = DephasingModelParams()
    d = np.geomspace(1e-2, 13e6, 200)
    T = t2_epr_model(p, d)
    assert np.all(np.diff(T) > 0)
    assert abs(T[-1] - 1110) / 1110 < 1e-3
    big = DephasingModelParams(T2L=1110, T2R=1e12, lc=13)
    assert np.allclose(t2_epr_model(big, [0, 50, 5000]), 1110, rtol=1e-9)


def test_infidelity_values():
    r = shuttle_infidelity(2460, 280, 2.8)
    assert r.tau_s == pytest.approx(200.0)
    assert r.exact == pytest.approx(0.0066, abs=0.0002)
    assert shuttle_infidelity(2460, 0, 2.8).exact == 0.0
    # tau = T2S
    assert shuttle_infidelity(1000, 1400, 2.8).exact == pytest.approx(1 - math.exp(-1))


def test_mc_zero_disorder_is_analytic():
    spec = DisorderSpec(channel_length=20, seed=1)
    sched = build_schedule(SequenceRequest(tau_dqd=43e-9))
    p, err = monte_carlo_ps(sched, spec, 200)
    nu = CONSTANTS.zeeman_frequency(6.51e-4, 0.8)
    assert p == pytest.approx(math.cos(math.pi * nu * 43e-9) ** 2, abs=1e-12)
    assert err == 0.0


def test_mc_hf_only_gaussian_decay():
    sigma_neV = 1.6475
    spec = DisorderSpec(channel_length=20, sigma_hf=sigma_neV, seed=2)
    taus = np.linspace(0, 1000, 201)
    scheds = [build_schedule(SequenceRequest(tau_dqd=t * 1e-9)) for t in taus]
    res = monte_carlo_scan(scheds, EnsembleModel(disorder=spec), 40_000)
    fit = fit_single_tone((taus, res.p_s, res.stderr))
    sigma_nu = sigma_neV * 1e-9 / CONSTANTS.h
    oracle = 1 / (math.sqrt(2) * math.pi * sigma_nu) * 1e9
    assert fit.T2_star == pytest.approx(oracle, rel=0.03)
    assert oracle == pytest.approx(565, rel=1e-3)


def test_mc_matches_stepwise_integrator():
    spec = DisorderSpec(channel_length=340, sigma_dg=4e-5, sigma_hf=0.5, seed=3)
    sched = build_schedule(SequenceRequest(distance=200.0, frequency=4e6, tau_dqd=50e-9))
    fast = monte_carlo_scan([sched], EnsembleModel(disorder=spec), 100).p_s[0]
    # stepwise evolution, same realisations, via a tiny non-zero exchange that never acts
    exch = ExchangeModel(J0=1e-30, form="off_during_shuttle")
    slow = monte_carlo_scan([sched], EnsembleModel(disorder=spec, exchange=exch, dt=0.05e-9),
                            100).p_s[0]
    assert fast == pytest.approx(slow, abs=2e-4)


def test_mc_left_dot_limit_matches_model():
    spec = DisorderSpec(channel_length=20, seed=4, mean_dg=0.0)
    m = EnsembleModel(disorder=spec, t2_left=1110.0)
    taus = np.linspace(0, 3000, 151)
    scheds = [build_schedule(SequenceRequest(tau_dqd=t * 1e-9)) for t in taus]
    res = monte_carlo_scan(scheds, m, 20_000)
    # zero mean splitting: P_S = (1 + exp(-(t/T2)^2)) / 2
    oracle = 0.5 * (1 + np.exp(-((taus / 1110.0) ** 2)))
    assert np.max(np.abs(res.p_s - oracle)) < 0.01


def test_mc_jobs_do_not_change_result():
    spec = DisorderSpec(channel_length=340, sigma_dg=4e-5, seed=5, kernel="rational")
    scheds = [build_schedule(SequenceRequest(distance=d)) for d in (50.0, 150.0, 280.0)]
    m = EnsembleModel(disorder=spec, t2_left=1110.0)
    a = monte_carlo_scan(scheds, m, 700, jobs=1)
    b = monte_carlo_scan(scheds, m, 700, jobs=3)
    assert np.array_equal(a.p_s, b.p_s)
    assert np.array_equal(a.stderr, b.stderr)


def test_monte_carlo_ps_requires_100():
    with pytest.raises(ValueError):
        monte_carlo_ps(build_schedule(SequenceRequest()), DisorderSpec(channel_length=20), 50)


def test_sigma_t2_inverse():
    assert sigma_for_t2(565e-9) * math.sqrt(2) * math.pi * 565e-9 == pytest.approx(1.0)


def test_trajectory_leaving_landscape_rejected():
    spec = DisorderSpec(channel_length=100)
    sched = build_schedule(SequenceRequest(distance=280.0))
    with pytest.raises(ValueError):
        monte_carlo_scan([sched], EnsembleModel(disorder=spec), 10)
    land = generate_landscape(spec)
    with pytest.raises(ValueError):
        evolve(TwoLevelState.singlet(), trajectory_of(sched), land, 0.8)


@settings(max_examples=60, deadline=None)
@given(T2L=st.floats(50, 5000), T2R=st.floats(50, 5000), lc=st.floats(1, 100),
       d=st.floats(0, 1e5))
def test_epr_model_bounded_by_left_dot(T2L, T2R, lc, d):
    p = DephasingModelParams(T2L, T2R, lc)
    T = t2_epr_model(p, d)
    assert T <= T2L * (1 + 1e-12)
    assert T >= t2_epr_model(p, 0.0) * (1 - 1e-12)
    assert T == pytest.approx((T2L**-2 + t2_shuttled(p, d) ** -2) ** -0.5, rel=1e-12)
