import math

import numpy as np
import pytest

from shuttlesim.pulsegen import (
    CloseT,
    FreezeF,
    InitI,
    Load,
    MeasureM,
    PsbP,
    PulseSchedule,
    ScheduleError,
    SeparateS,
    SequenceRequest,
    Shuttle,
    ShuttleSegment,
    WaitAt,
    WaitDQD,
    build_charge_schedule,
    build_schedule,
    render_waveform,
    schedule_kind,
    shuttle_phase,
    trajectory_of,
    waveform_at,
    waveforms,
)


def direct(seg, tau, gate):
    """Independent evaluation of the four-gate sinusoid."""
    U = [seg.amplitude_lower, 1.28 * seg.amplitude_lower] * 2
    C = [0.7, 0.896, 0.7, 0.896]
    phi = [-math.pi / 2, 0.0, math.pi / 2, math.pi]
    return U[gate - 1] * math.sin(2 * math.pi * seg.frequency * tau + phi[gate - 1]) + C[gate - 1]


def test_defaults():
    s = ShuttleSegment()
    assert s.phases == (-math.pi / 2, 0.0, math.pi / 2, math.pi)
    assert s.amplitude_upper == pytest.approx(1.28 * 0.150)
    assert s.lambda_nm == 280.0
    assert s.velocity == pytest.approx(2.8)


def test_gate_values_at_zero():
    s = ShuttleSegment()
    assert waveform_at(s, 0.0, 2) == pytest.approx(0.896, abs=1e-15)
    assert waveform_at(s, 0.0, 1) == pytest.approx(0.55, abs=1e-15)


def test_periodicity():
    s = ShuttleSegment(duration=300e-9)
    for g in (1, 2, 3, 4):
        assert waveform_at(s, 1 / s.frequency, g) == pytest.approx(waveform_at(s, 0.0, g), abs=1e-12)


def test_random_points_against_direct_formula():
    rng = np.random.default_rng(0)
    s = ShuttleSegment(duration=1e-6, amplitude_lower=0.13)
    for tau, g in zip(rng.uniform(0, 1e-6, 2000), rng.integers(1, 5, 2000)):
        assert abs(waveform_at(s, tau, int(g)) - direct(s, tau, int(g))) < 1e-12


def test_vectorised_equals_scalar():
    s = ShuttleSegment(duration=250e-9, direction="backward")
    tau = np.linspace(0, 250e-9, 57)
    W = waveforms(s, tau)
    for i, t in enumerate(tau):
        for g in range(4):
            assert W[i, g] == pytest.approx(waveform_at(s, t, g + 1), abs=1e-15)


def test_time_reversal_exact():
    fwd = ShuttleSegment(duration=180e-9)
    bwd = fwd.reversed()
    for tau in np.linspace(0, 180e-9, 31):
        for g in (1, 2, 3, 4):
            assert waveform_at(bwd, tau, g) == waveform_at(fwd, fwd.duration - tau, g)


def test_bad_gate_and_tau():
    s = ShuttleSegment()
    with pytest.raises(ValueError):
        waveform_at(s, 0.0, 5)
    with pytest.raises(ValueError):
        waveform_at(s, 2 * s.duration, 1)


def test_twelve_loops_path_length():
    s = build_schedule(SequenceRequest(loops=12))
    assert s.path_length == pytest.approx(3360.0)
    assert s.shuttle_time == pytest.approx(1.2e-6)


def test_one_period_round_trip_time():
    s = build_schedule(SequenceRequest(distance=280.0, frequency=10e6))
    assert s.shuttle_time == pytest.approx(200e-9)


def test_zero_distance_is_dqd_sequence():
    s = build_schedule(SequenceRequest(distance=0.0, tau_dqd=100e-9))
    assert not any(isinstance(st, Shuttle) for st in s.stages)
    assert [type(st) for st in s.stages] == [Load, InitI, SeparateS, WaitDQD, PsbP, FreezeF, MeasureM]


def test_default_stage_durations():
    assert Load().duration == 2e-3
    assert InitI().duration == 1e-3
    assert PsbP().duration == 500e-9


def test_trajectory_forward_slope_and_return():
    s = build_schedule(SequenceRequest(distance=280.0))
    tr = trajectory_of(s)
    segs = list(tr.segments())
    t0, t1, x0, x1, kind = segs[0]
    assert kind == "shuttle"
    assert (x1 - x0) == pytest.approx(280.0)
    assert (t1 - t0) == pytest.approx(100e-9)
    assert (x1 - x0) * 1e-9 / (t1 - t0) == pytest.approx(2.8)
    assert tr.x[-1] == pytest.approx(0.0, abs=1e-9)


def test_trajectory_wait_holds_position():
    s = build_schedule(SequenceRequest(wait_position=210.0, wait_time=300e-9))
    tr = trajectory_of(s)
    waits = [g for g in tr.segments() if g[4] == "wait"]
    assert len(waits) == 1
    t0, t1, x0, x1, _ = waits[0]
    assert x0 == x1 == pytest.approx(210.0)
    assert t1 - t0 == pytest.approx(300e-9)
    mid = tr.position(np.linspace(t0, t1, 11))
    assert np.allclose(mid, 210.0)


def test_trajectory_speed_and_bounds():
    for req in (SequenceRequest(loops=5), SequenceRequest(distance=336.0, frequency=3e6),
                SequenceRequest(wait_position=100.0, wait_time=1e-7)):
        s = build_schedule(req)
        tr = trajectory_of(s)
        for t0, t1, x0, x1, kind in tr.segments():
            v = abs(x1 - x0) / (t1 - t0)
            f = req.frequency
            assert v == pytest.approx(0.0, abs=1e-6) or v == pytest.approx(f * 280.0)
        assert tr.x.min() >= 0.0 and tr.x.max() <= s.channel_length


def test_phase_position_consistency():
    s = build_schedule(SequenceRequest(loops=3))
    x = 0.0
    for k, st in enumerate(s.stages):
        if isinstance(st, Shuttle):
            seg = st.segment
            x_new = x + (1 if seg.direction == "forward" else -1) * seg.distance
            dphi = shuttle_phase(s, k + 1) - shuttle_phase(s, k)
            assert x_new - x == pytest.approx(280.0 * dphi / (2 * math.pi), rel=1e-12)
            x = x_new


def test_waveform_continuity_between_segments():
    s = build_schedule(SequenceRequest(loops=4, frequency=10e6))
    rate = 1e10
    t, v = render_waveform(s, rate)
    # within one period of 10 MHz the largest sample-to-sample change of a 0.192 V sine
    bound = 2 * math.pi * 10e6 * 0.192 / rate * 1.01
    assert np.max(np.abs(np.diff(v, axis=0))) < bound
    # boundaries: last sample of one segment continues to the first of the next
    seg = s.stages[4].segment
    end = waveforms(seg, np.array([seg.duration]))[0]
    n = int(round(seg.duration * rate))
    assert np.max(np.abs(v[n] - end)) < 1e-9


def test_wait_holds_voltages():
    s = build_schedule(SequenceRequest(wait_position=140.0, wait_time=50e-9))
    t, v = render_waveform(s, 1e9)
    fwd = s.stages[4].segment
    n = int(round(fwd.duration * 1e9))
    held = v[n : n + 50]
    assert np.ptp(held, axis=0).max() == 0.0
    end = waveforms(fwd, np.array([fwd.duration]))[0]
    assert np.max(np.abs(held[0] - end)) < 1e-9


VALID = [
    "LISTHHSDPFM",
    "LISTHWHSPFM",
    "LISTWSPFM",
    "LISDPFM",
    "LISPFM",
    "LISTHMHM",
]
INVALID = ["", "LIS", "ISTHHSDPFM", "LISTHHDPFM", "LISTHHSDPF", "LISTHHSDDPFM", "LISTHHSMPF"]


def _stages(word):
    seg = ShuttleSegment(duration=50e-9)
    table = {
        "L": Load(), "I": InitI(), "S": SeparateS(), "T": CloseT(), "D": WaitDQD(1e-8),
        "P": PsbP(), "F": FreezeF(), "M": MeasureM(),
    }
    out, fwd = [], True
    for ch in word:
        if ch == "H":
            out.append(Shuttle(seg if fwd else seg.reversed()))
            fwd = not fwd
        elif ch == "W":
            out.append(WaitAt(0.0 if fwd else seg.distance, 1e-8))
        else:
            out.append(table[ch])
    return out


@pytest.mark.parametrize("word", VALID)
def test_grammar_accepts(word):
    assert schedule_kind(_stages(word)) is not None
    PulseSchedule(tuple(_stages(word)))


@pytest.mark.parametrize("word", INVALID)
def test_grammar_rejects(word):
    assert schedule_kind(_stages(word)) is None
    with pytest.raises(ScheduleError):
        PulseSchedule(tuple(_stages(word)))


def test_unbalanced_displacement_rejected():
    seg = ShuttleSegment(duration=50e-9)
    st = [Load(), InitI(), SeparateS(), CloseT(), Shuttle(seg), SeparateS(), PsbP(), FreezeF(),
          MeasureM()]
    with pytest.raises(ScheduleError):
        PulseSchedule(tuple(st))


def test_distance_bound():
    with pytest.raises(ScheduleError, match="336"):
        build_schedule(SequenceRequest(distance=400.0))
    with pytest.raises(ScheduleError):
        build_schedule(SequenceRequest(distance=100.0, loops=2))


def test_serialisation_round_trip():
    for req in (SequenceRequest(loops=7, tau_dqd=3e-7), SequenceRequest(wait_position=70.0,
                                                                        wait_time=2e-7)):
        s = build_schedule(req)
        assert PulseSchedule.from_dict(s.to_dict()) == s
    c = build_charge_schedule()
    assert c.kind == "charge"
    assert PulseSchedule.from_dict(c.to_dict()) == c
