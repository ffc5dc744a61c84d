"""Staged voltage programs and the ideal moving-dot trajectory.

A schedule is an ordered tuple of stage objects. Only the shuttle gates
S1..S4 carry explicit waveforms; the static stages (load, initialise,
separate, close, PSB, freeze, measure) are named setpoints whose semantics
the simulator consumes.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Union

import numpy as np

LAMBDA_NM = 280.0
LAYER_FACTOR = 1.28
DEFAULT_PHASES = (-math.pi / 2, 0.0, math.pi / 2, math.pi)
DEFAULT_OFFSETS = (0.7, 0.896, 0.7, 0.896)
MAX_DISTANCE_NM = 1.2 * LAMBDA_NM


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ShuttleSegment:
    """One sinusoidal drive interval on S1..S4.

    ``amplitude_upper`` defaults to ``1.28 * amplitude_lower`` (cross-talk
    compensation between the two gate layers). Durations are in seconds,
    ``lambda_nm`` is the potential period.
    """

    frequency: float = 10e6
    amplitude_lower: float = 0.150
    amplitude_upper: float | None = None
    offsets: tuple[float, float, float, float] = DEFAULT_OFFSETS
    phases: tuple[float, float, float, float] = DEFAULT_PHASES
    duration: float = 100e-9
    direction: str = "forward"
    lambda_nm: float = LAMBDA_NM

    def __post_init__(self):
        if self.amplitude_upper is None:
            object.__setattr__(self, "amplitude_upper", LAYER_FACTOR * self.amplitude_lower)
        object.__setattr__(self, "offsets", tuple(float(c) for c in self.offsets))
        object.__setattr__(self, "phases", tuple(float(p) for p in self.phases))
        if self.direction not in ("forward", "backward"):
            raise ScheduleError(f"direction must be 'forward' or 'backward', not {self.direction!r}")
        if not self.frequency > 0:
            raise ScheduleError("frequency must be positive")
        if self.duration < 0:
            raise ScheduleError("duration must be non-negative")
        if len(self.offsets) != 4 or len(self.phases) != 4:
            raise ScheduleError("need exactly four offsets and four phases")

    @property
    def amplitudes(self) -> tuple[float, float, float, float]:
        lo, up = self.amplitude_lower, self.amplitude_upper
        return (lo, up, lo, up)

    @property
    def velocity(self) -> float:
        """Shuttle velocity in m/s."""
        return self.frequency * self.lambda_nm * 1e-9

    @property
    def distance(self) -> float:
        """Distance covered in nm (always positive)."""
        return self.frequency * self.duration * self.lambda_nm

    @property
    def phase_advance(self) -> float:
        return 2 * math.pi * self.frequency * self.duration

    def reversed(self) -> "ShuttleSegment":
        return replace(self, direction="backward" if self.direction == "forward" else "forward")


def waveform_at(segment: ShuttleSegment, tau: float, gate_index: int) -> float:
    """Voltage on gate set S``gate_index`` (1..4) at time ``tau`` into the segment.

    Backward segments replay the forward waveform time-reversed.
    """
    if gate_index not in (1, 2, 3, 4):
        raise ValueError(f"gate_index must be 1..4, got {gate_index}")
    if not -1e-15 <= tau <= segment.duration * (1 + 1e-12) + 1e-15:
        raise ValueError(f"tau={tau} outside segment [0, {segment.duration}]")
    if segment.direction == "backward":
        tau = segment.duration - tau
    i = gate_index - 1
    return segment.amplitudes[i] * math.sin(
        2 * math.pi * segment.frequency * tau + segment.phases[i]
    ) + segment.offsets[i]


def waveforms(segment: ShuttleSegment, tau: np.ndarray) -> np.ndarray:
    """Vectorised :func:`waveform_at`; returns shape ``(len(tau), 4)``."""
    tau = np.asarray(tau, dtype=float)
    if segment.direction == "backward":
        tau = segment.duration - tau
    arg = 2 * np.pi * segment.frequency * tau[:, None] + np.asarray(segment.phases)
    return np.asarray(segment.amplitudes) * np.sin(arg) + np.asarray(segment.offsets)


# -- stages ---------------------------------------------------------------


@dataclass(frozen=True)
class Load:
    duration: float = 2e-3


@dataclass(frozen=True)
class InitI:
    duration: float = 1e-3


@dataclass(frozen=True)
class SeparateS:
    duration: float = 0.0
    # detuning setpoint in volts, relative to the initialisation point
    detuning: float = -0.020


@dataclass(frozen=True)
class CloseT:
    duration: float = 0.0


@dataclass(frozen=True)
class Shuttle:
    segment: ShuttleSegment

    @property
    def duration(self) -> float:
        return self.segment.duration


@dataclass(frozen=True)
class WaitAt:
    x: float
    duration: float


@dataclass(frozen=True)
class WaitDQD:
    duration: float


@dataclass(frozen=True)
class PsbP:
    duration: float = 500e-9


@dataclass(frozen=True)
class FreezeF:
    duration: float = 0.0


@dataclass(frozen=True)
class MeasureM:
    duration: float = 0.0


Stage = Union[Load, InitI, SeparateS, CloseT, Shuttle, WaitAt, WaitDQD, PsbP, FreezeF, MeasureM]

_TOKENS = {
    Load: "L",
    InitI: "I",
    SeparateS: "S",
    CloseT: "T",
    Shuttle: "H",
    WaitAt: "W",
    WaitDQD: "D",
    PsbP: "P",
    FreezeF: "F",
    MeasureM: "M",
}
_STAGE_TYPES = {cls.__name__: cls for cls in _TOKENS}

# coherent spin sequence; the shuttle block is optional so that the bare
# double-dot experiment (no shuttling) is also a valid schedule
_COHERENT = re.compile(r"LIS(T[HW]*S)?D?PFM")
# charge-shuttle benchmark: measure after the forward and after the return leg
_CHARGE = re.compile(r"LIST(H+M)+")


def schedule_kind(stages) -> str | None:
    """``'coherent'``, ``'charge'`` or None if the stage list is not a valid program."""
    try:
        word = "".join(_TOKENS[type(s)] for s in stages)
    except KeyError:
        return None
    if _COHERENT.fullmatch(word):
        return "coherent"
    if _CHARGE.fullmatch(word):
        return "charge"
    return None


def _net_displacement(stages) -> float:
    x = 0.0
    for s in stages:
        if isinstance(s, Shuttle):
            sign = 1.0 if s.segment.direction == "forward" else -1.0
            x += sign * s.segment.distance
    return x


@dataclass(frozen=True)
class PulseSchedule:
    stages: tuple
    magnetic_field: float = 0.8
    channel_length: float = MAX_DISTANCE_NM

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        kind = schedule_kind(self.stages)
        if kind is None:
            word = "".join(_TOKENS.get(type(s), "?") for s in self.stages)
            raise ScheduleError(f"stage sequence {word!r} is not a valid program")
        net = _net_displacement(self.stages)
        if abs(net) > 1e-9 * max(1.0, self.channel_length):
            raise ScheduleError(f"shuttle segments do not return to x = 0 (net {net:.6g} nm)")
        if kind == "coherent":
            # trajectory must stay inside the channel
            trajectory_of(self)

    @property
    def kind(self) -> str:
        return schedule_kind(self.stages)

    @property
    def shuttle_time(self) -> float:
        return sum(s.duration for s in self.stages if isinstance(s, Shuttle))

    @property
    def path_length(self) -> float:
        """Accumulated distance travelled in nm."""
        return sum(s.segment.distance for s in self.stages if isinstance(s, Shuttle))

    def to_dict(self) -> dict:
        stages = []
        for s in self.stages:
            entry = {"stage": type(s).__name__}
            if isinstance(s, Shuttle):
                seg = asdict(s.segment)
                seg["offsets"] = list(seg["offsets"])
                seg["phases"] = list(seg["phases"])
                entry["segment"] = seg
            else:
                entry.update(asdict(s))
            stages.append(entry)
        return {
            "magnetic_field": self.magnetic_field,
            "channel_length": self.channel_length,
            "stages": stages,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PulseSchedule":
        stages = []
        for entry in data["stages"]:
            entry = dict(entry)
            name = entry.pop("stage")
            if name not in _STAGE_TYPES:
                raise ScheduleError(f"unknown stage {name!r}")
            if name == "Shuttle":
                seg = dict(entry["segment"])
                seg["offsets"] = tuple(seg["offsets"])
                seg["phases"] = tuple(seg["phases"])
                stages.append(Shuttle(ShuttleSegment(**seg)))
            else:
                stages.append(_STAGE_TYPES[name](**entry))
        return cls(
            tuple(stages),
            magnetic_field=data.get("magnetic_field", 0.8),
            channel_length=data.get("channel_length", MAX_DISTANCE_NM),
        )


# -- trajectory -----------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear dot position over the coherent window.

    ``t`` (s) starts at zero when the separation stage is reached and ends
    when the PSB stage begins. ``kinds`` labels each interval between
    consecutive breakpoints with the stage it belongs to.
    """

    t: np.ndarray
    x: np.ndarray
    kinds: tuple[str, ...] = ()
    velocity: float = 0.0

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def position(self, t) -> np.ndarray:
        return np.interp(t, self.t, self.x)

    def segments(self):
        """Yield ``(t0, t1, x0, x1, kind)`` for every interval of non-zero length."""
        for k in range(len(self.t) - 1):
            if self.t[k + 1] > self.t[k]:
                yield self.t[k], self.t[k + 1], self.x[k], self.x[k + 1], self.kinds[k]


def trajectory_of(schedule: PulseSchedule) -> Trajectory:
    """Ideal position ``x = lambda * dphi / 2 pi`` of the moving dot.

    Only the span between the first separation stage and the PSB stage
    matters for spin evolution; static stages outside it are omitted.
    """
    stages = schedule.stages
    first = next(i for i, s in enumerate(stages) if isinstance(s, SeparateS))
    ts, xs, kinds = [0.0], [0.0], []
    t = x = 0.0
    v = 0.0
    for s in stages[first + 1 :]:
        if isinstance(s, (PsbP, MeasureM)):
            break
        if isinstance(s, Shuttle):
            seg = s.segment
            sign = 1.0 if seg.direction == "forward" else -1.0
            t += seg.duration
            x += sign * seg.distance
            v = max(v, seg.velocity)
            kinds.append("shuttle")
        elif isinstance(s, WaitAt):
            if abs(s.x - x) > 1e-6:
                raise ScheduleError(f"WaitAt({s.x} nm) but the dot is at {x:.6g} nm")
            t += s.duration
            kinds.append("wait")
        elif isinstance(s, WaitDQD):
            t += s.duration
            kinds.append("dqd")
        else:
            t += s.duration
            kinds.append(type(s).__name__)
        if x < -1e-9 or x > schedule.channel_length * (1 + 1e-12):
            raise ScheduleError(
                f"dot position {x:.6g} nm leaves the channel [0, {schedule.channel_length}] nm"
            )
        ts.append(t)
        xs.append(min(max(x, 0.0), schedule.channel_length))
    return Trajectory(np.array(ts), np.array(xs), tuple(kinds), v)


# -- schedule builders ----------------------------------------------------


@dataclass(frozen=True)
class SequenceRequest:
    """What to run in one cycle; distances in nm, times in seconds.

    ``distance`` shuttles forward and back once at ``frequency``.
    ``wait_position``/``wait_time`` shuttle there at full speed, wait, return.
    ``loops`` (the number of potential periods travelled in total) emits
    repeated one-period round trips, a half-period round trip for odd counts.
    ``tau_dqd`` waits in the double dot after the return.
    """

    magnetic_field: float = 0.8
    distance: float = 0.0
    frequency: float = 10e6
    wait_position: float | None = None
    wait_time: float = 0.0
    loops: int | None = None
    tau_dqd: float = 0.0
    segment: ShuttleSegment = field(default_factory=ShuttleSegment)
    max_distance: float = MAX_DISTANCE_NM


def _segment(req: SequenceRequest, distance: float, frequency: float, direction: str):
    lam = req.segment.lambda_nm
    return Shuttle(
        replace(
            req.segment,
            frequency=frequency,
            duration=distance / (frequency * lam),
            direction=direction,
        )
    )


def build_schedule(req: SequenceRequest) -> PulseSchedule:
    lam = req.segment.lambda_nm
    modes = sum([req.distance > 0, req.wait_position is not None, bool(req.loops)])
    if modes > 1:
        raise ScheduleError("choose one of distance, wait_position or loops")
    if req.distance < 0 or req.wait_time < 0 or req.tau_dqd < 0:
        raise ScheduleError("distances and times must be non-negative")
    reach = max(req.distance, req.wait_position or 0.0)
    if req.loops:
        reach = max(reach, lam if req.loops > 1 else lam / 2)
    if reach > req.max_distance + 1e-9:
        raise ScheduleError(
            f"requested distance {reach:g} nm exceeds the usable range "
            f"{req.max_distance:g} nm; the electron return probability collapses beyond it"
        )

    motion = []
    if req.distance > 0:
        motion += [
            _segment(req, req.distance, req.frequency, "forward"),
            _segment(req, req.distance, req.frequency, "backward"),
        ]
    elif req.wait_position is not None:
        if req.wait_position < 0:
            raise ScheduleError("wait_position must be non-negative")
        if req.wait_position > 0:
            motion.append(_segment(req, req.wait_position, req.frequency, "forward"))
        motion.append(WaitAt(req.wait_position, req.wait_time))
        if req.wait_position > 0:
            motion.append(_segment(req, req.wait_position, req.frequency, "backward"))
    elif req.loops:
        if req.loops < 0:
            raise ScheduleError("loops must be positive")
        if req.loops % 2:
            motion += [
                _segment(req, lam / 2, req.frequency, "forward"),
                _segment(req, lam / 2, req.frequency, "backward"),
            ]
        for _ in range(req.loops // 2):
            motion += [
                _segment(req, lam, req.frequency, "forward"),
                _segment(req, lam, req.frequency, "backward"),
            ]

    stages = [Load(), InitI(), SeparateS()]
    if motion:
        stages += [CloseT(), *motion, SeparateS()]
    if req.tau_dqd > 0 or not motion:
        stages.append(WaitDQD(req.tau_dqd))
    stages += [PsbP(), FreezeF(), MeasureM()]
    return PulseSchedule(tuple(stages), req.magnetic_field, max(req.max_distance, reach))


def build_charge_schedule(
    segment: ShuttleSegment | None = None, distance: float = LAMBDA_NM
) -> PulseSchedule:
    """Charge benchmark: shuttle out, measure, shuttle back, measure."""
    segment = segment or ShuttleSegment()
    fwd = replace(
        segment,
        duration=distance / (segment.frequency * segment.lambda_nm),
        direction="forward",
    )
    stages = (Load(), InitI(), SeparateS(), CloseT(), Shuttle(fwd), MeasureM(),
              Shuttle(fwd.reversed()), MeasureM())
    return PulseSchedule(stages, channel_length=max(distance, MAX_DISTANCE_NM))


def shuttle_phase(schedule: PulseSchedule, upto: int | None = None) -> float:
    """Accumulated drive phase (rad) after the first ``upto`` stages."""
    phase = 0.0
    for s in schedule.stages[:upto]:
        if isinstance(s, Shuttle):
            sign = 1.0 if s.segment.direction == "forward" else -1.0
            phase += sign * s.segment.phase_advance
    return phase


def render_waveform(schedule: PulseSchedule, sample_rate: float = 1e9):
    """Sample S1..S4 over all shuttle and wait stages.

    Returns ``(t, volts)`` with ``volts`` of shape ``(n, 4)``. Between
    segments the gates hold the value at the current drive phase.
    """
    segs = [s.segment for s in schedule.stages if isinstance(s, Shuttle)]
    ref = segs[0] if segs else ShuttleSegment()
    amps, phases, offs = map(np.asarray, (ref.amplitudes, ref.phases, ref.offsets))
    ts, vs = [], []
    t0 = 0.0
    phase = 0.0
    for s in schedule.stages:
        if isinstance(s, Shuttle):
            seg = s.segment
            n = max(int(round(seg.duration * sample_rate)), 1)
            tau = np.arange(n) / sample_rate
            if seg.direction == "forward":
                start = phase
            else:
                start = phase - seg.phase_advance
            # backward segments are the forward drive reversed in time, so
            # their waveform is continuous with the preceding phase
            v = waveforms(replace(seg, phases=tuple(np.asarray(seg.phases) + start)), tau)
            ts.append(t0 + tau)
            vs.append(v)
            phase += seg.phase_advance if seg.direction == "forward" else -seg.phase_advance
            t0 += seg.duration
        elif isinstance(s, WaitAt):
            n = max(int(round(s.duration * sample_rate)), 1)
            tau = np.arange(n) / sample_rate
            ts.append(t0 + tau)
            vs.append(np.tile(amps * np.sin(phase + phases) + offs, (n, 1)))
            t0 += s.duration
    if not ts:
        return np.zeros(0), np.zeros((0, 4))
    return np.concatenate(ts), np.vstack(vs)


def export_waveform_csv(schedule: PulseSchedule, path, sample_rate: float = 1e9) -> None:
    _, volts = render_waveform(schedule, sample_rate)
    np.savetxt(path, volts, delimiter=",", header="S1,S2,S3,S4", comments="", fmt="%.12g")
