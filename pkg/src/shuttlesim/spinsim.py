"""Singlet/T0 dynamics of the separated EPR pair.

In the (S, T0) basis the Hamiltonian is::

    H = [[-J,      delta/2],
         [delta/2, 0      ]],   delta = dg(x) mu_B B + dE_hf(x)

with ``x`` the position of the moving dot. Energies are handled as
frequencies (E / h, in Hz) so a step propagator is ``exp(-2 pi i H dt)``.

Besides the exact step-wise integrator this module carries the closed-form
dephasing models (position-averaged frequency, motional-narrowing T2*,
shuttle phase infidelity) and a quasistatic Monte Carlo over disorder
realisations that serves as their oracle.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from shuttlesim.constants import CONSTANTS, NEV
from shuttlesim.landscape import (
    DisorderSpec,
    ZeemanLandscape,
    chunk_rngs,
    chunk_sizes,
    cumulative_integral,
    field_block,
    integral_to,
    window_average,
)
from shuttlesim.pulsegen import PulseSchedule, SeparateS, Trajectory, trajectory_of

MAX_STEP_PHASE = 0.05


@dataclass(frozen=True)
class TwoLevelState:
    amp_S: complex = 1.0 + 0j
    amp_T0: complex = 0j

    @classmethod
    def singlet(cls) -> "TwoLevelState":
        return cls(1.0 + 0j, 0j)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.amp_S, self.amp_T0], dtype=complex)

    @property
    def norm(self) -> float:
        return float(abs(self.amp_S) ** 2 + abs(self.amp_T0) ** 2)


def singlet_probability(state: TwoLevelState) -> float:
    p = abs(state.amp_S) ** 2
    return float(min(max(p, 0.0), 1.0))


@dataclass(frozen=True)
class ExchangeModel:
    """Exchange ``J`` in neV as a function of stage and detuning (volts).

    ``off_during_shuttle``: J vanishes everywhere in the coherent window.
    ``exponential_in_detuning``: ``J0 * exp(eps / epsilon0)`` while the pair
    sits in the double dot, zero while the barrier is pinched off for
    shuttling and waiting.
    """

    J0: float = 0.0
    epsilon0: float = 0.01
    form: str = "off_during_shuttle"

    def __post_init__(self):
        if self.form not in ("off_during_shuttle", "exponential_in_detuning"):
            raise ValueError(f"unknown exchange form {self.form!r}")
        if self.J0 < 0:
            raise ValueError("J0 must be non-negative")

    def J(self, kind: str, detuning: float = 0.0) -> float:
        if self.form == "off_during_shuttle" or kind in ("shuttle", "wait", "CloseT"):
            return 0.0
        return self.J0 * math.exp(detuning / self.epsilon0)

    @property
    def is_zero(self) -> bool:
        return self.form == "off_during_shuttle" or self.J0 == 0.0


def step_unitaries(J: np.ndarray, delta: np.ndarray, dt: float | np.ndarray) -> np.ndarray:
    """Exact propagators for constant ``H`` over ``dt``; ``J``, ``delta`` in Hz.

    Returns shape ``(..., 2, 2)``.
    """
    J = np.asarray(J, dtype=float)
    delta = np.asarray(delta, dtype=float)
    J, delta = np.broadcast_arrays(J, delta)
    hz = -0.5 * J
    hx = 0.5 * delta
    r = np.hypot(hx, hz)
    theta = 2 * np.pi * r * dt
    safe = np.where(r > 0, r, 1.0)
    nx = np.where(r > 0, hx / safe, 0.0)
    nz = np.where(r > 0, hz / safe, 0.0)
    c, s = np.cos(theta), np.sin(theta)
    glob = np.exp(-2j * np.pi * hz * dt)  # identity part -J/2
    U = np.empty(J.shape + (2, 2), dtype=complex)
    U[..., 0, 0] = glob * (c - 1j * s * nz)
    U[..., 1, 1] = glob * (c + 1j * s * nz)
    U[..., 0, 1] = glob * (-1j * s * nx)
    U[..., 1, 0] = glob * (-1j * s * nx)
    return U


def ordered_product(U: np.ndarray) -> np.ndarray:
    """``U[n-1] @ ... @ U[1] @ U[0]`` by pairwise reduction (log depth)."""
    U = np.asarray(U)
    if len(U) == 0:
        return np.eye(2, dtype=complex)
    while len(U) > 1:
        if len(U) % 2:
            tail = U[-1:]
            U = U[:-1]
        else:
            tail = None
        U = np.matmul(U[1::2], U[0::2])
        if tail is not None:
            U = np.concatenate([U, tail])
    return U[0]


def propagate(state: TwoLevelState, J: np.ndarray, delta: np.ndarray, dt) -> TwoLevelState:
    """Apply the time-ordered steps with the given per-step ``J``/``delta`` (Hz)."""
    total = ordered_product(step_unitaries(J, delta, dt))
    v = total @ state.vector
    return TwoLevelState(complex(v[0]), complex(v[1]))


def _stage_detuning(schedule: PulseSchedule) -> float:
    s = [st for st in schedule.stages if isinstance(st, SeparateS)]
    return s[-1].detuning if s else 0.0


def frequency_field(dg, hf, B: float) -> np.ndarray:
    """Local S-T0 splitting in Hz from ``dg`` and ``hf`` (neV)."""
    return (np.asarray(dg) * CONSTANTS.mu_B * B + np.asarray(hf) * NEV) / CONSTANTS.h


def evolve(
    state: TwoLevelState,
    trajectory: Trajectory,
    landscape: ZeemanLandscape,
    B: float,
    exchange: ExchangeModel = ExchangeModel(),
    dt: float = 0.1e-9,
    *,
    detuning: float = -0.020,
    static_shift: float = 0.0,
) -> TwoLevelState:
    """Integrate the S/T0 dynamics along ``trajectory``.

    H is sampled at step midpoints and every step is propagated exactly.
    ``static_shift`` (Hz) adds a constant splitting, e.g. the quasistatic
    frequency offset of the spin that stays in the left dot.
    """
    T = trajectory.duration
    if T <= 0:
        return state
    n = max(1, math.ceil(T / dt - 1e-9))
    h = T / n
    tm = (np.arange(n) + 0.5) * h
    x = trajectory.position(tm)
    if x.min() < -1e-9 or x.max() > landscape.length * (1 + 1e-12):
        raise ValueError("trajectory leaves the landscape")
    dg = np.interp(x, landscape.positions, landscape.dg_values)
    hf = np.interp(x, landscape.positions, landscape.hf_values)
    delta = frequency_field(dg, hf, B) + static_shift
    idx = np.clip(np.searchsorted(trajectory.t, tm, side="right") - 1, 0, len(trajectory.kinds) - 1)
    kinds = np.asarray(trajectory.kinds, dtype=object)[idx] if trajectory.kinds else ["dqd"] * n
    J = np.array([exchange.J(k, detuning) for k in kinds]) * NEV / CONSTANTS.h
    rate = 0.5 * np.abs(J) + np.hypot(0.5 * J, 0.5 * delta)
    if 2 * np.pi * rate.max() * h >= MAX_STEP_PHASE:
        raise ValueError(
            f"time step {h:.3g} s too coarse: {2 * np.pi * rate.max() * h:.3g} rad per step "
            f"(limit {MAX_STEP_PHASE})"
        )
    return propagate(state, J, delta, h)


# -- closed-form models ---------------------------------------------------


def avg_frequency(landscape: ZeemanLandscape, d: float, B: float, x0: float = 0.0) -> float:
    """Position-averaged S-T0 frequency in MHz over ``[x0, x0 + d]``."""
    dg, hf = window_average(landscape, x0, d)
    return float(frequency_field(dg, hf, B)) / 1e6


def frequency_ratio(dg: float, hf: float, B_low: float, B_high: float) -> float:
    """Closed-form ``nu(B_low) / nu(B_high)`` for uniform ``dg`` and ``hf`` (neV)."""
    return float(frequency_field(dg, hf, B_low) / frequency_field(dg, hf, B_high))


@dataclass(frozen=True)
class DephasingModelParams:
    """Static-left, static-right (ns) and correlation length (nm)."""

    T2L: float = 1110.0
    T2R: float = 520.0
    lc: float = 13.0

    def __post_init__(self):
        if not (self.T2L > 0 and self.T2R > 0 and self.lc > 0):
            raise ValueError("T2L, T2R and lc must be strictly positive")


def t2_shuttled(params: DephasingModelParams, d) -> np.ndarray | float:
    """Dephasing time (ns) of the spin shuttled out and back over ``d`` nm."""
    d = np.asarray(d, dtype=float)
    out = params.T2R * np.sqrt((d + params.lc) / params.lc)
    return float(out) if out.ndim == 0 else out


def t2_epr_model(params: DephasingModelParams, d) -> np.ndarray | float:
    """EPR-pair T2* (ns) with motional narrowing of the shuttled spin."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("d must be non-negative")
    rate2 = params.T2L**-2.0 + params.T2R**-2.0 * params.lc / (d + params.lc)
    out = rate2**-0.5
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Infidelity:
    exact: float
    quadratic: float
    tau_s: float  # total shuttle time, ns


def shuttle_infidelity(T2S: float, d: float, v_S: float) -> Infidelity:
    """Phase infidelity of a round trip over ``d`` nm at ``v_S`` m/s.

    ``T2S`` is the shuttled spin's dephasing time in ns.
    """
    if T2S <= 0 or v_S <= 0 or d < 0:
        raise ValueError("T2S and v_S must be positive, d non-negative")
    tau = 2 * d / v_S  # nm / (m/s) = ns
    r = (tau / T2S) ** 2
    return Infidelity(exact=-math.expm1(-r), quadratic=r, tau_s=tau)


def sigma_for_t2(t2: float) -> float:
    """Std. dev. of a quasistatic Gaussian frequency (same time units inverted)."""
    return 1.0 / (math.sqrt(2.0) * math.pi * t2)


def t2_for_sigma(sigma_nu: float) -> float:
    return 1.0 / (math.sqrt(2.0) * math.pi * sigma_nu)


# -- Monte Carlo ------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleModel:
    """Everything random that enters one shuttle cycle.

    ``t2_left`` (ns) sets a quasistatic Gaussian offset on the spin left
    in the static dot. A fraction ``tone_weight`` of realisations carries an
    extra g-factor difference ``tone_dg_offset``, giving the second
    oscillation component.
    """

    disorder: DisorderSpec = field(default_factory=DisorderSpec)
    t2_left: float | None = None
    tone_dg_offset: float = 0.0
    tone_weight: float = 0.0
    exchange: ExchangeModel = field(default_factory=ExchangeModel)
    dt: float = 0.1e-9

    def __post_init__(self):
        if not 0.0 <= self.tone_weight <= 1.0:
            raise ValueError("tone_weight must lie in [0, 1]")
        if self.t2_left is not None and self.t2_left <= 0:
            raise ValueError("t2_left must be positive")


@dataclass(frozen=True)
class MonteCarloResult:
    p_s: np.ndarray
    stderr: np.ndarray
    n_realizations: int

    def __iter__(self):
        return iter((self.p_s, self.stderr))


def _phase_integrals(traj: Trajectory, nu: np.ndarray, cum: np.ndarray, step: float):
    """``int nu(x(t)) dt`` (cycles) for each row of ``nu``; exact for linear interpolation."""
    total = np.zeros(nu.shape[0])
    for t0, t1, x0, x1, _ in traj.segments():
        if x1 != x0:
            I = integral_to(nu, cum, step, np.array([x0, x1]))
            total += (t1 - t0) * (I[:, 1] - I[:, 0]) / (x1 - x0)
        else:
            total += (t1 - t0) * _interp_rows(nu, step, x0)
    return total


def _interp_rows(values: np.ndarray, step: float, x: float) -> np.ndarray:
    n = values.shape[-1]
    i = min(int(math.floor(x / step)), max(n - 2, 0))
    if n == 1:
        return values[:, 0]
    t = (x - i * step) / step
    return values[:, i] * (1 - t) + values[:, i + 1] * t


def _chunk_ps(model: EnsembleModel, trajs, B_list, eps_list, seed: int, k: int, size: int):
    spec = model.disorder
    rng_dg, rng_hf, rng_x = chunk_rngs(seed, k)
    dg, hf = field_block(spec, rng_dg, rng_hf, size)
    nu_left = (
        rng_x.standard_normal(size) * sigma_for_t2(model.t2_left * 1e-9)
        if model.t2_left is not None
        else np.zeros(size)
    )
    tone = rng_x.random(size) < model.tone_weight
    out = np.empty((size, len(trajs)))
    cache = {}
    for j, (traj, B, eps) in enumerate(zip(trajs, B_list, eps_list)):
        if B not in cache:
            nu = frequency_field(dg, hf, B)
            cache[B] = (nu, cumulative_integral(nu, spec.grid_step))
        nu, cum = cache[B]
        shift = nu_left + tone * CONSTANTS.zeeman_frequency(model.tone_dg_offset, B)
        if model.exchange.is_zero:
            cycles = _phase_integrals(traj, nu, cum, spec.grid_step) + shift * traj.duration
            out[:, j] = np.cos(np.pi * cycles) ** 2
        else:
            for i in range(size):
                land = ZeemanLandscape(spec.positions(), dg[i], hf[i], spec)
                st = evolve(TwoLevelState.singlet(), traj, land, B, model.exchange,
                            model.dt, detuning=eps, static_shift=shift[i])
                out[i, j] = singlet_probability(st)
    return out


def monte_carlo_scan(
    schedules,
    model: EnsembleModel,
    n_realizations: int,
    seed: int | None = None,
    jobs: int = 1,
) -> MonteCarloResult:
    """Ensemble-averaged singlet probability for each schedule.

    All schedules see the same disorder realisations. Realisations are drawn
    in fixed chunks with per-chunk seeds and reduced in chunk order, so the
    result does not depend on ``jobs``.
    """
    if n_realizations < 1:
        raise ValueError("need at least one realisation")
    seed = model.disorder.seed if seed is None else seed
    trajs = [trajectory_of(s) for s in schedules]
    B_list = [s.magnetic_field for s in schedules]
    eps_list = [_stage_detuning(s) for s in schedules]
    length = model.disorder.positions()[-1]
    for tr in trajs:
        if tr.x.max() > length * (1 + 1e-12):
            raise ValueError(
                f"trajectory reaches {tr.x.max():g} nm beyond the landscape ({length:g} nm)"
            )
    sizes = chunk_sizes(n_realizations)
    tasks = [(k, n) for k, n in enumerate(sizes)]
    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            blocks = list(pool.map(lambda a: _chunk_ps(model, trajs, B_list, eps_list, seed, *a), tasks))
    else:
        blocks = [_chunk_ps(model, trajs, B_list, eps_list, seed, *a) for a in tasks]
    p = np.concatenate(blocks, axis=0)
    mean = p.mean(axis=0)
    err = p.std(axis=0, ddof=1) / math.sqrt(len(p)) if len(p) > 1 else np.zeros(len(trajs))
    # identical realisations: the rounding residue of the mean is not an error bar
    err = np.where(np.ptp(p, axis=0) == 0, 0.0, err)
    return MonteCarloResult(mean, err, n_realizations)


def monte_carlo_ps(
    schedule: PulseSchedule,
    spec_or_model: DisorderSpec | EnsembleModel,
    n_realizations: int,
    seed: int | None = None,
    jobs: int = 1,
) -> tuple[float, float]:
    """Mean singlet probability and its standard error for one schedule."""
    if n_realizations < 100:
        raise ValueError("monte_carlo_ps needs at least 100 realisations")
    model = (
        spec_or_model
        if isinstance(spec_or_model, EnsembleModel)
        else EnsembleModel(disorder=spec_or_model)
    )
    res = monte_carlo_scan([schedule], model, n_realizations, seed, jobs)
    return float(res.p_s[0]), float(res.stderr[0])


def window_frequencies(
    model: EnsembleModel, distances, B: float, n_realizations: int, seed: int | None = None
) -> np.ndarray:
    """Per-realisation mean splitting (Hz) seen by a spin shuttled over each distance.

    Shape ``(n_realizations, len(distances))``. Includes the static-left
    offset and second-tone draws, so ``cos(pi * nu * tau)**2`` averaged over
    rows is the ensemble singlet probability after a round trip of duration
    ``tau``. Fields are generated chunk by chunk and discarded.
    """
    seed = model.disorder.seed if seed is None else seed
    spec = model.disorder
    d = np.asarray(distances, dtype=float)
    out = []
    for k, size in enumerate(chunk_sizes(n_realizations)):
        rng_dg, rng_hf, rng_x = chunk_rngs(seed, k)
        dg, hf = field_block(spec, rng_dg, rng_hf, size)
        nu = frequency_field(dg, hf, B)
        cum = cumulative_integral(nu, spec.grid_step)
        I = integral_to(nu, cum, spec.grid_step, d)
        point = nu[:, :1]
        avg = np.where(d > 0, I / np.where(d > 0, d, 1.0), point)
        nu_left = (
            rng_x.standard_normal(size) * sigma_for_t2(model.t2_left * 1e-9)
            if model.t2_left is not None
            else np.zeros(size)
        )
        tone = rng_x.random(size) < model.tone_weight
        shift = nu_left + tone * CONSTANTS.zeeman_frequency(model.tone_dg_offset, B)
        out.append(avg + shift[:, None])
    return np.concatenate(out, axis=0)


def export_results_csv(path, d_nm, tau_ns, p_s, stderr) -> None:
    data = np.column_stack([np.broadcast_to(d_nm, np.shape(p_s)), tau_ns, p_s, stderr])
    np.savetxt(path, data, delimiter=",", header="d_nm,tau_ns,P_S,stderr", comments="", fmt="%.10g")
