"""Least-squares fits of singlet-probability traces and of T2*(d).

Oscillation models (time ``t`` in ns, frequencies in MHz)::

    single:  a exp(-(t/T2)^2) cos(2 pi nu t + phi) + c
    two:     exp(-(t/T2)^2) (a1 cos(2 pi nu1 t + phi1) + a2 cos(2 pi nu2 t + phi2)) + c

Motional narrowing::

    (1/T2*)^2 = (1/T2L)^2 + (1/T2R)^2 lc / (d + lc)

The oscillation fits run a damped Gauss-Newton (Levenberg-Marquardt)
iteration seeded from a windowed, zero-padded FFT.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar, nnls


class FitError(RuntimeError):
    pass


# -- optimizer --------------------------------------------------------------


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    jac: np.ndarray
    trace: list[float]
    n_iter: int
    converged: bool


def levenberg_marquardt(fun, jac, x0, *, max_iter=500, ftol=1e-15, xtol=1e-12, lam0=1e-3):
    """Minimise ``0.5 * |fun(x)|^2``.

    ``trace`` records the cost after every accepted step; it is
    non-increasing by construction. Raises :class:`FitError` if the
    iteration budget runs out.
    """
    x = np.array(x0, dtype=float)
    r = fun(x)
    cost = 0.5 * float(r @ r)
    trace = [cost]
    lam = lam0
    J = jac(x)
    for it in range(1, max_iter + 1):
        g = J.T @ r
        A = J.T @ J
        d = np.diag(A).copy()
        d[d <= 0] = 1.0
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                x_new = x + step
                r_new = fun(x_new)
                cost_new = 0.5 * float(r_new @ r_new)
                if np.isfinite(cost_new) and cost_new <= cost:
                    break
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left at working precision
                return LMResult(x, cost, J, trace, it, True)
        gain = cost - cost_new
        x, r, cost = x_new, r_new, cost_new
        trace.append(cost)
        J = jac(x)
        lam = max(lam / 10.0, 1e-12)
        small_step = np.linalg.norm(step) <= xtol * (np.linalg.norm(x) + xtol)
        if cost == 0.0 or gain <= ftol * max(cost, 1e-300) or small_step:
            return LMResult(x, cost, J, trace, it, True)
    raise FitError(f"Levenberg-Marquardt did not converge in {max_iter} iterations")


def _covariance(J: np.ndarray, cost: float, absolute: bool) -> np.ndarray:
    n, p = J.shape
    cov = np.linalg.pinv(J.T @ J)
    if not absolute:
        dof = max(n - p, 1)
        cov = cov * (2.0 * cost / dof)
    return cov


# -- oscillation models ---------------------------------------------------------


def single_tone(t, a, nu, phi, c, T2):
    t = np.asarray(t, dtype=float)
    return a * np.exp(-((t / T2) ** 2)) * np.cos(2e-3 * np.pi * nu * t + phi) + c


def two_tone(t, a_lt, nu_lt, phi_lt, a_gt, nu_gt, phi_gt, c, T2):
    t = np.asarray(t, dtype=float)
    env = np.exp(-((t / T2) ** 2))
    return env * (
        a_lt * np.cos(2e-3 * np.pi * nu_lt * t + phi_lt)
        + a_gt * np.cos(2e-3 * np.pi * nu_gt * t + phi_gt)
    ) + c


def _osc_model(p, t_us, n_tones):
    """Values and Jacobian. ``p = [a, nu, phi] * n_tones + [c, T2]`` (T2 in us)."""
    c, T = p[-2], p[-1]
    env = np.exp(-((t_us / T) ** 2))
    with np.errstate(over="ignore"):  # undamped traces drive T towards infinity
        denv = env * 2.0 * t_us**2 / T**3
    f = np.full_like(t_us, c)
    jac = np.empty((len(t_us), len(p)))
    osc_sum = np.zeros_like(t_us)
    for k in range(n_tones):
        a, nu, phi = p[3 * k : 3 * k + 3]
        th = 2 * np.pi * nu * t_us + phi
        cs, sn = np.cos(th), np.sin(th)
        f += a * env * cs
        osc_sum += a * cs
        jac[:, 3 * k] = env * cs
        jac[:, 3 * k + 1] = -a * env * sn * 2 * np.pi * t_us
        jac[:, 3 * k + 2] = -a * env * sn
    jac[:, -2] = 1.0
    jac[:, -1] = osc_sum * denv
    return f, jac


def _wrap(phi: float) -> float:
    """Map to (-pi, pi]."""
    w = math.remainder(phi, 2 * math.pi)
    return math.pi if w == -math.pi else w


def _normalise_tone(p, cov, k):
    """Make amplitude and frequency of tone ``k`` non-negative (exact reparametrisation)."""
    sign = np.ones(len(p))
    a, nu, phi = p[3 * k : 3 * k + 3]
    if nu < 0:
        nu, phi = -nu, -phi
        sign[3 * k + 1] *= -1
        sign[3 * k + 2] *= -1
    if a < 0:
        a, phi = -a, phi + math.pi
        sign[3 * k] *= -1
    p[3 * k : 3 * k + 3] = a, nu, _wrap(phi)
    cov *= np.outer(sign, sign)


# -- FFT initialisation ---------------------------------------------------------


def _uniform(t, y):
    t = np.asarray(t, dtype=float)
    dt = np.diff(t)
    if len(t) > 2 and np.allclose(dt, dt[0], rtol=1e-6):
        return t, y
    tu = np.linspace(t[0], t[-1], len(t))
    return tu, np.interp(tu, t, y)


def spectrum(t, y, pad: int = 4):
    """Hann-windowed, zero-padded amplitude spectrum of the mean-removed trace.

    Returns ``(freqs, amplitude)`` with the frequency in 1/units-of-``t``.
    """
    t, y = _uniform(t, np.asarray(y, dtype=float))
    y0 = (y - y.mean()) * np.hanning(len(y))
    n = pad * len(y)
    amp = np.abs(np.fft.rfft(y0, n=n))
    freqs = np.fft.rfftfreq(n, d=(t[-1] - t[0]) / (len(t) - 1))
    return freqs, amp


def spectral_peaks(t, y, rel_height: float = 0.1, pad: int = 4) -> list[float]:
    """Local maxima of :func:`spectrum` above ``rel_height`` of the largest one.

    Sorted by height, largest first; positions refined by parabolic
    interpolation. The DC bin is excluded.
    """
    freqs, amp = spectrum(t, y, pad)
    if len(amp) < 3 or amp[1:].max() <= 0:
        return []
    top = amp[1:].max()
    peaks = []
    for i in range(1, len(amp) - 1):
        if amp[i] >= amp[i - 1] and amp[i] > amp[i + 1] and amp[i] >= rel_height * top:
            y0, y1, y2 = amp[i - 1], amp[i], amp[i + 1]
            den = y0 - 2 * y1 + y2
            shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
            peaks.append((y1, freqs[i] + shift * (freqs[1] - freqs[0])))
    peaks.sort(key=lambda p: -p[0])
    return [f for _, f in peaks]


def _linear_init(t_us, y, w, nus, T_grid):
    """Best envelope time and linear parameters for fixed frequencies."""
    best = None
    for T in T_grid:
        env = np.exp(-((t_us / T) ** 2))
        cols = []
        for nu in nus:
            th = 2 * np.pi * nu * t_us
            cols += [env * np.cos(th), env * np.sin(th)]
        cols.append(np.ones_like(t_us))
        A = np.column_stack(cols) * w[:, None]
        coef, *_ = np.linalg.lstsq(A, y * w, rcond=None)
        res = float(np.sum((A @ coef - y * w) ** 2))
        if best is None or res < best[0]:
            best = (res, T, coef)
    _, T, coef = best
    p = []
    for k, nu in enumerate(nus):
        ca, sa = coef[2 * k], coef[2 * k + 1]
        # a cos(th + phi) = a cos(phi) cos(th) - a sin(phi) sin(th)
        p += [math.hypot(ca, sa), nu, math.atan2(-sa, ca)]
    p += [coef[-1], T]
    return np.array(p)


# -- fit results ----------------------------------------------------------------


@dataclass
class St0SingleToneFit:
    a: float
    nu: float
    phi: float
    c: float
    T2_star: float
    covariance: np.ndarray
    residual_rms: float
    trace: list[float] = field(default_factory=list, repr=False)

    @property
    def errors(self) -> dict:
        e = np.sqrt(np.clip(np.diag(self.covariance), 0, None))
        return dict(zip(("a", "nu", "phi", "c", "T2_star"), map(float, e)))

    def __call__(self, t):
        return single_tone(t, self.a, self.nu, self.phi, self.c, self.T2_star)

    def to_dict(self) -> dict:
        d = {k: float(getattr(self, k)) for k in ("a", "nu", "phi", "c", "T2_star", "residual_rms")}
        d["errors"] = self.errors
        d["model"] = "single_tone"
        return d


@dataclass
class St0TwoToneFit:
    T2_star: float
    a_lt: float
    a_gt: float
    nu_lt: float
    nu_gt: float
    phi_lt: float
    phi_gt: float
    c: float
    covariance: np.ndarray
    residual_rms: float
    single_tone: bool = False
    trace: list[float] = field(default_factory=list, repr=False)

    NAMES = ("a_lt", "nu_lt", "phi_lt", "a_gt", "nu_gt", "phi_gt", "c", "T2_star")

    @property
    def errors(self) -> dict:
        e = np.sqrt(np.clip(np.diag(self.covariance), 0, None))
        return dict(zip(self.NAMES, map(float, e)))

    def __call__(self, t):
        return two_tone(t, self.a_lt, self.nu_lt, self.phi_lt, self.a_gt, self.nu_gt,
                        self.phi_gt, self.c, self.T2_star)

    def to_dict(self) -> dict:
        d = {k: float(getattr(self, k)) for k in self.NAMES + ("residual_rms",)}
        d["errors"] = {k: (v if math.isfinite(v) else None) for k, v in self.errors.items()}
        d["single_tone"] = self.single_tone
        d["model"] = "two_tone"
        return d


def _prepare(data):
    if isinstance(data, dict):
        t, y, s = data["t"], data["p_s"], data.get("stderr")
    elif len(data) == 3:
        t, y, s = data
    else:
        t, y = data
        s = None
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(t, kind="stable")
    t, y = t[order], y[order]
    if s is None:
        w = np.ones_like(y)
        absolute = False
    else:
        s = np.asarray(s, dtype=float)[order]
        pos = s[s > 0]
        floor = pos.min() if len(pos) else 1.0
        w = 1.0 / np.where(s > 0, s, floor)
        absolute = len(pos) > 0
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise FitError("non-finite data")
    return t, y, w, absolute


def _check_sampling(t, nu_max_mhz, nu_min_mhz):
    dt = np.median(np.diff(t))
    span = t[-1] - t[0]
    if nu_max_mhz * 1e-3 * dt > 1 / 8 + 1e-9:
        raise FitError(
            f"trace sampled every {dt:g} ns, fewer than 8 points per period of {nu_max_mhz:.3g} MHz"
        )
    if nu_min_mhz * 1e-3 * span < 1 - 1e-9:
        raise FitError(f"trace spans {span:g} ns, less than one period of {nu_min_mhz:.3g} MHz")


def _run_lm(t, y, w, p0, n_tones, max_iter):
    t_us = t * 1e-3

    def fun(p):
        f, _ = _osc_model(p, t_us, n_tones)
        return (f - y) * w

    def jac(p):
        _, J = _osc_model(p, t_us, n_tones)
        return J * w[:, None]

    return levenberg_marquardt(fun, jac, p0, max_iter=max_iter)


def _t2_grid(t):
    span = max(t[-1] - t[0], 1e-9) * 1e-3
    return span * np.geomspace(0.05, 20.0, 41)


def fit_single_tone(data, *, max_iter: int = 500) -> St0SingleToneFit:
    """Fit one damped cosine to ``(t_ns, P_S[, stderr])``."""
    t, y, w, absolute = _prepare(data)
    if len(t) < 6:
        raise FitError("need at least 6 points for a single-tone fit")
    peaks = spectral_peaks(t * 1e-3, y)  # MHz
    if peaks:
        nu0 = peaks[0]
        _check_sampling(t, nu0, nu0)
        df = 1.0 / (4 * (t[-1] - t[0]) * 1e-3)
        nus = nu0 + df * np.linspace(-1, 1, 9)
        best = None
        for nu in nus:
            p = _linear_init(t * 1e-3, y, w, [nu], _t2_grid(t))
            f, _ = _osc_model(p, t * 1e-3, 1)
            res = float(np.sum(((f - y) * w) ** 2))
            if best is None or res < best[0]:
                best = (res, p)
        p0 = best[1]
    else:
        p0 = np.array([0.0, 1.0, 0.0, float(np.average(y, weights=w**2)), _t2_grid(t)[20]])
    sol = _run_lm(t, y, w, p0, 1, max_iter)
    p = sol.x.copy()
    cov = _covariance(sol.jac, sol.cost, absolute)
    _normalise_tone(p, cov, 0)
    if p[4] < 0:
        p[4] = -p[4]
        cov[:, 4] *= -1
        cov[4, :] *= -1
    scale = np.array([1, 1, 1, 1, 1e3])  # T2 back to ns
    cov = cov * np.outer(scale, scale)
    resid = single_tone(t, p[0], p[1], p[2], p[3], p[4] * 1e3) - y
    return St0SingleToneFit(
        a=float(p[0]), nu=float(p[1]), phi=float(p[2]), c=float(p[3]), T2_star=float(p[4] * 1e3),
        covariance=cov, residual_rms=float(np.sqrt(np.mean(resid**2))), trace=sol.trace,
    )


def fit_two_tone(data, *, max_iter: int = 1000, rel_height: float = 0.1) -> St0TwoToneFit:
    """Fit two cosines sharing one Gaussian envelope.

    Falls back to :func:`fit_single_tone` (``single_tone=True``) when the
    spectrum does not show two resolvable peaks.
    """
    t, y, w, absolute = _prepare(data)
    peaks = spectral_peaks(t * 1e-3, y, rel_height=rel_height)
    if len(peaks) < 2 or len(t) < 10:
        s = fit_single_tone(data, max_iter=max_iter)
        cov = np.full((8, 8), np.nan)
        idx = [0, 1, 2, 6, 7]
        cov[np.ix_(idx, idx)] = s.covariance[np.ix_([0, 1, 2, 3, 4], [0, 1, 2, 3, 4])]
        return St0TwoToneFit(
            T2_star=s.T2_star, a_lt=s.a, a_gt=0.0, nu_lt=s.nu, nu_gt=s.nu, phi_lt=s.phi,
            phi_gt=0.0, c=s.c, covariance=cov, residual_rms=s.residual_rms, single_tone=True,
            trace=s.trace,
        )
    nu_a, nu_b = sorted(peaks[:2])
    _check_sampling(t, nu_b, nu_a)
    t_us = t * 1e-3
    df = 1.0 / (4 * (t[-1] - t[0]) * 1e-3)
    best = None
    for da in np.linspace(-1, 1, 5) * df:
        for db in np.linspace(-1, 1, 5) * df:
            p = _linear_init(t_us, y, w, [nu_a + da, nu_b + db], _t2_grid(t))
            f, _ = _osc_model(p, t_us, 2)
            res = float(np.sum(((f - y) * w) ** 2))
            if best is None or res < best[0]:
                best = (res, p)
    sol = _run_lm(t, y, w, best[1], 2, max_iter)
    p = sol.x.copy()
    cov = _covariance(sol.jac, sol.cost, absolute)
    _normalise_tone(p, cov, 0)
    _normalise_tone(p, cov, 1)
    if p[7] < 0:
        p[7] = -p[7]
        cov[:, 7] *= -1
        cov[7, :] *= -1
    if p[1] > p[4]:
        perm = [3, 4, 5, 0, 1, 2, 6, 7]
        p = p[perm]
        cov = cov[np.ix_(perm, perm)]
    scale = np.array([1, 1, 1, 1, 1, 1, 1, 1e3])
    cov = cov * np.outer(scale, scale)
    T2 = p[7] * 1e3
    resid = two_tone(t, *p[:7], T2) - y
    return St0TwoToneFit(
        T2_star=float(T2), a_lt=float(p[0]), a_gt=float(p[3]), nu_lt=float(p[1]),
        nu_gt=float(p[4]), phi_lt=float(p[2]), phi_gt=float(p[5]), c=float(p[6]),
        covariance=cov, residual_rms=float(np.sqrt(np.mean(resid**2))), trace=sol.trace,
    )


# -- motional narrowing -------------------------------------------------------------


@dataclass
class NarrowingFit:
    T2L: float
    T2R: float
    lc: float
    covariance: np.ndarray
    identifiable: bool = True

    @property
    def errors(self) -> dict:
        e = np.sqrt(np.clip(np.diag(self.covariance), 0, None))
        return dict(zip(("T2L", "T2R", "lc"), map(float, e)))

    def to_dict(self) -> dict:
        def clean(v):
            return float(v) if math.isfinite(v) else None

        return {
            "T2L": clean(self.T2L),
            "T2R": clean(self.T2R),
            "lc": clean(self.lc),
            "errors": {k: clean(v) for k, v in self.errors.items()},
            "identifiable": self.identifiable,
        }


def _nnls_at(lc, d, y, w):
    A = np.column_stack([np.ones_like(d), lc / (d + lc)]) * w[:, None]
    coef, rnorm = nnls(A, y * w)
    return coef, rnorm**2


def fit_narrowing(points) -> NarrowingFit:
    """Fit ``(d_nm, T2_ns[, stderr_ns])`` to the motional-narrowing law.

    Works on ``y = 1/T2^2`` where the model is linear in ``1/T2L^2`` and
    ``1/T2R^2`` for fixed ``lc``: those two are solved by non-negative least
    squares and ``lc`` is profiled out.
    """
    if len(points) == 3 and np.ndim(points[0]) == 1:
        d, T, s = (np.asarray(a, dtype=float) for a in points)
    elif len(points) == 2 and np.ndim(points[0]) == 1:
        d, T = (np.asarray(a, dtype=float) for a in points)
        s = None
    else:
        arr = np.asarray(points, dtype=float)
        d, T = arr[:, 0], arr[:, 1]
        s = arr[:, 2] if arr.shape[1] > 2 else None
    if len(np.unique(d)) < 4:
        raise FitError("need at least four distinct shuttle distances")
    if np.any(d < 0) or np.any(T <= 0):
        raise FitError("distances must be non-negative and T2 positive")
    T_us = T * 1e-3
    y = T_us**-2.0
    if s is not None:
        with np.errstate(over="ignore"):
            sig = 2.0 * (s * 1e-3) / T_us**3
        w = 1.0 / np.where(sig > 0, sig, sig[sig > 0].min() if np.any(sig > 0) else 1.0)
        absolute = bool(np.any(sig > 0))
    else:
        w = np.ones_like(y) / y.mean()
        absolute = False

    dpos = d[d > 0]
    lo = math.log(max(dpos.min() if len(dpos) else 1.0, 1e-3) * 1e-3)
    hi = math.log(d.max() * 1e3)
    grid = np.linspace(lo, hi, 121)
    chi = [_nnls_at(math.exp(g), d, y, w)[1] for g in grid]
    i = int(np.argmin(chi))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    if b > a:
        res = minimize_scalar(lambda g: _nnls_at(math.exp(g), d, y, w)[1], bounds=(a, b),
                              method="bounded", options={"xatol": 1e-10})
        g = res.x
    else:
        g = grid[i]
    lc = math.exp(g)
    (A, B), chi2 = _nnls_at(lc, d, y, w)
    at_edge = i in (0, len(grid) - 1)
    identifiable = bool(B > 1e-9 * max(A, 1e-300) and A > 0 and not at_edge)
    T2L = A**-0.5 if A > 0 else math.inf
    T2R = B**-0.5 if B > 0 else math.inf
    if not identifiable:
        cov = np.full((3, 3), np.nan)
        if A > 0:
            J = (-2 * A**1.5) * np.ones((len(d), 1)) * w[:, None]
            cov[0, 0] = _covariance(J, 0.5 * chi2, absolute)[0, 0] * 1e6
        return NarrowingFit(T2L * 1e3, math.inf, math.nan, cov, identifiable=False)
    # Jacobian of y = T2L^-2 + T2R^-2 lc/(d+lc) with respect to (T2L, T2R, lc)
    f = lc / (d + lc)
    J = np.column_stack([
        -2 * T2L**-3 * np.ones_like(d),
        -2 * T2R**-3 * f,
        T2R**-2 * d / (d + lc) ** 2,
    ]) * w[:, None]
    cov = _covariance(J, 0.5 * chi2, absolute)
    scale = np.array([1e3, 1e3, 1.0])
    return NarrowingFit(T2L * 1e3, T2R * 1e3, lc, cov * np.outer(scale, scale), True)


# -- reports --------------------------------------------------------------------


def _tones(fit):
    if isinstance(fit, St0SingleToneFit):
        return {"single": (fit.nu, fit.errors["nu"])}
    e = fit.errors
    if fit.single_tone:
        return {"lt": (fit.nu_lt, e["nu_lt"])}
    return {"lt": (fit.nu_lt, e["nu_lt"]), "gt": (fit.nu_gt, e["nu_gt"])}


def frequency_ratio_report(fits_low: dict, fits_high: dict) -> list[dict]:
    """Pairwise ``nu(B_low) / nu(B_high)`` for matching distances and tones.

    ``fits_low``/``fits_high`` map distance (nm) to a fit at the lower and the
    higher field. Errors are propagated in quadrature.
    """
    if sorted(fits_low) != sorted(fits_high):
        raise ValueError("the two fields were fitted on different distance grids")
    rows = []
    for d in sorted(fits_low):
        lo, hi = _tones(fits_low[d]), _tones(fits_high[d])
        for tone in lo:
            if tone not in hi:
                continue
            (n1, e1), (n2, e2) = lo[tone], hi[tone]
            ratio = n1 / n2
            err = abs(ratio) * math.hypot(e1 / n1 if n1 else math.inf, e2 / n2 if n2 else math.inf)
            rows.append({"d_nm": float(d), "tone": tone, "nu_low": n1, "nu_high": n2,
                         "ratio": ratio, "ratio_err": err})
    return rows


def fit_to_dict(fit) -> dict:
    if hasattr(fit, "to_dict"):
        return fit.to_dict()
    return asdict(fit)
