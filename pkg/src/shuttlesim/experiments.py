"""End-to-end measurement loops: schedule, Monte Carlo, shots, fits, bundle."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from shuttlesim import __version__
from shuttlesim.analysis import (
    FitError,
    fit_narrowing,
    fit_single_tone,
    fit_two_tone,
    frequency_ratio_report,
)
from shuttlesim.config import ExperimentConfig
from shuttlesim.landscape import DisorderSpec
from shuttlesim.pulsegen import (
    SequenceRequest,
    ShuttleSegment,
    build_charge_schedule,
    build_schedule,
)
from shuttlesim.readout import (
    ReadoutError,
    ReadoutNoise,
    charge_fidelity,
    classify,
    fit_threshold,
    model_threshold,
    psb_currents,
    simulate_charge_cycles,
)
from shuttlesim.spinsim import EnsembleModel, ExchangeModel, monte_carlo_scan

COLUMNS = {
    "st0_dqd": ["B_T", "tau_ns", "P_S", "stderr", "P_S_model", "n_shots"],
    "coherent_shuttle_map": ["B_T", "d_nm", "tau_ns", "masked", "P_S", "stderr", "P_S_model",
                             "n_shots"],
    "wait_map": ["B_T", "x_nm", "tau_w_ns", "tau_ns", "P_S", "stderr", "P_S_model", "n_shots"],
    "long_distance": ["B_T", "loops", "path_nm", "tau_dqd_ns", "tau_ns", "P_S", "stderr",
                      "P_S_model", "n_shots"],
    "charge_fidelity_scan": ["u_lower_V", "frequency_MHz", "leg_success", "F_C", "wilson_lo",
                             "wilson_hi", "n_cycles"],
}

# (grouping columns, time axis) of each fitted scan line
LINES = {
    "st0_dqd": (("B_T",), "tau_ns"),
    "coherent_shuttle_map": (("B_T", "d_nm"), "tau_ns"),
    "wait_map": (("B_T", "x_nm"), "tau_w_ns"),
    "long_distance": (("B_T", "loops"), "tau_ns"),
}

POOL_LIMIT = 200_000  # currents pooled for the threshold histogram
MIN_LINE_POINTS = 6  # shorter lines are reported as skipped, not failed


@dataclass
class RunResult:
    directory: Path
    fit_failures: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 2 if self.fit_failures else 0


# -- builders -------------------------------------------------------------------------


def disorder_spec(cfg: ExperimentConfig) -> DisorderSpec:
    return DisorderSpec(**cfg["disorder"], seed=int(cfg["seed"]))


def ensemble_model(cfg: ExperimentConfig) -> EnsembleModel:
    d = cfg["dephasing"]
    return EnsembleModel(
        disorder=disorder_spec(cfg),
        t2_left=d["t2_left"],
        tone_dg_offset=d["tone_dg_offset"],
        tone_weight=d["tone_weight"],
        exchange=ExchangeModel(**cfg["exchange"]),
    )


def base_segment(cfg: ExperimentConfig, **changes) -> ShuttleSegment:
    p = cfg["pulse"]
    kw = dict(
        frequency=p["frequency"] * 1e6,
        amplitude_lower=p["amplitude_lower"],
        amplitude_upper=p["amplitude_upper"],
        offsets=tuple(p["offsets"]),
        phases=tuple(p["phases"]),
        lambda_nm=p["lambda_nm"],
    )
    kw.update(changes)
    return ShuttleSegment(**kw)


def readout_noise(cfg: ExperimentConfig) -> ReadoutNoise:
    r = cfg["readout"]
    return ReadoutNoise(r["mu3"], r["sigma3"], r["mu4"], r["sigma4"])


def v_max(cfg: ExperimentConfig) -> float:
    """Fastest shuttle velocity in nm/ns (= m/s)."""
    return cfg["pulse"]["frequency"] * 1e6 * cfg["pulse"]["lambda_nm"] * 1e-9


def inaccessible(tau_ns, d_nm, vmax: float) -> np.ndarray:
    """Points with ``tau_S < 2 d / v_max``: faster than the drive allows."""
    tau = np.asarray(tau_ns, dtype=float)
    return tau * vmax < 2.0 * np.asarray(d_nm, dtype=float) * (1 - 1e-12)


def point_seed(seed: int, tag: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), tag, int(index)])


# -- spin experiments -----------------------------------------------------------------


def _spin_points(cfg: ExperimentConfig):
    """Rows (without measured columns) and a schedule for every accessible point."""
    exp, ax = cfg.experiment, cfg.axes
    bound = cfg["pulse"]["max_distance"]
    seg = base_segment(cfg)
    rows, schedules = [], []
    for B in cfg.fields:
        def req(**kw):
            return SequenceRequest(magnetic_field=B, segment=seg, max_distance=bound,
                                   frequency=seg.frequency, **kw)

        if exp == "st0_dqd":
            for tau in ax["tau_dqd"]:
                rows.append({"B_T": B, "tau_ns": tau})
                schedules.append(build_schedule(req(tau_dqd=tau * 1e-9)))
        elif exp == "coherent_shuttle_map":
            vmax = v_max(cfg)
            for d in ax["distance"]:
                for tau in ax["tau_s"]:
                    masked = bool(inaccessible(tau, d, vmax))
                    rows.append({"B_T": B, "d_nm": d, "tau_ns": tau, "masked": int(masked)})
                    if masked:
                        schedules.append(None)
                    elif d == 0:
                        schedules.append(build_schedule(req(tau_dqd=tau * 1e-9)))
                    else:
                        f = 2 * d / (tau * seg.lambda_nm) * 1e9
                        r = SequenceRequest(magnetic_field=B, segment=seg, max_distance=bound,
                                            distance=d, frequency=f)
                        schedules.append(build_schedule(r))
        elif exp == "wait_map":
            for x in ax["position"]:
                shuttle = 2 * x / v_max(cfg)
                for tw in ax["tau_w"]:
                    rows.append({"B_T": B, "x_nm": x, "tau_w_ns": tw, "tau_ns": shuttle + tw})
                    schedules.append(build_schedule(req(wait_position=x, wait_time=tw * 1e-9)))
        elif exp == "long_distance":
            for D in ax["loops"]:
                D = int(D)
                for tq in ax["tau_dqd"]:
                    s = build_schedule(req(loops=D, tau_dqd=tq * 1e-9))
                    rows.append({"B_T": B, "loops": D, "path_nm": s.path_length,
                                 "tau_dqd_ns": tq, "tau_ns": s.shuttle_time * 1e9 + tq})
                    schedules.append(s)
    return rows, schedules


def _measure(cfg: ExperimentConfig, p_model: np.ndarray, fits_info: dict):
    """Shot simulation and threshold classification for every point."""
    noise = readout_noise(cfg)
    r = cfg["readout"]
    n = int(cfg["shots"])
    seed = int(cfg["seed"])
    kw = dict(false_singlet=r["false_singlet"], false_triplet=r["false_triplet"])

    def currents(i):
        return psb_currents(p_model[i], n, noise, point_seed(seed, 1, i), **kw)

    per_point = max(1, math.ceil(POOL_LIMIT / max(len(p_model), 1)))
    pooled = np.concatenate([currents(i)[:per_point] for i in range(len(p_model))])
    thr, source = None, "model"
    if len(pooled) >= 1000:
        try:
            h = fit_threshold(pooled)
            thr, source = h.threshold, "histogram_fit"
            fits_info["histogram"] = {
                "components": [
                    {"amplitude": c.amplitude, "mean": c.mean, "sigma": c.sigma} for c in h.fitted
                ],
            }
        except ReadoutError as exc:
            fits_info["threshold_warning"] = str(exc)
    if thr is None:
        thr = model_threshold(noise)
    fits_info["threshold"] = thr
    fits_info["threshold_source"] = source

    out = []
    for i in range(len(p_model)):
        four = classify(currents(i), thr, noise.four_is_upper)
        p = float(np.count_nonzero(four)) / n
        out.append((p, math.sqrt(p * (1 - p) / n)))
    return out


def _run_spin(cfg: ExperimentConfig, jobs: int):
    rows, schedules = _spin_points(cfg)
    active = [i for i, s in enumerate(schedules) if s is not None]
    model = ensemble_model(cfg)
    mc = monte_carlo_scan([schedules[i] for i in active], model, int(cfg["realizations"]),
                          seed=int(cfg["seed"]), jobs=jobs)
    info: dict = {}
    measured = _measure(cfg, mc.p_s, info)
    for k, i in enumerate(active):
        rows[i]["P_S"], rows[i]["stderr"] = measured[k]
        rows[i]["P_S_model"] = float(mc.p_s[k])
        rows[i]["n_shots"] = int(cfg["shots"])
    return rows, [s for s in schedules if s is not None], info


# -- charge experiment --------------------------------------------------------------


def _logistic(z):
    return 0.5 * (1.0 + math.tanh(0.5 * z))


def leg_success_model(cfg: ExperimentConfig, u_lower: float, f_mhz: float) -> float:
    """Per-leg transfer probability versus drive amplitude and frequency."""
    c = cfg["charge"]
    return c["leg_success"] * _logistic((u_lower - c["u_threshold"]) / c["u_width"]) * _logistic(
        (c["f_cutoff"] - f_mhz) / c["f_width"]
    )


def _run_charge(cfg: ExperimentConfig, jobs: int):
    ax = cfg.axes
    us = ax["u_lower"] if ax["u_lower"] is not None else [cfg["pulse"]["amplitude_lower"]]
    fs = ax["frequency"] if ax["frequency"] is not None else [cfg["pulse"]["frequency"]]
    noise = readout_noise(cfg)
    n = int(cfg["shots"])
    seed = int(cfg["seed"])
    strat = bool(cfg["charge"]["stratified"])
    points, schedules = [], []
    for u in us:
        for f in fs:
            points.append((float(u), float(f), leg_success_model(cfg, u, f)))
            seg = base_segment(cfg, amplitude_lower=float(u), amplitude_upper=None,
                               frequency=float(f) * 1e6)
            schedules.append(build_charge_schedule(seg, cfg["pulse"]["lambda_nm"]))

    def shots(i):
        return simulate_charge_cycles(n, points[i][2], noise, point_seed(seed, 2, i),
                                      stratified=strat)

    per_point = max(1, math.ceil(POOL_LIMIT / max(len(points), 1)))
    pooled = np.concatenate([shots(i).i_set[: 2 * per_point] for i in range(len(points))])
    info: dict = {}
    thr, source = None, "model"
    if len(pooled) >= 1000:
        try:
            h = fit_threshold(pooled)
            thr, source = h.threshold, "histogram_fit"
            info["histogram"] = {"components": [
                {"amplitude": c.amplitude, "mean": c.mean, "sigma": c.sigma} for c in h.fitted]}
        except ReadoutError as exc:
            info["threshold_warning"] = str(exc)
    if thr is None:
        thr = model_threshold(noise)
    info["threshold"], info["threshold_source"] = thr, source

    def measure(i):
        return charge_fidelity(shots(i), thr, noise.four_is_upper)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(measure, range(len(points))))
    else:
        results = [measure(i) for i in range(len(points))]
    rows = []
    for (u, f, p), r in zip(points, results):
        rows.append({"u_lower_V": u, "frequency_MHz": f, "leg_success": p, "F_C": r.fidelity,
                     "wilson_lo": r.wilson_interval[0], "wilson_hi": r.wilson_interval[1],
                     "n_cycles": r.n_cycles})
    return rows, schedules, info


# -- fitting --------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def fit_rows(cfg_raw: dict, rows: list[dict], jobs: int = 1):
    """Fit every scan line; returns ``(fits, failures)``."""
    exp = cfg_raw["experiment"]
    fits: dict = {"experiment": exp}
    failures: list[str] = []
    if exp == "charge_fidelity_scan":
        fc = [r["F_C"] for r in rows]
        fits["mean_fidelity"] = float(np.mean(fc))
        hi = [r["F_C"] for r in rows if r["u_lower_V"] > 0.125]
        if hi:
            fits["mean_fidelity_u_above_125mV"] = float(np.mean(hi))
        return fits, failures

    keys, t_col = LINES[exp]
    groups: dict = {}
    for r in rows:
        if r.get("masked") or r.get("P_S") is None:
            continue
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    model = cfg_raw["fit"]["model"]
    rel = cfg_raw["fit"]["rel_height"]
    if model == "auto":
        model = "two" if exp == "coherent_shuttle_map" else "single"

    def do_fit(item):
        key, pts = item
        t = np.array([p[t_col] for p in pts])
        y = np.array([p["P_S"] for p in pts])
        s = np.array([p["stderr"] for p in pts])
        entry = dict(zip(keys, key))
        if len(t) < MIN_LINE_POINTS:
            entry["skipped"] = f"{len(t)} point(s), a fit needs {MIN_LINE_POINTS}"
            return entry, None
        try:
            if model == "two":
                f = fit_two_tone((t, y, s), rel_height=rel)
            else:
                f = fit_single_tone((t, y, s))
            entry["fit"] = f.to_dict()
            return entry, f
        except (FitError, np.linalg.LinAlgError, ValueError) as exc:
            entry["error"] = str(exc)
            return entry, None

    items = sorted(groups.items())
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(do_fit, items))
    else:
        done = [do_fit(it) for it in items]
    fits["lines"] = [e for e, _ in done]
    for e, f in done:
        if "error" in e:
            failures.append(f"{e}: {e['error']}")

    if exp == "coherent_shuttle_map":
        by_B: dict = {}
        for (key, _), (e, f) in zip(items, done):
            if f is not None:
                by_B.setdefault(key[0], {})[key[1]] = f
        narrowing = {}
        for B, per_d in sorted(by_B.items()):
            if len(per_d) < 4:
                continue
            d = np.array(sorted(per_d))
            T = np.array([per_d[x].T2_star for x in d])
            sT = np.array([per_d[x].errors["T2_star"] for x in d])
            try:
                nf = fit_narrowing((d, T, sT if np.all(np.isfinite(sT)) else None))
                narrowing[f"{B:g}"] = nf.to_dict()
            except FitError as exc:
                narrowing[f"{B:g}"] = {"error": str(exc)}
                failures.append(f"narrowing at B={B:g}: {exc}")
        fits["narrowing"] = narrowing
        if len(by_B) == 2:
            lo_B, hi_B = sorted(by_B)
            common = sorted(set(by_B[lo_B]) & set(by_B[hi_B]))
            fits["frequency_ratios"] = {
                "B_low": lo_B,
                "B_high": hi_B,
                "expected": lo_B / hi_B,
                "rows": frequency_ratio_report({d: by_B[lo_B][d] for d in common},
                                               {d: by_B[hi_B][d] for d in common}),
            }
    return _clean(fits), failures


# -- bundle I/O ------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def rows_to_csv(experiment: str, rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = COLUMNS[experiment]
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({k: (float(v) if v != "" else None) for k, v in r.items()})
    return out


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def run_directory(cfg: ExperimentConfig, out: str | None = None) -> Path:
    label = cfg["label"] or f"seed{int(cfg['seed'])}"
    return Path(out or cfg["output"]) / cfg.experiment / label


def write_bundle(directory: Path, cfg: ExperimentConfig, rows, schedules, fits) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    data = rows_to_csv(cfg.experiment, rows).encode("utf-8")
    fj = _dump(fits).encode("utf-8")
    (directory / "data.csv").write_bytes(data)
    (directory / "fits.json").write_bytes(fj)
    sched = _dump([s.to_dict() for s in schedules]).encode("utf-8")
    echo = {k: v for k, v in cfg.raw.items() if k != "jobs"}
    manifest = {
        "shuttlesim_version": __version__,
        "experiment": cfg.experiment,
        "seed": int(cfg["seed"]),
        "config": echo,
        "schedule_digest": _sha(sched),
        "n_schedules": len(schedules),
        "files": {"data.csv": _sha(data), "fits.json": _sha(fj)},
    }
    (directory / "manifest.json").write_text(_dump(manifest), encoding="utf-8")


def run(cfg: ExperimentConfig, out: str | None = None, jobs: int | None = None) -> RunResult:
    """Execute the configured experiment and write its bundle."""
    jobs = int(jobs or cfg["jobs"])
    if cfg.experiment == "charge_fidelity_scan":
        rows, schedules, info = _run_charge(cfg, jobs)
    else:
        rows, schedules, info = _run_spin(cfg, jobs)
    fits, failures = fit_rows(cfg.raw, rows, jobs)
    fits["readout"] = info
    directory = run_directory(cfg, out)
    write_bundle(directory, cfg, rows, schedules, fits)
    return RunResult(directory, failures)


def report(directory: str | Path, jobs: int = 1) -> RunResult:
    """Re-fit ``data.csv`` of an existing bundle and rewrite ``fits.json``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    raw = manifest["config"]
    rows = read_rows(directory / "data.csv")
    fits, failures = fit_rows(raw, rows, jobs)
    old = directory / "fits.json"
    if old.exists():
        prev = json.loads(old.read_text(encoding="utf-8"))
        if "readout" in prev:
            fits["readout"] = prev["readout"]
    fj = _dump(fits).encode("utf-8")
    old.write_bytes(fj)
    manifest["files"]["fits.json"] = _sha(fj)
    (directory / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
    return RunResult(directory, failures)
