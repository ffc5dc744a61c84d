"""Experiment configuration: a YAML document validated fail-closed.

Units: times in ns, distances in nm, frequencies in MHz, fields in tesla,
energies in neV, voltages in volts.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from shuttlesim.landscape import KERNELS
from shuttlesim.pulsegen import LAMBDA_NM

EXPERIMENTS = (
    "st0_dqd",
    "coherent_shuttle_map",
    "wait_map",
    "long_distance",
    "charge_fidelity_scan",
)

DEFAULTS = {
    "experiment": None,
    "magnetic_field": 0.8,
    "seed": 0,
    "shots": 50000,
    "realizations": 2000,
    "output": "runs",
    "label": None,
    "jobs": 1,
    "disorder": {
        "grid_step": 1.0,
        "channel_length": 400.0,
        "sigma_dg": 0.0,
        "mean_dg": 6.51e-4,
        "sigma_hf": 0.0,
        "mean_hf": 0.0,
        "correlation_length": 13.0,
        "correlation_length_hf": None,
        "kernel": "exponential",
    },
    "dephasing": {"t2_left": None, "tone_dg_offset": 0.0, "tone_weight": 0.0},
    "exchange": {"J0": 0.0, "epsilon0": 0.01, "form": "off_during_shuttle"},
    "pulse": {
        "frequency": 10.0,
        "amplitude_lower": 0.150,
        "amplitude_upper": None,
        "offsets": [0.7, 0.896, 0.7, 0.896],
        "phases": [-math.pi / 2, 0.0, math.pi / 2, math.pi],
        "lambda_nm": LAMBDA_NM,
        "max_distance": 1.2 * LAMBDA_NM,
    },
    "readout": {
        "mu3": 1.0,
        "sigma3": 0.05,
        "mu4": 0.6,
        "sigma4": 0.035,
        "false_singlet": 0.0,
        "false_triplet": 0.0,
    },
    "charge": {
        "leg_success": 0.9986,
        "u_threshold": 0.110,
        "u_width": 0.002,
        "f_cutoff": 15.0,
        "f_width": 0.3,
        "stratified": False,
    },
    "scan": {
        "tau_dqd": None,
        "tau_s": None,
        "distance": None,
        "position": None,
        "tau_w": None,
        "loops": None,
        "u_lower": None,
        "frequency": None,
    },
    "fit": {"model": "auto", "rel_height": 0.1},
}

REQUIRED_AXES = {
    "st0_dqd": ("tau_dqd",),
    "coherent_shuttle_map": ("distance", "tau_s"),
    "wait_map": ("position", "tau_w"),
    "long_distance": ("loops",),
    "charge_fidelity_scan": (),
}


class ConfigError(ValueError):
    """Carries every violation found, one string per problem."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def expand_range(spec, key: str, problems: list) -> np.ndarray | None:
    """A scan axis is a list of values or a mapping ``{start, stop, num|step}``."""
    if spec is None:
        return None
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return np.array([float(spec)])
    if isinstance(spec, list):
        try:
            vals = np.array([float(v) for v in spec])
        except (TypeError, ValueError):
            problems.append(f"{key}: values must be numbers")
            return None
        if len(vals) == 0:
            problems.append(f"{key}: scan range is empty")
            return None
        return vals
    if isinstance(spec, dict):
        extra = set(spec) - {"start", "stop", "num", "step"}
        if extra:
            problems.append(f"{key}: unknown keys {sorted(extra)}")
            return None
        if "start" not in spec or "stop" not in spec:
            problems.append(f"{key}: range needs 'start' and 'stop'")
            return None
        start, stop = float(spec["start"]), float(spec["stop"])
        if ("num" in spec) == ("step" in spec):
            problems.append(f"{key}: give exactly one of 'num' or 'step'")
            return None
        if "num" in spec:
            num = spec["num"]
            if not isinstance(num, int) or num < 1:
                problems.append(f"{key}.num: must be a positive integer")
                return None
            return np.linspace(start, stop, num)
        step = float(spec["step"])
        if step <= 0 or stop < start:
            problems.append(f"{key}: need step > 0 and stop >= start")
            return None
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return start + step * np.arange(n)
    problems.append(f"{key}: expected a list or a {{start, stop, num}} mapping")
    return None


def _merge(defaults: dict, given: dict, path: str, problems: list) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        key = f"{path}{k}"
        if k not in defaults:
            problems.append(f"{key}: unknown key")
            continue
        if isinstance(defaults[k], dict):
            if not isinstance(v, dict):
                problems.append(f"{key}: expected a mapping")
                continue
            out[k] = _merge(defaults[k], v, key + ".", problems)
        else:
            out[k] = v
    return out


def _num(cfg, key, problems, *, lo=None, hi=None, strict_lo=False, integer=False, optional=False):
    sec, _, name = key.rpartition(".")
    d = cfg
    for part in filter(None, sec.split(".")):
        d = d[part]
    v = d[name]
    if v is None and optional:
        return
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        problems.append(f"{key}: expected a number, got {v!r}")
        return
    if integer and not (isinstance(v, int) or float(v).is_integer()):
        problems.append(f"{key}: expected an integer, got {v!r}")
        return
    if lo is not None and (v <= lo if strict_lo else v < lo):
        problems.append(f"{key}: must be {'>' if strict_lo else '>='} {lo}, got {v!r}")
    if hi is not None and v > hi:
        problems.append(f"{key}: must be <= {hi}, got {v!r}")


@dataclass
class ExperimentConfig:
    raw: dict  # fully merged document
    axes: dict  # expanded scan axes (numpy arrays or None)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    @property
    def fields(self) -> list[float]:
        B = self.raw["magnetic_field"]
        return [float(b) for b in (B if isinstance(B, list) else [B])]


def check(raw) -> tuple[ExperimentConfig | None, list[str]]:
    """Schema and physics checks; returns the config (if usable) and all problems."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        return None, ["<root>: expected a mapping of configuration keys"]
    cfg = _merge(DEFAULTS, raw, "", problems)

    if cfg["experiment"] is None:
        problems.append("experiment: required, one of " + ", ".join(EXPERIMENTS))
    elif cfg["experiment"] not in EXPERIMENTS:
        problems.append(f"experiment: unknown experiment {cfg['experiment']!r}")

    B = cfg["magnetic_field"]
    Bs = B if isinstance(B, list) else [B]
    if not Bs or any(isinstance(b, bool) or not isinstance(b, (int, float)) or b <= 0 for b in Bs):
        problems.append(f"magnetic_field: expected positive tesla value(s), got {B!r}")
    _num(cfg, "seed", problems, lo=0, integer=True)
    _num(cfg, "shots", problems, lo=1, integer=True)
    _num(cfg, "realizations", problems, lo=100, integer=True)
    _num(cfg, "jobs", problems, lo=1, integer=True)
    if not isinstance(cfg["output"], str):
        problems.append("output: expected a directory path")
    if cfg["label"] is not None and not isinstance(cfg["label"], str):
        problems.append("label: expected a string")

    for k in ("grid_step", "correlation_length"):
        _num(cfg, f"disorder.{k}", problems, lo=0, strict_lo=True)
    _num(cfg, "disorder.correlation_length_hf", problems, lo=0, strict_lo=True, optional=True)
    _num(cfg, "disorder.channel_length", problems, lo=0, strict_lo=True)
    for k in ("sigma_dg", "sigma_hf"):
        _num(cfg, f"disorder.{k}", problems, lo=0)
    for k in ("mean_dg", "mean_hf"):
        _num(cfg, f"disorder.{k}", problems)
    if cfg["disorder"]["kernel"] not in KERNELS:
        problems.append(f"disorder.kernel: must be one of {list(KERNELS)}")

    _num(cfg, "dephasing.t2_left", problems, lo=0, strict_lo=True, optional=True)
    _num(cfg, "dephasing.tone_dg_offset", problems)
    _num(cfg, "dephasing.tone_weight", problems, lo=0, hi=1)
    _num(cfg, "exchange.J0", problems, lo=0)
    _num(cfg, "exchange.epsilon0", problems, lo=0, strict_lo=True)
    if cfg["exchange"]["form"] not in ("off_during_shuttle", "exponential_in_detuning"):
        problems.append("exchange.form: must be off_during_shuttle or exponential_in_detuning")

    for k in ("frequency", "lambda_nm", "max_distance"):
        _num(cfg, f"pulse.{k}", problems, lo=0, strict_lo=True)
    _num(cfg, "pulse.amplitude_lower", problems)
    _num(cfg, "pulse.amplitude_upper", problems, optional=True)
    for k in ("offsets", "phases"):
        v = cfg["pulse"][k]
        if not (isinstance(v, list) and len(v) == 4 and all(isinstance(x, (int, float)) for x in v)):
            problems.append(f"pulse.{k}: expected four numbers")

    for k in ("sigma3", "sigma4"):
        _num(cfg, f"readout.{k}", problems, lo=0)
    for k in ("mu3", "mu4"):
        _num(cfg, f"readout.{k}", problems)
    if cfg["readout"]["mu3"] == cfg["readout"]["mu4"]:
        problems.append("readout: mu3 and mu4 must differ")
    for k in ("false_singlet", "false_triplet"):
        _num(cfg, f"readout.{k}", problems, lo=0, hi=1)
    _num(cfg, "charge.leg_success", problems, lo=0, hi=1)
    for k in ("u_width", "f_cutoff", "f_width"):
        _num(cfg, f"charge.{k}", problems, lo=0, strict_lo=True)
    _num(cfg, "charge.u_threshold", problems)
    if cfg["fit"]["model"] not in ("auto", "single", "two"):
        problems.append("fit.model: must be auto, single or two")
    _num(cfg, "fit.rel_height", problems, lo=0, hi=1)

    axes = {k: expand_range(v, f"scan.{k}", problems) for k, v in cfg["scan"].items()}
    exp = cfg["experiment"]
    if exp in REQUIRED_AXES:
        for ax in REQUIRED_AXES[exp]:
            if axes[ax] is None and f"scan.{ax}" not in " ".join(problems):
                problems.append(f"scan.{ax}: required for experiment {exp}")
        if exp == "long_distance" and axes["tau_dqd"] is None:
            axes["tau_dqd"] = np.linspace(0.0, 1000.0, 101)
        if exp == "charge_fidelity_scan" and axes["u_lower"] is None and axes["frequency"] is None:
            problems.append("scan: charge_fidelity_scan needs scan.u_lower and/or scan.frequency")

    for name in ("tau_dqd", "tau_s", "tau_w", "distance", "position"):
        a = axes[name]
        if a is not None and np.any(a < 0):
            problems.append(f"scan.{name}: values must be non-negative")
    if axes["loops"] is not None and (
        np.any(axes["loops"] < 1) or np.any(axes["loops"] != np.round(axes["loops"]))
    ):
        problems.append("scan.loops: values must be positive integers")
    if axes["frequency"] is not None and np.any(axes["frequency"] <= 0):
        problems.append("scan.frequency: values must be positive")

    # physical range of the shuttle
    pulse = cfg["pulse"]
    try:
        bound = float(pulse["max_distance"])
        lam = float(pulse["lambda_nm"])
    except (TypeError, ValueError):
        bound = lam = None
    reach = 0.0
    if bound is not None:
        for name in ("distance", "position"):
            a = axes[name]
            if a is not None and len(a) and a.max() > bound + 1e-9:
                problems.append(
                    f"scan.{name}: {a.max():g} nm exceeds the usable shuttle range of "
                    f"{bound:g} nm (1.2 lambda); the electron does not return reliably beyond it"
                )
            if a is not None and len(a):
                reach = max(reach, float(a.max()))
        if axes["loops"] is not None and len(axes["loops"]):
            per_loop = lam if axes["loops"].max() > 1 else lam / 2
            if per_loop > bound + 1e-9:
                problems.append(f"scan.loops: one period ({lam:g} nm) exceeds the usable range")
            reach = max(reach, per_loop)
        if exp in ("st0_dqd", "coherent_shuttle_map", "wait_map", "long_distance"):
            L = cfg["disorder"]["channel_length"]
            if isinstance(L, (int, float)) and reach > L:
                problems.append(
                    f"disorder.channel_length: {L:g} nm is shorter than the scanned reach {reach:g} nm"
                )

    if problems:
        return None, problems
    return ExperimentConfig(cfg, axes), []


def parse_text(text: str, source: str = "<config>"):
    try:
        return yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError([f"{where}: parse error: {exc.problem or exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"{source}: parse error: {exc}"]) from exc


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    raw = parse_text(path.read_text(encoding="utf-8"), str(path))
    if raw is None:
        raw = {}
    if overrides and isinstance(raw, dict):
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    cfg, problems = check(raw)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(path: str | Path) -> list[str]:
    """Every problem in the file at ``path``; empty when it can be run."""
    path = Path(path)
    if not path.exists():
        return [f"{path}: file not found"]
    try:
        raw = parse_text(path.read_text(encoding="utf-8"), str(path))
    except ConfigError as exc:
        return exc.problems
    return check(raw if raw is not None else {})[1]
