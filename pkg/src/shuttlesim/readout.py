"""Shot-level charge readout with a single-electron transistor.

Each measurement yields one SET current drawn from a Gaussian that depends
on whether the left dot holds three or four electrons. A two-Gaussian fit to
the current histogram gives the classification threshold at the crossing
point of the fitted components.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import curve_fit
from scipy.special import ndtr

THREE = "three_electrons"
FOUR = "four_electrons"
STAGES = ("M_after_forward", "M_after_return", "M_psb")


class ReadoutError(ValueError):
    pass


@dataclass(frozen=True)
class ReadoutNoise:
    """Truth-conditional SET current distributions (arbitrary units)."""

    mu3: float = 1.0
    sigma3: float = 0.05
    mu4: float = 0.6
    sigma4: float = 0.035

    def __post_init__(self):
        if self.sigma3 < 0 or self.sigma4 < 0:
            raise ValueError("current noise must be non-negative")
        if self.mu3 == self.mu4:
            raise ValueError("the two fillings need distinct mean currents")

    @property
    def four_is_upper(self) -> bool:
        return self.mu4 > self.mu3

    @classmethod
    def separated(cls, separation: float, sigma: float = 1.0, mu4: float = 0.0) -> "ReadoutNoise":
        """Equal widths, means ``separation`` sigmas apart (three-electron peak above)."""
        return cls(mu3=mu4 + separation * sigma, sigma3=sigma, mu4=mu4, sigma4=sigma)


@dataclass(frozen=True)
class ShotRecord:
    i_set: float
    stage: str
    cycle_index: int
    truth: str | None = None


class ShotTable:
    """Column store for many shots; iterates as :class:`ShotRecord`."""

    def __init__(self, cycle, stage, i_set, truth=None):
        self.cycle = np.asarray(cycle, dtype=np.int64)
        self.stage = np.asarray(stage, dtype=object)
        self.i_set = np.asarray(i_set, dtype=float)
        n = len(self.i_set)
        self.truth = np.asarray(truth if truth is not None else [None] * n, dtype=object)
        if not (len(self.cycle) == len(self.stage) == n == len(self.truth)):
            raise ValueError("shot columns must have equal length")

    def __len__(self) -> int:
        return len(self.i_set)

    def __iter__(self):
        for c, s, i, t in zip(self.cycle, self.stage, self.i_set, self.truth):
            yield ShotRecord(float(i), str(s), int(c), t)

    def take(self, idx) -> "ShotTable":
        return ShotTable(self.cycle[idx], self.stage[idx], self.i_set[idx], self.truth[idx])

    @classmethod
    def from_records(cls, records: Iterable[ShotRecord]) -> "ShotTable":
        records = list(records)
        return cls(
            [r.cycle_index for r in records],
            [r.stage for r in records],
            [r.i_set for r in records],
            [r.truth for r in records],
        )

    @classmethod
    def concat(cls, tables: Sequence["ShotTable"]) -> "ShotTable":
        return cls(
            np.concatenate([t.cycle for t in tables]),
            np.concatenate([t.stage for t in tables]),
            np.concatenate([t.i_set for t in tables]),
            np.concatenate([t.truth for t in tables]),
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cycle", "stage", "i_set", "truth"])
            for c, s, i, t in zip(self.cycle, self.stage, self.i_set, self.truth):
                w.writerow([int(c), s, repr(float(i)), t or ""])

    @classmethod
    def from_csv(cls, path) -> "ShotTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [int(r["cycle"]) for r in rows],
            [r["stage"] for r in rows],
            [float(r["i_set"]) for r in rows],
            [r["truth"] or None for r in rows],
        )


def as_table(shots) -> ShotTable:
    if isinstance(shots, ShotTable):
        return shots
    return ShotTable.from_records(shots)


def _draw(truth_four: np.ndarray, noise: ReadoutNoise, rng: np.random.Generator) -> np.ndarray:
    mu = np.where(truth_four, noise.mu4, noise.mu3)
    sig = np.where(truth_four, noise.sigma4, noise.sigma3)
    return mu + sig * rng.standard_normal(len(truth_four))


def simulate_shot(
    truth: str,
    noise: ReadoutNoise,
    seed: int | np.random.Generator | None = None,
    stage: str = "M_psb",
    cycle_index: int = 0,
) -> ShotRecord:
    if truth not in (THREE, FOUR):
        raise ValueError(f"truth must be {THREE!r} or {FOUR!r}")
    rng = np.random.default_rng(seed)
    i = _draw(np.array([truth == FOUR]), noise, rng)[0]
    return ShotRecord(float(i), stage, cycle_index, truth)


def simulate_shots(truth_four, noise: ReadoutNoise, seed=None, stage="M_psb", first_cycle=0):
    truth_four = np.asarray(truth_four, dtype=bool)
    rng = np.random.default_rng(seed)
    n = len(truth_four)
    return ShotTable(
        np.arange(first_cycle, first_cycle + n),
        np.full(n, stage, dtype=object),
        _draw(truth_four, noise, rng),
        np.where(truth_four, FOUR, THREE).astype(object),
    )


def _bernoulli_exact(rng, n: int, p: float) -> np.ndarray:
    """``round(n * p)`` successes in random order."""
    k = int(round(n * p))
    out = np.zeros(n, dtype=bool)
    out[rng.permutation(n)[:k]] = True
    return out


def simulate_charge_cycles(
    n_cycles: int,
    leg_success: float,
    noise: ReadoutNoise,
    seed=None,
    *,
    stratified: bool = False,
) -> ShotTable:
    """Two measurements per cycle, after the forward and after the return leg.

    The electron leaves the detector dot with probability ``leg_success``
    and, if it left, comes back with the same probability. With
    ``stratified`` the number of failures per leg is fixed to its expectation
    (rounded) and only their placement is random.
    """
    if not 0.0 <= leg_success <= 1.0:
        raise ValueError("leg_success must be a probability")
    rng = np.random.default_rng(seed)
    if stratified:
        left = _bernoulli_exact(rng, n_cycles, leg_success)
        back = np.zeros(n_cycles, dtype=bool)
        idx = np.flatnonzero(left)
        back[idx] = _bernoulli_exact(rng, len(idx), leg_success)
    else:
        left = rng.random(n_cycles) < leg_success
        back = left & (rng.random(n_cycles) < leg_success)
    # forward: four electrons unless the electron left; return: four if it came
    # back or never left
    four_fwd = ~left
    four_ret = back | ~left
    cycles = np.arange(n_cycles)
    cur = _draw(np.concatenate([four_fwd, four_ret]), noise, rng)
    truth = np.where(np.concatenate([four_fwd, four_ret]), FOUR, THREE).astype(object)
    stage = np.array(["M_after_forward"] * n_cycles + ["M_after_return"] * n_cycles, dtype=object)
    order = np.argsort(np.concatenate([2 * cycles, 2 * cycles + 1]), kind="stable")
    return ShotTable(np.concatenate([cycles, cycles])[order], stage[order], cur[order], truth[order])


def simulate_psb_shots(
    p_singlet: float,
    n: int,
    noise: ReadoutNoise,
    seed=None,
    *,
    false_singlet: float = 0.0,
    false_triplet: float = 0.0,
    first_cycle: int = 0,
) -> ShotTable:
    """Readout after spin-to-charge conversion: a singlet ends in (4,0).

    ``false_triplet`` is the chance a singlet is read as blocked,
    ``false_singlet`` the chance a triplet relaxes or tunnels anyway.
    """
    rng = np.random.default_rng(seed)
    four = _psb_truth(rng, p_singlet, n, false_singlet, false_triplet)
    return simulate_shots(four, noise, rng, "M_psb", first_cycle)


def _psb_truth(rng, p_singlet, n, false_singlet, false_triplet):
    singlet = rng.random(n) < p_singlet
    flip = rng.random(n)
    return np.where(singlet, flip >= false_triplet, flip < false_singlet)


def psb_currents(
    p_singlet: float,
    n: int,
    noise: ReadoutNoise,
    seed=None,
    *,
    false_singlet: float = 0.0,
    false_triplet: float = 0.0,
) -> np.ndarray:
    """Currents only, same draws as :func:`simulate_psb_shots` for the same seed."""
    rng = np.random.default_rng(seed)
    four = _psb_truth(rng, p_singlet, n, false_singlet, false_triplet)
    return _draw(four, noise, rng)


def model_threshold(noise: ReadoutNoise) -> float:
    """Crossing point of the equal-weight truth-conditional densities."""
    lo, hi = sorted([(noise.mu3, noise.sigma3), (noise.mu4, noise.sigma4)])
    if lo[1] == 0 or hi[1] == 0:
        return 0.5 * (lo[0] + hi[0])
    return crossing_point(0.5, lo[0], lo[1], 0.5, hi[0], hi[1])


# -- histogram and threshold ------------------------------------------------------


def _binned_mix(edges):
    """Expected bin counts of a two-Gaussian mixture (exact bin integrals)."""

    def model(_, n1, mu1, s1, n2, mu2, s2):
        c1 = ndtr((edges - mu1) / abs(s1))
        c2 = ndtr((edges - mu2) / abs(s2))
        return n1 * np.diff(c1) + n2 * np.diff(c2)

    return model


def _fd_width(x_sorted: np.ndarray) -> float:
    q25, q75 = np.percentile(x_sorted, [25, 75])
    return 2 * (q75 - q25) / len(x_sorted) ** (1 / 3)


def crossing_point(a1, mu1, s1, a2, mu2, s2) -> float:
    """Point between ``mu1 < mu2`` where ``a1 N(x; mu1, s1) = a2 N(x; mu2, s2)``."""
    if not mu1 < mu2:
        raise ReadoutError("component means must be ordered")
    # log a1 - log s1 - (x-mu1)^2/2s1^2 = log a2 - log s2 - (x-mu2)^2/2s2^2
    qa = 1 / (2 * s2**2) - 1 / (2 * s1**2)
    qb = mu1 / s1**2 - mu2 / s2**2
    qc = mu2**2 / (2 * s2**2) - mu1**2 / (2 * s1**2) + math.log((a1 * s2) / (a2 * s1))
    if abs(qa) < 1e-14 * (1 / s1**2 + 1 / s2**2):
        roots = [-qc / qb]
    else:
        disc = qb * qb - 4 * qa * qc
        if disc < 0:
            raise ReadoutError("fitted components do not cross")
        sq = math.sqrt(disc)
        # numerically stable pair of roots
        q = -0.5 * (qb + math.copysign(sq, qb))
        roots = [q / qa, qc / q] if q != 0 else [-qb / (2 * qa)]
    inside = [r for r in roots if mu1 < r < mu2]
    if not inside:
        raise ReadoutError("crossing point lies outside the interval between the means")
    return float(min(inside, key=lambda r: abs(r - 0.5 * (mu1 + mu2))))


@dataclass
class GaussComponent:
    amplitude: float  # area weight (fraction of shots)
    mean: float
    sigma: float


@dataclass
class SetHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    fitted: tuple[GaussComponent, GaussComponent]
    threshold: float

    def to_dict(self) -> dict:
        return {
            "bin_edges": [float(e) for e in self.bin_edges],
            "counts": [int(c) for c in self.counts],
            "components": [
                {"amplitude": c.amplitude, "mean": c.mean, "sigma": c.sigma} for c in self.fitted
            ],
            "threshold": self.threshold,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _two_means_split(x_sorted: np.ndarray) -> int:
    """Index ``k`` minimising within-cluster variance of ``x[:k]``, ``x[k:]``."""
    n = len(x_sorted)
    c1 = np.cumsum(x_sorted)
    c2 = np.cumsum(x_sorted**2)
    k = np.arange(1, n)
    left = c2[k - 1] - c1[k - 1] ** 2 / k
    right = (c2[-1] - c2[k - 1]) - (c1[-1] - c1[k - 1]) ** 2 / (n - k)
    return int(k[np.argmin(left + right)])


def fit_threshold(shots, min_shots: int = 1000, min_bins: int = 40) -> SetHistogram:
    """Histogram the currents, fit two Gaussians and return their crossing point."""
    if isinstance(shots, np.ndarray):
        x = np.asarray(shots, dtype=float)
    else:
        x = as_table(shots).i_set
    if len(x) < min_shots:
        raise ReadoutError(f"need at least {min_shots} shots, got {len(x)}")
    xs = np.sort(x)
    k = _two_means_split(xs)
    lo, hi = xs[:k], xs[k:]

    # Freedman-Diaconis width of each cluster: the pooled IQR is dominated by
    # the peak separation and would under-resolve both peaks
    widths = [w for w in (_fd_width(lo), _fd_width(hi), _fd_width(xs)) if w > 0]
    span = xs[-1] - xs[0]
    if span <= 0:
        raise ReadoutError("all currents identical; histogram is not bimodal")
    n_bins = max(min_bins, int(math.ceil(span / min(widths))) if widths else min_bins)
    n_bins = min(n_bins, 2000)
    counts, edges = np.histogram(x, bins=n_bins)
    centres = 0.5 * (edges[1:] + edges[:-1])
    bw = edges[1] - edges[0]

    smooth = gaussian_filter1d(counts.astype(float), max(1.5, 0.02 * n_bins), mode="constant")
    cut = 0.5 * (lo[-1] + hi[0])
    left_i = np.flatnonzero(centres < cut)
    right_i = np.flatnonzero(centres >= cut)
    if len(left_i) == 0 or len(right_i) == 0:
        raise ReadoutError("histogram is not bimodal")
    p1 = left_i[np.argmax(smooth[left_i])]
    p2 = right_i[np.argmax(smooth[right_i])]
    valley = smooth[p1 : p2 + 1].min()
    if p2 - p1 < 2 or valley >= 0.5 * min(smooth[p1], smooth[p2]):
        raise ReadoutError("histogram is not bimodal")

    p0 = [len(lo), lo.mean(), max(lo.std(), bw / 2), len(hi), hi.mean(), max(hi.std(), bw / 2)]
    sigma = np.sqrt(np.maximum(counts, 1.0))
    try:
        popt, _ = curve_fit(_binned_mix(edges), centres, counts, p0=p0, sigma=sigma,
                            maxfev=20000)
    except RuntimeError as exc:
        raise ReadoutError(f"two-Gaussian fit failed: {exc}") from exc
    n1, m1, s1, n2, m2, s2 = popt
    comps = sorted(
        [GaussComponent(n1 / len(x), m1, abs(s1)), GaussComponent(n2 / len(x), m2, abs(s2))],
        key=lambda c: c.mean,
    )
    c1, c2 = comps
    if c1.amplitude <= 0 or c2.amplitude <= 0:
        raise ReadoutError("fit returned a non-positive component")
    thr = crossing_point(c1.amplitude, c1.mean, c1.sigma, c2.amplitude, c2.mean, c2.sigma)
    return SetHistogram(edges, counts, (c1, c2), thr)


# -- classification and counting ---------------------------------------------------


def _threshold_of(threshold) -> float:
    return float(threshold.threshold if isinstance(threshold, SetHistogram) else threshold)


def classify(currents, threshold, four_is_upper: bool) -> np.ndarray:
    """True where the current is on the four-electron side of ``threshold``."""
    x = np.asarray(currents, dtype=float)
    thr = _threshold_of(threshold)
    return x > thr if four_is_upper else x <= thr


def wilson_interval(successes: int, n: int, z: float = 1.0) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("need at least one trial")
    p = successes / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z / den * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class FidelityResult:
    fidelity: float
    wilson_interval: tuple[float, float]
    n_cycles: int
    successes: int

    def to_dict(self) -> dict:
        return {
            "fidelity": self.fidelity,
            "wilson_lo": self.wilson_interval[0],
            "wilson_hi": self.wilson_interval[1],
            "n_cycles": self.n_cycles,
            "successes": self.successes,
        }


def charge_fidelity(shots, threshold, four_is_upper: bool) -> FidelityResult:
    """Fraction of cycles read as three electrons after the forward leg and
    four after the return leg."""
    t = as_table(shots)
    fwd = t.stage == "M_after_forward"
    ret = t.stage == "M_after_return"
    cf, cr = t.cycle[fwd], t.cycle[ret]
    if len(np.unique(cf)) != len(cf) or len(np.unique(cr)) != len(cr):
        raise ReadoutError("duplicate measurement in a cycle")
    if not np.array_equal(np.sort(cf), np.sort(cr)) or np.count_nonzero(~(fwd | ret)):
        raise ReadoutError("every cycle needs exactly one forward and one return measurement")
    if len(cf) == 0:
        raise ReadoutError("no cycles")
    of, orr = np.argsort(cf), np.argsort(cr)
    four_f = classify(t.i_set[fwd][of], threshold, four_is_upper)
    four_r = classify(t.i_set[ret][orr], threshold, four_is_upper)
    ok = int(np.count_nonzero(~four_f & four_r))
    n = len(cf)
    return FidelityResult(ok / n, wilson_interval(ok, n, 1.0), n, ok)


def singlet_fraction(shots, threshold, four_is_upper: bool) -> tuple[float, float]:
    """Singlet probability (shots read as (4,0)) and its binomial standard error."""
    x = shots if isinstance(shots, np.ndarray) else as_table(shots).i_set
    n = len(x)
    if n == 0:
        raise ReadoutError("no shots to classify")
    p = float(np.count_nonzero(classify(x, threshold, four_is_upper))) / n
    return p, math.sqrt(p * (1 - p) / n)
