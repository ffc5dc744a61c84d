"""Quasistatic disorder along the one-dimensional electron channel.

Two independent stationary Gaussian random fields are sampled on a uniform
grid: the g-factor difference ``dg(x)`` between the moving and the static
spin, and the Overhauser energy difference ``hf(x)`` in neV. Sampling uses
circulant embedding of the target covariance, which reproduces the covariance
exactly on the grid at FFT cost.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

KERNELS = ("exponential", "gaussian", "rational")


def correlation(kernel: str, r: np.ndarray | float) -> np.ndarray:
    """Normalised correlation ``k(r)`` at reduced lag ``r = |x - x'| / l_c``.

    ``rational`` is ``(1 + r)**-3``. It is convex and decreasing, so it is a
    valid covariance, and its windowed mean has variance exactly
    ``l_c / (d + l_c)``.
    """
    r = np.abs(np.asarray(r, dtype=float))
    if kernel == "exponential":
        return np.exp(-r)
    if kernel == "gaussian":
        return np.exp(-0.5 * r * r)
    if kernel == "rational":
        return (1.0 + r) ** -3
    raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


@dataclass(frozen=True)
class DisorderSpec:
    """Statistics of the Zeeman landscape. Lengths in nm, energies in neV."""

    grid_step: float = 1.0
    channel_length: float = 400.0
    sigma_dg: float = 0.0
    mean_dg: float = 6.51e-4
    sigma_hf: float = 0.0
    mean_hf: float = 0.0
    correlation_length: float = 13.0
    kernel: str = "exponential"
    seed: int = 0
    # separate correlation length for the Overhauser field; None shares l_c
    correlation_length_hf: float | None = None

    def __post_init__(self):
        if not self.grid_step > 0:
            raise ValueError(f"grid_step must be positive, got {self.grid_step}")
        if not self.correlation_length > 0:
            raise ValueError(
                f"correlation_length must be positive, got {self.correlation_length}"
            )
        if self.correlation_length_hf is not None and not self.correlation_length_hf > 0:
            raise ValueError("correlation_length_hf must be positive")
        if self.channel_length < self.grid_step:
            raise ValueError("channel_length must be at least one grid_step")
        if self.sigma_dg < 0 or self.sigma_hf < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    @property
    def n_points(self) -> int:
        return int(math.ceil(self.channel_length / self.grid_step - 1e-9)) + 1

    @property
    def lc_hf(self) -> float:
        if self.correlation_length_hf is None:
            return self.correlation_length
        return self.correlation_length_hf

    def positions(self) -> np.ndarray:
        return np.arange(self.n_points) * self.grid_step

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DisorderSpec":
        return cls(**data)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ZeemanLandscape:
    positions: np.ndarray
    dg_values: np.ndarray
    hf_values: np.ndarray
    spec: DisorderSpec = field(default_factory=DisorderSpec)

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(self.positions))
        object.__setattr__(self, "dg_values", _readonly(self.dg_values))
        object.__setattr__(self, "hf_values", _readonly(self.hf_values))
        n = len(self.positions)
        if len(self.dg_values) != n or len(self.hf_values) != n:
            raise ValueError("positions, dg_values and hf_values must have equal length")
        if n > 1:
            steps = np.diff(self.positions)
            if np.any(steps <= 0):
                raise ValueError("positions must be strictly increasing")
            if not np.allclose(steps, self.spec.grid_step, rtol=1e-9, atol=0):
                raise ValueError("positions must be uniformly spaced by spec.grid_step")

    @property
    def length(self) -> float:
        return float(self.positions[-1])


class CirculantSampler:
    """Unit-variance stationary Gaussian fields on ``n`` grid points."""

    def __init__(self, n: int, step: float, correlation_length: float, kernel: str):
        self.n = n
        m = 2
        while m < 2 * (n - 1):
            m *= 2
        for _ in range(4):
            lags = np.minimum(np.arange(m), m - np.arange(m)) * step
            eig = np.fft.rfft(correlation(kernel, lags / correlation_length)).real
            if eig.min() >= -1e-10 * eig.max():
                break
            m *= 2
        else:
            warnings.warn(
                f"circulant embedding of the {kernel} kernel is not non-negative "
                f"definite (min eigenvalue {eig.min():.3g}); clipping",
                RuntimeWarning,
                stacklevel=2,
            )
        self.m = m
        # symmetric real embedding: the rfft of a real white vector scaled by
        # sqrt(eig / m) and inverted gives exact covariance on the first n nodes
        w = np.clip(eig, 0.0, None) / m
        w[1 : (m + 1) // 2] /= 2.0
        self._amp = np.sqrt(w)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Return an array of shape ``(size, n)``."""
        half = self.m // 2 + 1
        re = rng.standard_normal((size, half))
        im = rng.standard_normal((size, half))
        im[:, 0] = 0.0
        if self.m % 2 == 0:
            im[:, -1] = 0.0
        coeffs = self._amp * (re + 1j * im)
        y = np.fft.irfft(coeffs, n=self.m, axis=-1) * self.m
        return y[:, : self.n]


@lru_cache(maxsize=32)
def _sampler(n: int, step: float, lc: float, kernel: str) -> CirculantSampler:
    return CirculantSampler(n, step, lc, kernel)


def field_block(spec, rng_dg, rng_hf, size):
    n = spec.n_points
    if spec.sigma_dg > 0:
        s = _sampler(n, spec.grid_step, spec.correlation_length, spec.kernel)
        dg = spec.mean_dg + spec.sigma_dg * s.sample(rng_dg, size)
    else:
        dg = np.full((size, n), float(spec.mean_dg))
    if spec.sigma_hf > 0:
        s = _sampler(n, spec.grid_step, spec.lc_hf, spec.kernel)
        hf = spec.mean_hf + spec.sigma_hf * s.sample(rng_hf, size)
    else:
        hf = np.full((size, n), float(spec.mean_hf))
    return dg, hf


def generate_landscape(spec: DisorderSpec) -> ZeemanLandscape:
    """Draw one landscape; identical ``spec`` (including seed) gives identical arrays."""
    ss_dg, ss_hf = np.random.SeedSequence(int(spec.seed)).spawn(2)
    dg, hf = field_block(
        spec, np.random.default_rng(ss_dg), np.random.default_rng(ss_hf), 1
    )
    return ZeemanLandscape(spec.positions(), dg[0], hf[0], spec)


ENSEMBLE_CHUNK = 256


@dataclass(frozen=True)
class LandscapeEnsemble:
    """Many independent landscapes on the same grid, one per row."""

    positions: np.ndarray
    dg: np.ndarray
    hf: np.ndarray
    spec: DisorderSpec

    def __len__(self) -> int:
        return self.dg.shape[0]

    def __getitem__(self, i: int) -> ZeemanLandscape:
        return ZeemanLandscape(self.positions, self.dg[i], self.hf[i], self.spec)


def chunk_rngs(seed: int, chunk_index: int) -> list[np.random.Generator]:
    """Three generators (dg field, hf field, extras) owned by one ensemble chunk.

    Chunk ``k`` always draws from the same child seed, so an ensemble split
    over workers is identical to one produced serially.
    """
    master = np.random.SeedSequence(int(seed))
    child = np.random.SeedSequence(
        entropy=master.entropy, spawn_key=(chunk_index,), pool_size=master.pool_size
    )
    return [np.random.default_rng(s) for s in child.spawn(3)]


def ensemble_chunk(spec: DisorderSpec, chunk_index: int, size: int, seed: int | None = None):
    """Fields ``(dg, hf)`` of one fixed chunk of an ensemble."""
    rng_dg, rng_hf, _ = chunk_rngs(spec.seed if seed is None else seed, chunk_index)
    return field_block(spec, rng_dg, rng_hf, size)


def chunk_sizes(n: int, chunk: int = ENSEMBLE_CHUNK) -> list[int]:
    sizes = [chunk] * (n // chunk)
    if n % chunk:
        sizes.append(n % chunk)
    return sizes


def generate_ensemble(spec: DisorderSpec, n: int, seed: int | None = None) -> LandscapeEnsemble:
    blocks = [ensemble_chunk(spec, k, size, seed) for k, size in enumerate(chunk_sizes(n))]
    dg = np.concatenate([b[0] for b in blocks]) if blocks else np.empty((0, spec.n_points))
    hf = np.concatenate([b[1] for b in blocks]) if blocks else np.empty((0, spec.n_points))
    return LandscapeEnsemble(spec.positions(), dg, hf, spec)


def _check_range(landscape: ZeemanLandscape, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    hi = landscape.length
    if np.any(x < 0) or np.any(x > hi * (1 + 1e-12)) or np.any(np.isnan(x)):
        raise ValueError(f"position outside the channel [0, {hi}] nm")
    return np.clip(x, 0.0, hi)


def field_at(landscape: ZeemanLandscape, x: float) -> tuple[float, float]:
    """Linearly interpolated ``(dg, hf)`` at position ``x`` in nm."""
    x = _check_range(landscape, x)
    return (
        float(np.interp(x, landscape.positions, landscape.dg_values)),
        float(np.interp(x, landscape.positions, landscape.hf_values)),
    )


def cumulative_integral(values: np.ndarray, step: float) -> np.ndarray:
    """Running trapezoid integral along the last axis, zero at the first node."""
    values = np.asarray(values, dtype=float)
    seg = 0.5 * step * (values[..., 1:] + values[..., :-1])
    out = np.zeros(values.shape)
    np.cumsum(seg, axis=-1, out=out[..., 1:])
    return out


def integral_to(values: np.ndarray, cum: np.ndarray, step: float, x) -> np.ndarray:
    """Exact integral of the piecewise-linear interpolant from 0 to ``x``.

    ``values``/``cum`` may carry leading ensemble axes; ``x`` broadcasts over
    the trailing result axis.
    """
    x = np.asarray(x, dtype=float)
    n = values.shape[-1]
    i = np.clip(np.floor(x / step).astype(int), 0, max(n - 2, 0))
    t = x - i * step
    if n == 1:
        return values[..., :1] * 0.0 + np.zeros_like(x)
    v0 = values[..., i]
    v1 = values[..., i + 1]
    return cum[..., i] + v0 * t + (v1 - v0) * t * t / (2.0 * step)


def window_average(landscape: ZeemanLandscape, x0: float, d: float) -> tuple[float, float]:
    """Mean of each field over ``[x0, x0 + d]``; ``d = 0`` gives the point value."""
    if d < 0:
        raise ValueError("window length must be non-negative")
    _check_range(landscape, [x0, x0 + d])
    if d == 0:
        return field_at(landscape, x0)
    step = landscape.spec.grid_step
    out = []
    for v in (landscape.dg_values, landscape.hf_values):
        cum = cumulative_integral(v, step)
        lo, hi = integral_to(v, cum, step, np.array([x0, x0 + d]))
        out.append(float((hi - lo) / d))
    return out[0], out[1]


def windowed_mean_variance(kernel: str, correlation_length: float, d) -> np.ndarray:
    """Continuum variance (relative to sigma**2) of the mean over a window of length ``d``."""
    d = np.atleast_1d(np.asarray(d, dtype=float))
    u = d / correlation_length
    out = np.ones_like(u)
    nz = u > 0
    u = u[nz]
    if kernel == "exponential":
        out[nz] = 2.0 * (u - 1.0 + np.exp(-u)) / u**2
    elif kernel == "rational":
        out[nz] = 1.0 / (1.0 + u)
    elif kernel == "gaussian":
        s = math.sqrt(2.0)
        from scipy.special import erf

        out[nz] = 2.0 * (
            u * math.sqrt(math.pi / 2) * erf(u / s) + np.exp(-0.5 * u * u) - 1.0
        ) / u**2
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    return out


def save_csv(landscape: ZeemanLandscape, path: str | Path) -> None:
    """Write ``x_nm,dg,hf_neV`` rows and a ``.json`` sidecar holding the spec."""
    path = Path(path)
    data = np.column_stack([landscape.positions, landscape.dg_values, landscape.hf_values])
    np.savetxt(path, data, delimiter=",", header="x_nm,dg,hf_neV", comments="", fmt="%.17g")
    path.with_suffix(".json").write_text(json.dumps(landscape.spec.to_dict(), indent=2) + "\n")


def load_csv(path: str | Path) -> ZeemanLandscape:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
    if header != "x_nm,dg,hf_neV":
        raise ValueError(f"{path}: expected header 'x_nm,dg,hf_neV', got {header!r}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    spec = DisorderSpec.from_dict(json.loads(path.with_suffix(".json").read_text()))
    return ZeemanLandscape(data[:, 0], data[:, 1], data[:, 2], spec)
