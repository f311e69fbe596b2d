"""I/Q-plane utilities: digital demodulation, boxcar downsampling and rotation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import optimize, special

F_IF_MHZ = 70.3125
SAMPLE_RATE_MSPS = 250.0


@dataclass
class IQTrace:
    dt: float
    samples: np.ndarray  # shape (n, 2): columns I, Q

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2:
            raise ValueError("IQ samples must have shape (n, 2)")
        if self.samples.shape[0] == 0:
            raise ValueError("IQ trace is empty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("IQ samples must be finite")

    @property
    def I(self):
        return self.samples[:, 0]

    @property
    def Q(self):
        return self.samples[:, 1]


def _filter_length(f_if, sample_rate, max_len=256):
    """Boxcar length (samples) spanning whole periods of the ``2 f_IF`` mixing product.

    Falls back to the nearest whole number of samples in one IF period when
    no short exact length exists.
    """
    ratio = Fraction(2 * f_if / sample_rate).limit_denominator(max_len)
    if abs(float(ratio) - 2 * f_if / sample_rate) < 1e-12 and ratio.denominator > 1:
        return ratio.denominator
    return max(1, int(round(sample_rate / f_if)))


def digital_demodulate(if_trace, f_IF: float = F_IF_MHZ, sample_rate: float = SAMPLE_RATE_MSPS,
                       t_start: float = 0.0) -> IQTrace:
    """Mix a real IF record down to baseband and low-pass it with a boxcar.

    A tone ``A cos(2 pi f_IF t - phi)`` comes out as ``I = A/2 cos(phi)``,
    ``Q = A/2 sin(phi)``. The boxcar spans
    an integer number of samples over which the ``2 f_IF`` term sums to zero;
    only fully covered output samples are returned.
    """
    x = np.asarray(if_trace, dtype=float)
    if not sample_rate > 2 * f_IF:
        raise ValueError(f"sample rate {sample_rate} MS/s does not resolve f_IF = {f_IF} MHz")
    t = t_start + np.arange(x.size) / sample_rate
    phase = 2 * np.pi * f_IF * t
    mixed_i = x * np.cos(phase)
    mixed_q = x * np.sin(phase)
    n = _filter_length(f_IF, sample_rate)
    if x.size < n:
        raise ValueError("record shorter than the low-pass filter")
    kernel = np.full(n, 1.0 / n)
    i = np.convolve(mixed_i, kernel, mode="valid")
    q = np.convolve(mixed_q, kernel, mode="valid")
    return IQTrace(1.0 / sample_rate, np.column_stack([i, q]))


def synthesize_if(amplitude: float, phase: float, n: int, f_IF: float = F_IF_MHZ,
                  sample_rate: float = SAMPLE_RATE_MSPS) -> np.ndarray:
    """``amplitude * cos(2 pi f_IF t - phase)`` sampled at ``sample_rate``."""
    t = np.arange(n) / sample_rate
    return amplitude * np.cos(2 * np.pi * f_IF * t - phase)


def boxcar_downsample(trace: IQTrace, n: int) -> IQTrace:
    """Average disjoint blocks of ``n`` samples; a trailing partial block is dropped."""
    if n < 1:
        raise ValueError("block length must be >= 1")
    m = trace.samples.shape[0] // n
    if m == 0:
        raise ValueError("trace shorter than one block")
    blocks = trace.samples[: m * n].reshape(m, n, 2).mean(axis=1)
    return IQTrace(trace.dt * n, blocks)


def _rot(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate(data, angle: float):
    """Rotate I/Q points counter-clockwise by ``angle`` radians.

    Accepts an :class:`IQTrace` or an array whose last axis is (I, Q).
    """
    if isinstance(data, IQTrace):
        return IQTrace(data.dt, rotate(data.samples, angle))
    pts = np.asarray(data, dtype=float)
    if pts.shape[-1] != 2:
        raise ValueError("last axis must hold (I, Q)")
    return pts @ _rot(angle).T


@dataclass(frozen=True)
class RotationResult:
    angle: float
    fidelity: float
    degenerate: bool = False


def _projected_gaussian_fidelity(pts_g, pts_e, angle):
    c, s = math.cos(angle), math.sin(angle)
    ig = pts_g[:, 0] * c - pts_g[:, 1] * s
    ie = pts_e[:, 0] * c - pts_e[:, 1] * s
    spread = ig.std() + ie.std()
    if spread == 0:
        return math.copysign(1.0, ie.mean() - ig.mean()) if ie.mean() != ig.mean() else 0.0
    return float(special.erf((ie.mean() - ig.mean()) / (math.sqrt(2) * spread)))


def fit_common_rotation(shots_g, shots_e, tol: float = 1e-4, n_grid: int = 72) -> RotationResult:
    """Angle that puts the excited cluster to the right of the ground cluster on the I axis.

    The objective is the Gaussian-approximated threshold fidelity of the
    I projections, ``erf(dI / (sqrt(2) (s_g + s_e)))``, which is smooth in the
    angle unlike the empirical optimum. A coarse grid locates the basin and
    golden-section search refines it to ``tol``. The reported ``fidelity`` is
    the empirical optimal-threshold fidelity at the returned angle.
    """
    from .fidelity import optimal_threshold

    g = np.asarray(shots_g, dtype=float).reshape(-1, 2)
    e = np.asarray(shots_e, dtype=float).reshape(-1, 2)
    if g.shape[0] == 0 or e.shape[0] == 0:
        raise ValueError("both point sets must be non-empty")
    diff = e.mean(axis=0) - g.mean(axis=0)
    if np.allclose(diff, 0, atol=1e-12 * (1 + np.abs(g).max())):
        warnings.warn("clusters have identical means; rotation undefined", RuntimeWarning)
        res = optimal_threshold(g[:, 0], e[:, 0])
        return RotationResult(0.0, res.F, True)

    grid = -np.pi + 2 * np.pi * np.arange(n_grid) / n_grid
    vals = np.array([_projected_gaussian_fidelity(g, e, a) for a in grid])
    k = int(np.argmax(vals))
    step = 2 * np.pi / n_grid
    objective = lambda a: -_projected_gaussian_fidelity(g, e, a)  # noqa: E731
    try:
        sol = optimize.minimize_scalar(objective, bracket=(grid[k] - step, grid[k], grid[k] + step),
                                       method="golden", tol=tol)
    except ValueError:
        # flat top on the grid; no strict bracket
        sol = optimize.minimize_scalar(objective, bounds=(grid[k] - step, grid[k] + step),
                                       method="bounded", options={"xatol": tol})
    angle = float((sol.x + np.pi) % (2 * np.pi) - np.pi)
    rg = rotate(g, angle)
    re = rotate(e, angle)
    return RotationResult(angle, optimal_threshold(rg[:, 0], re[:, 0]).F, False)
