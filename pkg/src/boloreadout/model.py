"""Noiseless bolometer response and its boxcar window means.

Units throughout the package: time in µs, voltage in mV, noise power
spectral density in mV²·µs. The readout pulse starts at ``t = 0`` and the
signal is baseline subtracted, so the pre-pulse level is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BolometerResponse:
    """Steady-state levels for the two qubit states and the thermal time constant."""

    c_g: float
    c_e: float
    tau_b: float

    def __post_init__(self):
        if not (math.isfinite(self.c_g) and math.isfinite(self.c_e)):
            raise ValueError("c_g and c_e must be finite")
        if not self.tau_b > 0:
            raise ValueError(f"tau_b must be positive, got {self.tau_b}")


@dataclass(frozen=True)
class QubitDecayModel:
    """Energy relaxation time ``T1`` and the probability ``P_x`` that a nominally
    excited qubit actually starts in the ground state."""

    T1: float
    P_x: float = 0.0

    def __post_init__(self):
        if not self.T1 > 0:
            raise ValueError(f"T1 must be positive, got {self.T1}")
        if not 0.0 <= self.P_x <= 1.0:
            raise ValueError(f"P_x must lie in [0, 1], got {self.P_x}")


@dataclass(frozen=True)
class AveragingWindow:
    """Boxcar window ``[t0, t_RO]`` after pulse onset.

    ``t_base`` is the length of the per-shot baseline interval preceding the
    pulse; 0 selects common-baseline mode.
    """

    t_RO: float
    t0: float = 0.0
    t_base: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.t0 < self.t_RO:
            raise ValueError(f"need 0 <= t0 < t_RO, got t0={self.t0}, t_RO={self.t_RO}")
        if self.t_base < 0:
            raise ValueError(f"t_base must be >= 0, got {self.t_base}")

    @property
    def length(self) -> float:
        return self.t_RO - self.t0

    @classmethod
    def from_averaging_time(cls, t_RO: float, averaging_time: float, t_base: float = 0.0):
        return cls(t_RO=t_RO, t0=t_RO - averaging_time, t_base=t_base)


@dataclass(frozen=True)
class NoiseModel:
    P_N: float

    def __post_init__(self):
        if not self.P_N >= 0:
            raise ValueError(f"P_N must be >= 0, got {self.P_N}")

    @classmethod
    def from_window_sigma(cls, sigma: float, window_length: float) -> "NoiseModel":
        """Noise level that gives std ``sigma`` for a boxcar of ``window_length``."""
        return cls(P_N=sigma**2 * window_length)


@dataclass(frozen=True)
class ExperimentMetadata:
    """Provenance labels. Never used in any computation."""

    f_d_GHz: float | None = None
    P_d_dBm: float | None = None
    f_p_MHz: float | None = None
    P_p_dBm: float | None = None
    annotations: dict = field(default_factory=dict)


def _check_nonneg(name, x):
    if np.any(np.asarray(x) < 0):
        raise ValueError(f"{name} must be non-negative")


def _rise_integral(a, b, tau):
    """Integral of ``1 - exp(-t/tau)`` over ``[a, b]``."""
    # exp(-a/tau) - exp(-b/tau) written with expm1 to stay accurate for b close to a
    return (b - a) + tau * np.exp(-a / tau) * np.expm1(-(b - a) / tau)


def noiseless_response_ground(t, resp: BolometerResponse):
    """Exponential rise ``c_g (1 - exp(-t / tau_b))``. Accepts scalars or arrays."""
    _check_nonneg("t", t)
    t = np.asarray(t, dtype=float)
    out = -resp.c_g * np.expm1(-t / resp.tau_b)
    return out if out.ndim else float(out)


def noiseless_response_excited(t, t_d, resp: BolometerResponse):
    """Response with the qubit decaying to the ground state at ``t_d``.

    Before ``t_d`` the output rises toward ``c_e``; from ``t_d`` on it relaxes
    from the level reached, ``c_e' = c_e (1 - exp(-t_d / tau_b))``, toward ``c_g``.
    ``t_d = inf`` means no decay. ``t`` and ``t_d`` broadcast against each other.
    """
    _check_nonneg("t", t)
    _check_nonneg("t_d", t_d)
    t, t_d = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(t_d, dtype=float))
    tau = resp.tau_b
    before = -resp.c_e * np.expm1(-t / tau)
    with np.errstate(invalid="ignore", over="ignore"):
        c_e_reached = -resp.c_e * np.expm1(-t_d / tau)
        after = (resp.c_g - c_e_reached) * -np.expm1(-(t - t_d) / tau) + c_e_reached
    out = np.where(t < t_d, before, after)
    return out if out.ndim else float(out)


def window_mean_ground(win: AveragingWindow, resp: BolometerResponse) -> float:
    """Boxcar mean of the ground-state response over ``[t0, t_RO]``."""
    return float(resp.c_g * _rise_integral(win.t0, win.t_RO, resp.tau_b) / win.length)


def window_mean_excited(win: AveragingWindow, resp: BolometerResponse, t_d):
    """Boxcar mean of the excited-state response for decay time(s) ``t_d``.

    Vectorised over ``t_d``. Decays at or after ``t_RO`` give the no-decay value.
    """
    _check_nonneg("t_d", t_d)
    t_d = np.minimum(np.asarray(t_d, dtype=float), win.t_RO)
    tau, t0, t1 = resp.tau_b, win.t0, win.t_RO

    # undecayed part: [t0, max(t0, t_d)]
    split = np.maximum(t_d, t0)
    total = resp.c_e * _rise_integral(t0, split, tau)

    # decayed part: [split, t_RO] relaxing from c_e' toward c_g, clock restarted at t_d
    c_e_reached = -resp.c_e * np.expm1(-t_d / tau)
    total = total + c_e_reached * (t1 - split)
    total = total + (resp.c_g - c_e_reached) * _rise_integral(split - t_d, t1 - t_d, tau)
    out = total / win.length
    return out if out.ndim else float(out)


def window_mean_no_decay(win: AveragingWindow, resp: BolometerResponse) -> float:
    return float(resp.c_e * _rise_integral(win.t0, win.t_RO, resp.tau_b) / win.length)


def window_sigma(win: AveragingWindow, noise: NoiseModel) -> float:
    """Standard deviation of a boxcar mean of white noise: ``sqrt(P_N / (t_RO - t0))``."""
    return math.sqrt(noise.P_N / win.length)
