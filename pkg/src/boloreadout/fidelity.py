"""Readout fidelity: empirical and model-based, threshold search, landscapes and SNR budget.

Fidelity is ``F = 1 - P(g|e) - P(e|g)`` with the outcome "excited" assigned
to signals strictly above the threshold.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, optimize, special

from .dist import DecayDistParams, cdf_excited_total

QUOTED_T1_REMOVED_FIDELITY = 0.927


@dataclass(frozen=True)
class ThresholdResult:
    V_th: float
    F: float
    P_g_given_e: float
    P_e_given_g: float
    inverted: bool = False

    def as_dict(self) -> dict:
        return {"V_th": self.V_th, "F": self.F, "P_g_given_e": self.P_g_given_e,
                "P_e_given_g": self.P_e_given_g, "inverted": self.inverted}


def empirical_fidelity(shots_g, shots_e, V_th: float) -> ThresholdResult:
    g = np.asarray(shots_g, dtype=float).ravel()
    e = np.asarray(shots_e, dtype=float).ravel()
    if g.size == 0 or e.size == 0:
        raise ValueError("both shot sets must be non-empty")
    p_eg = float(np.count_nonzero(g > V_th)) / g.size
    p_ge = float(np.count_nonzero(e <= V_th)) / e.size
    return ThresholdResult(float(V_th), 1.0 - p_ge - p_eg, p_ge, p_eg)


def optimal_threshold(shots_g, shots_e) -> ThresholdResult:
    """Exact threshold optimum over midpoints of the merged sorted samples.

    Ties go to the smallest threshold. If the clusters are in reversed order
    (the inverted assignment has larger ``|F|``), the threshold maximising
    ``|F|`` is returned with ``inverted=True``; ``F`` keeps its standard
    definition and is therefore negative.
    """
    g = np.asarray(shots_g, dtype=float).ravel()
    e = np.asarray(shots_e, dtype=float).ravel()
    ng, ne = g.size, e.size
    if ng == 0 or ne == 0:
        raise ValueError("both shot sets must be non-empty")
    vals = np.concatenate([g, e])
    is_g = np.concatenate([np.ones(ng, bool), np.zeros(ne, bool)])
    order = np.argsort(vals, kind="stable")
    sv = vals[order]
    below_g = np.cumsum(is_g[order])
    below_e = np.arange(1, sv.size + 1) - below_g
    cut = np.nonzero(sv[:-1] < sv[1:])[0]
    if cut.size == 0:
        return empirical_fidelity(g, e, float(sv[0]))
    # integer numerator of F * ng * ne, so ties are exact
    num = below_g[cut].astype(np.int64) * ne - below_e[cut].astype(np.int64) * ng
    i_pos = int(np.argmax(num))
    i_neg = int(np.argmin(num))
    inverted = -num[i_neg] > num[i_pos]
    i = i_neg if inverted else i_pos
    k = cut[i]
    V_th = 0.5 * (sv[k] + sv[k + 1])
    p_ge = below_e[k] / ne
    p_eg = 1.0 - below_g[k] / ng
    return ThresholdResult(float(V_th), float(1.0 - p_ge - p_eg), float(p_ge), float(p_eg),
                           bool(inverted))


def model_fidelity(p: DecayDistParams, V_th: float, tol: float = 1e-7) -> ThresholdResult:
    """Fidelity of the decay model at threshold ``V_th``.

    The excited-state error is the model CDF below threshold (quadrature
    over decay times); the ground-state error is the Gaussian upper tail.
    """
    if math.isinf(V_th):
        p_ge = 0.0 if V_th < 0 else 1.0
        p_eg = 1.0 if V_th < 0 else 0.0
    else:
        p_ge = float(cdf_excited_total(V_th, p, tol=tol))
        p_eg = float(special.ndtr(-(V_th - p.mean_ground) / p.sigma))
    return ThresholdResult(float(V_th), 1.0 - p_ge - p_eg, p_ge, p_eg)


def optimal_model_threshold(p: DecayDistParams, xatol: float = 1e-6) -> ThresholdResult:
    """Threshold between the ground and undecayed-excited means that maximises the model fidelity."""
    lo, hi = sorted((p.mean_ground, p.mean_no_decay))
    if hi - lo < 1e-12:
        return model_fidelity(p, lo)
    sol = optimize.minimize_scalar(lambda v: -model_fidelity(p, v).F, bounds=(lo, hi),
                                   method="bounded", options={"xatol": xatol})
    return model_fidelity(p, float(sol.x))


def gaussian_snr_fidelity(delta_U: float, sigma: float) -> float:
    """``erf(delta_U / (2 sqrt(2) sigma))``: two equal-width Gaussians, midpoint threshold."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return float(special.erf(delta_U / (2.0 * math.sqrt(2.0) * sigma)))


def t1_error(t_RO: float, T1: float) -> float:
    """Error ``1 - exp(-t_RO / (2 T1))`` from relaxation during the readout."""
    if t_RO < 0 or not T1 > 0:
        raise ValueError("need t_RO >= 0 and T1 > 0")
    return -math.expm1(-t_RO / (2.0 * T1))


def t1_removed_fidelity(p: DecayDistParams) -> dict:
    """Candidate values for the fidelity with relaxation errors taken out.

    Reports the erf overlap of the window means, the model optimum with no
    decay but ``P_x`` kept, and with neither. None of these is tuned to
    the quoted 0.927; ``discrepancy`` flags when none lies within 0.01.
    """
    no_decay = replace(p, T1=math.inf)
    erf_value = gaussian_snr_fidelity(p.mean_no_decay - p.mean_ground, p.sigma)
    keep_px = optimal_model_threshold(no_decay).F
    no_px = optimal_model_threshold(replace(no_decay, P_x=0.0)).F
    candidates = {"erf_window_means": erf_value, "model_no_decay_keep_Px": keep_px,
                  "model_no_decay_no_Px": no_px}
    close = any(abs(v - QUOTED_T1_REMOVED_FIDELITY) < 0.01 for v in candidates.values())
    return {**candidates, "quoted": QUOTED_T1_REMOVED_FIDELITY, "discrepancy": not close}


# ---------------------------------------------------------------------------
# post-processing landscape


@dataclass
class LandscapeGrid:
    t_ro_axis: np.ndarray
    avg_axis: np.ndarray
    fidelity: np.ndarray  # shape (len(t_ro_axis), len(avg_axis)); NaN marks infeasible cells
    thresholds: np.ndarray
    level: float = 0.6
    contours: list = field(default_factory=list)

    @property
    def feasible(self) -> np.ndarray:
        return np.isfinite(self.fidelity)

    @property
    def argmax(self) -> tuple:
        if not self.feasible.any():
            raise ValueError("no feasible cells")
        return np.unravel_index(np.nanargmax(self.fidelity), self.fidelity.shape)

    @property
    def maximum(self) -> dict:
        i, j = self.argmax
        return {"t_RO": float(self.t_ro_axis[i]), "averaging_time": float(self.avg_axis[j]),
                "F": float(self.fidelity[i, j]), "V_th": float(self.thresholds[i, j])}

    def region_with_max(self) -> np.ndarray:
        """Connected set of cells above ``level`` that contains the maximum (4-connectivity)."""
        above = np.nan_to_num(self.fidelity, nan=-np.inf) > self.level
        labels, _ = ndimage.label(above)
        i, j = self.argmax
        if labels[i, j] == 0:
            return np.zeros_like(above)
        return labels == labels[i, j]

    def as_dict(self) -> dict:
        def clean(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        return {
            "t_ro_axis": self.t_ro_axis.tolist(),
            "avg_axis": self.avg_axis.tolist(),
            "fidelity": clean(self.fidelity),
            "maximum": self.maximum if self.feasible.any() else None,
            "level": self.level,
            "contours": [c.tolist() for c in self.contours],
            "infeasible_cells": int((~self.feasible).sum()),
        }


def _stack(traces, dt, onset):
    if isinstance(traces, np.ndarray):
        if dt is None:
            raise ValueError("dt is required when traces are given as an array")
        return np.atleast_2d(traces), float(dt), int(onset)
    traces = list(traces)
    if not traces:
        raise ValueError("no traces")
    dts = {t.dt for t in traces}
    onsets = {t.onset_index for t in traces}
    if len(dts) != 1 or len(onsets) != 1:
        raise ValueError("traces must share dt and pulse onset")
    return np.stack([t.samples for t in traces]), dts.pop(), onsets.pop()


def contour_polylines(t_ro_axis, avg_axis, fidelity, level):
    """Marching-squares contour of ``fidelity == level`` in axis units, one array of (t_RO, avg) per line."""
    from skimage import measure

    f = np.nan_to_num(np.asarray(fidelity, dtype=float), nan=-1.0)
    if f.shape[0] < 2 or f.shape[1] < 2:
        return []
    lines = []
    ri = np.arange(len(t_ro_axis))
    ci = np.arange(len(avg_axis))
    for c in measure.find_contours(f, level):
        lines.append(np.column_stack([np.interp(c[:, 0], ri, t_ro_axis),
                                      np.interp(c[:, 1], ci, avg_axis)]))
    return lines


def fidelity_landscape(traces_g, traces_e, t_ro_axis, avg_axis, common_baseline: float = 0.0,
                       dt: float | None = None, onset: int = 0, level: float = 0.6,
                       workers: int = 1) -> LandscapeGrid:
    """Optimal-threshold fidelity for every (pulse length, averaging time) cell.

    For each cell the signal of every trace is re-extracted with window
    ``[t_RO - averaging_time, t_RO]`` after onset. Cells with averaging time
    longer than ``t_RO``, or a window outside the traces, are NaN.
    """
    yg, dt_g, on_g = _stack(traces_g, dt, onset)
    ye, dt_e, on_e = _stack(traces_e, dt, onset)
    if dt_g != dt_e or on_g != on_e or yg.shape[1] != ye.shape[1]:
        raise ValueError("ground and excited traces must share their sampling grid")
    dt, onset = dt_g, on_g
    n_samples = yg.shape[1]
    t_ro_axis = np.asarray(t_ro_axis, dtype=float)
    avg_axis = np.asarray(avg_axis, dtype=float)

    def cell(idx):
        i, j = divmod(idx, len(avg_axis))
        t_ro, avg = t_ro_axis[i], avg_axis[j]
        if avg > t_ro + 1e-9 or avg <= 0:
            return idx, np.nan, np.nan
        i0 = onset + int(round((t_ro - avg) / dt))
        i1 = onset + int(round(t_ro / dt))
        if i1 > n_samples or i1 <= i0 or i0 < onset:
            return idx, np.nan, np.nan
        sg = yg[:, i0:i1].mean(axis=1) - common_baseline
        se = ye[:, i0:i1].mean(axis=1) - common_baseline
        r = optimal_threshold(sg, se)
        return idx, r.F, r.V_th

    n_cells = len(t_ro_axis) * len(avg_axis)
    F = np.full((len(t_ro_axis), len(avg_axis)), np.nan)
    V = np.full_like(F, np.nan)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(cell, range(n_cells)))
    else:
        results = [cell(k) for k in range(n_cells)]
    for idx, f, v in results:
        F.flat[idx] = f
        V.flat[idx] = v
    return LandscapeGrid(t_ro_axis, avg_axis, F, V, level,
                         contour_polylines(t_ro_axis, avg_axis, F, level))


# ---------------------------------------------------------------------------
# SNR budget for high-fidelity readout


def required_snr_factor(baseline_overlap_infidelity: float, target_infidelity: float) -> float:
    """SNR multiplier taking the erf overlap infidelity from ``baseline`` to ``target``."""
    for name, v in (("baseline_overlap_infidelity", baseline_overlap_infidelity),
                    ("target_infidelity", target_infidelity)):
        if not 0 < v < 1:
            raise ValueError(f"{name} must lie in (0, 1)")
    return float(special.erfinv(1 - target_infidelity) / special.erfinv(1 - baseline_overlap_infidelity))


@dataclass(frozen=True)
class BudgetFactors:
    """Improvement factors for the absorbed signal energy and the SNR requirement.

    ``snr_factor`` overrides the computed :func:`required_snr_factor`; the
    default is the rounded value 1.8. Set it to
    ``None`` to use the exact inverse-erf ratio (about 1.81 for 7 % -> 0.1 %).
    """

    A_t: float = 2.0
    A_c: float = 1.25
    A_chi: float = 2.0
    A_a: float = 1.5
    A_2f: float = 2.0
    target_infidelity: float = 0.001
    baseline_overlap_infidelity: float = 0.07
    pulse_shortening_ratio: float = 70.0
    detector_resolution_gain: float = 13.0
    snr_factor: float | None = 1.8

    def __post_init__(self):
        for name in ("A_t", "A_c", "A_chi", "A_a", "A_2f", "pulse_shortening_ratio",
                     "detector_resolution_gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.snr_factor is not None and not self.snr_factor > 0:
            raise ValueError("snr_factor must be positive")


@dataclass(frozen=True)
class BudgetReport:
    snr_factor: float
    required: float
    available: float
    margin: float
    passed: bool

    def as_dict(self) -> dict:
        return {"snr_factor": self.snr_factor, "required": self.required,
                "available": self.available, "margin": self.margin, "passed": self.passed}


def improvement_budget(b: BudgetFactors) -> BudgetReport:
    """Required SNR gain versus the product of available improvement factors."""
    if b.snr_factor is None:
        snr = 1.0 if b.target_infidelity == b.baseline_overlap_infidelity else required_snr_factor(
            b.baseline_overlap_infidelity, b.target_infidelity)
    else:
        snr = b.snr_factor
    required = snr * b.pulse_shortening_ratio / b.detector_resolution_gain
    available = b.A_t * b.A_c * b.A_chi * b.A_a * b.A_2f
    return BudgetReport(snr, required, available, available / required, available >= required)
