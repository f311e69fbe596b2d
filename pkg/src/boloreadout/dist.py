"""Signal distributions for the two prepared states, histogramming and fits.

The excited-state density averages a Gaussian over exponentially
distributed decay times. The integral is taken in the cumulative decay
probability ``q = 1 - exp(-t_d / T1)`` so the weight is flat and the
integrand stays bounded for any ``T1``; decays after ``t_RO`` leave the
window mean unchanged and are added in closed form.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, optimize, special

from .model import (
    AveragingWindow,
    BolometerResponse,
    window_mean_excited,
    window_mean_ground,
    window_mean_no_decay,
)

QUAD_EPSABS = 1e-10
QUAD_TOL = 1e-8

_SQRT2PI = math.sqrt(2 * math.pi)


class QuadratureError(RuntimeError):
    pass


class FitError(RuntimeError):
    pass


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    normalization: str = "counts"

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts)
        if self.bin_edges.ndim != 1 or len(self.bin_edges) < 2:
            raise ValueError("need at least two bin edges")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if len(self.counts) != len(self.bin_edges) - 1:
            raise ValueError("counts length must be len(bin_edges) - 1")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if self.normalization not in ("counts", "probability"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def probabilities(self) -> np.ndarray:
        return self.counts / self.counts.sum()


@dataclass(frozen=True)
class DecayDistParams:
    """Parameters of the decay-convolved signal distribution.

    ``win`` and ``tau_b`` are held fixed in fits; the other five are fitted.
    """

    c_g: float
    c_e: float
    T1: float
    sigma: float
    P_x: float
    win: AveragingWindow
    tau_b: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.P_x <= 1.0:
            raise ValueError(f"P_x must lie in [0, 1], got {self.P_x}")
        if not self.T1 > 0:
            raise ValueError(f"T1 must be positive, got {self.T1}")

    @property
    def response(self) -> BolometerResponse:
        return BolometerResponse(self.c_g, self.c_e, self.tau_b)

    @property
    def mean_ground(self) -> float:
        return window_mean_ground(self.win, self.response)

    @property
    def mean_no_decay(self) -> float:
        return window_mean_no_decay(self.win, self.response)

    def as_dict(self) -> dict:
        return {
            "c_g": self.c_g,
            "c_e": self.c_e,
            "T1": self.T1,
            "sigma": self.sigma,
            "P_x": self.P_x,
            "tau_b": self.tau_b,
            "t_RO": self.win.t_RO,
            "t0": self.win.t0,
        }


@dataclass(frozen=True)
class GaussianComponent:
    mean: float
    sigma: float
    weight: float


@dataclass(frozen=True)
class GaussianMixtureParams:
    components: tuple
    residual_norm: float = float("nan")
    degenerate: bool = False
    converged: bool = True

    def __post_init__(self):
        w = sum(c.weight for c in self.components)
        if abs(w - 1) > 1e-9 or any(c.weight < 0 for c in self.components):
            raise ValueError("weights must be non-negative and sum to 1")
        if any(not c.sigma > 0 for c in self.components):
            raise ValueError("sigmas must be positive")

    def pdf(self, V):
        V = np.asarray(V, dtype=float)
        return sum(c.weight * _gauss(V, c.mean, c.sigma) for c in self.components)

    def as_dict(self) -> dict:
        return {
            "components": [
                {"mean": c.mean, "sigma": c.sigma, "weight": c.weight} for c in self.components
            ],
            "residual_norm": self.residual_norm,
            "degenerate": self.degenerate,
            "converged": self.converged,
        }


@dataclass
class DecayFitResult:
    params: DecayDistParams
    covariance: np.ndarray
    residual_norm: float
    converged: bool
    unidentifiable: list = field(default_factory=list)
    method: str = "lsq"

    @property
    def stderr(self) -> dict:
        err = np.sqrt(np.clip(np.diag(self.covariance), 0, None))
        return dict(zip(FIT_NAMES, err))

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "params": self.params.as_dict(),
            "stderr": {k: float(v) for k, v in self.stderr.items()},
            "covariance": self.covariance.tolist(),
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "unidentifiable": list(self.unidentifiable),
            "quadrature_tolerance": QUAD_TOL,
        }


@dataclass
class RiseFit:
    amplitude: float
    tau_b: float
    offset: float
    covariance: np.ndarray
    span_ok: bool
    tau_identifiable: bool

    def __iter__(self):
        return iter((self.amplitude, self.tau_b, self.offset))


FIT_NAMES = ("c_g", "c_e", "T1", "sigma", "P_x")


def _gauss(V, mu, sigma):
    z = (V - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * _SQRT2PI)


def scott_bin_width(samples) -> float:
    """Scott's normal-reference bin width ``3.49 * s * n**(-1/3)``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    return 3.49 * float(np.std(x, ddof=1)) * x.size ** (-1.0 / 3.0)


def make_histogram(samples, bin_width: float | None = None) -> Histogram:
    """Histogram with bins of ``bin_width`` (Scott's rule when omitted), aligned to the sample minimum."""
    x = np.asarray(samples, dtype=float).ravel()
    if bin_width is None:
        bin_width = scott_bin_width(x)
    if not bin_width > 0:
        raise ValueError("bin width must be positive; are all samples identical?")
    lo, hi = x.min(), x.max()
    n_bins = max(1, int(math.ceil((hi - lo) / bin_width)))
    if lo + n_bins * bin_width <= hi:
        n_bins += 1
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(x, bins=edges)
    return Histogram(edges, counts)


def pdf_ground(V, p: DecayDistParams):
    out = _gauss(np.asarray(V, dtype=float), p.mean_ground, p.sigma)
    return out if np.ndim(out) else float(out)


def pdf_excited_conditional(V, t_d: float, p: DecayDistParams):
    mu = window_mean_excited(p.win, p.response, t_d)
    out = _gauss(np.asarray(V, dtype=float), mu, p.sigma)
    return out if np.ndim(out) else float(out)


def _decay_average(kernel, V, p: DecayDistParams, tol: float):
    """Average ``kernel(V, mean(t_d))`` over the decay-time distribution."""
    V = np.atleast_1d(np.asarray(V, dtype=float))
    resp = p.response
    win = p.win
    mu_tail = window_mean_no_decay(win, resp)

    if math.isinf(p.T1):
        return kernel(V, mu_tail)

    # fraction of shots decaying inside the window, computed as 1 - exp(-t_RO/T1)
    q_end = -math.expm1(-win.t_RO / p.T1)
    tail_weight = math.exp(-win.t_RO / p.T1)
    out = tail_weight * kernel(V, mu_tail)
    if q_end <= 0:
        return out

    def integrand(q):
        t_d = -p.T1 * math.log1p(-q)
        return kernel(V, window_mean_excited(win, resp, t_d))

    # the mean has a kink where the decay time crosses t0
    q0 = -math.expm1(-win.t0 / p.T1)
    points = [q0] if 0 < q0 < q_end else None
    val, err, info = integrate.quad_vec(
        integrand, 0.0, q_end, epsabs=QUAD_EPSABS, epsrel=1e-10, points=points,
        full_output=True, limit=2000,
    )
    if not info.success or err > tol:
        raise QuadratureError(
            f"decay-time quadrature did not converge: error estimate {err:.3g} > {tol:.3g}"
        )
    return out + val


def pdf_excited_marginal(V, p: DecayDistParams, tol: float = QUAD_TOL):
    """Density for a qubit that starts in the excited state and decays at a random time.

    Absolute accuracy ``tol`` (1/mV). Raises :class:`QuadratureError` if the
    adaptive quadrature cannot reach it.
    """
    scalar = np.ndim(V) == 0
    out = _decay_average(lambda v, mu: _gauss(v, mu, p.sigma), V, p, tol)
    return float(out[0]) if scalar else out


def pdf_excited_total(V, p: DecayDistParams, tol: float = QUAD_TOL):
    """Density for nominal excited preparation including the preparation error ``P_x``."""
    scalar = np.ndim(V) == 0
    V = np.atleast_1d(np.asarray(V, dtype=float))
    if p.P_x == 1.0:
        out = _gauss(V, p.mean_ground, p.sigma)
    elif p.P_x == 0.0:
        out = pdf_excited_marginal(V, p, tol)
    else:
        out = p.P_x * _gauss(V, p.mean_ground, p.sigma) + (1 - p.P_x) * pdf_excited_marginal(V, p, tol)
    return float(out[0]) if scalar else out


def cdf_excited_total(V, p: DecayDistParams, tol: float = QUAD_TOL):
    """Cumulative distribution matching :func:`pdf_excited_total`."""
    scalar = np.ndim(V) == 0
    V = np.atleast_1d(np.asarray(V, dtype=float))

    def phi(v, mu):
        return special.ndtr((v - mu) / p.sigma)

    out = p.P_x * phi(V, p.mean_ground)
    if p.P_x < 1.0:
        out = out + (1 - p.P_x) * _decay_average(phi, V, p, tol)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# two-Gaussian fit


def _local_maxima(y):
    idx = [i for i in range(len(y))
           if y[i] > 0
           and (i == 0 or y[i] >= y[i - 1])
           and (i == len(y) - 1 or y[i] > y[i + 1])]
    return sorted(idx, key=lambda i: -y[i])


def _two_gauss_init(hist: Histogram):
    x = hist.centers
    prob = hist.probabilities()
    kernel = np.array([1, 2, 3, 2, 1], dtype=float)
    smooth = np.convolve(prob, kernel / kernel.sum(), mode="same")
    mean = float(np.sum(prob * x))
    sd = float(np.sqrt(np.sum(prob * (x - mean) ** 2)))
    peaks = _local_maxima(smooth)
    first = peaks[0]
    second = None
    for i in peaks[1:]:
        # well separated: at least a quarter of the overall spread apart and a real dip between
        if abs(x[i] - x[first]) < 0.5 * sd:
            continue
        lo, hi = sorted((i, first))
        if smooth[lo:hi + 1].min() < 0.9 * min(smooth[i], smooth[first]):
            second = i
            break
    if second is None:
        # single visible mode: seed the second component in the heavier tail
        skew = np.sum(prob * (x - mean) ** 3)
        mu2 = x[first] + (1.5 if skew >= 0 else -1.5) * sd
        return [x[first], sd * 0.8, 0.9, mu2, sd * 0.8]
    return [x[first], 0.5 * abs(x[second] - x[first]) / 2, 0.6,
            x[second], 0.5 * abs(x[second] - x[first]) / 2]


def fit_two_gaussians(hist: Histogram, max_nfev: int = 2000) -> GaussianMixtureParams:
    """Weighted least-squares fit of a two-component Gaussian mixture to a histogram.

    Residuals are bin counts against ``N * pdf(center) * width`` weighted by
    ``1 / sqrt(max(count, 1))``. Components closer than their mean width, or
    with a weight below 5 %, are reported as a single Gaussian with the
    ``degenerate`` flag set.
    """
    counts = np.asarray(hist.counts, dtype=float)
    if np.count_nonzero(counts) < 6:
        raise ValueError("need at least 6 non-empty bins")
    x, w = hist.centers, hist.widths
    n = counts.sum()
    weights = 1.0 / np.sqrt(np.maximum(counts, 1.0))
    span = hist.bin_edges[-1] - hist.bin_edges[0]

    def model(theta):
        m1, s1, a, m2, s2 = theta
        return n * w * (a * _gauss(x, m1, s1) + (1 - a) * _gauss(x, m2, s2))

    def resid(theta):
        return (model(theta) - counts) * weights

    x0 = np.array(_two_gauss_init(hist), dtype=float)
    smin = 0.25 * float(np.min(w))
    x0[[1, 4]] = np.maximum(x0[[1, 4]], 2 * smin)
    lo = [x[0] - span, smin, 0.0, x[0] - span, smin]
    hi = [x[-1] + span, 2 * span, 1.0, x[-1] + span, 2 * span]
    x0 = np.clip(x0, lo, hi)
    sol = optimize.least_squares(resid, x0, bounds=(lo, hi), max_nfev=max_nfev, x_scale="jac")
    converged = bool(sol.success)
    if not converged:
        warnings.warn(f"two-Gaussian fit did not converge: {sol.message}", RuntimeWarning)
    m1, s1, a, m2, s2 = sol.x
    if m1 > m2:
        m1, s1, a, m2, s2 = m2, s2, 1 - a, m1, s1
    resnorm = float(np.linalg.norm(sol.fun))

    degenerate = abs(m2 - m1) < 0.5 * (s1 + s2) or min(a, 1 - a) < 0.05
    if degenerate:
        # collapse to one Gaussian by moment matching
        mean = a * m1 + (1 - a) * m2
        var = a * (s1**2 + (m1 - mean) ** 2) + (1 - a) * (s2**2 + (m2 - mean) ** 2)
        comps = (GaussianComponent(mean, math.sqrt(var), 1.0),
                 GaussianComponent(m2 if a >= 0.5 else m1, s2 if a >= 0.5 else s1, 0.0))
    else:
        comps = (GaussianComponent(m1, s1, a), GaussianComponent(m2, s2, 1 - a))
    return GaussianMixtureParams(comps, resnorm, degenerate, converged)


# ---------------------------------------------------------------------------
# decay-model fit

_LOG_T1_BOUNDS = (math.log(1e-3), math.log(1e7))


def _unit_mean(win: AveragingWindow, tau_b: float) -> float:
    return window_mean_ground(win, BolometerResponse(1.0, 1.0, tau_b))


def _theta_to_params(theta, win, tau_b) -> DecayDistParams:
    c_g, c_e, log_t1, sigma, p_x = theta
    return DecayDistParams(c_g, c_e, math.exp(log_t1), sigma, float(np.clip(p_x, 0, 1)), win, tau_b)


def _decay_starts(x, prob, win, tau_b):
    """A handful of starting points built from a two-Gaussian description of the data."""
    m = _unit_mean(win, tau_b)
    mean = float(np.sum(prob * x))
    sd = float(np.sqrt(np.sum(prob * (x - mean) ** 2)))
    cdf = np.cumsum(prob)
    low = float(np.interp(0.1, cdf, x))
    high = float(np.interp(0.9, cdf, x))
    sigma0 = max(sd / 4, 1e-6 * max(abs(high), 1.0))
    starts = []
    for t1_mult in (0.5, 2.0, 8.0):
        for p_x in (0.05, 0.3):
            starts.append([low / m, high / m, math.log(t1_mult * win.t_RO), sigma0, p_x])
    return starts


# fewer expected in-window decays than this and the data carry no T1 information
MIN_DECAY_EVENTS = 10.0


def _finish_decay_fit(theta, jac, cost_scale, win, tau_b, resnorm, converged, method, at_bound,
                      n_shots):
    params = _theta_to_params(theta, win, tau_b)
    try:
        cov_theta = np.linalg.pinv(jac.T @ jac) * cost_scale
    except np.linalg.LinAlgError:
        cov_theta = np.full((5, 5), np.inf)
    # delta method for T1 = exp(log_t1)
    g = np.eye(5)
    g[2, 2] = params.T1
    cov = g @ cov_theta @ g.T
    unident = []
    rel_t1 = math.sqrt(max(cov_theta[2, 2], 0.0))
    events = n_shots * (1 - params.P_x) * -math.expm1(-win.t_RO / params.T1)
    if not np.isfinite(rel_t1) or rel_t1 > 0.5 or at_bound or events < MIN_DECAY_EVENTS:
        unident.append("T1")
    return DecayFitResult(params, cov, resnorm, converged, unident, method)


def fit_decay_model(hist: Histogram, win: AveragingWindow, tau_b: float,
                    max_nfev: int = 400) -> DecayFitResult:
    """Fit ``c_g, c_e, T1, sigma, P_x`` to an excited-state histogram.

    Weighted least squares of ``N * pdf_excited_total(center) * width``
    against the bin counts, Poisson weights ``max(count, 1)``, empty bins
    kept. ``win`` and ``tau_b`` are held fixed. The covariance comes from
    the Jacobian at the optimum; ``T1`` is listed in ``unidentifiable`` when
    its relative uncertainty exceeds 50 %, it runs into its bound, or fewer
    than ``MIN_DECAY_EVENTS`` decays inside the window are expected.
    """
    counts = np.asarray(hist.counts, dtype=float)
    if np.count_nonzero(counts) < 6:
        raise ValueError("need at least 6 non-empty bins")
    x, w = hist.centers, hist.widths
    n = counts.sum()
    weights = 1.0 / np.sqrt(np.maximum(counts, 1.0))
    span = float(hist.bin_edges[-1] - hist.bin_edges[0])
    m = _unit_mean(win, tau_b)

    def resid(theta):
        p = _theta_to_params(theta, win, tau_b)
        return (n * w * pdf_excited_total(x, p) - counts) * weights

    big = 10 * (span + abs(x).max()) / m
    lo = [-big, -big, _LOG_T1_BOUNDS[0], 1e-3 * float(w.min()), 0.0]
    hi = [big, big, _LOG_T1_BOUNDS[1], 2 * span, 1.0]

    best = None
    for x0 in _decay_starts(x, hist.probabilities(), win, tau_b):
        x0 = np.clip(x0, np.add(lo, 1e-9), np.subtract(hi, 1e-9))
        try:
            sol = optimize.least_squares(resid, x0, bounds=(lo, hi), max_nfev=max_nfev,
                                         x_scale="jac")
        except QuadratureError:
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        raise FitError("decay-model fit failed from every starting point")
    if not best.success:
        warnings.warn(f"decay-model fit did not converge: {best.message}", RuntimeWarning)
    at_bound = best.x[2] > _LOG_T1_BOUNDS[1] - 0.5 or best.x[2] < _LOG_T1_BOUNDS[0] + 0.5
    return _finish_decay_fit(best.x, best.jac, 1.0, win, tau_b,
                             float(np.linalg.norm(best.fun)), bool(best.success), "lsq", at_bound, n)


def fit_decay_model_ml(samples, win: AveragingWindow, tau_b: float,
                       start: DecayDistParams | None = None) -> DecayFitResult:
    """Maximum-likelihood fit of the decay model to raw signal values.

    Starts from ``start`` or from the histogram fit. The covariance is the
    inverse of the numerically differentiated Hessian of the negative
    log-likelihood.
    """
    S = np.asarray(samples, dtype=float).ravel()
    if start is None:
        start = fit_decay_model(make_histogram(S), win, tau_b).params
    theta0 = np.array([start.c_g, start.c_e, math.log(start.T1), start.sigma,
                       min(max(start.P_x, 1e-6), 1 - 1e-6)])

    def nll(theta):
        if theta[3] <= 0 or not 0 <= theta[4] <= 1:
            return np.inf
        p = _theta_to_params(theta, win, tau_b)
        dens = pdf_excited_total(S, p)
        return -float(np.sum(np.log(np.maximum(dens, 1e-300))))

    bounds = [(None, None), (None, None), _LOG_T1_BOUNDS, (1e-9, None), (0.0, 1.0)]
    sol = optimize.minimize(nll, theta0, method="L-BFGS-B", bounds=bounds)
    hess = _numeric_hessian(nll, sol.x)
    try:
        cov_theta = np.linalg.pinv(hess)
    except np.linalg.LinAlgError:
        cov_theta = np.full((5, 5), np.inf)
    params = _theta_to_params(sol.x, win, tau_b)
    g = np.eye(5)
    g[2, 2] = params.T1
    unident = []
    events = S.size * (1 - params.P_x) * -math.expm1(-win.t_RO / params.T1)
    if (not np.isfinite(cov_theta[2, 2]) or math.sqrt(max(cov_theta[2, 2], 0)) > 0.5
            or events < MIN_DECAY_EVENTS):
        unident.append("T1")
    return DecayFitResult(params, g @ cov_theta @ g.T, float(sol.fun), bool(sol.success),
                          unident, "ml")


def _numeric_hessian(f, x, rel_step=1e-4):
    x = np.asarray(x, dtype=float)
    k = len(x)
    h = rel_step * np.maximum(np.abs(x), 1e-2)
    H = np.empty((k, k))
    f0 = f(x)
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h[i]
            ej[j] = h[j]
            if i == j:
                val = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
            else:
                val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (
                    4 * h[i] * h[j])
            H[i, j] = H[j, i] = val
    return H


# ---------------------------------------------------------------------------
# exponential rise of a long pulse


def _rise(t, a, tau, b):
    return -a * np.expm1(-t / tau) + b


def fit_exponential_rise(trace) -> RiseFit:
    """Least-squares fit of ``a (1 - exp(-(t - t_on) / tau)) + b`` after pulse onset.

    ``span_ok`` is False when the fitted segment is shorter than three
    fitted time constants. ``tau_identifiable`` is False when the amplitude
    is not resolved from zero at three standard errors.
    """
    t = trace.times_since_onset()
    y = np.asarray(trace.samples, dtype=float)
    if y.ndim > 1:
        y = y[:, 0]
    keep = t >= 0
    t, y = t[keep], y[keep]
    if t.size < 4:
        raise ValueError("need at least four post-onset samples")
    n_edge = max(1, t.size // 20)
    b0 = float(np.mean(y[:n_edge]))
    a0 = float(np.mean(y[-n_edge:])) - b0
    target = b0 + (1 - math.exp(-1)) * a0
    crossed = np.nonzero((y - target) * np.sign(a0 or 1.0) >= 0)[0]
    tau0 = float(t[crossed[0]]) if crossed.size and t[crossed[0]] > 0 else (t[-1] - t[0]) / 3
    tau0 = max(tau0, 2 * trace.dt)
    span = float(t[-1] - t[0])
    try:
        popt, pcov = optimize.curve_fit(
            _rise, t, y, p0=[a0, tau0, b0],
            bounds=([-np.inf, 0.1 * trace.dt, -np.inf], [np.inf, 100 * span, np.inf]),
            maxfev=20000,
        )
    except RuntimeError as exc:
        raise FitError(str(exc)) from exc
    a, tau, b = (float(v) for v in popt)
    a_err = math.sqrt(max(pcov[0, 0], 0.0)) if np.isfinite(pcov[0, 0]) else math.inf
    identifiable = abs(a) > 3 * a_err and np.isfinite(pcov[1, 1])
    return RiseFit(a, tau, b, pcov, span >= 3 * tau, bool(identifiable))


def fitted_curve(p: DecayDistParams, hist: Histogram, state: str = "excited") -> np.ndarray:
    """Expected counts per bin for plotting alongside ``hist``."""
    x, w, n = hist.centers, hist.widths, hist.total
    dens = pdf_ground(x, p) if state == "ground" else pdf_excited_total(x, p)
    return n * w * dens


def with_params(p: DecayDistParams, **changes) -> DecayDistParams:
    return replace(p, **changes)
