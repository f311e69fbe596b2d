"""Monte Carlo single-shot traces and signals.

Every shot draws from its own random stream seeded by
``(master_seed, shot_index)``, so a batch is reproducible bit for bit
whatever the number of workers. Within a shot the draws are made in a
fixed order: preparation error, decay time, then the noise samples.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .model import (
    AveragingWindow,
    BolometerResponse,
    NoiseModel,
    QubitDecayModel,
    noiseless_response_excited,
    noiseless_response_ground,
)

DEFAULT_DT = 0.05


class State(str, Enum):
    GROUND = "ground"
    EXCITED = "excited"


class BaselineMode(str, Enum):
    PER_SHOT = "per_shot"
    COMMON = "common"


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    shot_index: int = 0

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.master_seed, self.shot_index]))


@dataclass
class Trace:
    """Uniformly sampled voltage record.

    Sample ``k`` represents the interval ``[k dt, (k + 1) dt)`` and holds the
    value at its centre. ``t_pulse_start`` falls on a sample boundary.
    ``samples`` may be 1-D or have shape ``(n, 2)`` for I/Q records.
    """

    dt: float
    t_pulse_start: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.samples.shape[0] == 0:
            raise ValueError("trace has no samples")
        if not 0 <= self.t_pulse_start < self.duration:
            raise ValueError("t_pulse_start must lie inside the trace")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] * self.dt

    @property
    def onset_index(self) -> int:
        return int(round(self.t_pulse_start / self.dt))

    def times(self) -> np.ndarray:
        return (np.arange(self.samples.shape[0]) + 0.5) * self.dt

    def times_since_onset(self) -> np.ndarray:
        return self.times() - self.onset_index * self.dt


@dataclass(frozen=True)
class ShotRecord:
    shot_index: int
    prepared_state: State
    t_d: float | None
    S: float


@dataclass(frozen=True)
class SimConfig:
    """Everything a batch of shots depends on."""

    resp: BolometerResponse
    qubit: QubitDecayModel
    noise: NoiseModel
    win: AveragingWindow
    dt: float = DEFAULT_DT
    duration: float | None = None  # post-onset length; defaults to t_RO

    @property
    def post_onset(self) -> float:
        return self.win.t_RO if self.duration is None else self.duration


def sample_decay_time(qubit: QubitDecayModel, seed: SeedSpec, size=None):
    """Exponential decay time(s) with mean ``T1`` from the stream of ``seed``."""
    return seed.rng().exponential(qubit.T1, size=size)


def _window_slice(win_start, win_stop, dt, onset):
    i0 = onset + int(round(win_start / dt))
    i1 = onset + int(round(win_stop / dt))
    return i0, i1


def _draw_shot(prepared, resp, qubit, noise, n_pre, n_post, dt, rng):
    """Return ``(samples, t_d)`` for one shot using ``rng`` in the fixed draw order."""
    prepared = State(prepared)
    t = (np.arange(n_post) + 0.5) * dt
    t_d = None
    if prepared is State.EXCITED:
        in_ground = rng.random() < qubit.P_x
        decay = rng.exponential(qubit.T1)
        if in_ground:
            u = noiseless_response_ground(t, resp)
        else:
            u = noiseless_response_excited(t, decay, resp)
            if decay < n_post * dt:
                t_d = float(decay)
    else:
        u = noiseless_response_ground(t, resp)
    samples = np.zeros(n_pre + n_post)
    samples[n_pre:] = u
    if noise.P_N > 0:
        samples += math.sqrt(noise.P_N / dt) * rng.standard_normal(n_pre + n_post)
    return samples, t_d


def _grid(duration, dt, t_pre):
    if not dt > 0:
        raise ValueError("dt must be positive")
    if duration < dt:
        raise ValueError("duration must be at least one step")
    n_post = int(round(duration / dt))
    n_pre = int(math.ceil(t_pre / dt - 1e-9)) if t_pre > 0 else 0
    return n_pre, n_post


def simulate_trace(prepared, resp: BolometerResponse, qubit: QubitDecayModel, noise: NoiseModel,
                   duration: float, dt: float, seed: SeedSpec, t_pre: float = 0.0) -> Trace:
    """Euler-Maruyama trace of ``duration`` µs after onset, preceded by ``t_pre`` µs of baseline.

    Each sample is the noiseless response at the sample centre plus white
    Gaussian noise of std ``sqrt(P_N / dt)``, so a boxcar over length ``T``
    has std ``sqrt(P_N / T)``.
    """
    trace, _ = simulate_trace_with_decay(prepared, resp, qubit, noise, duration, dt, seed, t_pre)
    return trace


def simulate_trace_with_decay(prepared, resp, qubit, noise, duration, dt, seed: SeedSpec,
                              t_pre: float = 0.0):
    n_pre, n_post = _grid(duration, dt, t_pre)
    samples, t_d = _draw_shot(prepared, resp, qubit, noise, n_pre, n_post, dt, seed.rng())
    return Trace(dt, n_pre * dt, samples), t_d


def extract_signal(trace: Trace, win: AveragingWindow, baseline_mode=BaselineMode.COMMON,
                   common_baseline: float | None = 0.0) -> float:
    """Signal ``S = V - V0`` for one trace.

    ``V`` averages the samples in ``[t0, t_RO]`` after onset. ``V0`` is the
    mean over the ``t_base`` interval just before onset (``per_shot``) or
    the supplied ``common_baseline``.
    """
    baseline_mode = BaselineMode(baseline_mode)
    y = trace.samples
    onset = trace.onset_index
    i0, i1 = _window_slice(win.t0, win.t_RO, trace.dt, onset)
    if i1 > y.shape[0] or i1 <= i0:
        raise ValueError(f"window [{win.t0}, {win.t_RO}] µs does not fit the trace")
    v = y[i0:i1].mean(axis=0)
    if baseline_mode is BaselineMode.PER_SHOT:
        if not win.t_base > 0:
            raise ValueError("per-shot baseline needs t_base > 0")
        nb = int(round(win.t_base / trace.dt))
        if nb > onset or nb < 1:
            raise ValueError("baseline interval does not fit before the pulse")
        v0 = y[onset - nb:onset].mean(axis=0)
    else:
        if common_baseline is None:
            raise ValueError("common baseline mode needs a baseline value")
        v0 = common_baseline
    out = v - v0
    return float(out) if np.ndim(out) == 0 else out


def _batch_layout(config: SimConfig, baseline_mode: BaselineMode):
    t_pre = config.win.t_base if baseline_mode is BaselineMode.PER_SHOT else 0.0
    if config.post_onset < config.win.t_RO - 1e-9:
        raise ValueError("simulated duration shorter than the readout window")
    return _grid(config.post_onset, config.dt, t_pre)


def simulate_shot_batch(n: int, config: SimConfig, prepared, baseline_mode=BaselineMode.COMMON,
                        seed: int | SeedSpec = 0, start_index: int = 0,
                        common_baseline: float = 0.0, workers: int = 1,
                        return_traces: bool = False):
    """Simulate ``n`` shots with indices ``start_index .. start_index + n - 1``.

    Returns a list of :class:`ShotRecord` ordered by shot index, plus the list
    of traces when ``return_traces`` is set. Output does not depend on
    ``workers``.
    """
    if n < 1:
        raise ValueError("need at least one shot")
    master = seed.master_seed if isinstance(seed, SeedSpec) else int(seed)
    baseline_mode = BaselineMode(baseline_mode)
    prepared = State(prepared)
    n_pre, n_post = _batch_layout(config, baseline_mode)
    dt = config.dt

    def one(k):
        idx = start_index + k
        samples, t_d = _draw_shot(prepared, config.resp, config.qubit, config.noise,
                                  n_pre, n_post, dt, SeedSpec(master, idx).rng())
        trace = Trace(dt, n_pre * dt, samples)
        S = extract_signal(trace, config.win, baseline_mode, common_baseline)
        return ShotRecord(idx, prepared, t_d, S), (trace if return_traces else None)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(n), chunksize=256))
    else:
        results = [one(k) for k in range(n)]
    records = [r for r, _ in results]
    if return_traces:
        return records, [tr for _, tr in results]
    return records


def signals(records) -> np.ndarray:
    return np.array([r.S for r in records])


def simulate_traces(n: int, config: SimConfig, prepared, seed: int, start_index: int = 0,
                    t_pre: float = 0.0) -> np.ndarray:
    """Stack of ``n`` raw traces (shape ``(n, samples)``) on the grid of ``config``."""
    n_pre, n_post = _grid(config.post_onset, config.dt, t_pre)
    out = np.empty((n, n_pre + n_post))
    for k in range(n):
        out[k], _ = _draw_shot(prepared, config.resp, config.qubit, config.noise, n_pre, n_post,
                               config.dt, SeedSpec(seed, start_index + k).rng())
    return out
