import math

import numpy as np
import pytest
from pytest import approx
from scipy import stats

from boloreadout.dist import DecayDistParams, cdf_excited_total, scott_bin_width
from boloreadout.model import (
    AveragingWindow,
    BolometerResponse,
    NoiseModel,
    QubitDecayModel,
    noiseless_response_ground,
    window_mean_ground,
    window_sigma,
)
from boloreadout.sim import (
    SeedSpec,
    SimConfig,
    Trace,
    extract_signal,
    sample_decay_time,
    signals,
    simulate_shot_batch,
    simulate_trace,
    simulate_trace_with_decay,
)

RESP = BolometerResponse(24.7, 182.0, 9.4)
QUBIT = QubitDecayModel(25.8, 0.2)
NOISE = NoiseModel.from_window_sigma(17.4, 10.6)
WIN = AveragingWindow(13.9, 3.3, 1.1)


def test_decay_time_statistics():
    x = sample_decay_time(QubitDecayModel(28.0), SeedSpec(7), size=10**6)
    assert abs(x.mean() - 28.0) < 0.1
    assert abs(np.median(x) - 28 * math.log(2)) < 0.1
    assert 28 * math.log(2) == approx(19.408, abs=1e-3)


def test_decay_time_deterministic():
    q = QubitDecayModel(28.0)
    assert sample_decay_time(q, SeedSpec(3, 11)) == sample_decay_time(q, SeedSpec(3, 11))
    assert sample_decay_time(q, SeedSpec(3, 11)) != sample_decay_time(q, SeedSpec(3, 12))


def test_noiseless_ground_trace_is_exact():
    tr = simulate_trace("ground", RESP, QUBIT, NoiseModel(0.0), 40.0, 0.05, SeedSpec(1))
    assert tr.samples.shape == (800,)
    np.testing.assert_array_equal(tr.samples, noiseless_response_ground(tr.times_since_onset(), RESP))


def test_trace_validation():
    with pytest.raises(ValueError):
        simulate_trace("ground", RESP, QUBIT, NOISE, 10.0, 0.0, SeedSpec(1))
    with pytest.raises(ValueError):
        simulate_trace("ground", RESP, QUBIT, NOISE, 0.01, 0.05, SeedSpec(1))
    with pytest.raises(ValueError):
        Trace(0.1, 5.0, np.zeros(10))


def test_forced_preparation_error_matches_ground():
    q = QubitDecayModel(25.8, 1.0)
    e = simulate_trace("excited", RESP, q, NoiseModel(0.0), 20.0, 0.05, SeedSpec(1))
    g = simulate_trace("ground", RESP, q, NoiseModel(0.0), 20.0, 0.05, SeedSpec(1))
    np.testing.assert_array_equal(e.samples, g.samples)
    cfg = SimConfig(RESP, q, NOISE, WIN)
    se = signals(simulate_shot_batch(4000, cfg, "excited", seed=5))
    sg = signals(simulate_shot_batch(4000, cfg, "ground", seed=6))
    assert stats.ks_2samp(se, sg).pvalue > 0.01


def test_window_noise_matches_sigma_law():
    flat = BolometerResponse(0.0, 0.0, 9.4)
    cfg = SimConfig(flat, QUBIT, NOISE, AveragingWindow.from_averaging_time(13.9, 10.6))
    S = signals(simulate_shot_batch(10**4, cfg, "ground", seed=2))
    n = S.size
    assert abs(S.std(ddof=1) - 17.4) < 3 * 17.4 / math.sqrt(2 * (n - 1))


@pytest.mark.parametrize("length", [1.0, 2.5, 5.0, 10.0, 20.0])
def test_sigma_law_across_windows(length):
    flat = BolometerResponse(0.0, 0.0, 9.4)
    win = AveragingWindow.from_averaging_time(20.0, length)
    cfg = SimConfig(flat, QUBIT, NOISE, win)
    S = signals(simulate_shot_batch(5000, cfg, "ground", seed=int(length * 10)))
    target = window_sigma(win, NOISE)
    assert abs(S.std(ddof=1) - target) < 3 * target / math.sqrt(2 * (S.size - 1))


def test_extract_signal_examples():
    tr = simulate_trace("ground", RESP, QUBIT, NoiseModel(0.0), 13.9, 0.05, SeedSpec(1))
    S = extract_signal(tr, WIN, "common", 0.0)
    assert S == approx(window_mean_ground(WIN, RESP), rel=1e-4)
    assert S == approx(14.2736, rel=1e-4)
    zero = Trace(0.05, 1.1, np.zeros(300))
    assert extract_signal(zero, WIN, "per_shot") == 0.0
    assert extract_signal(zero, WIN, "common", 0.0) == 0.0


def test_extract_signal_errors():
    tr = Trace(0.05, 0.0, np.zeros(100))  # 5 µs
    with pytest.raises(ValueError):
        extract_signal(tr, WIN)
    tr = Trace(0.05, 0.0, np.zeros(400))
    with pytest.raises(ValueError):
        extract_signal(tr, WIN, "per_shot")  # no room for the baseline
    with pytest.raises(ValueError):
        extract_signal(tr, AveragingWindow(13.9, 3.3, 0.0), "per_shot")


def test_per_shot_baseline_inflates_noise():
    cfg = SimConfig(RESP, QUBIT, NOISE, AveragingWindow.from_averaging_time(13.9, 10.6, t_base=1.1))
    S = signals(simulate_shot_batch(10**4, cfg, "ground", "per_shot", seed=4))
    expected = 17.4 * math.sqrt(1 + 10.6 / 1.1)
    assert expected == approx(56.747, abs=1e-3)
    assert abs(S.std(ddof=1) - expected) < 3 * expected / math.sqrt(2 * S.size)


def test_batch_mean_matches_window_mean():
    cfg = SimConfig(RESP, QUBIT, NOISE, WIN)
    S = signals(simulate_shot_batch(10**4, cfg, "ground", seed=8))
    assert abs(S.mean() - window_mean_ground(WIN, RESP)) < 3 * S.std(ddof=1) / math.sqrt(S.size)


def test_single_shot_matches_composition():
    cfg = SimConfig(RESP, QUBIT, NOISE, WIN)
    (rec,), (tr,) = simulate_shot_batch(1, cfg, "excited", "per_shot", seed=9, start_index=17,
                                        return_traces=True)
    ref, t_d = simulate_trace_with_decay("excited", RESP, QUBIT, NOISE, 13.9, 0.05,
                                         SeedSpec(9, 17), t_pre=1.1)
    np.testing.assert_array_equal(tr.samples, ref.samples)
    assert rec.S == extract_signal(ref, WIN, "per_shot")
    assert rec.t_d == t_d
    assert rec.shot_index == 17


def test_batch_independent_of_workers():
    cfg = SimConfig(RESP, QUBIT, NOISE, WIN)
    a = simulate_shot_batch(600, cfg, "excited", seed=3, workers=1)
    b = simulate_shot_batch(600, cfg, "excited", seed=3, workers=4)
    assert a == b
    assert [r.shot_index for r in b] == list(range(600))


def test_batch_rejects_empty():
    with pytest.raises(ValueError):
        simulate_shot_batch(0, SimConfig(RESP, QUBIT, NOISE, WIN), "ground")


def test_decay_times_truncated_exponential():
    cfg = SimConfig(RESP, QUBIT, NOISE, WIN)
    recs = simulate_shot_batch(10**4, cfg, "excited", seed=12)
    t_d = np.array([r.t_d for r in recs if r.t_d is not None])
    assert np.all(t_d < WIN.t_RO)
    norm = -math.expm1(-WIN.t_RO / QUBIT.T1)
    assert stats.kstest(t_d, lambda t: -np.expm1(-t / QUBIT.T1) / norm).pvalue > 0.01
    # decays are only recorded for shots that were really excited
    frac = t_d.size / len(recs)
    assert frac == approx((1 - QUBIT.P_x) * norm, abs=4 * math.sqrt(0.25 / len(recs)))


def chi_square_pvalue(S, cdf, min_expected=5.0):
    """Chi-square goodness of fit on Scott-rule bins, merging sparse bins."""
    width = scott_bin_width(S)
    edges = np.arange(S.min(), S.max() + width, width)
    edges[0], edges[-1] = -np.inf, np.inf
    observed, _ = np.histogram(S, bins=edges)
    probs = np.diff(np.concatenate([[0.0], cdf(edges[1:-1]), [1.0]]))
    expected = probs * S.size
    obs_m, exp_m = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(observed, expected):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            obs_m.append(o_acc)
            exp_m.append(e_acc)
            o_acc = e_acc = 0.0
    obs_m[-1] += o_acc
    exp_m[-1] += e_acc
    chi2 = float(np.sum((np.array(obs_m) - exp_m) ** 2 / np.array(exp_m)))
    return stats.chi2.sf(chi2, len(obs_m) - 1)


def test_excited_distribution_matches_model():
    cfg = SimConfig(RESP, QUBIT, NOISE, WIN)
    S = signals(simulate_shot_batch(10**4, cfg, "excited", seed=21))
    p = DecayDistParams(24.7, 182.0, 25.8, 17.4, 0.2, WIN, 9.4)
    assert chi_square_pvalue(S, lambda v: cdf_excited_total(v, p)) > 0.01


def test_dt_refinement_weak_convergence():
    noiseless = NoiseModel(0.0)
    out = {}
    for dt in (0.05, 0.025):
        cfg = SimConfig(RESP, QUBIT, noiseless, WIN, dt=dt)
        # same seeds give the same preparation and decay draws for both step sizes
        out[dt] = signals(simulate_shot_batch(3000, cfg, "excited", seed=33))
    for stat in (np.mean, np.std):
        a, b = stat(out[0.05]), stat(out[0.025])
        assert abs(a - b) < 0.005 * abs(b)
    for dt in (0.05, 0.025):
        flat = SimConfig(BolometerResponse(0, 0, 9.4), QUBIT, NOISE, WIN, dt=dt)
        S = signals(simulate_shot_batch(5000, flat, "ground", seed=34))
        target = window_sigma(WIN, NOISE)
        assert abs(S.std(ddof=1) - target) < 3 * target / math.sqrt(2 * S.size)
