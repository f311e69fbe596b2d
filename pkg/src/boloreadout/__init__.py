"""Simulation and statistics of bolometric single-shot qubit readout."""

from .dist import (
    DecayDistParams,
    GaussianMixtureParams,
    Histogram,
    fit_decay_model,
    fit_exponential_rise,
    fit_two_gaussians,
    make_histogram,
    pdf_excited_marginal,
    pdf_excited_total,
    pdf_ground,
    scott_bin_width,
)
from .fidelity import (
    BudgetFactors,
    empirical_fidelity,
    fidelity_landscape,
    gaussian_snr_fidelity,
    improvement_budget,
    model_fidelity,
    optimal_threshold,
    required_snr_factor,
    t1_error,
)
from .model import (
    AveragingWindow,
    BolometerResponse,
    NoiseModel,
    QubitDecayModel,
    window_mean_excited,
    window_mean_ground,
    window_sigma,
)
from .sim import SeedSpec, SimConfig, Trace, extract_signal, simulate_shot_batch, simulate_trace
