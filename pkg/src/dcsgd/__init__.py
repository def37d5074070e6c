"""DP-SGD with dynamic clipping thresholds chosen from noisy gradient-norm histograms."""

from .accountant import (
    InfeasibleBudgetError,
    PrivacyBudget,
    RdpCurve,
    auto_sigma_H,
    calibrate_sigma,
    compose,
    lt_tuning_cost,
    rdp_curve,
    rdp_sgm,
    rdp_to_dp,
    split_noise,
)
from .data import DataError, Dataset, gen_blobs, gen_norms, load_csv, save_csv
from .histogram import NormHistogram, build_histogram, total_count
from .models import MLP, LogisticRegression
from .strategy import (
    ClipState,
    ErrorEstimate,
    error_minimizing_threshold,
    expected_squared_error,
    percentile_threshold,
)
from .trainer import RunMetrics, TrainConfig, clip, dp_step, poisson_sample, train

__version__ = "0.1.0"
