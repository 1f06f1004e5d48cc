"""Desk-scale lab for weight oscillations in quantization-aware training."""
from .autodiff import Tensor, backward, custom_op, grad
from .config import ConfigError, ExperimentConfig, load_config
from .nets import build_model, build_named_model, load_checkpoint, save_checkpoint
from .normstats import NormStats, bn_reestimate, gaussian_kl, kl_drift, kl_summary
from .optim import SGD, CosineSchedule, SgdState, schedule_value, sgd_step
from .oscillation import (
    DampenConfig,
    FreezeConfig,
    OscillationTracker,
    binary_optimize_oscillating,
    dampen_loss,
    freeze_step,
    oscillating_fraction,
    sample_oscillating,
    track_step,
)
from .quant import EstimatorKind, QuantizerState, fake_quantize, mse_range_init, quantize_forward
from .toylab import ToyProblem, closed_form_update, measure_frequency, simulate_trajectory

__version__ = "0.1.0"
