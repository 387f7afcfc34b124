"""Grant-free MIMO-NOMA with differential modulation: simulator and detectors."""

from .errors import CapacityError, ParameterError
from .tx_waveform import (
    DpskAlphabet,
    SpreadingMatrix,
    build_spreading_matrix,
    differential_encode,
    dpsk_hard_demap,
    dpsk_map_bits,
    zc_sequence,
)
from .channel_sim import (
    draw_activity,
    draw_channel,
    snr_to_noise_variance,
    synthesize_pair,
)
from .sbl_detector import SblConfig, SupportEstimate, ThresholdPolicy, run_active_detection
from .noncoh_detector import DataConfig, run_data_detection
from .baselines import conventional_detect, lmmse_xbar, oracle_support
from .harness import RunConfig, sweep

__all__ = [
    "CapacityError", "ParameterError",
    "DpskAlphabet", "SpreadingMatrix", "build_spreading_matrix", "differential_encode",
    "dpsk_hard_demap", "dpsk_map_bits", "zc_sequence",
    "draw_activity", "draw_channel", "snr_to_noise_variance", "synthesize_pair",
    "SblConfig", "SupportEstimate", "ThresholdPolicy", "run_active_detection",
    "DataConfig", "run_data_detection",
    "conventional_detect", "lmmse_xbar", "oracle_support",
    "RunConfig", "sweep",
]

__version__ = "0.1.0"
