"""Massive-MIMO uplink detection: LBL receiver, classical and Bayesian baselines, Monte-Carlo harness."""
from ._backend import BACKEND
from .baseline import (
    DetectorResult,
    GramCache,
    compute_gram,
    detect_ml,
    detect_mmse,
    detect_mrc,
    detect_pic_dsc,
    detect_zf,
)
from .ep import detect_ep
from .lbl import LblConfig, detect_lbl
from .txmodel import (
    Constellation,
    RngStream,
    build_constellation,
    demap_hard,
    modulate,
    sample_channel,
    snr_to_noise_variance,
    transmit,
)

__version__ = "0.1.0"
