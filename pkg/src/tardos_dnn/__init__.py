"""q-ary Tardos fingerprinting for black-box DNN traitor tracing.

Codebook generation, SPRT-based sequential accusation, a simulated collusion
channel, a white-box orthogonal-fingerprint simulator and a Monte Carlo
experiment harness.
"""

__version__ = "0.1.0"

from .codebook import (
    Codebook,
    TardosParams,
    derive_tau,
    generate_codebook,
    load_codebook,
    sample_bias_vector,
    save_codebook,
)
from .accusation import (
    ScoreDistributions,
    SprtConfig,
    SprtState,
    baseline_independent_fpr,
    baseline_min_queries,
    estimate_score_distributions,
    position_score,
    score_functions,
    sequential_accuse,
    sprt_step,
    z_threshold,
)
from .channel import ChannelSpec, PRESETS, channel_output, make_oracle, measure_ma_violation_rate

__all__ = [
    "Codebook",
    "TardosParams",
    "derive_tau",
    "generate_codebook",
    "load_codebook",
    "sample_bias_vector",
    "save_codebook",
    "ScoreDistributions",
    "SprtConfig",
    "SprtState",
    "baseline_independent_fpr",
    "baseline_min_queries",
    "estimate_score_distributions",
    "position_score",
    "score_functions",
    "sequential_accuse",
    "sprt_step",
    "z_threshold",
    "ChannelSpec",
    "PRESETS",
    "channel_output",
    "make_oracle",
    "measure_ma_violation_rate",
]
