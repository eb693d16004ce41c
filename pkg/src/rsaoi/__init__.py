"""Average age-of-information analysis and optimization for short-packet
rate-splitting downlinks: closed-form chain, Monte Carlo oracles, SDMA and
NOMA baselines, and a multi-start two-step successive convex approximation
optimizer."""

from .model import (SystemConfig, LinkBudget, ChannelState, PrecoderSet,
                    PowerAllocation, RateSplit, ConfigError,
                    NearSingularChannelError, validate_config,
                    doppler_correlation, evolve_channel, zf_precoders,
                    common_precoder, instantaneous_sinrs, load_config,
                    config_from_dict, uniform_allocation, uniform_split)
from .stats import GammaParams, DerivedStats, moment_match_sum, \
    gamma_approx_params, sinr_cdf
from .bler import (CodeParams, LinearApprox, BlerSet, normal_approx_bler,
                   linear_approx_params, piecewise_linear_bler, average_bler,
                   average_bler_set, code_params_from_split)
from .aoi import AaoiSet, aaoi_from_error_prob, analytic_aaoi, \
    analytic_aaoi_grid, UNBOUNDED_AGE
from .simulator import SimResult, AoiTrace, run_monte_carlo, slot_aoi_trace

__version__ = "0.1.0"
