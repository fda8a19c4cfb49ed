"""Longitudinal Bayesian causal forests for panel treatment-effect estimation.

The model decomposes panel outcomes into a baseline surface, per-wave growth
under control, and per-wave heterogeneous treatment effects, each carried by
its own regression-tree ensemble and jointly sampled by backfitting MCMC.
Compiled kernels are used when the extension is importable; the pure Python
fallback produces bit-identical chains.
"""

__version__ = "0.1.0"

from .data import (DataError, PanelData, Standardizer, from_frame, load_csv,
                   plausible_value_views, save_csv, to_frame)
from .sampler import (Draws, EstimationRefused, Hyperparams, fit, load_draws,
                      merge_chain_runs, predict, save_draws)
from .analysis import (ate_posterior, ate_report, central_interval,
                       growth_sd, pool_chains, summarize_effects,
                       variable_importance)
from .propensity import PropensityModel, estimate_propensity
from .simbench import (evaluate_metrics, gen_dgp1, gen_dgp2, run_benchmark)
from . import kernels

__all__ = [
    "__version__",
    "DataError", "PanelData", "Standardizer", "from_frame", "load_csv",
    "plausible_value_views", "save_csv", "to_frame",
    "Draws", "EstimationRefused", "Hyperparams", "fit", "load_draws",
    "merge_chain_runs", "predict", "save_draws",
    "ate_posterior", "ate_report", "central_interval", "growth_sd",
    "pool_chains", "summarize_effects", "variable_importance",
    "PropensityModel", "estimate_propensity",
    "evaluate_metrics", "gen_dgp1", "gen_dgp2", "run_benchmark",
    "kernels",
]
