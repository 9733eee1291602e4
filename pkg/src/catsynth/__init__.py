"""Partially synthetic categorical microdata with a truncated DP mixture of multinomials.

Submodules
----------
dataset     codebooks, coded datasets, CSV I/O, cross-tabulation
dpmpm       blocked Gibbs sampler and partial synthesis
statmodels  IRLS logistic regression and a bagged CART forest
utility     pMSE, cross-tab deviations, combining rules, interval overlap
risk        match risk, record linkage, CAP, classification risk
simulate    data from a known latent class model
pipeline    config-driven commands behind the ``catsynth`` CLI
"""

from .dataset import (CategoricalDataset, Codebook, DataValidationError, FrequencyTable,
                      VariableSpec, cross_tabulate, drop_incomplete, encode, load_csv,
                      write_csv, yrbs_codebook)
from .dpmpm import (DpmpmHyperparams, DpmpmState, PosteriorDraws, SyntheticReplicates,
                    generate_replicates, gibbs_sweep, init_state, load_draws, run_chain,
                    save_draws, synthesize_partial)

__version__ = "0.1.0"

__all__ = [
    "CategoricalDataset", "Codebook", "DataValidationError", "FrequencyTable", "VariableSpec",
    "cross_tabulate", "drop_incomplete", "encode", "load_csv", "write_csv", "yrbs_codebook",
    "DpmpmHyperparams", "DpmpmState", "PosteriorDraws", "SyntheticReplicates",
    "generate_replicates", "gibbs_sweep", "init_state", "load_draws", "run_chain", "save_draws",
    "synthesize_partial",
]
