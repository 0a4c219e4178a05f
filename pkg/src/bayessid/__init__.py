"""MIMO subspace system identification with a Gibbs-sampling Bayesian
estimator of the Markov-parameter matrix, a least-squares + truncated-SVD
baseline, and a Monte-Carlo experiment harness."""

from .bayes import (
    ChainConfig,
    ChainResult,
    GibbsState,
    PriorParams,
    geweke_zscore,
    init_chain,
    prior_density_log,
    run_chain,
    sample_wishart,
)
from .structops import BlockToeplitzLower, build_block_hankel, truncated_svd
from .subspace import (
    HankelDataset,
    WeightPair,
    assemble,
    default_weights,
    ls_markov,
    recover_system,
    row_length,
    weighted_truncate,
)
from .sysmodel import (
    StateSpaceModel,
    TimeSeries,
    extended_observability,
    markov_Hfp,
    predict_one_step,
    simulate,
    toeplitz_Gf,
    toeplitz_Hf,
)

__version__ = "0.1.0"

__all__ = [
    "BlockToeplitzLower",
    "ChainConfig",
    "ChainResult",
    "GibbsState",
    "HankelDataset",
    "PriorParams",
    "StateSpaceModel",
    "TimeSeries",
    "WeightPair",
    "assemble",
    "build_block_hankel",
    "default_weights",
    "extended_observability",
    "geweke_zscore",
    "init_chain",
    "ls_markov",
    "markov_Hfp",
    "predict_one_step",
    "prior_density_log",
    "recover_system",
    "row_length",
    "run_chain",
    "sample_wishart",
    "simulate",
    "toeplitz_Gf",
    "toeplitz_Hf",
    "truncated_svd",
    "weighted_truncate",
]
