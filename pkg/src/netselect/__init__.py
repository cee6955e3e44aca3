"""Bayesian stochastic-search inference of sparse regulator-target networks.

A bipartite directed network between regulator variables X and target
variables Y is sampled by Metropolis-Hastings-within-Gibbs over binary
inclusion matrices, with sign-constrained regression coefficients integrated
out in closed form and external association scores entering through a
logistic prior whose weights are learned from the data.
"""

from .model import (ChainState, ExpressionData, Hyperparams, NetworkState,
                    ScoreSet, edge_prior_prob, log_prior_network, log_prior_tau,
                    normalize_scores)
from .likelihood import (MarginalWorkspace, SingularModelError, TDWorkspace,
                         log_marginal_td, log_marginal_ti, mvn_cdf_at_zero)
from .oracles import OracleResult, oracle_log_marginal
from .sampler import (Chain, ChainConfig, ChainTrace, MoveProposal,
                      initial_chain_state, mh_accept_network, pilot_tune,
                      propose_network_move, run_chain, update_sigma, update_tau)
from .inference import (CoefficientEstimates, InclusionProbs, OLSEstimates,
                        PosteriorSummary, bayesian_fdr, beta_posterior_mean,
                        chain_agreement, fdr_curve, inclusion_probs,
                        ols_estimates, r_squared, select_edges, summarize,
                        truncated_mvn_mean)
from .simulate import GroundTruth, SyntheticSpec, generate_synthetic
from .dataio import (ExclusionReport, IngestError, export_results,
                     ingest_expression, ingest_scores, write_expression,
                     write_scores)

__version__ = "0.1.0"

__all__ = [
    "ChainState", "ExpressionData", "Hyperparams", "NetworkState", "ScoreSet",
    "edge_prior_prob", "log_prior_network", "log_prior_tau", "normalize_scores",
    "MarginalWorkspace", "SingularModelError", "TDWorkspace",
    "log_marginal_td", "log_marginal_ti", "mvn_cdf_at_zero",
    "OracleResult", "oracle_log_marginal",
    "Chain", "ChainConfig", "ChainTrace", "MoveProposal", "initial_chain_state",
    "mh_accept_network", "pilot_tune", "propose_network_move", "run_chain",
    "update_sigma", "update_tau",
    "CoefficientEstimates", "InclusionProbs", "OLSEstimates", "PosteriorSummary",
    "bayesian_fdr", "beta_posterior_mean", "chain_agreement", "fdr_curve",
    "inclusion_probs", "ols_estimates", "r_squared", "select_edges", "summarize",
    "truncated_mvn_mean",
    "GroundTruth", "SyntheticSpec", "generate_synthetic",
    "ExclusionReport", "IngestError", "export_results", "ingest_expression",
    "ingest_scores", "write_expression", "write_scores",
    "__version__",
]
