"""Simulation lab: data-generating processes, baselines, metrics and the replication runner."""

from .baselines import ForestPredictor, KnnT, OlsS, OlsT, SLearner, TLearner, knn_t, ols_s, ols_t, \
    s_learner, t_learner
from .dgp import DgpSpec, Expression, SimulatedData, correlation_matrix, generate
from .methods import BcfMethod, MethodOutput, Problem, bcf_variants
from .metrics import MetricsReport, bias_and_coverage, mc_interval, rmse, rpehe
from .runner import ReplicationResult, default_workers, run_study, stream
from .studies import Scenario, Study, available_dgps, available_studies, get_dgp, get_study, \
    run_named_study

__all__ = [
    "DgpSpec", "Expression", "SimulatedData", "correlation_matrix", "generate",
    "MetricsReport", "bias_and_coverage", "mc_interval", "rmse", "rpehe",
    "Problem", "MethodOutput", "BcfMethod", "bcf_variants",
    "SLearner", "TLearner", "OlsS", "OlsT", "KnnT", "ForestPredictor",
    "s_learner", "t_learner", "ols_s", "ols_t", "knn_t",
    "run_study", "stream", "default_workers", "ReplicationResult",
    "Scenario", "Study", "get_study", "available_studies", "get_dgp", "available_dgps",
    "run_named_study",
]
