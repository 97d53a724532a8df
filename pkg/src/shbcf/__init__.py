"""Shrinkage Bayesian Causal Forests for heterogeneous treatment effects."""

from .bart import BartConfig, fit_bart, fit_probit_bart
from .bcf import (
    Dataset,
    ShBcfConfig,
    ShBcfPosterior,
    ate_estimate,
    cate_summary,
    estimate_propensity,
    fit_default_bcf,
    fit_shbcf,
)
from .errors import (
    ConfigurationError,
    DegenerateDataError,
    InputError,
    MissingPropensityError,
    ShbcfError,
)
from .posthoc import SubgroupTree, fit_subgroup_tree, render_tree
from .shrinkage import ShrinkConfig, SplitProbState, init_split_state

__version__ = "0.1.0"
