"""Named scenarios and studies.

A study bundles one or more scenarios (a DGP, the methods to compare, the
train fraction and the propensity mode). ``variant`` narrows a study to one
scenario or one method, e.g. ``get_study("table4", variant="v")``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..errors import ConfigurationError
from .baselines import ForestPredictor, KnnT, OlsS, OlsT, SLearner, TLearner
from .dgp import DgpSpec
from .methods import BcfMethod, bcf_variants
from .runner import run_study

__all__ = [
    "Scenario",
    "Study",
    "get_study",
    "available_studies",
    "get_dgp",
    "available_dgps",
    "toy_sparse",
    "toy_sparse_p12",
    "toy_ric",
    "comparison",
    "targeted_selection",
    "dart_prediction",
    "high_dimensional",
    "sparse_family",
    "run_named_study",
]


def toy_sparse(N: int = 1000) -> DgpSpec:
    """Ten correlated normals, five relevant; effect moderated by X1 and X2."""
    return DgpSpec(
        name="toy_sparse", N=N, P=10,
        mu="3 + X1 + 0.8*sin(X2) + 0.7*X3*X4 - X5",
        tau="2 + 0.8*X1 - 0.3*X2**2",
        pi="Phi(-0.4 + 0.3*X1 + 0.2*X2)",
        law="gaussian", corr_base=0.6, noise=("abs", 1.0),
        description="effect quadratic in X2 (moderator index read as 2)",
    )


def toy_sparse_p12(N: int = 1000) -> DgpSpec:
    """Same surfaces with the quadratic moderator read literally as X12 (needs P >= 12)."""
    return toy_sparse(N).with_(
        name="toy_sparse_p12", P=12, tau="2 + 0.8*X1 - 0.3*X12**2",
        description="effect quadratic in X12, twelve covariates")


def toy_ric(N: int = 1000) -> DgpSpec:
    """Prognostic covariate X1 and moderator X2 are distinct; targets S/T-learner confusion."""
    return DgpSpec(
        name="toy_ric", N=N, P=5,
        mu="3 + X1", tau="0.5 + 0.5*X2**2", pi="Phi(-0.5 + 0.4*X1)",
        law="gaussian", corr_base=0.6, noise=("abs", 1.0),
    )


def comparison(P: int = 25, N: int = 1000) -> DgpSpec:
    """Copula covariates, 40% continuous; five relevant covariates among P (P >= 21)."""
    return DgpSpec(
        name=f"comparison_p{P}", N=N, P=P,
        mu="3 + 1.5*sin(PI*X1) + 0.5*(X2 - 0.5)**2 + 1.5*(2 - abs(X3)) + 1.5*X4*(X21 + 1)",
        tau="0.1 + abs(X1 - 1)*(X21 + 2)",
        pi="Phi(-0.5 + 0.2*X1 + 0.1*X2 + 0.4*X21 + U/10)",
        law="copula", corr_base=0.3, n_continuous=round(0.4 * P), noise=("mu_sd", 0.5),
    )


def targeted_selection(N: int = 500) -> DgpSpec:
    """Propensity is a function of the prognostic surface (strong confounding)."""
    return DgpSpec(
        name="targeted_selection", N=N, P=15,
        mu="5*(2 + 0.5*sin(PI*X1) - 0.25*X2**2 + 0.75*X3*X9)",
        tau="1 + 2*abs(X4) + X10",
        pi="0.9*logistic(1.2 + 0.2*mu)",
        law="copula", corr_base=0.6, n_continuous=5, noise=("tau_sd", 0.5),
    )


def dart_prediction(N: int = 500) -> DgpSpec:
    """Fifty copula covariates (half continuous), five relevant; pure prediction task."""
    return DgpSpec(
        name="dart_prediction", N=N, P=50,
        mu="5 + 5*sin(PI*X1) + 2.5*(X2 - 0.5)**2 + 1.5*abs(X3) + 2*X4*(X20 + 1)",
        tau="0", pi="0.5",
        law="copula", corr_base=0.3, n_continuous=25, noise=("abs", 1.0),
    )


def high_dimensional(P: int, N: int = 250) -> DgpSpec:
    """The comparison surfaces with the binary moderator moved to X_ceil(P/2)."""
    h = math.ceil(P / 2)
    return DgpSpec(
        name=f"high_dim_p{P}", N=N, P=P,
        mu=f"3 + 1.5*sin(PI*X1) + 0.5*(X2 - 0.5)**2 + 1.5*(2 - abs(X3)) + X4*(X{h} + 1)",
        tau=f"0.1 + abs(X1 - 1)*(X{h} + 2)",
        pi=f"Phi(-0.5 + 0.2*X1 + 0.1*X2 + 0.4*X{h} + 0.1*U)",
        law="copula", corr_base=0.3, n_continuous=round(0.4 * P), noise=("mu_sd", 0.5),
    )


_SPARSE = {
    "none": {},
    "pi": {"pi": "Phi(-0.2 + 0.8*X1 + 0.1*U)"},
    "mu": {"mu": "3 + 1.5*(2 - abs(X3))"},
    "tau": {"tau": "0.1 + abs(X1 - 1)"},
}


def sparse_family(kind: str = "none", N: int = 500) -> DgpSpec:
    """Five copula covariates; ``kind`` picks which surface (if any) is sparse."""
    if kind not in _SPARSE:
        raise ConfigurationError(f"unknown sparsity kind {kind!r}; choose from {sorted(_SPARSE)}")
    base = dict(
        mu="3 + 1.5*sin(PI*X1) + 0.5*(X2 - 0.5)**2 + 1.5*(2 - abs(X3)) + 1.5*X4*(X5 + 1)",
        tau="0.1 + abs(X1 - 1)*(X5 + 2) - 0.4*X3 + 0.6*X2*X4",
        pi="Phi(-0.2 + 0.8*X1 - 0.1*X2 + 0.1*X3*X4 - 0.4*X5 + 0.1*U)",
    )
    base.update(_SPARSE[kind])
    return DgpSpec(name=f"sparse_{kind}", N=N, P=5, law="copula", corr_base=0.3,
                   n_continuous=2, noise=("abs", 1.0), **base)


_DGPS = {
    "toy_sparse": toy_sparse,
    "toy_sparse_p12": toy_sparse_p12,
    "toy_ric": toy_ric,
    "comparison_p25": lambda: comparison(25),
    "comparison_p50": lambda: comparison(50),
    "targeted_selection": targeted_selection,
    "dart_prediction": dart_prediction,
    **{f"high_dim_p{P}": (lambda P=P: high_dimensional(P)) for P in (5, 10, 50, 100, 150)},
    **{f"sparse_{k}": (lambda k=k: sparse_family(k)) for k in _SPARSE},
}


def available_dgps() -> list[str]:
    return sorted(_DGPS)


def get_dgp(name: str) -> DgpSpec:
    try:
        return _DGPS[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown scenario {name!r}; available: {', '.join(available_dgps())}") from None


@dataclass
class Scenario:
    label: str
    dgp: DgpSpec
    methods: list
    train_frac: float = 0.7
    propensity: str = "estimate"


@dataclass
class Study:
    name: str
    description: str
    scenarios: list[Scenario]
    default_reps: int
    variants: dict = field(default_factory=dict)  # key -> (scenario labels, method names)

    def select(self, variant: str | None) -> list[Scenario]:
        if variant is None:
            return self.scenarios
        if variant not in self.variants:
            raise ConfigurationError(
                f"study {self.name!r} has no variant {variant!r}; "
                f"available: {', '.join(self.variants) or 'none'}")
        labels, method_names = self.variants[variant]
        out = []
        for sc in self.scenarios:
            if labels is not None and sc.label not in labels:
                continue
            methods = [m for m in sc.methods if method_names is None or m.name in method_names]
            out.append(Scenario(sc.label, sc.dgp, methods, sc.train_frac, sc.propensity))
        return out


def _bcf_pair(n_iter, n_burn):
    return [BcfMethod("BCF", shrink=False, n_iter=n_iter, n_burn=n_burn),
            BcfMethod("SH-BCF", n_iter=n_iter, n_burn=n_burn)]


def _table1(n_iter, n_burn):
    return Study("table1", "sparse toy DGP, in-sample effect metrics",
                 [Scenario("toy_sparse", toy_sparse(), _bcf_pair(n_iter, n_burn), 1.0)], 50)


def _table1_p12(n_iter, n_burn):
    return Study("table1_p12", "sparse toy DGP with the moderator read as X12",
                 [Scenario("toy_sparse_p12", toy_sparse_p12(), _bcf_pair(n_iter, n_burn), 1.0)],
                 50)


def _table2(n_iter, n_burn):
    kw = dict(n_iter=n_iter, n_burn=n_burn)
    methods = [SLearner("dart", **kw), TLearner("dart", **kw), BcfMethod("SH-BCF", **kw)]
    return Study("table2", "posterior splitting probabilities on the prognostic/moderator toy",
                 [Scenario("toy_ric", toy_ric(), methods, 1.0)], 10)


def _table3(n_iter, n_burn):
    kw = dict(n_iter=n_iter, n_burn=n_burn)

    def methods():
        return [OlsS(), OlsT(), KnnT(10), SLearner("bart", **kw), TLearner("bart", **kw),
                SLearner("dart", **kw), TLearner("dart", **kw), *_bcf_pair(n_iter, n_burn)]

    scen = [Scenario(f"p{P}", comparison(P), methods()) for P in (25, 50)]
    variants = {"p25": (["p25"], None), "p50": (["p50"], None),
                "core": (None, ["S-OLS", "BCF", "SH-BCF"])}
    return Study("table3", "comparison with meta-learners, P = 25 and 50", scen, 50, variants)


def _table4(n_iter, n_burn, propensity="estimate", name="table4", reps=50):
    v = bcf_variants(n_iter, n_burn)
    variants = {k: (None, [m.name]) for k, m in v.items()}
    return Study(name, "targeted selection, five causal-forest variants",
                 [Scenario("targeted_selection", targeted_selection(), list(v.values()), 1.0,
                           propensity=propensity)], reps, variants)


def _a1(n_iter, n_burn):
    return _table4(n_iter, n_burn, propensity="true", name="a1", reps=25)


def _a2(n_iter, n_burn):
    # the prediction study has its own chain lengths (6000 sweeps, 4000 burn-in)
    methods = [ForestPredictor("bart"), ForestPredictor("dart"),
               ForestPredictor("bart", 60000, 40000, label="long BART")]
    variants = {"short": (None, ["BART", "DART"])}
    return Study("a2", "DART versus BART on a sparse prediction task",
                 [Scenario("dart_prediction", dart_prediction(), methods)], 50, variants)


def _a3(n_iter, n_burn):
    scen = [Scenario(f"p{P}", high_dimensional(P), _bcf_pair(n_iter, n_burn))
            for P in (5, 10, 50, 100, 150)]
    variants = {f"p{P}": ([f"p{P}"], None) for P in (5, 10, 50, 100, 150)}
    variants["core"] = (["p5", "p50", "p150"], None)
    return Study("a3", "growing number of nuisance covariates", scen, 25, variants)


def _a4(n_iter, n_burn):
    scen = [Scenario(k, sparse_family(k), _bcf_pair(n_iter, n_burn)) for k in _SPARSE]
    variants = {k: ([k], None) for k in _SPARSE}
    return Study("a4", "which surface is sparse", scen, 25, variants)


_STUDIES = {
    "table1": _table1,
    "table1_p12": _table1_p12,
    "table2": _table2,
    "table3": _table3,
    "table4": _table4,
    "a1": _a1,
    "a2": _a2,
    "a3": _a3,
    "a4": _a4,
}


def available_studies() -> list[str]:
    return list(_STUDIES)


def get_study(name: str, n_iter: int = 4000, n_burn: int = 2000) -> Study:
    try:
        build = _STUDIES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown study {name!r}; available: {', '.join(available_studies())}") from None
    return build(n_iter, n_burn)


def run_named_study(name: str, reps: int | None = None, *, seed: int = 0,
                    workers: int | None = None, variant: str | None = None,
                    n_iter: int = 4000, n_burn: int = 2000, progress=None) -> dict:
    """Run every scenario of a named study; returns ``{scenario label: MetricsReport}``."""
    study = get_study(name, n_iter, n_burn)
    H = study.default_reps if reps is None else reps
    reports = {}
    for sc in study.select(variant):
        if not sc.methods:
            continue
        reports[sc.label] = run_study(sc.dgp, sc.methods, H, sc.train_frac, seed=seed,
                                      workers=workers, propensity=sc.propensity,
                                      study=f"{name}:{sc.label}", progress=progress)
    return reports
