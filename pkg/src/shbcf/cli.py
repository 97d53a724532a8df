"""Command-line entry points: ``fit``, ``simulate``, ``subgroup`` and ``propensity``.

Every option can also come from a JSON file passed with ``--config``; keys
are the option names with underscores (``n_iter``, ``k_ps``, ...) and flags
given on the command line override the file. Failures print one line
``ErrorClass: message`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bart import probit_config
from .bcf import (
    MU_DEFAULTS,
    TAU_DEFAULTS,
    Dataset,
    ShBcfConfig,
    ate_estimate,
    cate_summary,
    estimate_propensity,
    fit_shbcf,
)
from .errors import ConfigurationError, InputError, ShbcfError
from .posthoc import fit_subgroup_tree, render_tree, write_node_table
from .shrinkage import ShrinkConfig

__all__ = [
    "Roles",
    "RunConfig",
    "load_csv",
    "write_csv",
    "read_table",
    "binary_columns",
    "write_posterior",
    "build_parser",
    "main",
]

MISSING = frozenset({"", "na", "nan", "null", "none", "."})

# chain lengths when the flags and the config file are silent
_CHAIN_DEFAULTS = {"fit": (15000, 10000), "simulate": (4000, 2000), "propensity": (2000, 1000)}


@dataclass
class Roles:
    """Which CSV columns play which part; ``covariates=None`` means all remaining columns."""

    outcome: str | None = None
    treatment: str | None = None
    propensity: str | None = None
    covariates: list[str] | None = None


def read_table(path) -> tuple[list[str], list[list[str]], list[int]]:
    """Header, raw cells and file line numbers of a UTF-8 CSV; ragged rows are an error."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise InputError(f"{path}: empty file, a header row is required") from None
            rows, lines = [], []
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise InputError(f"{path}: line {reader.line_num} has {len(row)} fields, "
                                     f"header has {len(header)}")
                rows.append(row)
                lines.append(reader.line_num)
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    if len(set(header)) != len(header):
        raise InputError(f"{path}: duplicate column names in header")
    return header, rows, lines


def _parse(rows, lines, j, name, *, allow_missing=False):
    """Column ``j`` as floats; missing cells become NaN only when allowed."""
    out = np.empty(len(rows))
    for i, (row, line) in enumerate(zip(rows, lines)):
        cell = row[j].strip()
        if cell.lower() in MISSING:
            if not allow_missing:
                raise InputError(f"line {line}, column {name!r}: missing value")
            out[i] = math.nan
            continue
        try:
            out[i] = float(cell)
        except ValueError:
            raise InputError(f"line {line}, column {name!r}: non-numeric value {cell!r}") from None
        if not math.isfinite(out[i]):
            raise InputError(f"line {line}, column {name!r}: non-finite value {cell!r}")
    return out


def _index(header, name, path):
    try:
        return header.index(name)
    except ValueError:
        raise InputError(f"{path}: no column {name!r}; columns are {', '.join(header)}") from None


def binary_columns(X) -> list[int]:
    """Indices of the columns whose values all lie in {0, 1}."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return [j for j in range(X.shape[1]) if np.all((X[:, j] == 0) | (X[:, j] == 1))]


def load_csv(path, roles: Roles) -> Dataset:
    """Read a dataset whose columns are assigned by ``roles``.

    Rows with a missing outcome are dropped with a warning that reports the
    count. Any other missing or non-numeric cell is an error naming its line
    and column, as is a treatment column with values outside {0, 1}.
    """
    if roles.outcome is None or roles.treatment is None:
        raise ConfigurationError("outcome and treatment columns must be named")
    header, rows, lines = read_table(path)
    iy = _index(header, roles.outcome, path)
    iz = _index(header, roles.treatment, path)
    ip = None if roles.propensity is None else _index(header, roles.propensity, path)
    taken = {roles.outcome, roles.treatment, roles.propensity}
    names = ([h for h in header if h not in taken] if roles.covariates is None
             else list(roles.covariates))
    if not names:
        raise InputError(f"{path}: no covariate columns")
    cols = [_index(header, h, path) for h in names]

    y = _parse(rows, lines, iy, roles.outcome, allow_missing=True)
    keep = ~np.isnan(y)
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"dropped {dropped} row(s) with missing outcome {roles.outcome!r}; "
                      f"{int(keep.sum())} remain", UserWarning, stacklevel=2)
    rows = [r for r, k in zip(rows, keep) if k]
    lines = [n for n, k in zip(lines, keep) if k]
    if not rows:
        raise InputError(f"{path}: no rows with an observed outcome")
    z = _parse(rows, lines, iz, roles.treatment)
    bad = np.flatnonzero((z != 0) & (z != 1))
    if bad.size:
        raise InputError(f"column {roles.treatment!r} must be 0/1; "
                         f"found {z[bad[0]]:g} ({bad.size} non-binary value(s))")
    X = np.column_stack([_parse(rows, lines, j, h) for j, h in zip(cols, names)])
    pi = None if ip is None else _parse(rows, lines, ip, roles.propensity)
    return Dataset(X, z, y[keep], pi, names)


def write_csv(data: Dataset, path, roles: Roles | None = None) -> Roles:
    """Write ``data`` so that ``load_csv(path, returned roles)`` reproduces it exactly."""
    roles = roles or Roles("y", "z", "pi_hat" if data.pi_hat is not None else None)
    header = [roles.outcome, roles.treatment]
    cols = [data.Y, data.Z]
    if data.pi_hat is not None:
        if roles.propensity is None:
            raise ConfigurationError("dataset carries pi_hat but no propensity column is named")
        header.append(roles.propensity)
        cols.append(data.pi_hat)
    header += list(data.names)
    if len(set(header)) != len(header):
        raise ConfigurationError(f"column names collide: {header}")
    table = np.column_stack(cols + [data.X])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
    return Roles(roles.outcome, roles.treatment,
                 roles.propensity if data.pi_hat is not None else None, list(data.names))


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    """Resolved settings of one command (defaults, then JSON file, then flags)."""

    command: str
    data: str | None = None
    out: str | None = None
    outcome: str | None = None
    treatment: str | None = None
    propensity: str | None = None
    covariates: list[str] | None = None
    moderators: list[str] | None = None
    seed: int = 0
    workers: int | None = None
    n_iter: int | None = None
    n_burn: int | None = None
    k_ps: float = 1.0
    use_propensity_covariate: bool = True
    shrinkage: bool = True
    level: float = 0.95
    m_mu: int | None = None
    m_tau: int | None = None
    mu_config: dict = field(default_factory=dict)
    tau_config: dict = field(default_factory=dict)
    mu_shrink: dict | None = field(default_factory=dict)
    tau_shrink: dict | None = field(default_factory=dict)
    study: str | None = None
    dgp: dict | None = None
    reps: int | None = None
    variant: str | None = None
    tau_column: str = "tau_mean"
    exclude: list[str] = field(default_factory=list)
    max_depth: int = 4
    min_node: int = 20

    @classmethod
    def resolve(cls, command: str, file_values: dict, flag_values: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)} - {"command"}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            cfg = cls(command, **{**file_values, **flag_values})
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
        default = _CHAIN_DEFAULTS.get(command)
        if default:
            if cfg.n_iter is None:
                cfg.n_iter = default[0]
            if cfg.n_burn is None:
                # a custom chain length without a burn-in keeps the first half
                cfg.n_burn = default[1] if cfg.n_iter == default[0] else cfg.n_iter // 2
        for key in ("covariates", "moderators", "exclude"):
            val = getattr(cfg, key)
            if isinstance(val, str):
                setattr(cfg, key, _split_names(val))
        if cfg.workers is None and os.environ.get("SHBCF_WORKERS"):
            cfg.workers = int(os.environ["SHBCF_WORKERS"])
        return cfg

    def roles(self) -> Roles:
        return Roles(self.outcome, self.treatment, self.propensity, self.covariates)

    def bcf_config(self, names: list[str]) -> ShBcfConfig:
        try:
            return self._bcf_config(names)
        except TypeError as exc:
            raise ConfigurationError(f"bad forest or shrinkage setting: {exc}") from None

    def _bcf_config(self, names):
        mu = dataclasses.replace(MU_DEFAULTS, **self.mu_config)
        tau = dataclasses.replace(TAU_DEFAULTS, **self.tau_config)
        if self.m_mu is not None:
            mu = dataclasses.replace(mu, m=self.m_mu)
        if self.m_tau is not None:
            tau = dataclasses.replace(tau, m=self.m_tau)
        mu_shrink = tau_shrink = None
        if self.shrinkage:
            mu_shrink = None if self.mu_shrink is None else ShrinkConfig(**self.mu_shrink)
            tau_shrink = None if self.tau_shrink is None else ShrinkConfig(**self.tau_shrink)
        tau_columns = None
        if self.moderators is not None:
            missing = [m for m in self.moderators if m not in names]
            if missing:
                raise InputError(f"moderator(s) {', '.join(missing)} are not covariates")
            tau_columns = tuple(names.index(m) for m in self.moderators)
        return ShBcfConfig(mu, tau, mu_shrink, tau_shrink, self.use_propensity_covariate,
                           float(self.k_ps), int(self.n_iter), int(self.n_burn),
                           tau_columns=tau_columns)

    def out_dir(self) -> Path:
        if not self.out:
            raise ConfigurationError("an output location (--out) is required")
        out = Path(self.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigurationError(f"cannot create output directory {out}: {exc.strerror}") \
                from None
        if not os.access(out, os.W_OK):
            raise ConfigurationError(f"output directory {out} is not writable")
        return out


def _split_names(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(values, dict):
        raise ConfigurationError(f"{path}: the config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in values.items()}


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------- outputs


def write_posterior(post, path, unit_ids=None) -> Path:
    """Long-format draws: ``draw, unit_or_covariate, quantity, value``.

    Quantities are ``tau`` (one row per unit), ``s_mu`` and ``s_tau`` (one
    row per covariate) and ``sigma`` (``unit_or_covariate`` left empty).
    """
    path = Path(path)
    units = [str(u) for u in (range(post.tau_fit.shape[1]) if unit_ids is None else unit_ids)]
    with path.open("w", encoding="utf-8") as fh:
        fh.write("draw,unit_or_covariate,quantity,value\n")
        for b in range(post.n_draws):
            fh.write("".join(f"{b},{u},tau,{v!r}\n" for u, v in zip(units, post.tau_fit[b].tolist())))
            fh.write("".join(f"{b},{c},s_mu,{v!r}\n"
                             for c, v in zip(post.mu_names, post.s_mu[b].tolist())))
            fh.write("".join(f"{b},{c},s_tau,{v!r}\n"
                             for c, v in zip(post.tau_names, post.s_tau[b].tolist())))
            fh.write(f"{b},,sigma,{float(post.sigma[b])!r}\n")
    return path


def _summary_rows(post, level: float):
    draws = post.tau_fit
    ate_draws = draws.mean(axis=1)
    lo, hi = np.quantile(ate_draws, [(1 - level) / 2, (1 + level) / 2])
    rows = [("ATE", "", ate_estimate(post)),
            ("ATE_lower", "", float(lo)),
            ("ATE_upper", "", float(hi)),
            ("CATE_sd", "", float(draws.std(axis=1, ddof=1).mean())),
            ("sigma", "", float(post.sigma.mean()))]
    rows += [("s_mu", c, float(v)) for c, v in zip(post.mu_names, post.s_mu.mean(axis=0))]
    rows += [("s_tau", c, float(v)) for c, v in zip(post.tau_names, post.s_tau.mean(axis=0))]
    return rows


def _write_rows(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands


def _say(msg=""):
    print(msg, flush=True)


def cmd_fit(cfg: RunConfig) -> int:
    if not cfg.data:
        raise ConfigurationError("--data is required")
    out = cfg.out_dir()
    data = load_csv(cfg.data, cfg.roles())
    bcf_cfg = cfg.bcf_config(data.names)
    binary = [data.names[j] for j in binary_columns(data.X)]
    if binary:
        _say(f"binary covariates: {', '.join(binary)}")
    ps_seed, fit_seed = _child_seeds(cfg.seed, 2)
    if data.pi_hat is None and bcf_cfg.use_propensity_covariate:
        _say(f"estimating propensity scores (probit forest, {data.n} units)")
        data.pi_hat = np.clip(estimate_propensity(data.X, data.Z, seed=ps_seed), 1e-6, 1 - 1e-6)
    _say(f"fitting {data.n} units x {data.p} covariates, {bcf_cfg.n_iter} iterations "
         f"({bcf_cfg.n_burn} burn-in)")
    post = fit_shbcf(data, bcf_cfg, seed=fit_seed)

    write_posterior(post, out / "posterior.csv")
    mean, lo, hi = cate_summary(post, cfg.level)
    cate_rows = []
    for i in range(data.n):
        row = [i, repr(float(mean[i])), repr(float(lo[i])), repr(float(hi[i]))]
        row.append("" if data.pi_hat is None else repr(float(data.pi_hat[i])))
        row += [repr(float(v)) for v in data.X[i]]
        cate_rows.append(row)
    _write_rows(out / "cate.csv", ["unit", "tau_mean", "tau_lower", "tau_upper", "pi_hat",
                                   *data.names], cate_rows)
    summary = _summary_rows(post, cfg.level)
    _write_rows(out / "summary.csv", ["quantity", "covariate", "value"],
                [(q, c, repr(v)) for q, c, v in summary])
    resolved = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "command"}
    (out / "run_config.json").write_text(json.dumps(resolved, indent=2) + "\n")

    head = {q: v for q, c, v in summary if not c}
    _say(f"ATE {head['ATE']:.4f}  [{head['ATE_lower']:.4f}, {head['ATE_upper']:.4f}]  "
         f"CATE sd {head['CATE_sd']:.4f}  sigma {head['sigma']:.4f}")
    for forest in ("s_mu", "s_tau"):
        top = sorted(((v, c) for q, c, v in summary if q == forest), reverse=True)[:5]
        _say(f"{forest}: " + ", ".join(f"{c} {v:.3f}" for v, c in top))
    _say(f"wrote {out}")
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    from .simlab import BcfMethod, DgpSpec, run_named_study, run_study

    out = cfg.out_dir()
    if (cfg.study is None) == (cfg.dgp is None):
        raise ConfigurationError("give exactly one of --study NAME or --dgp FILE")

    def progress(r):
        print(f"  replication {r.rep + 1} done", file=sys.stderr, flush=True)

    if cfg.study is not None:
        reports = run_named_study(cfg.study, cfg.reps, seed=cfg.seed, workers=cfg.workers,
                                  variant=cfg.variant, n_iter=cfg.n_iter, n_burn=cfg.n_burn,
                                  progress=progress)
        tag = cfg.study if cfg.variant is None else f"{cfg.study}_{cfg.variant}"
    else:
        spec = dict(cfg.dgp)
        if "noise" in spec:
            spec["noise"] = tuple(spec["noise"])
        try:
            dgp = DgpSpec(**spec)
        except TypeError as exc:
            raise ConfigurationError(f"bad DGP definition: {exc}") from None
        methods = [BcfMethod("BCF", shrink=False, n_iter=cfg.n_iter, n_burn=cfg.n_burn),
                   BcfMethod("SH-BCF", n_iter=cfg.n_iter, n_burn=cfg.n_burn)]
        reports = {dgp.name: run_study(dgp, methods, cfg.reps or 10, seed=cfg.seed,
                                       workers=cfg.workers, study=dgp.name, progress=progress)}
        tag = dgp.name
    for label, rep in reports.items():
        rep.to_csv(out / f"{tag}_{label}.csv")
        rep.split_probs_to_csv(out / f"{tag}_{label}_split_probs.csv")
        _say(rep.format_table())
    _say(f"wrote {out}")
    return 0


_FIT_COLUMNS = {"unit", "tau_lower", "tau_upper", "pi_hat"}


def cmd_subgroup(cfg: RunConfig) -> int:
    if not cfg.data:
        raise ConfigurationError("--data is required")
    header, rows, lines = read_table(cfg.data)
    it = _index(header, cfg.tau_column, cfg.data)
    skip = {cfg.tau_column, *cfg.exclude} | (_FIT_COLUMNS & set(header))
    names = cfg.covariates or [h for h in header if h not in skip]
    if not names:
        raise InputError(f"{cfg.data}: no covariate columns")
    tau = _parse(rows, lines, it, cfg.tau_column)
    X = np.column_stack([_parse(rows, lines, _index(header, h, cfg.data), h) for h in names])
    tree = fit_subgroup_tree(X, tau, cfg.max_depth, cfg.min_node, names=names)
    text = render_tree(tree)
    _say(text)
    if cfg.out:
        out = cfg.out_dir()
        (out / "subgroups.txt").write_text(text + "\n")
        write_node_table(tree, out / "subgroups.csv")
    return 0


def cmd_propensity(cfg: RunConfig) -> int:
    if not cfg.data or not cfg.treatment:
        raise ConfigurationError("--data and --treatment are required")
    if not cfg.out:
        raise ConfigurationError("--out FILE is required")
    header, rows, lines = read_table(cfg.data)
    iz = _index(header, cfg.treatment, cfg.data)
    skip = {cfg.treatment, cfg.outcome, *cfg.exclude}
    names = cfg.covariates or [h for h in header if h not in skip]
    z = _parse(rows, lines, iz, cfg.treatment)
    if np.any((z != 0) & (z != 1)):
        raise InputError(f"column {cfg.treatment!r} must be 0/1")
    X = np.column_stack([_parse(rows, lines, _index(header, h, cfg.data), h) for h in names])
    conf = probit_config(n_iter=int(cfg.n_iter), n_burn=int(cfg.n_burn))
    if cfg.mu_config:
        conf = dataclasses.replace(conf, **cfg.mu_config)
    pi = np.clip(estimate_propensity(X, z, conf, seed=_child_seeds(cfg.seed, 1)[0]),
                 1e-6, 1 - 1e-6)
    col = cfg.propensity or "pi_hat"
    if col in header:
        raise InputError(f"{cfg.data} already has a column {col!r}")
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_rows(out, header + [col], [r + [repr(float(p))] for r, p in zip(rows, pi)])
    _say(f"propensity range [{pi.min():.4f}, {pi.max():.4f}], wrote {out}")
    return 0


_COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "subgroup": cmd_subgroup,
             "propensity": cmd_propensity}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shbcf", description="Shrinkage Bayesian causal forests and the simulation lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS  # unset flags stay out of the namespace, so the config file shows through

    def common(p):
        p.add_argument("--config", help="JSON file of option values; flags override it")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--out", default=S, help="output directory (a file for `propensity`)")

    def columns(p):
        p.add_argument("--data", default=S, help="input CSV with a header row")
        p.add_argument("--outcome", default=S)
        p.add_argument("--treatment", default=S)
        p.add_argument("--covariates", default=S, help="comma-separated; default all others")

    def chain(p):
        p.add_argument("--n-iter", dest="n_iter", type=int, default=S)
        p.add_argument("--n-burn", dest="n_burn", type=int, default=S)

    p = sub.add_parser("fit", help="fit a causal forest to a CSV and write posterior draws")
    common(p), columns(p), chain(p)
    p.add_argument("--propensity", default=S, help="column holding known propensity scores")
    p.add_argument("--moderators", default=S, help="comma-separated effect covariates")
    p.add_argument("--no-propensity-covariate", dest="use_propensity_covariate",
                   action="store_false", default=S)
    p.add_argument("--no-shrinkage", dest="shrinkage", action="store_false", default=S,
                   help="uniform splitting probabilities (plain causal forest)")
    p.add_argument("--k-ps", dest="k_ps", type=float, default=S,
                   help="prior weight of the propensity covariate")
    p.add_argument("--m-mu", dest="m_mu", type=int, default=S)
    p.add_argument("--m-tau", dest="m_tau", type=int, default=S)
    p.add_argument("--level", type=float, default=S)

    p = sub.add_parser("simulate", help="run a named or file-defined simulation study")
    common(p), chain(p)
    p.add_argument("--study", default=S)
    p.add_argument("--dgp", default=S, help="JSON file with a DGP definition")
    p.add_argument("--reps", type=int, default=S)
    p.add_argument("--variant", default=S)
    p.add_argument("--workers", type=int, default=S,
                   help="parallel replications (default: SHBCF_WORKERS or 1)")

    p = sub.add_parser("subgroup", help="summarize effect estimates with a shallow tree")
    common(p)
    p.add_argument("--data", default=S, help="CSV with effect estimates, e.g. fit's cate.csv")
    p.add_argument("--tau-column", dest="tau_column", default=S)
    p.add_argument("--covariates", default=S)
    p.add_argument("--exclude", default=S, help="comma-separated columns to leave out")
    p.add_argument("--max-depth", dest="max_depth", type=int, default=S)
    p.add_argument("--min-node", dest="min_node", type=int, default=S)

    p = sub.add_parser("propensity", help="append probit-forest propensity scores to a CSV")
    common(p), columns(p), chain(p)
    p.add_argument("--propensity", default=S, help="name of the new column (default pi_hat)")
    p.add_argument("--exclude", default=S)
    return parser


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    previous = warnings.showwarning
    warnings.showwarning = _show_warning
    try:
        file_values = _read_config(config_path)
        for source in (file_values, args):
            if command == "simulate" and isinstance(source.get("dgp"), str):
                source["dgp"] = _read_config(source["dgp"])
        cfg = RunConfig.resolve(command, file_values, args)
        return _COMMANDS[command](cfg)
    except (ShbcfError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"{type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1
    finally:
        warnings.showwarning = previous


if __name__ == "__main__":
    raise SystemExit(main())
