"""Command-line front end: config parsing, CSV ingestion, table emission.

Configuration files are INI-style (sections of key = value); all tabular
input and output is CSV.  Commands: fit, simulate, bootstrap, lambda-path.
Exit codes: 0 success, 2 configuration/data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .correlation import CorrelationStructure, basis_matrices
from .errors import (
    CampaignError,
    ConfigError,
    ContractError,
    DataError,
    NumericDomainError,
    SingularMatrixError,
    SurveyQifError,
)
from .model import ClusterRecord, MarginalModel
from .penalized import (
    BootstrapPlan,
    PenalizedFitConfig,
    bootstrap_variance,
    fit_penalized,
    lambda_path,
    sandwich_variance,
    select_lambda,
)
from .qif import FitResult, SurveySample, fit_qif
from .simulate import ALL_METHODS, CampaignConfig, PopulationConfig, SimulationReport, run_campaign

_DEFAULT_BETA0 = "0.8,-0.7,-0.6,0,0,0,0,0,0,0"

# section -> key -> (parser, default)  (defaults as strings, None = required/absent)
_SCHEMA = {
    "run": {"seed": ("int", None)},
    "model": {
        "correlation": ("choice:exchangeable,ar1,independence", "exchangeable"),
        "population_size": ("int", None),
    },
    "penalty": {
        "a": ("float", "3.7"),
        "zero_threshold": ("float", "0.001"),
        "lambda": ("lambda", "wbic"),
    },
    "grid": {"size": ("int", "25"), "ratio": ("float", "100")},
    "bootstrap": {"replicates": ("int", "200")},
    "simulation": {
        "population_size": ("int", "10000"),
        "cluster_size": ("int", "5"),
        "covariates": ("int", "10"),
        "beta0": ("floats", _DEFAULT_BETA0),
        "alpha": ("float", "0.4"),
        "covariate_min": ("float", "0.0"),
        "covariate_max": ("float", "0.8"),
        "sample_size": ("int", "300"),
        "replicates": ("int", "200"),
        "methods": ("words", "unwgt,pqif,pgee,oracle"),
        "correlations": ("words", "exchangeable,ar1"),
        "bootstrap_replicates": ("int", "0"),
        "workers": ("int", "1"),
    },
}


@dataclass
class RunConfig:
    """Validated configuration with every documented key filled in."""

    values: dict = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]


def _parse_value(kind: str, raw: str, where: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "floats":
            return tuple(float(tok) for tok in raw.split(","))
        if kind == "words":
            return tuple(tok.strip() for tok in raw.split(",") if tok.strip())
        if kind == "lambda":
            if raw.strip().lower() == "wbic":
                return "wbic"
            value = float(raw)
            if value < 0:
                raise ValueError("lambda must be nonnegative")
            return value
        if kind.startswith("choice:"):
            choices = kind.split(":", 1)[1].split(",")
            token = raw.strip()
            if token not in choices:
                raise ValueError(f"must be one of {choices}")
            return token
    except ValueError as exc:
        raise ConfigError(f"{where}: invalid value {raw!r} ({exc})") from exc
    raise ConfigError(f"{where}: unknown schema kind {kind}")  # pragma: no cover


def parse_config(path: str) -> RunConfig:
    """Parse and validate an INI config; unknown or duplicate keys are errors."""
    parser = configparser.ConfigParser(strict=True, interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{path}: duplicate key {exc.option!r} in [{exc.section}] "
                          f"(line {exc.lineno})") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{path}: duplicate section [{exc.section}] "
                          f"(line {exc.lineno})") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: malformed config: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")

    values = {}
    for section, keys in _SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
            elif default is not None:
                raw = default
            else:
                values[section][key] = None
                continue
            values[section][key] = _parse_value(kind, raw, f"{path}: {section}.{key}")

    cfg = RunConfig(values=values)
    _validate_config(cfg, path)
    return cfg


def _validate_config(cfg: RunConfig, path: str):
    if cfg.get("penalty", "a") <= 2.0:
        raise ConfigError(f"{path}: penalty.a must exceed 2 (SCAD requirement)")
    if cfg.get("penalty", "zero_threshold") <= 0:
        raise ConfigError(f"{path}: penalty.zero_threshold must be positive")
    if cfg.get("grid", "size") < 1 or cfg.get("grid", "ratio") <= 1:
        raise ConfigError(f"{path}: grid.size must be >= 1 and grid.ratio > 1")
    sim = cfg.values["simulation"]
    if len(sim["beta0"]) != sim["covariates"]:
        raise ConfigError(f"{path}: simulation.beta0 must list {sim['covariates']} values")
    if not 0.0 <= sim["alpha"] < 1.0:
        raise ConfigError(f"{path}: simulation.alpha must lie in [0, 1)")
    unknown = set(sim["methods"]) - set(ALL_METHODS)
    if unknown:
        raise ConfigError(f"{path}: unknown simulation.methods {sorted(unknown)}")
    for c in sim["correlations"]:
        if c not in ("exchangeable", "ar1"):
            raise ConfigError(f"{path}: unsupported simulation.correlations entry {c!r}")


# ---------------------------------------------------------------------------
# Data ingestion
# ---------------------------------------------------------------------------


def ingest_clusters(path: str) -> list[ClusterRecord]:
    """Read cluster CSV (cluster_id, occasion, y, weight, x1..xd).

    Rows are grouped per cluster, ordered by (cluster_id, occasion);
    occasions must be contiguous 1..m, y binary, weights positive and
    constant within a cluster.  Errors name the offending row.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read data {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        fixed = ["cluster_id", "occasion", "y", "weight"]
        if header[:4] != fixed or len(header) < 5:
            raise DataError(f"{path}: header must start with {fixed} followed by x1..xd")
        d = len(header) - 4
        expected_x = [f"x{j + 1}" for j in range(d)]
        if header[4:] != expected_x:
            raise DataError(f"{path}: covariate columns must be named {expected_x}")

        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + d:
                raise DataError(f"{path}, row {lineno}: expected {4 + d} fields, got {len(row)}")
            cid = row[0]
            try:
                occ = int(row[1])
                y = float(row[2])
                w = float(row[3])
                x = [float(v) for v in row[4:]]
            except ValueError as exc:
                raise DataError(f"{path}, row {lineno}: {exc}") from exc
            if y not in (0.0, 1.0):
                raise DataError(f"{path}, row {lineno}: y must be 0 or 1, got {row[2]}")
            if not w > 0:
                raise DataError(f"{path}, row {lineno}: weight must be positive, got {w}")
            if not all(np.isfinite(x)):
                raise DataError(f"{path}, row {lineno}: nonfinite covariate")
            rows.setdefault(cid, []).append((occ, y, w, x, lineno))

    records = []
    for cid in sorted(rows):
        entries = sorted(rows[cid], key=lambda e: e[0])
        occasions = [e[0] for e in entries]
        if occasions != list(range(1, len(entries) + 1)):
            raise DataError(f"{path}: cluster {cid!r} occasions {occasions} are not "
                            f"contiguous 1..{len(entries)}")
        weights = {e[2] for e in entries}
        if len(weights) > 1:
            raise DataError(f"{path}: cluster {cid!r} has inconsistent weights {sorted(weights)}")
        y = np.array([e[1] for e in entries])
        X = np.array([e[3] for e in entries])
        records.append(ClusterRecord(id=cid, y=y, X=X, w=entries[0][2]))
    if not records:
        raise DataError(f"{path}: no data rows")
    return records


def build_sample(records: list[ClusterRecord], cfg: RunConfig) -> SurveySample:
    m = records[0].m
    structure = CorrelationStructure(cfg.get("model", "correlation"), m)
    N = cfg.get("model", "population_size")
    if N is None:
        N = max(len(records), int(round(sum(r.w for r in records))))
    return SurveySample(clusters=records, N=N, model=MarginalModel(),
                        basis=basis_matrices(structure))


def path_config_from(cfg: RunConfig) -> PenalizedFitConfig:
    return PenalizedFitConfig(
        a=cfg.get("penalty", "a"),
        zero_threshold=cfg.get("penalty", "zero_threshold"),
        grid_size=cfg.get("grid", "size"),
        grid_ratio=cfg.get("grid", "ratio"),
    )


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return "%.12g" % x
    return str(x)


def _fit_lines(fit: FitResult, se: Optional[np.ndarray], meta: list[str]) -> list[str]:
    lines = [f"# {m}" for m in meta]
    lines.append("coefficient,estimate,std_error,active")
    active = set(int(k) for k in fit.active_set)
    for k, b in enumerate(fit.beta_hat):
        se_txt = _fmt(float(se[k])) if se is not None and np.isfinite(se[k]) else ""
        lines.append(f"{k + 1},{_fmt(float(b))},{se_txt},{1 if k in active else 0}")
    return lines


def _fit_markdown(fit: FitResult, se: Optional[np.ndarray], meta: list[str]) -> list[str]:
    lines = [f"<!-- {m} -->" for m in meta]
    lines.append("| coefficient | estimate | std. error | active |")
    lines.append("|---|---|---|---|")
    active = set(int(k) for k in fit.active_set)
    for k, b in enumerate(fit.beta_hat):
        se_txt = _fmt(float(se[k])) if se is not None and np.isfinite(se[k]) else ""
        lines.append(f"| {k + 1} | {_fmt(float(b))} | {se_txt} | {1 if k in active else 0} |")
    return lines


def _report_csv(report: SimulationReport) -> list[str]:
    nonzero = sorted(report.cells[0].arb.keys()) if report.cells else []
    head = ["method", "correlation", "C", "O", "U", "MSE"]
    head += [f"ARB_{k + 1}" for k in nonzero]
    head += [f"SD_{k + 1}" for k in nonzero]
    head += [f"SDm_{k + 1}" for k in nonzero]
    head += [f"SDmad_{k + 1}" for k in nonzero]
    head += ["H_used", "failures"]
    lines = [f"# n={report.n} H={report.H} seed={report.seed} "
             f"N={report.population.N}",
             ",".join(head)]
    for cell in report.cells:
        row = [cell.method, cell.correlation, _fmt(cell.C), _fmt(cell.O), _fmt(cell.U),
               _fmt(cell.mse)]
        row += [_fmt(cell.arb[k]) for k in nonzero]
        row += [_fmt(cell.sd[k]) for k in nonzero]
        row += [_fmt(cell.sd_m[k]) for k in nonzero]
        row += [_fmt(cell.sd_mad[k]) for k in nonzero]
        row += [str(cell.H_used), str(cell.failures)]
        lines.append(",".join(row))
    return lines


def _report_markdown(report: SimulationReport) -> list[str]:
    corrs = []
    for cell in report.cells:
        if cell.correlation not in corrs:
            corrs.append(cell.correlation)
    methods = []
    for cell in report.cells:
        if cell.method not in methods:
            methods.append(cell.method)
    by_key = {(c.method, c.correlation): c for c in report.cells}
    lines = [f"Simulation report: n={report.n}, H={report.H}, seed={report.seed}, "
             f"N={report.population.N}", ""]
    lines.append("## Model selection and MSE")
    header = "| method |" + "".join(f" {c} C | {c} O | {c} U | {c} MSE |" for c in corrs)
    lines.append(header)
    lines.append("|---|" + "---|" * (4 * len(corrs)))
    for mth in methods:
        row = f"| {mth} |"
        for c in corrs:
            cell = by_key[(mth, c)]
            row += f" {cell.C:.1f} | {cell.O:.1f} | {cell.U:.1f} | {cell.mse:.3f} |"
        lines.append(row)
    nonzero = sorted(report.cells[0].arb.keys()) if report.cells else []
    if nonzero:
        lines.append("")
        lines.append("## Absolute relative bias (%) of nonzero coefficients")
        header = "| method |" + "".join(
            f" {c} b{k + 1} |" for c in corrs for k in nonzero)
        lines.append(header)
        lines.append("|---|" + "---|" * (len(corrs) * len(nonzero)))
        for mth in methods:
            row = f"| {mth} |"
            for c in corrs:
                cell = by_key[(mth, c)]
                for k in nonzero:
                    row += f" {cell.arb[k]:.1f} |"
            lines.append(row)
    has_boot = any(np.isfinite(list(cell.sd_m.values())).any() if cell.sd_m else False
                   for cell in report.cells)
    if nonzero and has_boot:
        lines.append("")
        lines.append("## Bootstrap standard deviation tracking")
        header = "| method | correlation |" + "".join(
            f" SD b{k + 1} | SDm b{k + 1} | SDmad b{k + 1} |" for k in nonzero)
        lines.append(header)
        lines.append("|---|---|" + "---|" * (3 * len(nonzero)))
        for cell in report.cells:
            if not cell.sd_m or not np.isfinite(list(cell.sd_m.values())).any():
                continue
            row = f"| {cell.method} | {cell.correlation} |"
            for k in nonzero:
                row += f" {cell.sd[k]:.3f} | {cell.sd_m[k]:.3f} | {cell.sd_mad[k]:.3f} |"
            lines.append(row)
    return lines


def emit_report(obj, fmt: str, path: str, se: Optional[np.ndarray] = None,
                meta: Optional[list[str]] = None):
    """Write a fit, simulation report or lambda path deterministically."""
    if fmt not in ("csv", "markdown"):
        raise ConfigError(f"unknown output format {fmt!r}")
    meta = meta or []
    if isinstance(obj, FitResult):
        lines = _fit_lines(obj, se, meta) if fmt == "csv" else _fit_markdown(obj, se, meta)
    elif isinstance(obj, SimulationReport):
        lines = _report_csv(obj) if fmt == "csv" else _report_markdown(obj)
    elif isinstance(obj, list):  # lambda path points
        lines = _path_lines(obj, meta)
    else:
        raise ConfigError(f"cannot emit object of type {type(obj).__name__}")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc


def _path_lines(points, meta: list[str]) -> list[str]:
    lines = [f"# {m}" for m in meta]
    d = points[0].fit.beta_hat.size if points else 0
    lines.append("lambda,wbic,df,qif_value," + ",".join(f"beta_{k + 1}" for k in range(d)))
    for p in points:
        row = [_fmt(p.lam), _fmt(p.wbic), str(p.df), _fmt(p.fit.diagnostics["qif_value"])]
        row += [_fmt(float(b)) for b in p.fit.beta_hat]
        lines.append(",".join(row))
    return lines


def load_fit_csv(path: str):
    """Re-ingest a fit CSV written by emit_report (estimates and SEs)."""
    est, ses = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("coefficient"):
                continue
            parts = line.split(",")
            est.append(float(parts[1]))
            ses.append(float(parts[2]) if parts[2] else np.nan)
    return np.array(est), np.array(ses)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _campaign_from(cfg: RunConfig) -> CampaignConfig:
    sim = cfg.values["simulation"]
    seed = cfg.get("run", "seed")
    if seed is None:
        raise ConfigError("simulate requires run.seed")
    pop = PopulationConfig(
        N=sim["population_size"], m=sim["cluster_size"], d=sim["covariates"],
        beta0=np.array(sim["beta0"]), alpha_true=sim["alpha"],
        covariate_range=(sim["covariate_min"], sim["covariate_max"]))
    return CampaignConfig(
        population=pop, n=sim["sample_size"], H=sim["replicates"],
        methods=tuple(sim["methods"]), correlations=tuple(sim["correlations"]),
        seed=seed, bootstrap_B=sim["bootstrap_replicates"],
        path=path_config_from(cfg), workers=sim["workers"])


def _fit_with_config(sample: SurveySample, cfg: RunConfig):
    """(lambda, fit) per the configured penalty: fixed value or WBIC tuning."""
    lam_setting = cfg.get("penalty", "lambda")
    pc = path_config_from(cfg)
    if lam_setting == "wbic":
        return select_lambda(sample, pc)
    lam = float(lam_setting)
    if lam == 0.0:
        return 0.0, fit_qif(sample)
    init = fit_qif(sample).beta_hat
    return lam, fit_penalized(sample, lam, init, config=pc)


def cmd_fit(args) -> int:
    cfg = parse_config(args.config)
    sample = build_sample(ingest_clusters(args.data), cfg)
    lam, fit = _fit_with_config(sample, cfg)
    se = None
    if fit.active_set.size > 0:
        spec = path_config_from(cfg).penalty(lam)
        try:
            cov = sandwich_variance(sample, fit, spec)
            se = np.full(sample.d, np.nan)
            se[fit.active_set] = np.sqrt(np.diag(cov))
        except SingularMatrixError:
            se = None
    meta = [f"command=fit lambda={_fmt(float(lam))} n={sample.n} N={sample.N} "
            f"converged={int(fit.converged)}"]
    emit_report(fit, args.format, args.out, se=se, meta=meta)
    return 0


def cmd_lambda_path(args) -> int:
    cfg = parse_config(args.config)
    sample = build_sample(ingest_clusters(args.data), cfg)
    points = lambda_path(sample, path_config_from(cfg))
    meta = [f"command=lambda-path n={sample.n} N={sample.N}"]
    emit_report(points, "csv", args.out, meta=meta)
    return 0


def cmd_bootstrap(args) -> int:
    cfg = parse_config(args.config)
    seed = cfg.get("run", "seed")
    if seed is None:
        raise ConfigError("bootstrap requires run.seed")
    sample = build_sample(ingest_clusters(args.data), cfg)
    lam, fit = _fit_with_config(sample, cfg)
    if fit.active_set.size == 0:
        raise NumericDomainError("all coefficients are zero; nothing to bootstrap")
    plan = BootstrapPlan(B=cfg.get("bootstrap", "replicates"), seed=seed)
    spec = path_config_from(cfg).penalty(lam)
    bv = bootstrap_variance(sample, fit, plan, spec)
    se = np.full(sample.d, np.nan)
    se[fit.active_set] = np.sqrt(np.diag(bv.covariance))
    meta = [f"command=bootstrap lambda={_fmt(float(lam))} B={plan.B} "
            f"b_effective={bv.b_effective} b_excluded={bv.b_excluded}"]
    emit_report(fit, args.format, args.out, se=se, meta=meta)
    return 0


def cmd_simulate(args) -> int:
    cfg = parse_config(args.config)
    report = run_campaign(_campaign_from(cfg))
    emit_report(report, args.format, args.out)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="surveyqif",
        description="Penalized survey-weighted QIF estimation and simulation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=True):
        p.add_argument("--config", required=True)
        if data:
            p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--format", choices=("csv", "markdown"), default="csv")

    add_common(sub.add_parser("fit", help="penalized (or plain) QIF fit"))
    add_common(sub.add_parser("bootstrap", help="fit plus bootstrap variance"))
    add_common(sub.add_parser("lambda-path", help="WBIC and coefficients per lambda"))
    add_common(sub.add_parser("simulate", help="Monte Carlo campaign"), data=False)

    args = parser.parse_args(argv)
    handlers = {"fit": cmd_fit, "bootstrap": cmd_bootstrap,
                "lambda-path": cmd_lambda_path, "simulate": cmd_simulate}
    try:
        return handlers[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericDomainError, SingularMatrixError, CampaignError,
            ContractError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except SurveyQifError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
