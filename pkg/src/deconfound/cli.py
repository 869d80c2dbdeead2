"""Command line entry point tying the pipeline together.

Subcommands: ``simulate`` (draw a semi-synthetic dataset with known
effects), ``fit`` (Gibbs-sample the latent factor model on a holdout
split), ``check`` (posterior predictive check against the held-out
cells), ``effects`` (residualized outcome regression and intervention
effects, guarded by the check), and ``benchmark`` (the five-estimator
RMSE table).

Settings resolve in three layers: documented defaults, then a JSON
config file given with ``--config``, then command line flags; flags win.
Unknown keys in the config file are rejected. Every numeric setting has
its default in ``--help``. The fully resolved config is echoed into each
run's report artifact, so any output can be reproduced from its report
alone.

All randomness flows from the single ``seed`` setting through named
per-stage derivations (holdout split, sampler, predictive check, outcome
chain), so re-running one stage from serialized intermediates reproduces
it exactly.

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numerical failure, 4 predictive-check gate failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from ._seeds import derive_seed
from .ace import Intervention, average_causal_effect
from .data import load_dataset, normalize_by_tiv, save_dataset, split_holdout
from .errors import ConfigError, DeconfoundError, GateError
from .outcome import (
    fit_beta_regression,
    residualize,
    save_coefficients,
    scale_outcome,
    summarize_coefficients,
)
from .plfm import PlfmSpec, PosteriorDraws, extract_substitute, fit_gibbs
from .ppc import PpcReport, bayesian_p_values, load_report_p_values, save_report
from .synth import DEFAULT_GRID, SynthConfig, generate, run_benchmark


class _Field:
    """One documented setting: type converter, default, help text."""

    def __init__(self, kind, default, help_text):
        self.kind = kind
        self.default = default
        self.help_text = help_text


def _json_value(text):
    if isinstance(text, str):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("invalid JSON value: %s" % exc) from exc
    return text


_CHAIN_FIELDS = {
    "n_warmup": _Field(int, 1000, "Gibbs warmup iterations"),
    "n_samples": _Field(int, 500, "retained Gibbs draws"),
    "thin": _Field(int, 2, "keep every thin-th draw"),
}

_COMMON_FIELDS = {
    "seed": _Field(int, 0, "master seed; stages derive named sub-seeds"),
    "threads": _Field(int, 0, "thread cap for numeric kernels; 0 = all cores"),
}

SCHEMAS = {
    "simulate": {
        **_COMMON_FIELDS,
        "nu_x": _Field(float, 0.45, "variance share of the cause signal"),
        "nu_z": _Field(float, 0.45, "variance share of the confounding signal"),
        "n_rows": _Field(int, 2000, "rows to generate"),
        "n_causes": _Field(int, 19, "cause columns to generate"),
        "n_clusters": _Field(int, 4, "clusters in the unobserved confounder"),
        "effect_scale": _Field(float, 0.5, "sd of the sparse effect draw"),
        "age_coef_scale": _Field(float, 0.2, "sd of the age coefficient draw"),
        "out_data": _Field(str, "dataset.csv", "dataset CSV path"),
        "out_truth": _Field(str, "truth.csv", "ground-truth effects CSV path"),
        "out_report": _Field(str, "simulate_report.txt", "key-value report path"),
    },
    "fit": {
        **_COMMON_FIELDS,
        **_CHAIN_FIELDS,
        "data": _Field(str, "dataset.csv", "input dataset CSV"),
        "roles": _Field(dict, {}, "JSON column-to-role mapping"),
        "normalize_tiv": _Field(bool, False, "divide volume causes by tiv"),
        "kind": _Field(str, "ppca", "factor model kind: ppca or bpmf"),
        "latent_dim": _Field(int, 5, "latent dimension K"),
        "hold_fraction": _Field(float, 0.2, "fraction of cells held out"),
        "out_draws": _Field(str, "draws.npz", "posterior draws path"),
        "out_report": _Field(str, "fit_report.txt", "key-value report path"),
    },
    "check": {
        **_COMMON_FIELDS,
        "data": _Field(str, "dataset.csv", "input dataset CSV"),
        "roles": _Field(dict, {}, "JSON column-to-role mapping"),
        "normalize_tiv": _Field(bool, False, "divide volume causes by tiv"),
        "draws": _Field(str, "draws.npz", "posterior draws from fit"),
        "hold_fraction": _Field(float, 0.2, "fraction of cells held out (match fit)"),
        "n_replicates": _Field(int, 200, "posterior predictive replicates M"),
        "tau": _Field(float, 0.1, "gate threshold on the mean p-value"),
        "out_rows": _Field(str, "ppc_rows.csv", "per-row p-value CSV path"),
        "out_report": _Field(str, "check_report.txt", "key-value report path"),
    },
    "effects": {
        **_COMMON_FIELDS,
        "data": _Field(str, "dataset.csv", "input dataset CSV"),
        "roles": _Field(dict, {}, "JSON column-to-role mapping"),
        "normalize_tiv": _Field(bool, False, "divide volume causes by tiv"),
        "draws": _Field(str, "draws.npz", "posterior draws from fit"),
        "check_rows": _Field(str, "", "per-row p-value CSV from check; empty = no check"),
        "check_replicates": _Field(int, 200, "replicate count the check used"),
        "tau": _Field(float, 0.1, "gate threshold on the mean p-value"),
        "override_gate": _Field(bool, False, "proceed even if the check failed"),
        "outcome_scale": _Field(bool, True, "map a bounded score into (0, 1) first"),
        "max_score": _Field(float, 85.0, "score ceiling used by outcome scaling"),
        "prior_scale": _Field(float, 2.5, "Normal prior sd on regression coefficients"),
        "n_warmup": _Field(int, 1500, "Metropolis warmup iterations"),
        "n_samples": _Field(int, 2000, "retained Metropolis draws"),
        "thin": _Field(int, 2, "keep every thin-th draw"),
        "set": _Field(list, [], "interventions, each 'column=value'"),
        "out_coefficients": _Field(str, "coefficients.csv", "coefficient table path"),
        "out_effects": _Field(str, "effects.csv", "intervention effect table path"),
        "out_report": _Field(str, "effects_report.txt", "key-value report path"),
    },
    "benchmark": {
        **_COMMON_FIELDS,
        "grid": _Field(list, [list(p) for p in DEFAULT_GRID],
                       "JSON list of [cause, confounder] ratio pairs"),
        "n_sims": _Field(int, 50, "simulations per grid cell"),
        "n_rows": _Field(int, 2000, "rows per simulated dataset"),
        "n_causes": _Field(int, 19, "cause columns per simulated dataset"),
        "n_clusters": _Field(int, 4, "clusters in the unobserved confounder"),
        "k_fit": _Field(int, 5, "latent dimension of the fitted factor models"),
        "n_warmup": _Field(int, 300, "Gibbs warmup iterations per fit"),
        "n_samples": _Field(int, 150, "retained Gibbs draws per fit"),
        "thin": _Field(int, 1, "keep every thin-th draw"),
        "hold_fraction": _Field(float, 0.35, "fraction of cells held out"),
        "n_replicates": _Field(int, 100, "posterior predictive replicates M"),
        "tau": _Field(float, 0.1, "gate threshold on the mean p-value"),
        "out_table": _Field(str, "benchmark_table.tsv", "RMSE table path"),
        "out_report": _Field(str, "benchmark_report.txt", "key-value report path"),
    },
}


class RunConfig:
    """Resolved settings for one subcommand run.

    Defaults filled, config file applied, flags applied on top. The
    instance serializes to sorted ``config.key = value`` lines for report
    artifacts and to JSON for reuse with ``--config``.
    """

    def __init__(self, subcommand, settings):
        if subcommand not in SCHEMAS:
            raise ConfigError("unknown subcommand %r" % subcommand)
        schema = SCHEMAS[subcommand]
        unknown = sorted(set(settings) - set(schema))
        if unknown:
            raise ConfigError(
                "unknown config keys for %s: %s" % (subcommand, ", ".join(unknown))
            )
        self.subcommand = subcommand
        self.version = __version__
        self.settings = {}
        for name, field in schema.items():
            value = settings.get(name, field.default)
            try:
                if field.kind in (dict, list):
                    value = _json_value(value)
                    if not isinstance(value, field.kind):
                        raise ConfigError(
                            "setting %r must be a JSON %s"
                            % (name, field.kind.__name__)
                        )
                elif field.kind is bool:
                    if isinstance(value, str):
                        if value not in ("true", "false"):
                            raise ConfigError(
                                "setting %r must be true or false" % name
                            )
                        value = value == "true"
                    value = bool(value)
                else:
                    value = field.kind(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError("bad value for setting %r: %s" % (name, exc)) from exc
            self.settings[name] = value

    def __getitem__(self, name):
        return self.settings[name]

    def echo_lines(self):
        lines = [
            "config.subcommand = %s" % self.subcommand,
            "config.version = %s" % self.version,
        ]
        for name in sorted(self.settings):
            value = self.settings[name]
            if isinstance(value, (dict, list)):
                value = json.dumps(value, sort_keys=True)
            lines.append("config.%s = %s" % (name, value))
        return lines

    def to_json(self):
        return json.dumps(
            {"subcommand": self.subcommand, "version": self.version,
             **self.settings},
            sort_keys=True, indent=2,
        )


def _write_report(path, config, result_lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in config.echo_lines():
            fh.write(line + "\n")
        for line in result_lines:
            fh.write(line + "\n")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _load_input(config):
    roles = config["roles"]
    if not roles:
        raise ConfigError(
            "no column roles given; pass --roles or put a roles mapping "
            "in the config file"
        )
    ds = load_dataset(config["data"], roles)
    if config["normalize_tiv"]:
        ds = normalize_by_tiv(ds)
    return ds


def cmd_simulate(config):
    synth_cfg = SynthConfig(
        nu_x=config["nu_x"],
        nu_z=config["nu_z"],
        n_clusters=config["n_clusters"],
        effect_scale=config["effect_scale"],
        age_coef_scale=config["age_coef_scale"],
        seed=derive_seed(config["seed"], "simulate"),
    )
    sd = generate(synth_cfg, n_rows=config["n_rows"], n_causes=config["n_causes"])
    save_dataset(sd.dataset, config["out_data"])
    with open(config["out_truth"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "true_effect", "true_beta"])
        for j, name in enumerate(sd.dataset.cause_names):
            w.writerow([name, repr(float(sd.true_effects[j])),
                        repr(float(sd.true_beta[j]))])
    roles = {n: "cause-volume" for n in sd.dataset.cause_names}
    roles.update({"age": "age", "gender": "covariate", "y": "outcome"})
    _write_report(config["out_report"], config, [
        "result.n_rows = %d" % sd.dataset.n_rows,
        "result.n_causes = %d" % sd.dataset.n_causes,
        "result.outcome_mean = %s" % _fmt(float(sd.dataset.outcome.mean())),
        "result.beta0 = %s" % _fmt(sd.beta0),
        "result.true_gamma = %s" % _fmt(sd.true_gamma),
        "result.nonzero_effects = %d" % int(np.count_nonzero(sd.true_beta)),
        "result.roles = %s" % json.dumps(roles, sort_keys=True),
    ])
    return 0


def cmd_fit(config):
    ds = _load_input(config)
    x_obs, _, _ = split_holdout(
        ds, config["hold_fraction"], derive_seed(config["seed"], "holdout")
    )
    spec = PlfmSpec(
        kind=config["kind"],
        latent_dim=config["latent_dim"],
        seed=derive_seed(config["seed"], "gibbs"),
    )
    draws = fit_gibbs(
        x_obs, ds.covariates, spec,
        n_warmup=config["n_warmup"],
        n_samples=config["n_samples"],
        thin=config["thin"],
    )
    draws.save(config["out_draws"])
    _write_report(config["out_report"], config, [
        "result.kind = %s" % draws.kind,
        "result.latent_dim = %d" % draws.latent_dim,
        "result.n_draws = %d" % draws.n_draws,
        "result.chain_length = %d"
        % (config["n_warmup"] + config["n_samples"] * config["thin"]),
        "result.noise_variance_mean = %s"
        % _fmt(float(draws.noise_variance.mean())),
    ])
    return 0


def cmd_check(config):
    ds = _load_input(config)
    draws = PosteriorDraws.load(config["draws"])
    _, x_hold, _ = split_holdout(
        ds, config["hold_fraction"], derive_seed(config["seed"], "holdout")
    )
    report = bayesian_p_values(
        draws, x_hold, ds.covariates,
        n_replicates=config["n_replicates"],
        seed=derive_seed(config["seed"], "ppc"),
        tau=config["tau"],
    )
    save_report(report, config["out_rows"])
    _write_report(config["out_report"], config, [
        "result.mean_p = %s" % _fmt(report.mean_p),
        "result.tau = %s" % _fmt(report.tau),
        "result.passed = %s" % ("true" if report.passed else "false"),
        "result.n_scored = %d" % report.n_scored,
        "result.n_replicates = %d" % report.n_replicates,
    ])
    if not report.passed:
        raise GateError(
            "predictive check failed: mean p-value %r <= tau %r"
            % (report.mean_p, report.tau)
        )
    return 0


def _rebuild_ppc_report(path, tau, n_replicates):
    p = load_report_p_values(path)
    scored = ~np.isnan(p)
    if not scored.any():
        raise GateError("check file %r scored no rows" % path)
    mean_p = float(p[scored].mean())
    return PpcReport(
        p_values=p, scored=scored, mean_p=mean_p, tau=tau,
        passed=mean_p > tau, n_replicates=n_replicates,
    )


def _parse_interventions(specs, ds):
    by_name = {name: j for j, name in enumerate(ds.cause_names)}
    out = []
    for text in specs:
        if "=" not in text:
            raise ConfigError(
                "intervention %r must look like column=value" % text
            )
        name, _, raw = text.partition("=")
        name = name.strip()
        if name not in by_name:
            raise ConfigError(
                "intervention column %r is not a cause column" % name
            )
        try:
            value = float(raw)
        except ValueError as exc:
            raise ConfigError(
                "intervention value %r is not a number" % raw
            ) from exc
        out.append((text, Intervention(subset=(by_name[name],), values=[value])))
    return out


def cmd_effects(config):
    ds = _load_input(config)
    draws = PosteriorDraws.load(config["draws"])
    if config["check_rows"]:
        ppc_report = _rebuild_ppc_report(
            config["check_rows"], config["tau"], config["check_replicates"]
        )
        if not (ppc_report.passed or config["override_gate"]):
            raise GateError(
                "the referenced check failed (mean p-value %r <= tau %r); "
                "pass --override-gate to proceed anyway"
                % (ppc_report.mean_p, config["tau"])
            )
    elif not config["override_gate"]:
        raise GateError(
            "no check referenced; run the check subcommand first or pass "
            "--override-gate"
        )
    else:
        ppc_report = None

    y = ds.outcome
    if config["outcome_scale"]:
        y = scale_outcome(y, config["max_score"])
    design = residualize(ds, draws, extract_substitute(draws))
    fit = fit_beta_regression(
        design, y,
        prior_scale=config["prior_scale"],
        n_warmup=config["n_warmup"],
        n_samples=config["n_samples"],
        thin=config["thin"],
        seed=derive_seed(config["seed"], "outcome"),
    )
    names = ("intercept",) + design.column_names
    summary = summarize_coefficients(fit, names=names)
    save_coefficients(summary, config["out_coefficients"])

    interventions = _parse_interventions(config["set"], ds)
    estimates = []
    for label, iv in interventions:
        est = average_causal_effect(
            ds, draws, extract_substitute(draws), fit, iv,
            ppc_report=ppc_report, tau=config["tau"],
            override_gate=config["override_gate"],
        )
        estimates.append((label, est))
    with open(config["out_effects"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["intervention", "point", "lo95", "hi95",
                    "n_individuals", "gate_status"])
        for label, est in estimates:
            w.writerow([label, repr(est.point), repr(est.lo95), repr(est.hi95),
                        est.n_individuals, est.gate_status])
    _write_report(config["out_report"], config, [
        "result.n_draws = %d" % fit.n_draws,
        "result.acceptance = %s" % _fmt(fit.diagnostics["acceptance_rate"]),
        "result.flagged = %s"
        % ("true" if fit.diagnostics["flagged"] else "false"),
        "result.n_significant = %d" % int(summary.significant.sum()),
        "result.n_interventions = %d" % len(estimates),
    ])
    return 0


def cmd_benchmark(config):
    grid = []
    for pair in config["grid"]:
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise ConfigError("grid entries must be [cause, confounder] pairs")
        grid.append((float(pair[0]), float(pair[1])))
    table = run_benchmark(
        grid=grid,
        n_sims=config["n_sims"],
        n_rows=config["n_rows"],
        n_causes=config["n_causes"],
        seed=config["seed"],
        n_clusters=config["n_clusters"],
        k_fit=config["k_fit"],
        chain={"n_warmup": config["n_warmup"],
               "n_samples": config["n_samples"],
               "thin": config["thin"]},
        hold_fraction=config["hold_fraction"],
        n_replicates=config["n_replicates"],
        tau=config["tau"],
    )
    table.save(config["out_table"])
    lines = [
        "result.n_cells = %d" % len(table.rows),
        "result.n_sims = %d" % table.n_sims,
    ]
    for row in table.rows:
        lines.append(
            "result.excluded[%s] = %d/%d"
            % (row.ratio, row.ppca_excluded, row.bpmf_excluded)
        )
    _write_report(config["out_report"], config, lines)
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "check": cmd_check,
    "effects": cmd_effects,
    "benchmark": cmd_benchmark,
}


class _Parser(argparse.ArgumentParser):
    """argparse that raises ConfigError instead of exiting with code 2."""

    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(
        prog="deconfound",
        description="Causal effect estimation for many simultaneous causes.",
    )
    parser.add_argument("--version", action="version",
                        version="deconfound %s" % __version__)
    subs = parser.add_subparsers(dest="subcommand", metavar="subcommand")
    for name, schema in SCHEMAS.items():
        sub = subs.add_parser(name, help="run the %s stage" % name)
        sub.add_argument("--config", default=None,
                         help="JSON config file; flags override it")
        for field_name, field in schema.items():
            flag = "--" + field_name.replace("_", "-")
            if field.kind is bool:
                sub.add_argument(flag, dest=field_name, default=None,
                                 action=argparse.BooleanOptionalAction,
                                 help="%s (default: %s)"
                                 % (field.help_text, field.default))
            elif field.kind is list and field_name == "set":
                sub.add_argument(flag, dest=field_name, default=None,
                                 action="append", metavar="COLUMN=VALUE",
                                 help="%s (repeatable)" % field.help_text)
            else:
                sub.add_argument(flag, dest=field_name, default=None,
                                 metavar=field_name.upper(),
                                 help="%s (default: %s)"
                                 % (field.help_text, field.default))
    return parser


def resolve_config(args):
    if args.subcommand is None:
        raise ConfigError("a subcommand is required (see --help)")
    settings = {}
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError("cannot read config file: %s" % exc) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("config file is not valid JSON: %s" % exc) from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded.pop("subcommand", None)
        loaded.pop("version", None)
        settings.update(loaded)
    for name in SCHEMAS[args.subcommand]:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    return RunConfig(args.subcommand, settings)


def _apply_thread_cap(config):
    threads = config["threads"]
    if threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = resolve_config(args)
        _apply_thread_cap(config)
        return _COMMANDS[config.subcommand](config)
    except DeconfoundError as exc:
        print("deconfound: error: %s" % exc, file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
