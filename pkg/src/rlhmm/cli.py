"""Command-line workflows: simulate, fit, cv, bootstrap, engage.

Every command writes its artifacts plus a manifest.json (command, per-input
sha256 hashes, effective seed, library version, wall-clock seconds) into the
output directory, so a run can be reproduced from the manifest alone. Exit
codes: 0 success, 2 usage/configuration problems, 3 numerical failure or
non-convergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .core import (BasisSpec, ConfigError, DomainError, IngestionError,
                   NumericalError, load_dataset, read_schema)
from .em import FitConfig, fit, fit_rl_only
from .engage import (default_windows, engagement_report, group_rate_bands,
                     write_engagement)
from .hmm import read_posteriors, write_loglik, write_posteriors
from .inference import (bootstrap, cross_validate, write_bootstrap_report,
                        write_cv_report)
from .sim import generate, scenario_from_config, write_sim_output

CONFIG_VERSION = 1


def _load_config(path) -> dict:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top-level JSON object required")
    version = doc.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{p}: config version must be {CONFIG_VERSION}, "
                          f"got {version!r}")
    return doc


def _fit_setup(args) -> tuple:
    """Shared input loading for fit/cv/bootstrap."""
    schema_path = args.schema or Path(args.data).with_name("schema.json")
    schema = read_schema(schema_path)
    data = load_dataset(args.data, schema)
    basis = BasisSpec.from_dict(_load_config(args.basis))
    doc = _load_config(args.config)
    model = doc.pop("model", "switching")
    if model not in ("switching", "rl_only"):
        raise ConfigError(f"unknown model {model!r}")
    config = FitConfig.from_dict(doc)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    inputs = {"data": args.data, "schema": schema_path,
              "basis": args.basis, "config": args.config}
    return data, basis, config, model, inputs


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(args, inputs: dict, outputs: dict, seed,
                    t0: float) -> None:
    out = Path(args.out)
    doc = {
        "command": args.command,
        "library_version": __version__,
        "seed": seed,
        "jobs": args.jobs,
        "inputs": {label: {"path": str(Path(p).resolve()),
                           "sha256": _sha256(p)}
                   for label, p in inputs.items()},
        "outputs": {label: Path(p).name for label, p in outputs.items()},
        "seconds": time.perf_counter() - t0,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def _parse_targets(text: str | None):
    if not text:
        return None
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"invalid --targets {text!r}; "
                          f"expected integers like '25,75'") from exc


def _parse_windows(text: str | None, T: int):
    if not text:
        return default_windows(T)
    windows = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            if "-" in tok:
                lo, hi = tok.split("-")
                windows.append(tuple(range(int(lo), int(hi) + 1)))
            else:
                windows.append((int(tok),))
        except ValueError as exc:
            raise ConfigError(f"invalid window {tok!r}; use 'lo-hi' ranges "
                              f"or single trials") from exc
    return tuple(windows)


def _decode_lambda(v) -> float:
    if v == "inf":
        return math.inf
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    raise ConfigError(f"penalty value must be a number or 'inf', got {v!r}")


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    scenario = scenario_from_config(cfg)
    output = generate(scenario)
    paths = write_sim_output(output, args.out)
    _write_manifest(args, {"config": args.config}, paths, scenario.seed, t0)
    return 0


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    data, basis, config, model, inputs = _fit_setup(args)
    result = (fit if model == "switching" else fit_rl_only)(data, basis,
                                                            config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"fit": out / "fit.json",
             "posteriors": out / "posteriors.csv",
             "loglik": out / "loglik.csv"}
    paths["fit"].write_text(json.dumps(result.to_json_dict(), indent=2)
                            + "\n")
    write_posteriors(result.posteriors, paths["posteriors"])
    write_loglik(result.posteriors, paths["loglik"])
    report = engagement_report(result.posteriors)
    paths.update(write_engagement(report, out))
    _write_manifest(args, inputs, paths, config.seed, t0)
    return 0 if result.converged else 3


def cmd_cv(args) -> int:
    t0 = time.perf_counter()
    data, basis, config, model, inputs = _fit_setup(args)
    if model != "switching":
        raise ConfigError("cv applies to the switching model")
    grid_doc = _load_config(args.grid)
    unknown = set(grid_doc) - {"grid", "lambda0", "lambda1"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    try:
        if "grid" in grid_doc:
            if {"lambda0", "lambda1"} & set(grid_doc):
                raise ConfigError(
                    "give either 'grid' or 'lambda0'/'lambda1', not both")
            grid = [(_decode_lambda(l0), _decode_lambda(l1))
                    for l0, l1 in grid_doc["grid"]]
        else:
            # cross product of per-curve candidate lists
            l0s = [_decode_lambda(v) for v in grid_doc["lambda0"]]
            l1s = [_decode_lambda(v) for v in grid_doc["lambda1"]]
            grid = [(l0, l1) for l0 in l0s for l1 in l1s]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(
            f"{args.grid}: expected {{\"grid\": [[l0, l1], ...]}} or "
            f'{{"lambda0": [...], "lambda1": [...]}}') from exc
    report = cross_validate(data, basis, config, grid, args.folds)
    paths = write_cv_report(report, args.out)
    inputs["grid"] = args.grid
    _write_manifest(args, inputs, paths, config.seed, t0)
    return 0


def cmd_bootstrap(args) -> int:
    t0 = time.perf_counter()
    data, basis, config, model, inputs = _fit_setup(args)
    if model != "switching":
        raise ConfigError("bootstrap applies to the switching model")
    report = bootstrap(data, basis, config, args.replicates,
                       targets=_parse_targets(args.targets),
                       warm_start=not args.cold_start)
    paths = write_bootstrap_report(report, args.out)
    _write_manifest(args, inputs, paths, config.seed, t0)
    return 0


def cmd_engage(args) -> int:
    t0 = time.perf_counter()
    post_path = Path(args.fit_dir) / "posteriors.csv"
    ids, gamma = read_posteriors(post_path)
    windows = _parse_windows(args.windows, gamma.shape[1])
    bands = None
    if args.band_replicates:
        bands = group_rate_bands(gamma, B=args.band_replicates,
                                 seed=args.seed or 0)
    report = engagement_report(gamma, windows, bands=bands,
                               subject_ids=ids)
    paths = write_engagement(report, args.out)
    _write_manifest(args, {"posteriors": post_path}, paths,
                    args.seed or 0, t0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlhmm",
        description="Reward-learning model with a hidden engaged/lapse "
                    "strategy chain: simulation, penalized EM fitting, "
                    "cross-validation, bootstrap, engagement summaries.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="parallel worker cap (execution is currently "
                            "sequential and deterministic; recorded in the "
                            "manifest)")

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="scenario JSON")
    common(p)
    p.set_defaults(func=cmd_simulate)

    def fit_inputs(p):
        p.add_argument("--data", required=True, help="dataset CSV")
        p.add_argument("--schema", default=None,
                       help="dataset schema JSON (default: schema.json "
                            "next to the data)")
        p.add_argument("--basis", required=True, help="basis spec JSON")
        p.add_argument("--config", required=True, help="fit config JSON")

    p = sub.add_parser("fit", help="fit the model by penalized EM")
    fit_inputs(p)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="cross-validate a penalty grid")
    fit_inputs(p)
    p.add_argument("--grid", required=True, help="penalty grid JSON")
    p.add_argument("--folds", type=int, required=True, help="number of folds")
    common(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("bootstrap", help="bootstrap confidence intervals")
    fit_inputs(p)
    p.add_argument("--replicates", type=int, required=True,
                   help="bootstrap replicate count B")
    p.add_argument("--targets", default=None,
                   help="comma-separated trial indices for zeta CIs "
                        "(default: T/4, 3T/4)")
    p.add_argument("--cold-start", action="store_true",
                   help="restart every replicate from the configured "
                        "initial point instead of the full-data fit")
    common(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("engage", help="engagement report from a fit")
    p.add_argument("--fit-dir", required=True,
                   help="directory written by 'rlhmm fit'")
    p.add_argument("--windows", default=None,
                   help="comma-separated trial windows like '1-25,26-50' "
                        "(default: quartiles)")
    p.add_argument("--band-replicates", type=int, default=0,
                   help="bootstrap resamples for group-rate bands "
                        "(0 disables)")
    common(p)
    p.set_defaults(func=cmd_engage)
    return parser


def entrypoint(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyError as exc:
        print(f"error: missing config key {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DomainError, IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(entrypoint())
