"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 some seeds failed,
4 privacy budget refused by the reconstruction gate.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import __version__
from .datagen import (Dataset, SyntheticConfig, gen_synthetic_pair, load_binary, load_csv,
                      save_binary, save_csv)
from .harness import ConfigError, ExperimentConfig, emit_report, load_result_csv, run_experiment
from .metric import InsufficientClassesError, MetricConfig, pairwise_ot_similarity
from .privacy import PrivacyBudget, PrivacyGateError
from .probe import ModelSpec, TrainOpts, load_model, run_probe_round, save_model

EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_GATE = 4


def _fail(msg: str, code: int) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load_dataset(path: str) -> Dataset:
    p = Path(path)
    try:
        return load_binary(p) if p.suffix == ".bin" else load_csv(p)
    except (OSError, ValueError) as exc:
        _fail(f"cannot load dataset {p}: {exc}", EXIT_CONFIG)


def _parse_weights(text: str | None) -> tuple[float, float] | None:
    if text is None:
        return None
    try:
        wf, wl = (float(x) for x in text.split(":"))
    except ValueError:
        _fail(f"--weights expects wf:wl, got {text!r}", EXIT_CONFIG)
    return wf, wl


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    import yaml
    try:
        text = Path(path).read_text()
        d = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        _fail(f"cannot read config {path}: {exc}", EXIT_CONFIG)
    if not isinstance(d, dict):
        _fail(f"config {path} must hold a mapping", EXIT_CONFIG)
    return d


@click.group()
@click.version_option(__version__, prog_name="otsim")
def main() -> None:
    """Label-aware OT similarity between federated clients."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), help="YAML/JSON with SyntheticConfig fields.")
@click.option("--seed", type=int, default=None)
@click.option("--overlap", type=float, default=None, help="Mixing weight of client B toward A's mixture.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "bin"]), default="csv")
def generate(config_path, seed, overlap, out_dir, fmt):
    """Write a synthetic client pair to OUT/client_a and OUT/client_b."""
    d = _read_config(config_path)
    if seed is not None:
        d["seed"] = seed
    if overlap is not None:
        d["overlap"] = overlap
    try:
        cfg = SyntheticConfig(**d)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        _fail(str(exc), EXIT_CONFIG)
    a, b = gen_synthetic_pair(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("client_a", a), ("client_b", b)):
        path = out / f"{name}.{fmt}"
        (save_csv if fmt == "csv" else save_binary)(ds, path)
        click.echo(str(path))


@main.command()
@click.argument("datasets", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--hidden", default="32,8", help="Comma-separated hidden widths.")
@click.option("--seed", type=int, default=0)
@click.option("--lr", type=float, default=0.05)
@click.option("--epochs", type=int, default=1)
@click.option("--out", "out_path", type=click.Path(), required=True)
def probe(datasets, hidden, seed, lr, epochs, out_path):
    """Train the one-round probe on DATASETS and save the global model."""
    ds = [_load_dataset(p) for p in datasets]
    if len(ds) < 2:
        _fail("the probe needs at least two client datasets", EXIT_CONFIG)
    try:
        widths = tuple(int(h) for h in hidden.split(","))
        spec = ModelSpec(input_dim=ds[0].dim, hidden=widths, n_classes=max(d.n_classes for d in ds), seed=seed)
        model, _ = run_probe_round(ds, spec, TrainOpts(lr=lr, epochs=epochs, seed=seed))
    except ValueError as exc:
        _fail(str(exc), EXIT_CONFIG)
    save_model(model, out_path)
    click.echo(f"probe model {model.digest()} -> {out_path}")


@main.command()
@click.argument("dataset_a", type=click.Path(exists=True))
@click.argument("dataset_b", type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(), help="YAML/JSON with MetricConfig fields.")
@click.option("--weights", default=None, help="Cost weights as wf:wl.")
@click.option("--epsilon", type=float, default=None, help="Sinkhorn regularization.")
@click.option("--privacy", is_flag=True, help="Run the secure-product and DP path.")
@click.option("--rho", type=float, default=None)
@click.option("--delta", type=float, default=1e-5)
@click.option("--seed", type=int, default=0, help="Seed for the DP noise.")
@click.option("--allow-gate-failure", is_flag=True, help="Acknowledge a budget that fails the gate.")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Write the report JSON here.")
def similarity(dataset_a, dataset_b, model_path, config_path, weights, epsilon, privacy, rho, delta, seed,
               allow_gate_failure, out_path):
    """Score DATASET_A against DATASET_B with a saved probe model."""
    d = _read_config(config_path)
    w = _parse_weights(weights)
    if w is not None:
        d["w_f"], d["w_l"] = w
    if epsilon is not None:
        d["epsilon"] = epsilon
    try:
        cfg = MetricConfig(**d)
        budget = None
        if privacy:
            if rho is None:
                raise ValueError("--privacy needs --rho")
            budget = PrivacyBudget(rho, delta, seed=seed)
    except (TypeError, ValueError) as exc:
        _fail(str(exc), EXIT_CONFIG)
    a, b = _load_dataset(dataset_a), _load_dataset(dataset_b)
    model = load_model(model_path)
    try:
        rep = pairwise_ot_similarity(a, b, model, cfg, budget, allow_gate_failure=allow_gate_failure)
    except PrivacyGateError as exc:
        _fail(str(exc), EXIT_GATE)
    except (InsufficientClassesError, ValueError) as exc:
        _fail(str(exc), EXIT_CONFIG)
    text = rep.to_json(out_path)
    click.echo(text if out_path is None else f"s_tilde={rep.s_tilde:.6f} -> {out_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(), required=True)
@click.option("--seed", "seeds", type=int, multiple=True, help="Override the seed list (repeatable).")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--privacy", is_flag=True)
@click.option("--rho", type=float, default=None)
@click.option("--delta", type=float, default=1e-5)
@click.option("--weights", default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--format", "formats", multiple=True, type=click.Choice(["csv", "json", "markdown"]),
              default=("csv", "json", "markdown"))
def experiment(config_path, seeds, out_dir, privacy, rho, delta, weights, epsilon, formats):
    """Run a scenario sweep and write its reports."""
    d = _read_config(config_path)
    if seeds:
        d["seeds"] = list(seeds)
    if out_dir is not None:
        d["out_dir"] = out_dir
    metric = dict(d.get("metric") or {})
    w = _parse_weights(weights)
    if w is not None:
        metric["w_f"], metric["w_l"] = w
    if epsilon is not None:
        metric["epsilon"] = epsilon
    d["metric"] = metric
    if privacy:
        if rho is None:
            _fail("--privacy needs --rho", EXIT_CONFIG)
        d["privacy"] = {**(d.get("privacy") or {}), "rho": rho, "delta": delta}
    try:
        cfg = ExperimentConfig.from_dict(d)
    except ConfigError as exc:
        _fail(str(exc), EXIT_CONFIG)
    if not cfg.out_dir:
        _fail("an output directory is required (--out or out_dir in the config)", EXIT_CONFIG)
    result = run_experiment(cfg)
    if result.rows:
        for path in emit_report(result, cfg.out_dir, formats):
            click.echo(str(path))
    for f in result.failures:
        click.echo(f"seed {f['seed']} level {f['level']} failed: {f['error']}", err=True)
    if any("PrivacyGateError" in f["error"] for f in result.failures) and not result.rows:
        sys.exit(EXIT_GATE)
    if result.failures:
        sys.exit(EXIT_PARTIAL)


@main.command()
@click.argument("rows_csv", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--format", "formats", multiple=True, type=click.Choice(["csv", "json", "markdown"]),
              default=("json", "markdown"))
def report(rows_csv, out_dir, formats):
    """Regenerate reports from a rows CSV written by ``experiment``."""
    try:
        result = load_result_csv(rows_csv)
    except (OSError, KeyError, ValueError) as exc:
        _fail(f"cannot read results {rows_csv}: {exc}", EXIT_CONFIG)
    if not result.rows:
        _fail(f"{rows_csv} holds no result rows", EXIT_CONFIG)
    for path in emit_report(result, out_dir, formats):
        click.echo(str(path))


if __name__ == "__main__":
    main()
