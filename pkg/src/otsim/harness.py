"""Experiment orchestration: heterogeneity sweeps, threshold classification, reports.

Every scenario expands into (seed, level) runs.  A run builds one client pair,
splits each client 80/20, trains the one-round probe on the training splits,
scores the pair, and trains the federated and local baselines for the
configured number of rounds.  Finished runs are appended to ``rows.jsonl`` in
the output directory, so an interrupted sweep picks up where it stopped.
"""

from __future__ import annotations

import csv
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import yaml
from scipy.stats import spearmanr

from . import __version__
from .datagen import (Dataset, SyntheticConfig, apply_concept_shift, apply_feature_skew,
                      apply_label_skew, gen_synthetic_pair, subsample_per_class, train_test_split)
from .metric import MetricConfig, similarity_from_activations, wasserstein_baseline
from .privacy import PrivacyBudget
from .probe import (ModelSpec, TrainOpts, evaluate, extract_activations, run_probe_round,
                    train_federated, train_local)

__all__ = [
    "SCENARIOS",
    "ConfigError",
    "ExperimentConfig",
    "ResultRow",
    "ExperimentResult",
    "classify_collaboration",
    "run_experiment",
    "sample_size_study",
    "aggregate",
    "emit_report",
    "load_result_csv",
    "default_mu_grid",
]

SCENARIOS = (
    "overlap_sweep",
    "feature_skew_sweep",
    "label_skew_sweep",
    "concept_shift_sweep",
    "sample_size_study",
    "weight_divergence_study",
    "fedprox_mu_sweep",
    "wasserstein_comparison",
)

# heterogeneity axis per scenario; the second entry is its default level grid
_DEFAULT_LEVELS = {
    "overlap_sweep": [0.0, 0.25, 0.5, 0.75, 1.0],
    "feature_skew_sweep": [0.0, 0.5, 1.0, 2.0, 4.0],
    "label_skew_sweep": [100.0, 1.0, 0.5, 0.1],
    "concept_shift_sweep": [0.0, 0.25, 0.5, 0.75, 1.0],
    "sample_size_study": [10, 25, 50, 100, 0],
    "weight_divergence_study": [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0],
    "fedprox_mu_sweep": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "wasserstein_comparison": [0.0, 0.25, 0.5, 0.75, 1.0],
}

BENEFICIAL_MAX = 0.2
DETRIMENTAL_MIN = 0.3


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


def default_mu_grid(points: int = 8) -> list[float]:
    return [float(x) for x in np.logspace(-6, math.log10(5.0), points)]


def classify_collaboration(s: float) -> str:
    """Band edges are inclusive: 0.2 is beneficial and 0.3 is detrimental."""
    if not (isinstance(s, (int, float, np.floating)) and 0.0 <= s <= 1.0):
        raise ValueError(f"similarity cost must lie in [0, 1] (got {s!r})")
    if s <= BENEFICIAL_MAX:
        return "beneficial"
    if s >= DETRIMENTAL_MIN:
        return "detrimental"
    return "uncertain"


# -- configuration ------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    scenario: str
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    levels: Optional[list[float]] = None
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=lambda: {"hidden": [32, 8], "activation": "tanh"})
    train: dict = field(default_factory=dict)
    metric: dict = field(default_factory=dict)
    privacy: Optional[dict] = None
    rounds: int = 10
    mu_grid: list[float] = field(default_factory=default_mu_grid)
    test_fraction: float = 0.2
    # overlap of the client pair scored by the sample-size study
    base_overlap: float = 0.5
    out_dir: Optional[str] = None
    workers: int = 1

    def __post_init__(self) -> None:
        if self.levels is None and self.scenario in _DEFAULT_LEVELS:
            self.levels = list(_DEFAULT_LEVELS[self.scenario])

    # structured views, each validated by the owning module
    def synthetic(self, seed: int, **over) -> SyntheticConfig:
        return SyntheticConfig(**{**self.data, **over, "seed": seed})

    def model_spec(self, seed: int) -> ModelSpec:
        m = dict(self.model)
        if "hidden" in m:
            m["hidden"] = tuple(m["hidden"])
        return ModelSpec(input_dim=self.data.get("dim", SyntheticConfig.dim),
                         n_classes=self.data.get("n_classes", SyntheticConfig.n_classes), seed=seed, **m)

    def train_opts(self, seed: int, mu: float = 0.0) -> TrainOpts:
        return TrainOpts(**{**self.train, "mu": mu, "seed": seed})

    def metric_config(self) -> MetricConfig:
        return MetricConfig(**self.metric)

    def budget(self, seed: int) -> Optional[PrivacyBudget]:
        if not self.privacy:
            return None
        p = {k: v for k, v in self.privacy.items() if k != "allow_gate_failure"}
        return PrivacyBudget(**p, seed=seed)

    def validate(self) -> None:
        problems = []
        if self.scenario not in SCENARIOS:
            problems.append(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if not self.seeds:
            problems.append("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            problems.append("seeds must be distinct")
        if not self.levels:
            problems.append("at least one heterogeneity level is required")
        if self.rounds < 1:
            problems.append(f"rounds must be >= 1 (got {self.rounds})")
        if self.workers < 1:
            problems.append(f"workers must be >= 1 (got {self.workers})")
        if not 0 < self.test_fraction < 1:
            problems.append(f"test_fraction must lie in (0, 1) (got {self.test_fraction})")
        if self.scenario == "fedprox_mu_sweep" and not self.mu_grid:
            problems.append("fedprox_mu_sweep needs a nonempty mu_grid")
        if self.scenario == "sample_size_study" and any(lv < 0 for lv in self.levels or []):
            problems.append("sample_size_study levels are per-class counts (0 = full data)")
        if self.scenario in ("overlap_sweep", "weight_divergence_study", "fedprox_mu_sweep",
                             "wasserstein_comparison", "concept_shift_sweep"):
            bad = [lv for lv in self.levels or [] if not 0 <= lv <= 1]
            if bad:
                problems.append(f"{self.scenario} levels must lie in [0, 1] (got {bad})")
        if self.scenario == "label_skew_sweep" and any(lv <= 0 for lv in self.levels or []):
            problems.append("label_skew_sweep levels are Dirichlet concentrations and must be > 0")
        if self.scenario == "feature_skew_sweep" and any(lv < 0 for lv in self.levels or []):
            problems.append("feature_skew_sweep levels must be >= 0")
        if not problems:
            try:
                for s in self.seeds[:1]:
                    self.synthetic(s).validate()
                    self.model_spec(s)
                    self.train_opts(s)
                    self.metric_config()
                    self.budget(s)
            except (TypeError, ValueError) as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "scenario" not in d:
            raise ConfigError("config needs a 'scenario'")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a mapping")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- results -------------------------------------------------------------------------

@dataclass
class ResultRow:
    scenario: str
    seed: int
    level: float
    s_tilde: float
    wasserstein: float = math.nan
    local_acc: float = math.nan
    fedavg_acc: float = math.nan
    fedprox_acc: dict = field(default_factory=dict)
    fedprox_loss: dict = field(default_factory=dict)
    divergence: float = math.nan
    s_full: float = math.nan

    @property
    def improvement(self) -> float:
        """Percent change of FedAvg over the local baseline."""
        if not self.local_acc:
            return math.nan
        return 100.0 * (self.fedavg_acc - self.local_acc) / self.local_acc

    @property
    def best_mu(self) -> float:
        """Proximal weight with the lowest held-out loss; ties go to the larger weight."""
        if not self.fedprox_loss:
            return math.nan
        return min(((loss, -float(mu)) for mu, loss in self.fedprox_loss.items()))[1] * -1

    @property
    def band(self) -> str:
        return classify_collaboration(self.s_tilde)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fedprox_acc"] = {str(k): v for k, v in self.fedprox_acc.items()}
        d["fedprox_loss"] = {str(k): v for k, v in self.fedprox_loss.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        d = dict(d)
        for key in ("fedprox_acc", "fedprox_loss"):
            d[key] = {str(k): float(v) for k, v in (d.get(key) or {}).items()}
        return cls(**d)

    def same(self, other: "ResultRow") -> bool:
        a, b = self.to_dict(), other.to_dict()
        for k in a:
            x, y = a[k], b[k]
            if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
                continue
            if x != y:
                return False
        return True


def _spearman(x: Iterable[float], y: Iterable[float]) -> float:
    x, y = np.asarray(list(x), float), np.asarray(list(y), float)
    ok = np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 3 or np.ptp(x[ok]) == 0 or np.ptp(y[ok]) == 0:
        return math.nan
    return float(spearmanr(x[ok], y[ok]).statistic)


def aggregate(rows: list[ResultRow]) -> dict:
    """Statistics derived only from the raw rows."""
    out: dict[str, Any] = {
        "n_rows": len(rows),
        "spearman_s_improvement": _spearman((r.s_tilde for r in rows), (r.improvement for r in rows)),
        "spearman_s_divergence": _spearman((r.s_tilde for r in rows), (r.divergence for r in rows)),
        "spearman_w_divergence": _spearman((r.wasserstein for r in rows), (r.divergence for r in rows)),
        "spearman_s_best_mu": _spearman((r.s_tilde for r in rows), (r.best_mu for r in rows)),
    }
    confusion = {band: {"fl_helps": 0, "fl_hurts": 0} for band in ("beneficial", "uncertain", "detrimental")}
    for r in rows:
        if math.isnan(r.fedavg_acc) or math.isnan(r.local_acc):
            continue
        confusion[r.band]["fl_helps" if r.fedavg_acc >= r.local_acc else "fl_hurts"] += 1
    out["confusion"] = confusion
    return out


@dataclass
class ExperimentResult:
    scenario: str
    rows: list[ResultRow] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        return aggregate(self.rows)

    def best_mu_by_level(self) -> dict[float, float]:
        """Best proximal weight per level, from seed-averaged held-out losses."""
        out = {}
        for lv in sorted({r.level for r in self.rows}):
            losses: dict[str, list[float]] = {}
            for r in self.rows:
                if r.level == lv:
                    for mu, x in r.fedprox_loss.items():
                        losses.setdefault(mu, []).append(x)
            if losses:
                out[lv] = -min((float(np.mean(v)), -float(mu)) for mu, v in losses.items())[1]
        return out

    def mean_s_by_level(self) -> dict[float, float]:
        return {lv: float(np.mean([r.s_tilde for r in self.rows if r.level == lv]))
                for lv in sorted({r.level for r in self.rows})}

    def same(self, other: "ExperimentResult") -> bool:
        return (self.scenario == other.scenario and len(self.rows) == len(other.rows)
                and all(a.same(b) for a, b in zip(self.rows, other.rows)))


# -- single runs ---------------------------------------------------------------------

def _client_pair(cfg: ExperimentConfig, seed: int, level: float) -> tuple[Dataset, Dataset]:
    sc = cfg.scenario
    if sc in ("overlap_sweep", "weight_divergence_study", "fedprox_mu_sweep", "wasserstein_comparison"):
        return gen_synthetic_pair(cfg.synthetic(seed, overlap=level))
    a, b = gen_synthetic_pair(cfg.synthetic(seed, overlap=1.0))
    if sc == "feature_skew_sweep":
        return a, apply_feature_skew(b, level, seed)
    if sc == "concept_shift_sweep":
        return a, apply_concept_shift(b, level, seed)
    if sc == "label_skew_sweep":
        pooled = Dataset(np.vstack([a.features, b.features]), np.concatenate([a.labels, b.labels]), a.n_classes)
        part = apply_label_skew(pooled, level, 2, seed)
        return part[0], part[1]
    raise ConfigError(f"scenario {sc!r} has no client-pair builder")


def _run_one(cfg: ExperimentConfig, seed: int, level: float) -> ResultRow:
    a, b = _client_pair(cfg, seed, level)
    a_tr, a_te = train_test_split(a, cfg.test_fraction, seed)
    b_tr, b_te = train_test_split(b, cfg.test_fraction, seed + 1)
    spec = cfg.model_spec(seed)
    opts = cfg.train_opts(seed)
    mcfg = cfg.metric_config()

    probe, _ = run_probe_round([a_tr, b_tr], spec, opts)
    budget = cfg.budget(seed)
    if budget is not None:
        from .privacy import private_pairwise_similarity
        allow = bool(cfg.privacy.get("allow_gate_failure", False))
        s = private_pairwise_similarity(a_tr, b_tr, probe, mcfg, budget, allow).s_tilde
        act_a, act_b = extract_activations(a_tr, probe), extract_activations(b_tr, probe)
    else:
        act_a, act_b = extract_activations(a_tr, probe, "A"), extract_activations(b_tr, probe, "B")
        s = similarity_from_activations(act_a, act_b, mcfg).s_tilde
    w = wasserstein_baseline(act_a, act_b, mcfg.epsilon, mcfg.tol, mcfg.max_iter)

    local = float(np.mean([evaluate(train_local(tr, spec, opts, cfg.rounds), te)["accuracy"]
                           for tr, te in ((a_tr, a_te), (b_tr, b_te))]))
    trace = train_federated([a_tr, b_tr], spec, opts, cfg.rounds, "fedavg", [a_te, b_te])
    fed = float(np.mean([m["accuracy"] for m in trace.rounds[-1].metrics]))

    prox_acc, prox_loss = {}, {}
    if cfg.scenario == "fedprox_mu_sweep":
        for mu in cfg.mu_grid:
            tp = train_federated([a_tr, b_tr], spec, cfg.train_opts(seed, mu), cfg.rounds, "fedprox", [a_te, b_te])
            prox_acc[repr(float(mu))] = float(np.mean([m["accuracy"] for m in tp.rounds[-1].metrics]))
            prox_loss[repr(float(mu))] = float(np.mean([m["loss"] for m in tp.rounds[-1].metrics]))

    return ResultRow(cfg.scenario, seed, float(level), float(s), float(w), local, fed, prox_acc, prox_loss,
                     trace.terminal_divergence())


def sample_size_study(cfg: ExperimentConfig, seed: int) -> list[ResultRow]:
    """Score one client pair on per-class subsamples against the full-data score.

    The probe is trained once on the full data; only the scored activations are
    subsampled.  Levels are per-class counts and 0 means the full data.  The
    metric runs with the per-class minimum lowered so small subsamples are
    scored rather than skipped.
    """
    a, b = gen_synthetic_pair(cfg.synthetic(seed, overlap=cfg.base_overlap))
    need = 200
    for d, name in ((a, "A"), (b, "B")):
        lo = int(d.class_counts().min())
        if lo < need:
            raise ValueError(f"sample-size study needs >= {need} samples per class; client {name} has {lo}")
    spec = cfg.model_spec(seed)
    probe, _ = run_probe_round([a, b], spec, cfg.train_opts(seed))
    mcfg = replace(cfg.metric_config(), min_samples=2, enforce_dim_floor=False)
    full = similarity_from_activations(extract_activations(a, probe, "A"),
                                       extract_activations(b, probe, "B"), mcfg).s_tilde
    rows = []
    for lv in cfg.levels:
        per = int(lv) if lv else None
        sa = subsample_per_class(a, per, seed)
        sb = subsample_per_class(b, per, seed + 1)
        s = similarity_from_activations(extract_activations(sa, probe, "A"),
                                        extract_activations(sb, probe, "B"), mcfg).s_tilde
        rows.append(ResultRow("sample_size_study", seed, float(lv), float(s), s_full=float(full)))
    return rows


def _run_seed(cfg: ExperimentConfig, seed: int, levels: list[float]) -> tuple[list[ResultRow], list[dict]]:
    if cfg.scenario == "sample_size_study":
        try:
            return [r for r in sample_size_study(cfg, seed) if r.level in levels], []
        except Exception as exc:  # recorded per seed, the sweep continues
            return [], [_failure(seed, None, exc)]
    rows, failures = [], []
    for lv in levels:
        try:
            rows.append(_run_one(cfg, seed, lv))
        except Exception as exc:  # recorded per run, the sweep continues
            failures.append(_failure(seed, lv, exc))
    return rows, failures


def _failure(seed: int, level, exc: Exception) -> dict:
    return {"seed": seed, "level": level, "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(limit=3)}


def _load_progress(path: Path) -> list[ResultRow]:
    rows = []
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                if rec.get("kind") == "row":
                    rows.append(ResultRow.from_dict(rec["row"]))
    return rows


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every (seed, level) of the scenario.

    With ``out_dir`` set, rows are appended to ``rows.jsonl`` as each seed
    finishes and runs already present there are not repeated.  Failed runs
    are recorded and retried on the next invocation.
    """
    cfg.validate()
    log = None
    done: dict[tuple[int, float], ResultRow] = {}
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log = out / "rows.jsonl"
        done = {(r.seed, r.level): r for r in _load_progress(log) if r.scenario == cfg.scenario}

    todo = []
    for seed in cfg.seeds:
        missing = [float(lv) for lv in cfg.levels if (seed, float(lv)) not in done]
        if missing:
            todo.append((seed, missing))

    failures: list[dict] = []

    def persist(rows: list[ResultRow], fails: list[dict]) -> None:
        for r in rows:
            done[(r.seed, r.level)] = r
        failures.extend(fails)
        if log is not None:
            with log.open("a") as fh:
                for r in rows:
                    fh.write(json.dumps({"kind": "row", "row": r.to_dict()}) + "\n")
                for f in fails:
                    fh.write(json.dumps({"kind": "failure", **f}) + "\n")

    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futures = [pool.submit(_run_seed, cfg, seed, lvs) for seed, lvs in todo]
            for fut in futures:
                persist(*fut.result())
    else:
        for seed, lvs in todo:
            persist(*_run_seed(cfg, seed, lvs))

    rows = [done[(s, float(lv))] for s in cfg.seeds for lv in cfg.levels if (s, float(lv)) in done]
    return ExperimentResult(cfg.scenario, rows, failures)


# -- reports -------------------------------------------------------------------------

_CSV_FIELDS = ["scenario", "seed", "level", "s_tilde", "wasserstein", "local_acc", "fedavg_acc",
               "fedprox_acc", "fedprox_loss", "divergence", "s_full", "improvement", "best_mu", "band"]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def load_result_csv(path: str | Path) -> ExperimentResult:
    """Rebuild an ExperimentResult from :func:`emit_report`'s rows CSV."""
    with Path(path).open(newline="") as fh:
        recs = list(csv.DictReader(fh))
    rows = []
    for rec in recs:
        rows.append(ResultRow(
            scenario=rec["scenario"], seed=int(rec["seed"]), level=float(rec["level"]),
            s_tilde=float(rec["s_tilde"]), wasserstein=float(rec["wasserstein"]),
            local_acc=float(rec["local_acc"]), fedavg_acc=float(rec["fedavg_acc"]),
            fedprox_acc={k: float(v) for k, v in json.loads(rec["fedprox_acc"]).items()},
            fedprox_loss={k: float(v) for k, v in json.loads(rec["fedprox_loss"]).items()},
            divergence=float(rec["divergence"]), s_full=float(rec["s_full"]),
        ))
    scenario = rows[0].scenario if rows else ""
    return ExperimentResult(scenario, rows)


def _markdown(r: ExperimentResult) -> str:
    agg = r.aggregates
    lines = [f"# Experiment report: {r.scenario}", "",
             f"otsim {__version__}; {len(r.rows)} runs, {len(r.failures)} failures.", "",
             "## Threshold confusion table", "",
             "| band | FL helps | FL hurts |", "|---|---|---|"]
    for band, c in agg["confusion"].items():
        lines.append(f"| {band} | {c['fl_helps']} | {c['fl_hurts']} |")
    lines += ["", "## Rank correlations", "", "| pair | Spearman |", "|---|---|"]
    for key in ("spearman_s_improvement", "spearman_s_divergence", "spearman_w_divergence",
                "spearman_s_best_mu"):
        lines.append(f"| {key.removeprefix('spearman_').replace('_', ' vs ')} | {agg[key]:.3f} |")
    lines += ["", "## Runs", "",
              "| seed | level | s_tilde | band | local | fedavg | improvement % | divergence |",
              "|---|---|---|---|---|---|---|---|"]
    for row in r.rows:
        lines.append(f"| {row.seed} | {row.level:g} | {row.s_tilde:.4f} | {row.band} | {row.local_acc:.4f} "
                     f"| {row.fedavg_acc:.4f} | {row.improvement:.2f} | {row.divergence:.4f} |")
    if r.failures:
        lines += ["", "## Failures", ""]
        lines += [f"- seed {f['seed']}, level {f['level']}: {f['error']}" for f in r.failures]
    return "\n".join(lines) + "\n"


def _plot_rows(r: ExperimentResult) -> list[tuple[str, float, float, str]]:
    """Long format (figure, x, y, series)."""
    out = []
    for row in r.rows:
        if row.scenario == "sample_size_study":
            out.append(("sample_size", row.s_full, row.s_tilde, f"per_class={row.level:g}"))
            continue
        out.append(("improvement", row.s_tilde, row.improvement, "fedavg"))
        for mu, acc in row.fedprox_acc.items():
            if row.local_acc:
                out.append(("improvement", row.s_tilde, 100.0 * (acc - row.local_acc) / row.local_acc,
                            f"fedprox_mu={mu}"))
        out.append(("divergence", row.s_tilde, row.divergence, "s_tilde"))
        out.append(("divergence", row.wasserstein, row.divergence, "wasserstein"))
    return out


def emit_report(r: ExperimentResult, out_dir: str | Path, formats: Iterable[str] = ("csv", "json", "markdown"),
                stem: str = "report") -> list[Path]:
    """Write the requested formats plus ``<stem>_plot.csv``; returns the paths written."""
    if not r.rows:
        raise ValueError("cannot report an empty result")
    formats = list(formats)
    unknown = set(formats) - {"csv", "json", "markdown"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    out = Path(out_dir)
    written: list[Path] = []

    def write(path: Path, text: str) -> None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write report file {path}: {exc}") from exc
        written.append(path)

    if "csv" in formats:
        lines = [",".join(_CSV_FIELDS)]
        for row in r.rows:
            d = row.to_dict()
            vals = [_fmt(d[k]) if k in d else _fmt(getattr(row, k)) for k in _CSV_FIELDS]
            for key in ("fedprox_acc", "fedprox_loss"):
                vals[_CSV_FIELDS.index(key)] = '"' + json.dumps(d[key]).replace('"', '""') + '"'
            lines.append(",".join(vals))
        write(out / f"{stem}.csv", "\n".join(lines) + "\n")
    if "json" in formats:
        doc = {"schema_version": __version__, "scenario": r.scenario,
               "rows": [{**row.to_dict(), "improvement": row.improvement, "best_mu": row.best_mu,
                         "band": row.band} for row in r.rows],
               "aggregates": r.aggregates, "failures": r.failures}
        write(out / f"{stem}.json", json.dumps(doc, indent=2, allow_nan=True))
    if "markdown" in formats:
        write(out / f"{stem}.md", _markdown(r))
    plot = ["figure,x,y,series"] + [f"{f},{_fmt(x)},{_fmt(y)},{s}" for f, x, y, s in _plot_rows(r)]
    write(out / f"{stem}_plot.csv", "\n".join(plot) + "\n")
    return written
