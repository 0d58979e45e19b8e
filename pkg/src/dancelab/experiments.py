"""Config-driven experiment runner: single runs, matrices, sweeps, projections.

Config files are flat ``key = value`` text, one entry per line, ``#`` starts a
comment.  Top-level keys are the :class:`ExperimentConfig` fields; training,
benchmark and baseline overrides use ``train.<name>``, ``bench.<name>`` and
``baseline.<name>``.  A JSON object with the same layout (nested ``train`` /
``bench`` / ``baseline`` objects) is accepted as well.  Example::

    regime = ODA
    method = DANCE
    seeds = 0,1,2
    train.total_iters = 2000
    bench.private_radius = 0.0
    probe = true

Results CSV columns are :data:`RESULT_COLUMNS`.  Seed rows have
``kind=seed``; each (method, regime) cell adds one ``kind=summary`` row whose
metric columns hold the mean over successful seeds and whose ``*_std``
columns hold the population standard deviation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .baselines import BaselineConfig, make_objective
from .evalkit import (MetricsReport, evaluate_model, linear_probe, predict_with_rejection,
                      score_predictions, write_table)
from .losses import AUTO
from .model import Model, classify, save_checkpoint
from .synthdata import REGIMES, BenchmarkConfig, openness, synth_office
from .trainer import (DanceObjective, TrainConfig, TrainState, config_dict, export_features,
                      fit, write_log)

METHODS = ("DANCE", "SO", "ENT", "DANN")
SWEEP_PARAMS = {"lambda": "lam", "m": "margin", "rho": "rho", "tau_nc": "tau_nc"}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the field name."""


# --- configuration ------------------------------------------------------------

@dataclass
class ExperimentConfig:
    regime: str = "CDA"
    method: str = "DANCE"
    seeds: list = field(default_factory=lambda: [0])
    n_target_private: int | None = None
    train: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    probe: bool = True
    output_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {', '.join(METHODS)}, got {self.method!r}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime: expected one of {', '.join(REGIMES)}, got {self.regime!r}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        for s in self.seeds:
            if isinstance(s, bool) or not isinstance(s, int) or s < 0:
                raise ConfigError(f"seeds: {s!r} is not a non-negative integer")
        if self.n_target_private is not None and self.n_target_private < 0:
            raise ConfigError("n_target_private: must be >= 0")
        self.train_config(self.seeds[0])
        bench = self.bench_config()
        if self.regime not in bench.splits:
            raise ConfigError(f"bench.splits: no split defined for {self.regime}")
        self.baseline_config()
        return self

    def train_config(self, seed: int) -> TrainConfig:
        if "seed" in self.train:
            raise ConfigError("train.seed: set seeds through the top-level 'seeds' field")
        cfg = _build("train", TrainConfig, self.train)
        cfg.seed = seed
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None
        return cfg

    def bench_config(self) -> BenchmarkConfig:
        return _build("bench", BenchmarkConfig, self.bench)

    def baseline_config(self) -> BaselineConfig:
        if "method" in self.baseline:
            raise ConfigError("baseline.method: use the top-level 'method' field")
        bc = _build("baseline", BaselineConfig, self.baseline)
        bc.method = "SO" if self.method == "DANCE" else self.method
        try:
            bc.validate()
        except ValueError as exc:
            raise ConfigError(f"baseline: {exc}") from None
        return bc

    def canonical(self) -> dict:
        """Fully resolved settings; the basis of :meth:`config_hash`."""
        tc = config_dict(self.train_config(self.seeds[0]))
        del tc["seed"]
        bench = asdict(self.bench_config())
        bench["splits"] = {k: list(v) for k, v in bench["splits"].items()}
        base = asdict(self.baseline_config())
        del base["method"]
        return {
            "regime": self.regime, "method": self.method, "seeds": list(self.seeds),
            "n_target_private": self.n_target_private, "train": tc, "bench": bench,
            "baseline": base, "probe": bool(self.probe),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)


def _build(prefix, cls, overrides):
    known = {f.name for f in fields(cls)}
    for k in overrides:
        if k not in known:
            raise ConfigError(f"{prefix}.{k}: unknown field")
    try:
        return cls(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def _parse_bool(key, raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _coerce(key, raw, default):
    """Convert flat-text ``raw`` to the type of ``default``."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(key, raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (tuple, list)):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if isinstance(default, dict):
            return json.loads(raw)
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    if key.endswith(".rho") and raw != AUTO:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number or 'auto', got {raw!r}") from None
    return raw


_SECTIONS = {"train": TrainConfig, "bench": BenchmarkConfig, "baseline": BaselineConfig}


def apply_setting(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    """Set one ``key=value`` pair (flat-text form) on ``cfg`` in place."""
    key = key.strip()
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"{key}: unknown section {section!r}")
        defaults = {f.name: f for f in fields(_SECTIONS[section])}
        if name not in defaults:
            raise ConfigError(f"{key}: unknown field")
        f = defaults[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        getattr(cfg, section)[name] = _coerce(key, raw, default)
        return cfg
    if key == "seeds":
        try:
            cfg.seeds = [int(v) for v in raw.replace(" ", "").split(",") if v]
        except ValueError:
            raise ConfigError(f"seeds: expected comma-separated integers, got {raw!r}") from None
    elif key == "n_target_private":
        raw = raw.strip()
        cfg.n_target_private = None if raw.lower() in ("", "none") else _coerce(key, raw, 0)
    elif key == "probe":
        cfg.probe = _parse_bool(key, raw)
    elif key in ("regime", "method"):
        setattr(cfg, key, raw.strip().upper())
    elif key == "output_dir":
        cfg.output_dir = raw.strip() or None
    else:
        raise ConfigError(f"{key}: unknown field")
    return cfg


def parse_flat(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        try:
            apply_setting(cfg, key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{exc} ({source}:{lineno})") from None
    return cfg


def from_dict(d: dict) -> ExperimentConfig:
    names = {f.name for f in fields(ExperimentConfig)}
    for k in d:
        if k not in names:
            raise ConfigError(f"{k}: unknown field")
    d = dict(d)
    for sec in ("train", "bench", "baseline"):
        if sec in d and not isinstance(d[sec], dict):
            raise ConfigError(f"{sec}: expected an object")
        d[sec] = dict(d.get(sec) or {})
    if "hidden_dims" in d["train"]:
        d["train"]["hidden_dims"] = tuple(d["train"]["hidden_dims"])
    if "seeds" in d:
        if not isinstance(d["seeds"], list):
            raise ConfigError("seeds: expected a list of integers")
        d["seeds"] = list(d["seeds"])
    return ExperimentConfig(**d)


def load_config(path) -> ExperimentConfig:
    """Read a flat-text or JSON experiment config and validate it."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            blob = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(blob, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        cfg = from_dict(blob)
    else:
        cfg = parse_flat(text, str(path))
    return cfg.validate()


# --- results rows ---------------------------------------------------------------

METRIC_FIELDS = ("overall_acc", "os", "os_star", "auc_unknown", "mean_entropy", "n_rejected",
                 "probe_known", "probe_novel")


@dataclass
class ResultsRow:
    kind: str
    method: str
    regime: str
    seed: int | None = None
    n_seeds: int = 1
    overall_acc: float | None = None
    os: float | None = None
    os_star: float | None = None
    auc_unknown: float | None = None
    mean_entropy: float | None = None
    n_rejected: float | None = None
    n_samples: int | None = None
    openness: float | None = None
    probe_known: float | None = None
    probe_novel: float | None = None
    overall_acc_std: float | None = None
    os_std: float | None = None
    os_star_std: float | None = None
    auc_unknown_std: float | None = None
    mean_entropy_std: float | None = None
    n_rejected_std: float | None = None
    probe_known_std: float | None = None
    probe_novel_std: float | None = None
    per_class: dict = field(default_factory=dict)
    seconds: float | None = None
    config_hash: str = ""
    error: str = ""

    @property
    def headline(self) -> float | None:
        return self.os if self.os is not None else self.overall_acc

    def comparable(self) -> dict:
        """Every field except wall-clock time."""
        d = asdict(self)
        del d["seconds"]
        return d

    def to_csv_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = json.dumps(self.per_class, sort_keys=True)
        return d

    @classmethod
    def from_csv_dict(cls, d: dict) -> "ResultsRow":
        kw = {}
        for f in fields(cls):
            raw = d.get(f.name, "")
            if f.name == "per_class":
                kw[f.name] = json.loads(raw) if raw else {}
            elif f.name in ("kind", "method", "regime", "config_hash", "error"):
                kw[f.name] = raw
            elif raw == "":
                kw[f.name] = None
            elif f.name in ("seed", "n_seeds", "n_samples"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


RESULT_COLUMNS = tuple(f.name for f in fields(ResultsRow))


def write_results(rows: list, path) -> Path:
    return write_table([r.to_csv_dict() for r in rows], path, RESULT_COLUMNS)


def read_results(path) -> list:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: header does not match the results schema")
        return [ResultsRow.from_csv_dict(r) for r in reader]


def summarize(rows: list, config_hash: str = "") -> ResultsRow:
    """Mean and population std over the successful seed rows of one cell."""
    ok = [r for r in rows if not r.error]
    first = rows[0]
    out = ResultsRow("summary", first.method, first.regime, None, len(ok),
                     config_hash=config_hash or first.config_hash)
    if not ok:
        out.error = f"all {len(rows)} seeds failed; first: {rows[0].error}"
        return out
    out.n_samples = ok[0].n_samples
    out.openness = ok[0].openness
    for name in METRIC_FIELDS:
        vals = [getattr(r, name) for r in ok]
        if any(v is None for v in vals):
            continue
        setattr(out, name, float(np.mean(vals)))
        setattr(out, f"{name}_std", float(np.std(vals)))
    keys = sorted({k for r in ok for k in r.per_class})
    out.per_class = {k: float(np.mean([r.per_class[k] for r in ok if k in r.per_class])) for k in keys}
    out.seconds = float(sum(r.seconds or 0.0 for r in ok))
    return out


# --- single experiment ---------------------------------------------------------

@dataclass
class SeedRun:
    row: ResultsRow
    state: TrainState
    scenario: object
    target: object
    rho: float
    eval_domain: str


@dataclass
class ExperimentOutcome:
    rows: list
    summary: ResultsRow
    runs: list = field(default_factory=list)

    @property
    def all_rows(self) -> list:
        return [*self.rows, self.summary]


def _objective(cfg: ExperimentConfig):
    if cfg.method == "DANCE":
        return DanceObjective()
    return make_objective(cfg.baseline_config())


def run_seed(cfg: ExperimentConfig, seed: int, config_hash: str | None = None) -> SeedRun:
    """Generate data, train and evaluate one seed of ``cfg``."""
    t0 = time.perf_counter()
    bench = cfg.bench_config()
    tc = cfg.train_config(seed)
    sc, src, tgt = synth_office(cfg.regime, seed, bench, cfg.n_target_private)
    obj = _objective(cfg)
    state = fit(src, tgt, tc, obj, sc.K, use_target=obj.uses_target)
    rho = tc.bind_rho(sc.K)
    rep, _, H = evaluate_model(state.model, tgt.X, tgt.y, sc, rho, obj.eval_domain)
    row = _row_from_report(rep, cfg.method, seed, config_hash or cfg.config_hash())
    row.mean_entropy = float(H.mean())
    if sc.has_unknown:
        row.openness = openness(sc)
    if cfg.probe:
        feats = export_features(state.model, tgt.X, obj.eval_domain)
        row.probe_known, row.probe_novel = linear_probe(feats, tgt.y, sc, seed)
    row.seconds = time.perf_counter() - t0
    return SeedRun(row, state, sc, tgt, rho, obj.eval_domain)


def _row_from_report(rep: MetricsReport, method, seed, config_hash) -> ResultsRow:
    return ResultsRow(
        "seed", method, rep.regime, seed, 1, rep.overall_acc, rep.os, rep.os_star,
        rep.auc_unknown, None, float(rep.n_rejected), rep.n_samples,
        per_class={str(k): v for k, v in rep.per_class.items()}, config_hash=config_hash,
    )


def _artifact_stem(cfg, seed):
    return f"{cfg.method}_{cfg.regime}_seed{seed}"


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> ExperimentOutcome:
    """All seeds of one (method, regime) cell plus the summary row.

    With an output directory, writes ``results.csv``, ``config.json`` and a
    checkpoint plus training log per seed.
    """
    cfg.validate()
    h = cfg.config_hash()
    runs = [run_seed(cfg, s, h) for s in cfg.seeds]
    rows = [r.row for r in runs]
    outcome = ExperimentOutcome(rows, summarize(rows, h), runs)
    out = output_dir or cfg.output_dir
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.canonical(), indent=2, sort_keys=True))
        for run in runs:
            stem = _artifact_stem(cfg, run.row.seed)
            save_checkpoint(run.state.model, out / f"{stem}.ckpt.json")
            write_log(run.state.log, out / f"{stem}.log.csv")
        write_results(outcome.all_rows, out / "results.csv")
    return outcome


# --- matrix -----------------------------------------------------------------------

@dataclass
class MatrixOutcome:
    rows: list
    summaries: list

    @property
    def all_rows(self) -> list:
        return [*self.rows, *self.summaries]

    def cell(self, method: str, regime: str) -> ResultsRow:
        for s in self.summaries:
            if s.method == method and s.regime == regime:
                return s
        raise KeyError((method, regime))

    def grid(self, metric: str = "headline") -> list:
        """One row per method, one column per regime (summary means)."""
        methods = list(dict.fromkeys(s.method for s in self.summaries))
        regimes = list(dict.fromkeys(s.regime for s in self.summaries))
        out = []
        for m in methods:
            row = {"method": m}
            for r in regimes:
                s = self.cell(m, r)
                row[r] = s.headline if metric == "headline" else getattr(s, metric)
            out.append(row)
        return out


def run_matrix(base: ExperimentConfig, regimes, methods, seeds=None, output_dir=None) -> MatrixOutcome:
    """Every (regime, method) pair with one shared hyperparameter set.

    A failing cell records its error in its rows and the grid carries on.
    """
    regimes, methods = list(regimes), list(methods)
    if not regimes or not methods:
        raise ConfigError("matrix: regimes and methods must be nonempty")
    seeds = list(seeds) if seeds is not None else list(base.seeds)
    rows, summaries = [], []
    for regime in regimes:
        for method in methods:
            cfg = replace(base, regime=regime, method=method, seeds=seeds,
                          train=dict(base.train), bench=dict(base.bench),
                          baseline=dict(base.baseline), output_dir=None)
            try:
                cfg.validate()
                h = cfg.config_hash()
            except ConfigError:
                h = ""
            cell = []
            for s in seeds:
                try:
                    cfg.validate()
                    cell.append(run_seed(cfg, s, h).row)
                except Exception as exc:  # recorded in the grid, not raised
                    cell.append(ResultsRow("seed", method, regime, s, config_hash=h,
                                           error=f"{type(exc).__name__}: {exc}"))
            rows.extend(cell)
            summaries.append(summarize(cell, h))
    outcome = MatrixOutcome(rows, summaries)
    if output_dir:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results(outcome.all_rows, out / "results.csv")
        write_table(outcome.grid(), out / "grid.csv", ["method", *regimes])
    return outcome


# --- sensitivity --------------------------------------------------------------------

SENSITIVITY_COLUMNS = ("param", "value", "method", "regime", "headline", "overall_acc",
                       "os", "os_star", "auc_unknown", "n_rejected", "error")


def run_sensitivity(param: str, values, base: ExperimentConfig, output_dir=None) -> list:
    """One experiment per value of ``param`` with everything else fixed."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"param: expected one of {', '.join(SWEEP_PARAMS)}, got {param!r}")
    values = list(values)
    if not values:
        raise ConfigError("values: at least one value is required")
    key = SWEEP_PARAMS[param]
    table = []
    for v in values:
        cfg = replace(base, train={**base.train, key: v}, bench=dict(base.bench),
                      baseline=dict(base.baseline), output_dir=None)
        s = run_experiment(cfg).summary
        table.append({"param": param, "value": v, "method": s.method, "regime": s.regime,
                      "headline": s.headline, "overall_acc": s.overall_acc, "os": s.os,
                      "os_star": s.os_star, "auc_unknown": s.auc_unknown,
                      "n_rejected": s.n_rejected, "error": s.error})
    if output_dir:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(table, out / f"sweep_{param}.csv", SENSITIVITY_COLUMNS)
    return table


RHO_SWEEP_COLUMNS = ("rho", "n_rejected", "overall_acc", "os", "os_star")


def rho_sweep(model: Model, X, y, scenario, rhos, domain: str = "target") -> list:
    """Re-threshold one trained model at each ``rho``; no retraining."""
    f = export_features(model, X, domain)
    _, P = classify(model, f)
    H = nk.row_entropy(P)
    out = []
    for rho in rhos:
        rep = score_predictions(predict_with_rejection(P, rho), y, scenario, entropy=H)
        out.append({"rho": float(rho), "n_rejected": rep.n_rejected, "overall_acc": rep.overall_acc,
                    "os": rep.os, "os_star": rep.os_star})
    return out


def is_non_increasing(seq) -> bool:
    seq = list(seq)
    return all(b <= a for a, b in zip(seq, seq[1:]))


# --- projection ------------------------------------------------------------------------

PROJECTION_COLUMNS = ("x", "y", "label", "known_flag")


def pca_2d(features: np.ndarray):
    """Project centered rows onto the top two principal axes.

    Returns ``(coords, explained)`` with ``explained`` the share of total
    variance captured by the two axes.  Inputs narrower than two columns are
    padded with a zero column.
    """
    F = nk.as_matrix(features)
    if F.shape[0] == 0:
        raise ValueError("no features to project")
    C = F - F.mean(axis=0)
    _, s, Vt = np.linalg.svd(C, full_matrices=False)
    k = min(2, Vt.shape[0])
    coords = C @ Vt[:k].T
    if k < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 2 - k))])
    total = float(np.sum(s ** 2))
    explained = float(np.sum(s[:k] ** 2) / total) if total > 0 else 1.0
    return coords, explained


def emit_projection(features, labels, path, known_labels=None):
    """Write the 2-D PCA projection as ``x,y,label,known_flag``; returns ``(path, explained)``."""
    coords, explained = pca_2d(features)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != coords.shape[0]:
        raise ValueError("one label per feature row required")
    known = set(int(k) for k in known_labels) if known_labels is not None else None
    rows = [{"x": float(x), "y": float(yv), "label": int(lab),
             "known_flag": int(known is None or int(lab) in known)}
            for (x, yv), lab in zip(coords, labels)]
    return write_table(rows, path, PROJECTION_COLUMNS), explained
