"""Entropy-based unknown rejection and the evaluation metrics.

Predictions use ``UNKNOWN = -1`` for rejected samples.  A target-private
sample counts as correct exactly when it is rejected.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import numkernel as nk
from .model import Model, classify
from .synthdata import ShiftScenario
from .trainer import export_features

UNKNOWN = -1


def predict_with_rejection(probs: np.ndarray, rho: float) -> np.ndarray:
    """argmax class, or UNKNOWN where the entropy exceeds ``rho``."""
    P = nk.as_matrix(probs)
    H = nk.row_entropy(P)
    pred = np.argmax(P, axis=1)  # first maximum on ties
    return np.where(H > rho, UNKNOWN, pred)


@dataclass
class MetricsReport:
    regime: str
    overall_acc: float
    os: float | None = None
    os_star: float | None = None
    auc_unknown: float | None = None
    per_class: dict = field(default_factory=dict)   # class label (or "unknown") -> accuracy
    n_rejected: int = 0
    n_samples: int = 0

    @property
    def headline(self) -> float:
        """Overall accuracy for closed/partial settings, OS when unknowns exist."""
        return self.os if self.os is not None else self.overall_acc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_class"] = {(k if k == "unknown" else int(k)): v for k, v in d.get("per_class", {}).items()}
        return cls(**d)


def score_predictions(preds, truth, scenario: ShiftScenario, entropy=None) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ValueError("predictions and labels differ in length")
    legal = set(scenario.target_labels)
    if not set(np.unique(truth).tolist()) <= legal:
        raise ValueError("truth contains labels outside the scenario's target label set")
    unknown_mask = np.isin(truth, scenario.target_private)
    correct = np.where(unknown_mask, preds == UNKNOWN, preds == truth)

    per_class = {}
    for c in scenario.shared:
        sel = truth == c
        if sel.any():
            per_class[c] = float(correct[sel].mean())
    rep = MetricsReport(
        regime=scenario.regime,
        overall_acc=float(correct.mean()) if correct.size else 0.0,
        n_rejected=int(np.sum(preds == UNKNOWN)),
        n_samples=int(truth.size),
    )
    if scenario.has_unknown:
        known = list(per_class.values())
        rep.os_star = float(np.mean(known)) if known else 0.0
        if unknown_mask.any():
            per_class["unknown"] = float(correct[unknown_mask].mean())
        rep.os = float(np.mean(list(per_class.values())))
        if entropy is not None and unknown_mask.any() and (~unknown_mask).any():
            rep.auc_unknown = auc_unknown(entropy, unknown_mask)
    rep.per_class = per_class
    return rep


def auc_unknown(scores, is_unknown) -> float:
    """ROC-AUC of ``scores`` for flagging unknowns (Mann-Whitney, ties = 1/2)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(is_unknown, dtype=bool).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one unknown and one known sample")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_model(model: Model, X, y, scenario: ShiftScenario, rho: float, domain: str = "target"):
    """Inference-mode predictions on ``X`` scored against ``y``."""
    f = export_features(model, X, domain)
    _, P = classify(model, f)
    H = nk.row_entropy(P)
    preds = predict_with_rejection(P, rho)
    return score_predictions(preds, y, scenario, entropy=H), preds, H


# --- one-shot linear probe ----------------------------------------------------

PROBE_EPOCHS = 100
PROBE_LR = 0.1


def linear_probe(features, labels, scenario: ShiftScenario, seed: int = 0,
                 epochs: int = PROBE_EPOCHS, lr: float = PROBE_LR, temperature: float = 1.0):
    """Fit a bias-free softmax classifier on one labeled sample per target class.

    Support samples are picked with ``seed``; everything else is the
    evaluation split.  Returns ``(known_acc, novel_acc)``; ``novel_acc`` is
    ``None`` without target-private classes.
    """
    F = nk.as_matrix(features)
    labels = np.asarray(labels, dtype=np.int64)
    classes = list(scenario.target_labels)
    rng = np.random.default_rng(seed)
    support = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise ValueError(f"class {c} has no sample to use as support")
        support.append(int(rng.choice(members)))
    support = np.asarray(support)
    col = {c: j for j, c in enumerate(classes)}
    ys = np.array([col[int(c)] for c in labels[support]])
    Xs = F[support]

    W = np.zeros((F.shape[1], len(classes)))
    n = len(support)
    for _ in range(epochs):
        P = nk.softmax_rows(Xs @ W, temperature)
        P[np.arange(n), ys] -= 1.0
        W -= lr * (Xs.T @ P) / (n * temperature)

    mask = np.ones(len(labels), dtype=bool)
    mask[support] = False
    pred = np.array(classes)[np.argmax(F[mask] @ W, axis=1)]
    truth = labels[mask]
    hit = pred == truth
    novel = np.isin(truth, scenario.target_private)
    known_acc = float(hit[~novel].mean()) if (~novel).any() else None
    novel_acc = float(hit[novel].mean()) if novel.any() else None
    return known_acc, novel_acc


# --- openness sweep -----------------------------------------------------------

SWEEP_COLUMNS = ("method", "n_unknown", "openness", "overall_acc", "os", "os_star",
                 "auc_unknown", "n_rejected")


def openness_sweep(runner, counts, methods) -> list:
    """Evaluate each method at each number of target-private classes.

    ``runner(method, n_unknown)`` must return ``(MetricsReport, ShiftScenario)``.
    """
    from .synthdata import openness

    rows = []
    for n_unk in counts:
        for method in methods:
            rep, sc = runner(method, n_unk)
            rows.append({
                "method": method, "n_unknown": int(n_unk), "openness": openness(sc),
                "overall_acc": rep.overall_acc, "os": rep.os, "os_star": rep.os_star,
                "auc_unknown": rep.auc_unknown, "n_rejected": rep.n_rejected,
            })
    return rows


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v):
    if v == "":
        return None
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def write_table(rows: list, path, columns=None) -> Path:
    """Flat CSV; ``None`` becomes an empty cell, floats keep full precision."""
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
    return path


def read_table(path) -> list:
    with Path(path).open(newline="") as fh:
        return [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def is_nan(x) -> bool:
    return isinstance(x, float) and math.isnan(x)
