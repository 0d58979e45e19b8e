"""Comparison methods run through the same training loop as DANCE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .losses import entropy_from_logits
from .model import classify
from .synthdata import LabeledSet
from .trainer import SourceOnlyObjective, StepOutput, TrainConfig, TrainState, fit


@dataclass
class BaselineConfig:
    method: str = "SO"
    ent_weight: float = 0.05
    grl_coeff: float = 1.0
    disc_hidden: int = 32

    def validate(self):
        if self.method not in ("SO", "ENT", "DANN"):
            raise ValueError(f"unknown baseline {self.method!r}")
        if self.ent_weight < 0 or self.grl_coeff < 0:
            raise ValueError("baseline weights must be non-negative")
        if self.disc_hidden < 1:
            raise ValueError("disc_hidden must be >= 1")


class EntObjective:
    """Mean entropy of the target class distribution, minimized."""

    name = "ENT"
    eval_domain = "target"
    uses_target = True

    def __init__(self, weight: float = 0.05):
        self.weight = weight

    def setup(self, model, target, config, rng):
        self.params = {}

    def step(self, model, f_s, f_t, cache_t, idx_t, grads, config) -> StepOutput:
        logits, _ = classify(model, f_t)
        ent, g_logits = entropy_from_logits(logits)
        return StepOutput(aux=self.weight * ent, grad_logits_target=self.weight * g_logits)


def grl_forward(x: np.ndarray) -> np.ndarray:
    return x


def grl_backward(upstream: np.ndarray, mu: float) -> np.ndarray:
    return -mu * upstream


def bce_with_logits(z: np.ndarray, label: float):
    """Mean binary cross-entropy for one-column logits; returns ``(loss, dz)``."""
    loss = np.logaddexp(0.0, z) - label * z
    dz = 1.0 / (1.0 + np.exp(-z)) - label
    return float(loss.mean()), dz / z.shape[0]


class DomainDiscriminator:
    """``f -> affine -> ReLU -> affine -> logit``; source = 0, target = 1."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        b1 = np.sqrt(6.0 / d)
        b2 = np.sqrt(6.0 / hidden)
        self.params = {
            "disc.W1": rng.uniform(-b1, b1, (d, hidden)),
            "disc.b1": np.zeros(hidden),
            "disc.W2": rng.uniform(-b2, b2, (hidden, 1)),
            "disc.b2": np.zeros(1),
        }

    def logits(self, f):
        p = self.params
        a = nk.affine_forward(f, p["disc.W1"], p["disc.b1"])
        h = nk.relu_forward(a)
        return nk.affine_forward(h, p["disc.W2"], p["disc.b2"]), (f, a, h)

    def loss_and_grads(self, f, label, grads, scale=1.0):
        """BCE on one domain's batch; accumulates into ``grads``, returns ``(loss, df)``."""
        p = self.params
        z, (f_in, a, h) = self.logits(f)
        loss, dz = bce_with_logits(z, label)
        dz = dz * scale
        dh, dW2, db2 = nk.affine_backward(h, p["disc.W2"], dz)
        da = nk.relu_backward(a, dh)
        df, dW1, db1 = nk.affine_backward(f_in, p["disc.W1"], da)
        grads["disc.W1"] += dW1
        grads["disc.b1"] += db1
        grads["disc.W2"] += dW2
        grads["disc.b2"] += db2
        return loss, df

    def accuracy(self, f_source, f_target) -> float:
        zs, _ = self.logits(f_source)
        zt, _ = self.logits(f_target)
        correct = np.sum(zs <= 0) + np.sum(zt > 0)
        return float(correct) / (zs.shape[0] + zt.shape[0])


class DannObjective:
    """Domain classification through a gradient-reversal connection."""

    name = "DANN"
    eval_domain = "target"
    uses_target = True

    def __init__(self, mu: float = 1.0, hidden: int = 32):
        self.mu = mu
        self.hidden = hidden

    def setup(self, model, target, config, rng):
        self.disc = DomainDiscriminator(model.config.feat_dim, self.hidden, rng)
        self.params = self.disc.params

    def step(self, model, f_s, f_t, cache_t, idx_t, grads, config) -> StepOutput:
        ls, df_s = self.disc.loss_and_grads(grl_forward(f_s), 0.0, grads, 0.5)
        lt, df_t = self.disc.loss_and_grads(grl_forward(f_t), 1.0, grads, 0.5)
        return StepOutput(aux=0.5 * (ls + lt),
                          grad_f_source=grl_backward(df_s, self.mu),
                          grad_f_target=grl_backward(df_t, self.mu))


def make_objective(bc: BaselineConfig):
    bc.validate()
    if bc.method == "SO":
        return SourceOnlyObjective()
    if bc.method == "ENT":
        return EntObjective(bc.ent_weight)
    return DannObjective(bc.grl_coeff, bc.disc_hidden)


def train_source_only(source: LabeledSet, config: TrainConfig, num_classes=None) -> TrainState:
    """Source cross-entropy only; no target data is touched."""
    return fit(source, None, config, SourceOnlyObjective(), num_classes, use_target=False)


def train_ent(source: LabeledSet, target: LabeledSet, config: TrainConfig,
              ent_weight: float = 0.05, num_classes=None) -> TrainState:
    return fit(source, target, config, EntObjective(ent_weight), num_classes)


def train_dann(source: LabeledSet, target: LabeledSet, config: TrainConfig,
               grl_coeff: float = 1.0, disc_hidden: int = 32, num_classes=None) -> TrainState:
    return fit(source, target, config, DannObjective(grl_coeff, disc_hidden), num_classes)
