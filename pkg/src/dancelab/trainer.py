"""Training loop shared by DANCE and the baselines.

Each iteration forwards a source batch with source BN and a target batch with
target BN, accumulates all gradients into one buffer, then takes a single
scheduled Nesterov SGD step.  What the target batch contributes is decided by
a target objective (:class:`DanceObjective` here, others in ``baselines``).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .losses import (AUTO, cls_loss, es_loss_from_logits, nc_loss,
                     resolve_rho, total_loss)
from .memory import MemoryBank, assemble_candidates, init_bank
from .model import (Model, ModelConfig, bn_equal, bn_snapshot, classify,
                    forward_features, init_model, model_backward,
                    normalized_prototypes, normalized_prototypes_backward)
from .synthdata import LabeledSet

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "cls", "nc", "es", "aux", "total")


@dataclass
class TrainConfig:
    batch_size: int = 36
    total_iters: int = 2000
    base_lr: float = 0.01
    gamma_sched: float = 10.0
    power_sched: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    lam: float = 0.05
    margin: float = 0.5
    tau_nc: float = 0.05
    tau_cls: float = 0.05
    rho: float | str = AUTO
    memory_enabled: bool = True
    detach_prototypes_in_nc: bool = False
    bank_update_order: str = "before"
    hidden_dims: tuple = (64, 64)
    feat_dim: int = 16
    seed: int = 0
    debug_checks: bool = False

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        for name in ("base_lr", "tau_nc", "tau_cls"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.margin < 0:
            raise ValueError("lam and margin must be non-negative")
        if self.bank_update_order not in ("before", "after"):
            raise ValueError("bank_update_order must be 'before' or 'after'")
        if self.rho != AUTO and not float(self.rho) > 0:
            raise ValueError("rho must be positive or 'auto'")

    def bind_rho(self, K: int) -> float:
        return resolve_rho(K) if self.rho == AUTO else float(self.rho)

    def model_config(self, input_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, num_classes=num_classes,
                           hidden_dims=tuple(self.hidden_dims), feat_dim=self.feat_dim,
                           tau_nc=self.tau_nc, tau_cls=self.tau_cls, seed=self.seed)

    def optimizer(self) -> nk.OptimizerState:
        return nk.OptimizerState(self.base_lr, self.momentum, self.nesterov, self.weight_decay,
                                 self.gamma_sched, self.power_sched, self.total_iters)


class EpochSampler:
    """Yields full batches from seeded per-epoch permutations (no repeats in a batch)."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 2:
            raise ValueError("need at least 2 samples to form a training batch")
        self.n = n
        self.batch = min(batch_size, n)
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return idx


@dataclass
class StepOutput:
    """What a target objective hands back for one iteration."""

    nc: float = 0.0
    es: float = 0.0
    aux: float = 0.0
    grad_f_source: np.ndarray | None = None
    grad_f_target: np.ndarray | None = None
    grad_logits_target: np.ndarray | None = None


class SourceOnlyObjective:
    """No target loss; the target stream is still run unless ``use_target`` is off."""

    name = "SO"
    eval_domain = "source"
    uses_target = False
    params: dict = {}

    def setup(self, model, target, config, rng):
        self.params = {}

    def step(self, model, f_s, f_t, cache_t, idx_t, grads, config) -> StepOutput:
        return StepOutput()


class DanceObjective:
    """Neighborhood clustering over ``[bank; prototypes]`` plus entropy separation."""

    name = "DANCE"
    eval_domain = "target"
    uses_target = True

    def setup(self, model: Model, target: LabeledSet, config: TrainConfig, rng):
        self.params = {}
        self.rho = config.bind_rho(model.config.num_classes)
        self.bank = init_bank(model, target.X) if config.memory_enabled else None

    def step(self, model, f_s, f_t, cache_t, idx_t, grads, config) -> StepOutput:
        lam = config.lam
        W_hat, w_norms = normalized_prototypes(model)
        if self.bank is not None:
            if config.bank_update_order == "before":
                self.bank.update(idx_t, f_t)
            F = assemble_candidates(self.bank, W_hat)
            self_index, n_fixed = idx_t, self.bank.n_target
        else:
            F = assemble_candidates(f_t.copy(), W_hat)
            self_index, n_fixed = np.arange(f_t.shape[0]), f_t.shape[0]
        nc, g_f, g_proto, _ = nc_loss(f_t, F, config.tau_nc, self_index, n_fixed)
        if self.bank is not None and config.bank_update_order == "after":
            self.bank.update(idx_t, f_t)

        logits_t, _ = classify(model, f_t)
        es, g_logits, H = es_loss_from_logits(logits_t, self.rho, config.margin)

        if not config.detach_prototypes_in_nc:
            grads["proto.W"] += lam * normalized_prototypes_backward(W_hat, w_norms, g_proto)
        if config.debug_checks:
            _check_es(H, self.rho, config.margin, es)
            if self.bank is not None:
                assert np.array_equal(self.bank.V[idx_t], f_t)
        return StepOutput(nc=nc, es=es, grad_f_target=lam * g_f, grad_logits_target=lam * g_logits)


def _check_es(H, rho, m, es):
    vals = []
    for h in H:
        d = abs(float(h) - rho)
        vals.append(-d if d > m else 0.0)
        assert vals[-1] <= 0.0
    assert abs(sum(vals) / len(vals) - es) <= 1e-12


@dataclass
class TrainState:
    model: Model
    objective: object
    opt: nk.OptimizerState
    iteration: int = 0
    log: list = field(default_factory=list)

    @property
    def bank(self) -> MemoryBank | None:
        return getattr(self.objective, "bank", None)


def fit(source: LabeledSet, target: LabeledSet | None, config: TrainConfig,
        objective=None, num_classes: int | None = None, use_target: bool = True) -> TrainState:
    """Run the full training loop and return the final state."""
    config.validate()
    objective = objective if objective is not None else DanceObjective()
    if len(source) == 0:
        raise ValueError("empty source set")
    K = int(num_classes if num_classes is not None else source.y.max() + 1)
    if source.y.min() < 0 or source.y.max() >= K:
        raise ValueError(f"source labels must lie in [0, {K})")
    run_target = use_target and target is not None
    if objective.uses_target and not run_target:
        raise ValueError(f"{objective.name} needs a target set")
    if run_target:
        if len(target) == 0:
            raise ValueError("empty target set")
        if target.X.shape[1] != source.X.shape[1]:
            raise ValueError("source and target feature widths differ")

    model = init_model(config.model_config(source.X.shape[1], K))
    root = np.random.SeedSequence(config.seed)
    s_seed, t_seed, o_seed = root.spawn(3)
    src_sampler = EpochSampler(len(source), config.batch_size, np.random.default_rng(s_seed))
    tgt_sampler = EpochSampler(len(target), config.batch_size, np.random.default_rng(t_seed)) if run_target else None
    objective.setup(model, target, config, np.random.default_rng(o_seed))
    opt = config.optimizer()
    state = TrainState(model, objective, opt)

    for i in range(config.total_iters):
        lr = nk.lr_schedule(i, opt)
        grads = model.zero_grads()
        grads.update({k: np.zeros_like(v) for k, v in objective.params.items()})
        if config.debug_checks:
            tgt_before = bn_snapshot(model, "target")

        idx_s = src_sampler.next()
        f_s, cache_s = forward_features(model, source.X[idx_s], "source", training=True)
        logits_s, _ = classify(model, f_s)
        l_cls, g_logits_s = cls_loss(logits_s, source.y[idx_s])

        if config.debug_checks:
            assert bn_equal(tgt_before, bn_snapshot(model, "target")), "source pass touched target BN"

        out = StepOutput()
        if run_target:
            idx_t = tgt_sampler.next()
            src_before = bn_snapshot(model, "source") if config.debug_checks else None
            f_t, cache_t = forward_features(model, target.X[idx_t], "target", training=True)
            out = objective.step(model, f_s, f_t, cache_t, idx_t, grads, config)
            if out.grad_f_target is not None or out.grad_logits_target is not None:
                model_backward(model, cache_t, out.grad_f_target, out.grad_logits_target, grads)
            if config.debug_checks:
                assert bn_equal(src_before, bn_snapshot(model, "source")), "target pass touched source BN"
        model_backward(model, cache_s, out.grad_f_source, g_logits_s, grads)

        params = {**model.params, **objective.params}
        nk.sgd_step(params, grads, opt, lr)

        br = total_loss(l_cls, out.nc, out.es, config.lam)
        state.log.append({"iter": i, "lr": lr, "cls": br.cls, "nc": br.nc, "es": br.es,
                          "aux": out.aux, "total": br.total + out.aux})
        state.iteration = i + 1
    log.debug("%s finished %d iterations", objective.name, config.total_iters)
    return state


def train_dance(source: LabeledSet, target: LabeledSet, config: TrainConfig,
                num_classes: int | None = None):
    """DANCE training; returns ``(model, log)``."""
    st = fit(source, target, config, DanceObjective(), num_classes)
    return st.model, st.log


def export_features(model: Model, X: np.ndarray, domain: str, chunk: int = 4096) -> np.ndarray:
    """Inference-mode unit-norm features, row-aligned with ``X``."""
    X = np.asarray(X, dtype=np.float64)
    return np.vstack([forward_features(model, X[s:s + chunk], domain, training=False)[0]
                      for s in range(0, X.shape[0], chunk)])


def write_log(rows: list, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k == "iter" else repr(float(r[k]))) for k in LOG_COLUMNS})
    return path


def read_log(path) -> list:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["hidden_dims"] = list(d["hidden_dims"])
    return d
