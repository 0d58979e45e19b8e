"""Source cross-entropy, neighborhood clustering, entropy separation.

All entropies use the natural logarithm.  Each loss returns its value
together with the gradient wrt its direct inputs; chaining into the network
happens in the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk

AUTO = "auto"


def resolve_rho(K: int) -> float:
    """Entropy threshold ``ln(K) / 2`` for K known classes."""
    if K < 2:
        raise ValueError(f"need at least 2 classes to define rho, got K={K}")
    return math.log(K) / 2.0


@dataclass
class LossConfig:
    lam: float = 0.05
    margin: float = 0.5
    rho: float | str = AUTO
    tau_nc: float = 0.05

    def bind_rho(self, K: int) -> float:
        return resolve_rho(K) if self.rho == AUTO else float(self.rho)


@dataclass
class LossBreakdown:
    cls: float
    nc: float
    es: float
    total: float


def total_loss(cls: float, nc: float, es: float, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return LossBreakdown(cls, nc, es, cls + lam * (nc + es))


def cls_loss(logits: np.ndarray, labels):
    """Mean cross-entropy; returns ``(loss, dloss/dlogits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, K = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row required")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    log_p = nk.log_softmax_rows(logits)
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def _nc_logits(f_hat, F, tau, self_index):
    if not tau > 0:
        raise nk.ParameterError(f"tau_nc must be positive, got {tau}")
    self_index = np.asarray(self_index, dtype=np.int64)
    if self_index.shape != (f_hat.shape[0],):
        raise ValueError("one self index per batch row required")
    if self_index.size and (self_index.min() < 0 or self_index.max() >= F.shape[0]):
        raise IndexError("self index out of range of the candidate set")
    S = f_hat @ F.T / tau
    S[np.arange(f_hat.shape[0]), self_index] = -np.inf
    return S


def _masked_log_softmax(S):
    m = S.max(axis=1, keepdims=True)
    E = np.exp(S - m)
    return S - m - np.log(E.sum(axis=1, keepdims=True))


def nc_distribution(f_hat: np.ndarray, F: np.ndarray, tau_nc: float, self_index) -> np.ndarray:
    """Similarity distribution over candidates with each row's own slot excluded.

    ``P[i, j] = exp(F_j . f_i / tau) / Z_i`` where ``Z_i`` skips
    ``j = self_index[i]`` and ``P[i, self_index[i]] = 0``.
    """
    S = _nc_logits(f_hat, F, tau_nc, self_index)
    return np.exp(_masked_log_softmax(S))


def nc_loss(f_hat: np.ndarray, F: np.ndarray, tau_nc: float, self_index, n_fixed: int):
    """Mean entropy of the neighbor distributions.

    ``n_fixed`` leading rows of ``F`` (stored features) are constants; only the
    trailing prototype rows receive gradient.  Returns
    ``(loss, grad_f_hat, grad_prototype_rows, P)``.
    """
    S = _nc_logits(f_hat, F, tau_nc, self_index)
    log_P = _masked_log_softmax(S)
    P = np.exp(log_P)
    B = f_hat.shape[0]
    H = nk.row_entropy(P, log_P)
    # dH/ds_j = -p_j (log p_j + H); self column has p = 0 and drops out
    dS = -P * (nk.finite_log(P, log_P) + H[:, None]) / B
    grad_f = dS @ F / tau_nc
    grad_proto = dS[:, n_fixed:].T @ f_hat / tau_nc
    return float(H.mean()), grad_f, grad_proto, P


def nc_entropy(P: np.ndarray) -> float:
    """Loss value from an already computed distribution matrix."""
    return float(nk.row_entropy(P).mean())


def es_terms(H: np.ndarray, rho: float, m: float):
    """Per-sample separation contribution and its derivative wrt H."""
    dist = np.abs(H - rho)
    active = dist > m
    contrib = np.where(active, -dist, 0.0)
    dH = np.where(active, -np.sign(H - rho), 0.0)
    return contrib, dH


def es_loss(p_batch: np.ndarray, rho: float, m: float):
    """Entropy separation over a batch of class distributions.

    Returns ``(loss, grad_p)``.  Samples with ``|H - rho| <= m`` contribute
    zero value and zero gradient.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if m < 0:
        raise ValueError("margin must be non-negative")
    P = np.asarray(p_batch, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_P = np.log(P)
    H = nk.row_entropy(P, log_P)
    contrib, dH = es_terms(H, rho, m)
    B = P.shape[0]
    grad_p = -np.where(P > 0, nk.finite_log(P, log_P) + 1.0, 0.0) * (dH[:, None] / B)
    return float(contrib.mean()), grad_p


def es_loss_from_logits(logits: np.ndarray, rho: float, m: float, tau: float = 1.0):
    """Entropy separation with the gradient taken straight to ``logits``.

    ``logits`` are pre-temperature scores; probabilities are
    ``softmax(logits / tau)``.  Returns ``(loss, grad_logits, H)``.
    """
    log_P = nk.log_softmax_rows(logits, tau)
    P = np.exp(log_P)
    H = nk.row_entropy(P, log_P)
    contrib, dH = es_terms(H, rho, m)
    B = P.shape[0]
    return float(contrib.mean()), nk.entropy_logit_grad(P, log_P, dH / B, tau), H


def entropy_from_logits(logits: np.ndarray, tau: float = 1.0):
    """Mean entropy of ``softmax(logits / tau)`` and its logit gradient."""
    log_P = nk.log_softmax_rows(logits, tau)
    P = np.exp(log_P)
    H = nk.row_entropy(P, log_P)
    B = P.shape[0]
    return float(H.mean()), nk.entropy_logit_grad(P, log_P, np.full(B, 1.0 / B), tau)
