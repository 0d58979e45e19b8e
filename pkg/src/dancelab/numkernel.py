"""Dense float64 primitives with explicit forward/backward passes.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  Every
backward function here takes the upstream gradient and the values saved by
the matching forward, and returns gradients with the input's shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ParameterError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = as_matrix(A)
    B = as_matrix(B)
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape} by {B.shape}")
    return A @ B


# --- affine ---------------------------------------------------------------

def affine_forward(X: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``X @ W + b`` with ``W`` of shape (in, out)."""
    if X.shape[1] != W.shape[0]:
        raise ShapeError(f"affine input width {X.shape[1]} != weight rows {W.shape[0]}")
    out = X @ W
    if b is not None:
        out = out + b
    return out


def affine_backward(X: np.ndarray, W: np.ndarray, dY: np.ndarray):
    """Returns (dX, dW, db)."""
    if dY.shape != (X.shape[0], W.shape[1]):
        raise ShapeError(f"upstream gradient shape {dY.shape} does not match affine output")
    return dY @ W.T, X.T @ dY, dY.sum(axis=0)


# --- L2 row normalization ---------------------------------------------------

def l2_normalize_rows(X: np.ndarray):
    """Return ``(X_hat, norms)`` where each row of ``X_hat`` has unit norm."""
    X = as_matrix(X)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        bad = int(np.flatnonzero((norms == 0.0) | ~np.isfinite(norms))[0])
        raise DegenerateInputError(f"row {bad} has zero (or non-finite) norm")
    return X / norms[:, None], norms


def l2_normalize_backward(X_hat: np.ndarray, norms: np.ndarray, dXhat: np.ndarray) -> np.ndarray:
    """Gradient through row normalization.

    Per row: ``(g - x_hat * <x_hat, g>) / ||x||``.  Takes the normalized rows
    (not the raw input) since that is what the forward hands back.
    """
    if dXhat.shape != X_hat.shape or norms.shape != (X_hat.shape[0],):
        raise ShapeError("l2_normalize_backward: shapes inconsistent with forward")
    radial = np.einsum("ij,ij->i", X_hat, dXhat)
    return (dXhat - X_hat * radial[:, None]) / norms[:, None]


# --- softmax / entropy ------------------------------------------------------

def log_softmax_rows(Z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    S = as_matrix(Z) / tau
    S = S - S.max(axis=1, keepdims=True)
    return S - np.log(np.exp(S).sum(axis=1, keepdims=True))


def softmax_rows(Z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row softmax of ``Z / tau``, stabilized by subtracting the row max."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    S = as_matrix(Z) / tau
    E = np.exp(S - S.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def softmax_backward(P: np.ndarray, dP: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Gradient wrt the logits ``Z`` given ``P = softmax(Z / tau)``."""
    inner = np.einsum("ij,ij->i", P, dP)
    return P * (dP - inner[:, None]) / tau


def row_entropy(P: np.ndarray, log_P: np.ndarray | None = None) -> np.ndarray:
    """Shannon entropy (natural log) of each row; ``0 log 0`` is taken as 0."""
    if log_P is None:
        with np.errstate(divide="ignore"):
            log_P = np.log(P)
    return -(P * finite_log(P, log_P)).sum(axis=1)


def finite_log(P: np.ndarray, log_P: np.ndarray) -> np.ndarray:
    """``log_P`` with entries where ``P == 0`` replaced by 0."""
    return np.where(P > 0, log_P, 0.0)


def entropy_logit_grad(P: np.ndarray, log_P: np.ndarray, dH: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Gradient of ``sum_i dH_i * H(P_i)`` wrt the logits of ``P``.

    Uses dH/dz_k = -p_k (log p_k + H) / tau, which stays finite when p_k
    underflows to 0.
    """
    H = row_entropy(P, log_P)
    plogp = P * (finite_log(P, log_P) + H[:, None])
    return -plogp * (dH[:, None] / tau)


# --- ReLU -------------------------------------------------------------------

def relu_forward(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_backward(X: np.ndarray, dY: np.ndarray) -> np.ndarray:
    return np.where(X > 0, dY, 0.0)


# --- batch norm -------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum_bn: float = 0.1

    @classmethod
    def fresh(cls, n_features: int, epsilon: float = 1e-5, momentum_bn: float = 0.1) -> "BatchNormState":
        if epsilon <= 0:
            raise ParameterError("batch norm epsilon must be positive")
        if not 0.0 <= momentum_bn <= 1.0:
            raise ParameterError("momentum_bn must lie in [0, 1]")
        return cls(
            gamma=np.ones(n_features),
            beta=np.zeros(n_features),
            running_mean=np.zeros(n_features),
            running_var=np.ones(n_features),
            epsilon=epsilon,
            momentum_bn=momentum_bn,
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
            self.running_var.copy(), self.epsilon, self.momentum_bn,
        )


@dataclass
class BatchNormCache:
    x_norm: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool


def batchnorm_forward(X: np.ndarray, state: BatchNormState, training: bool):
    """Normalize columns of ``X``; returns ``(Y, cache)``.

    In training mode the biased batch variance normalizes the batch and the
    running statistics are updated in place (unbiased variance, as torch
    does).  In inference mode the running statistics are used as-is.
    """
    n = X.shape[0]
    if X.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"batch norm expects width {state.gamma.shape[0]}, got {X.shape[1]}")
    if training:
        if n < 2:
            raise DegenerateInputError("batch norm needs at least 2 samples in training mode")
        mean = X.mean(axis=0)
        var = X.var(axis=0)
        mom = state.momentum_bn
        state.running_mean[:] = (1.0 - mom) * state.running_mean + mom * mean
        state.running_var[:] = (1.0 - mom) * state.running_var + mom * var * n / (n - 1)
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_norm = (X - mean) * inv_std
    return x_norm * state.gamma + state.beta, BatchNormCache(x_norm, inv_std, state.gamma.copy(), training)


def batchnorm_backward(dY: np.ndarray, cache: BatchNormCache):
    """Returns (dX, dgamma, dbeta)."""
    if dY.shape != cache.x_norm.shape:
        raise ShapeError("batch norm upstream gradient shape mismatch")
    dgamma = (dY * cache.x_norm).sum(axis=0)
    dbeta = dY.sum(axis=0)
    dxn = dY * cache.gamma
    if not cache.training:
        return dxn * cache.inv_std, dgamma, dbeta
    n = dY.shape[0]
    dX = (cache.inv_std / n) * (
        n * dxn - dxn.sum(axis=0) - cache.x_norm * (dxn * cache.x_norm).sum(axis=0)
    )
    return dX, dgamma, dbeta


# --- optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    base_lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    gamma_sched: float = 10.0
    power_sched: float = 0.75
    total_iters: int = 10000
    velocity: dict = field(default_factory=dict)


def lr_schedule(i: int, opt: OptimizerState) -> float:
    """``base_lr * (1 + gamma * i / total_iters) ** -power``."""
    if not 0 <= i <= opt.total_iters:
        raise ParameterError(f"iteration {i} outside [0, {opt.total_iters}]")
    return opt.base_lr * (1.0 + opt.gamma_sched * i / opt.total_iters) ** (-opt.power_sched)


def sgd_step(params: dict, grads: dict, opt: OptimizerState, lr: float) -> dict:
    """One (Nesterov) momentum SGD step, updating ``params`` in place.

    Follows the torch.optim.SGD formulation: ``g += wd * theta``,
    ``v = mu * v + g``, and the step uses ``g + mu * v`` when Nesterov is on.
    """
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {theta.shape}")
        if opt.weight_decay:
            g = g + opt.weight_decay * theta
        if opt.momentum:
            v = opt.velocity.get(name)
            if v is None:
                v = np.zeros_like(theta)
                opt.velocity[name] = v
            elif v.shape != theta.shape:
                raise ShapeError(f"velocity for {name!r} has stale shape {v.shape}")
            v *= opt.momentum
            v += g
            step = g + opt.momentum * v if opt.nesterov else v
        else:
            step = g
        theta -= lr * step
    return params
