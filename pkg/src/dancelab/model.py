"""MLP feature extractor with domain-specific batch norm and a prototype classifier.

Layout: ``[affine -> BN -> ReLU] * len(hidden_dims) -> affine(d) -> L2 norm``,
followed by a bias-free classifier whose K weight rows act as class
prototypes.  Every BN layer keeps one :class:`BatchNormState` per domain; the two states
share their gamma/beta arrays and differ only in normalization statistics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk

DOMAINS = ("source", "target")


@dataclass
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple = (64, 64)
    feat_dim: int = 16
    tau_nc: float = 0.05
    tau_cls: float = 0.05
    seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.feat_dim < 2:
            raise ValueError("feat_dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims entries must be >= 1")
        if not (self.tau_nc > 0 and self.tau_cls > 0):
            raise ValueError("temperatures must be positive")


@dataclass
class Model:
    config: ModelConfig
    params: dict
    bn: list  # one {domain: BatchNormState} per hidden layer

    @property
    def prototypes(self) -> np.ndarray:
        return self.params["proto.W"]

    @property
    def n_hidden(self) -> int:
        return len(self.config.hidden_dims)

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def extractor_param_names(self) -> list:
        return [k for k in self.params if not k.startswith("proto.")]


@dataclass
class FeatureCache:
    domain: str
    training: bool
    inputs: list = field(default_factory=list)     # input to each affine layer
    pre_bn: list = field(default_factory=list)
    bn_cache: list = field(default_factory=list)
    pre_relu: list = field(default_factory=list)
    raw: np.ndarray | None = None                  # output of the last affine layer
    norms: np.ndarray | None = None
    f_hat: np.ndarray | None = None


def _he_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_model(config: ModelConfig) -> Model:
    config.validate()
    config.hidden_dims = tuple(int(h) for h in config.hidden_dims)
    rng = np.random.default_rng(config.seed)
    params = {}
    bn = []
    widths = (config.input_dim, *config.hidden_dims)
    for li, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"fc{li}.W"] = _he_uniform(rng, fan_in, fan_out)
        params[f"fc{li}.b"] = np.zeros(fan_out)
        # gamma/beta are shared; only the normalization statistics are per domain
        gamma, beta = np.ones(fan_out), np.zeros(fan_out)
        params[f"bn{li}.gamma"] = gamma
        params[f"bn{li}.beta"] = beta
        states = {}
        for dom in DOMAINS:
            st = nk.BatchNormState.fresh(fan_out, config.bn_eps, config.bn_momentum)
            st.gamma, st.beta = gamma, beta
            states[dom] = st
        bn.append(states)
    params["fc_out.W"] = _he_uniform(rng, widths[-1], config.feat_dim)
    params["fc_out.b"] = np.zeros(config.feat_dim)
    proto = rng.standard_normal((config.num_classes, config.feat_dim))
    params["proto.W"] = proto / np.linalg.norm(proto, axis=1, keepdims=True)
    return Model(config, params, bn)


def _check_domain(domain):
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")


def forward_features(model: Model, X: np.ndarray, domain: str, training: bool):
    """Run the extractor with ``domain``'s BN statistics; returns ``(f_hat, cache)``."""
    _check_domain(domain)
    X = nk.as_matrix(X)
    if X.shape[1] != model.config.input_dim:
        raise nk.ShapeError(f"expected {model.config.input_dim} input columns, got {X.shape[1]}")
    p = model.params
    cache = FeatureCache(domain, training)
    h = X
    for li in range(model.n_hidden):
        cache.inputs.append(h)
        a = nk.affine_forward(h, p[f"fc{li}.W"], p[f"fc{li}.b"])
        cache.pre_bn.append(a)
        z, bc = nk.batchnorm_forward(a, model.bn[li][domain], training)
        cache.bn_cache.append(bc)
        cache.pre_relu.append(z)
        h = nk.relu_forward(z)
    cache.inputs.append(h)
    raw = nk.affine_forward(h, p["fc_out.W"], p["fc_out.b"])
    f_hat, norms = nk.l2_normalize_rows(raw)
    cache.raw, cache.norms, cache.f_hat = raw, norms, f_hat
    return f_hat, cache


def classify(model: Model, f_hat: np.ndarray):
    """Cosine-style logits ``f_hat @ W.T / tau_cls`` and their softmax."""
    W = model.prototypes
    if f_hat.shape[1] != W.shape[1]:
        raise nk.ShapeError("feature width does not match prototype width")
    logits = f_hat @ W.T / model.config.tau_cls
    return logits, nk.softmax_rows(logits)


def normalized_prototypes(model: Model):
    """Row-normalized copy of the prototype matrix plus the row norms."""
    return nk.l2_normalize_rows(model.prototypes.copy())


def normalized_prototypes_backward(W_hat, norms, dW_hat):
    return nk.l2_normalize_backward(W_hat, norms, dW_hat)


def model_backward(model: Model, cache: FeatureCache, grad_f_hat=None, grad_logits=None, grads=None) -> dict:
    """Accumulate parameter gradients into ``grads`` (created if missing).

    ``grad_logits`` is the upstream gradient on :func:`classify` logits; it
    feeds both the prototypes and the features.
    """
    if grads is None:
        grads = model.zero_grads()
    p = model.params
    f_hat = cache.f_hat
    d_f = np.zeros_like(f_hat) if grad_f_hat is None else np.array(grad_f_hat, dtype=np.float64)
    if d_f.shape != f_hat.shape:
        raise nk.ShapeError(f"feature gradient shape {d_f.shape} does not match cache {f_hat.shape}")
    if grad_logits is not None:
        if grad_logits.shape != (f_hat.shape[0], model.config.num_classes):
            raise nk.ShapeError("logit gradient shape does not match cache")
        g = grad_logits / model.config.tau_cls
        grads["proto.W"] += g.T @ f_hat
        d_f = d_f + g @ p["proto.W"]

    d_raw = nk.l2_normalize_backward(f_hat, cache.norms, d_f)
    dh, dW, db = nk.affine_backward(cache.inputs[-1], p["fc_out.W"], d_raw)
    grads["fc_out.W"] += dW
    grads["fc_out.b"] += db
    for li in reversed(range(model.n_hidden)):
        dz = nk.relu_backward(cache.pre_relu[li], dh)
        da, dgamma, dbeta = nk.batchnorm_backward(dz, cache.bn_cache[li])
        grads[f"bn{li}.gamma"] += dgamma
        grads[f"bn{li}.beta"] += dbeta
        dh, dW, db = nk.affine_backward(cache.inputs[li], p[f"fc{li}.W"], da)
        grads[f"fc{li}.W"] += dW
        grads[f"fc{li}.b"] += db
    return grads


def bn_snapshot(model: Model, domain: str) -> list:
    """Copies of one domain's BN states, for isolation checks."""
    return [layer[domain].copy() for layer in model.bn]


def bn_equal(a: list, b: list) -> bool:
    return all(
        np.array_equal(x.running_mean, y.running_mean)
        and np.array_equal(x.running_var, y.running_var)
        and np.array_equal(x.gamma, y.gamma)
        and np.array_equal(x.beta, y.beta)
        for x, y in zip(a, b)
    )


# --- checkpoints ------------------------------------------------------------
#
# JSON object:
#   {"format": "dancelab-checkpoint/1",
#    "config": {...ModelConfig fields...},
#    "tensors": {name: {"shape": [...], "data": [row-major floats]}}}
# Tensor names are the parameter names plus "bn{i}.{domain}.running_mean" and
# "bn{i}.{domain}.running_var".  Floats are written with repr precision, so a
# save/load round trip is bit-exact.

CHECKPOINT_FORMAT = "dancelab-checkpoint/1"


def state_tensors(model: Model) -> dict:
    out = dict(model.params)
    for li, states in enumerate(model.bn):
        for dom, st in states.items():
            out[f"bn{li}.{dom}.running_mean"] = st.running_mean
            out[f"bn{li}.{dom}.running_var"] = st.running_var
    return out


def checkpoint_dict(model: Model) -> dict:
    cfg = asdict(model.config)
    cfg["hidden_dims"] = list(cfg["hidden_dims"])
    return {
        "format": CHECKPOINT_FORMAT,
        "config": cfg,
        "tensors": {
            name: {"shape": list(t.shape), "data": t.ravel().tolist()}
            for name, t in sorted(state_tensors(model).items())
        },
    }


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(model)))
    return path


def load_checkpoint(path) -> Model:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = blob["config"]
    cfg["hidden_dims"] = tuple(cfg["hidden_dims"])
    model = init_model(ModelConfig(**cfg))
    target = state_tensors(model)
    for name, entry in blob["tensors"].items():
        if name not in target:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != target[name].shape:
            raise ValueError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {target[name].shape}")
        target[name][...] = arr
    return model
