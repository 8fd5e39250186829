"""Learned membership scorer over column-wise t-errors.

Layout: conv-BN-ReLU stem, four residual basic blocks (conv-BN-ReLU-conv-BN,
identity shortcut, ReLU), global average pooling over columns and an affine
head producing one logit per row. Every convolution has kernel 3, stride 1
and padding 1 and no bias (the following batch norm absorbs it).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import DivergenceError, TrainConfig
from .kernels import conv1d_backward, conv1d_forward
from .nn import Adam
from .secmi import MEMBER, TErrorMatrix

N_BLOCKS = 4
LOG_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _bn_forward(x, gamma, beta, mean, var, training):
    if training:
        mu = x.mean(axis=(0, 2))
        v = x.var(axis=(0, 2))
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + BN_EPS)
    xhat = (x - mu[None, :, None]) * inv[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, (xhat, inv, mu, v)


def _bn_backward(dy, gamma, cache, training):
    xhat, inv, _, _ = cache
    dgamma = np.sum(dy * xhat, axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    if not training:
        return dxhat * inv[None, :, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2]
    dx = (inv[None, :, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2))[None, :, None]
        - xhat * np.sum(dxhat * xhat, axis=(0, 2))[None, :, None]
    )
    return dx, dgamma, dbeta


def log_features(errors):
    """t-errors are heavy tailed; compress them before standardisation."""
    return np.log(np.maximum(errors, 0.0) + LOG_FLOOR)


def _relu(x):
    return np.maximum(x, 0.0)


class AttackNet:
    def __init__(self, width, channels=16, seed=0):
        self.width = int(width)
        self.channels = int(channels)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        c = self.channels
        self.params = {}
        self.buffers = {}
        self._conv_names = ["stem"] + [f"b{i}.{j}" for i in range(N_BLOCKS) for j in (1, 2)]
        for name in self._conv_names:
            c_in = 1 if name == "stem" else c
            bound = 1.0 / np.sqrt(3 * c_in)
            self.params[f"{name}.w"] = rng.uniform(-bound, bound, size=(c, c_in, 3))
            self.params[f"{name}.gamma"] = np.ones(c)
            self.params[f"{name}.beta"] = np.zeros(c)
            self.buffers[f"{name}.mean"] = np.zeros(c)
            self.buffers[f"{name}.var"] = np.ones(c)
        bound = 1.0 / np.sqrt(c)
        self.params["head.w"] = rng.uniform(-bound, bound, size=c)
        self.params["head.b"] = np.zeros(1)
        # inputs are log(e + LOG_FLOOR), then standardised per column with
        # statistics fitted on the training split
        self.buffers["in.mean"] = np.zeros(self.width)
        self.buffers["in.std"] = np.ones(self.width)
        self._zero_bias = np.zeros(c)

    # -- building blocks -------------------------------------------------

    def _conv_bn(self, name, x, training, caches):
        w = self.params[f"{name}.w"]
        z = conv1d_forward(x, w, self._zero_bias)
        y, bn_cache = _bn_forward(z, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                                  self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"], training)
        if training:
            _, _, mu, v = bn_cache
            m = z.shape[0] * z.shape[2]
            unbiased = v * m / max(m - 1, 1)
            self.buffers[f"{name}.mean"] = (1 - BN_MOMENTUM) * self.buffers[f"{name}.mean"] + BN_MOMENTUM * mu
            self.buffers[f"{name}.var"] = (1 - BN_MOMENTUM) * self.buffers[f"{name}.var"] + BN_MOMENTUM * unbiased
        if caches is not None:
            caches[name] = (x, bn_cache)
        return y

    def _conv_bn_backward(self, name, dy, caches, grads, training):
        x, bn_cache = caches[name]
        dz, dgamma, dbeta = _bn_backward(dy, self.params[f"{name}.gamma"], bn_cache, training)
        dx, dw, _ = conv1d_backward(x, self.params[f"{name}.w"], dz)
        grads[f"{name}.w"] = dw
        grads[f"{name}.gamma"] = dgamma
        grads[f"{name}.beta"] = dbeta
        return dx

    def standardize(self, errors):
        e = np.asarray(errors, dtype=np.float64)
        if e.ndim != 2 or e.shape[1] != self.width:
            raise ValueError(f"expected error width {self.width}, got shape {e.shape}")
        return (log_features(e) - self.buffers["in.mean"]) / self.buffers["in.std"]

    def forward(self, errors, training=False, cache=False):
        """Logits for each row. ``training=True`` uses (and updates) batch statistics."""
        x = self.standardize(errors)[:, None, :]
        caches = {} if cache else None
        relu_masks = {}
        h = self._conv_bn("stem", x, training, caches)
        relu_masks["stem"] = h > 0
        h = _relu(h)
        for i in range(N_BLOCKS):
            skip = h
            u = self._conv_bn(f"b{i}.1", h, training, caches)
            relu_masks[f"b{i}.1"] = u > 0
            u = _relu(u)
            u = self._conv_bn(f"b{i}.2", u, training, caches)
            h = u + skip
            relu_masks[f"b{i}.out"] = h > 0
            h = _relu(h)
        pooled = h.mean(axis=2)
        logits = pooled @ self.params["head.w"] + self.params["head.b"][0]
        if cache:
            return logits, (caches, relu_masks, pooled, h.shape, training)
        return logits

    def backward(self, dlogits, cache):
        caches, masks, pooled, shape, training = cache
        grads = {"head.w": pooled.T @ dlogits, "head.b": np.array([dlogits.sum()])}
        dh = np.broadcast_to((dlogits[:, None] * self.params["head.w"][None, :])[:, :, None] / shape[2],
                             shape).copy()
        for i in reversed(range(N_BLOCKS)):
            dh = dh * masks[f"b{i}.out"]
            du = self._conv_bn_backward(f"b{i}.2", dh, caches, grads, training)
            du = du * masks[f"b{i}.1"]
            du = self._conv_bn_backward(f"b{i}.1", du, caches, grads, training)
            dh = dh + du
        dh = dh * masks["stem"]
        self._conv_bn_backward("stem", dh, caches, grads, training)
        return grads

    def meta(self):
        return {"kind": "attacknet", "width": self.width, "channels": self.channels,
                "seed": self.seed, "n_blocks": N_BLOCKS}


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    loss = np.mean(np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits))))
    grad = (1.0 / (1.0 + np.exp(-logits)) - targets) / len(logits)
    return float(loss), grad


def stratified_split(labels, fraction, seed):
    """Per-class seeded split; returns ``(train_idx, heldout_idx)`` sorted."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train = []
    for cls in (MEMBER, 0):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        train.extend(idx[:int(round(fraction * len(idx)))].tolist())
    train = np.array(sorted(train), dtype=np.int64)
    held = np.setdiff1d(np.arange(len(labels)), train)
    return train, held


@dataclass
class NNAttackResult:
    train_indices: np.ndarray
    heldout_indices: np.ndarray
    heldout_scores: np.ndarray
    heldout_labels: np.ndarray
    loss_trace: list


def train_attacknet(net: AttackNet, errors, labels, cfg: TrainConfig):
    """Fit ``net`` in place with mini-batch Adam on binary cross-entropy."""
    e = np.asarray(errors, dtype=np.float64)
    y = (np.asarray(labels) == MEMBER).astype(np.float64)
    logged = log_features(e)
    net.buffers["in.mean"] = logged.mean(axis=0)
    std = logged.std(axis=0)
    net.buffers["in.std"] = np.where(std > 0, std, 1.0)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, cfg.learning_rate)
    trace = []
    steps = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(e))
        losses = []
        for start in range(0, len(e), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need at least two rows
            logits, cache = net.forward(e[idx], training=True, cache=True)
            loss, dlogits = bce_with_logits(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"attack network diverged at epoch {epoch}", epoch)
            opt.step(net.backward(dlogits, cache))
            losses.append(loss)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        trace.append(float(np.mean(losses)) if losses else float("nan"))
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return net, trace


def nn_attack_train(errors: TErrorMatrix, train_fraction: float = 0.2, cfg: TrainConfig | None = None,
                    channels: int = 16, features: str = "dims"):
    """Train the scorer on a stratified ``train_fraction`` and score the rest.

    ``features="columns"`` feeds per-source-column sums; ``"dims"`` feeds the
    raw per-dimension residuals. Higher scores mean more member-like.
    """
    cfg = cfg or TrainConfig(batch_size=64, epochs=200, learning_rate=1e-3)
    x = _features(errors, features)
    labels = errors.labels
    train_idx, held_idx = stratified_split(labels, train_fraction, cfg.seed)
    if len(set(labels[train_idx].tolist())) < 2:
        raise ValueError("attack training split must contain members and non-members")
    net = AttackNet(x.shape[1], channels, cfg.seed)
    net.features = features
    net, trace = train_attacknet(net, x[train_idx], labels[train_idx], cfg)
    scores = net.forward(x[held_idx])
    return net, NNAttackResult(train_idx, held_idx, scores, labels[held_idx], trace)


def _features(errors, features):
    if isinstance(errors, TErrorMatrix):
        if features == "columns":
            return errors.column_sums()
        if features == "dims":
            return errors.errors
        raise ValueError(f"unknown feature mode {features!r}")
    return np.asarray(errors, dtype=np.float64)


def nn_attack_score(net: AttackNet, errors) -> np.ndarray:
    """Inference-mode logits (frozen batch-norm statistics); one per row."""
    return net.forward(_features(errors, getattr(net, "features", "dims")), training=False)


def membership_probability(scores):
    return 1.0 / (1.0 + np.exp(-np.asarray(scores)))


def save_attacknet(net: AttackNet, stem, extra=None) -> str:
    tensors = dict(net.params)
    tensors.update({f"buf.{k}": v for k, v in net.buffers.items()})
    meta = {**net.meta(), "features": getattr(net, "features", "dims"), **(extra or {})}
    return save_checkpoint(stem, tensors, meta)


def load_attacknet(stem):
    meta, tensors = load_checkpoint(stem)
    net = AttackNet(meta["width"], meta["channels"], meta["seed"])
    net.features = meta.get("features", "dims")
    for k, v in tensors.items():
        if k.startswith("buf."):
            net.buffers[k[4:]] = v
        else:
            net.params[k] = v
    return net, meta
