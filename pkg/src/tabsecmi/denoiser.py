"""Noise-prediction network, its training loop and ancestral sampler.

The network is an MLP over ``[x_t, emb(t)]`` where ``emb`` is a sinusoidal
timestep embedding; it predicts the Gaussian noise mixed into ``x_t``.
Gradients are computed by :meth:`MLP.backward`, not by an autodiff library.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .nn import MLP, make_optimizer
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, msg, epoch=None):
        super().__init__(msg)
        self.epoch = epoch


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _timesteps(t, n):
    t = np.asarray(t)
    if t.ndim == 0:
        return np.full(n, int(t))
    if t.shape != (n,):
        raise ValueError(f"expected {n} timesteps, got shape {t.shape}")
    return t.astype(np.int64)


class Denoiser:
    """``eps_theta(x_t, t)``; calling the instance is :meth:`predict_noise`."""

    def __init__(self, d, hidden, embed_dim=16, seed=0, T=None, activation="silu"):
        hidden = tuple(int(h) for h in hidden)
        if d < 1:
            raise ValueError(f"input dimension must be >= 1, got {d}")
        if not hidden:
            raise ValueError("hidden layer list must be non-empty")
        self.d = int(d)
        self.hidden = hidden
        self.embed_dim = int(embed_dim)
        self.seed = int(seed)
        self.T = T
        self.mlp = MLP([self.d + self.embed_dim, *hidden, self.d],
                       rng=np.random.default_rng(seed), activation=activation)

    @property
    def params(self):
        return self.mlp.params

    def _inputs(self, xt, t):
        xt = _as_batch(xt)
        if xt.shape[1] != self.d:
            raise ValueError(f"expected width {self.d}, got {xt.shape[1]}")
        if not np.all(np.isfinite(xt)):
            raise ValueError("non-finite input to the denoiser")
        ts = _timesteps(t, xt.shape[0])
        if ts.size and (ts.min() < 0 or (self.T is not None and ts.max() > self.T)):
            raise IndexError(f"timesteps must lie in [0, {self.T}]")
        return np.concatenate([xt, timestep_embedding(ts, self.embed_dim)], axis=1)

    def predict_noise(self, xt, t):
        return self.mlp.forward(self._inputs(xt, t))

    __call__ = predict_noise

    def forward_train(self, xt, t):
        return self.mlp.forward(self._inputs(xt, t), cache=True)

    def backward(self, grad_out, cache):
        grads, _ = self.mlp.backward(grad_out, cache)
        return grads

    def meta(self):
        return {"kind": "denoiser", "d": self.d, "hidden": list(self.hidden),
                "embed_dim": self.embed_dim, "seed": self.seed, "T": self.T,
                "activation": self.mlp.activation}


def init_denoiser(d, hidden, embed_dim=16, seed=0, T=None) -> Denoiser:
    return Denoiser(d, hidden, embed_dim, seed, T)


def save_denoiser(model: Denoiser, stem, extra=None) -> str:
    return save_checkpoint(stem, model.params, {**model.meta(), **(extra or {})})


def load_denoiser(stem):
    meta, params = load_checkpoint(stem)
    model = Denoiser(meta["d"], meta["hidden"], meta["embed_dim"], meta["seed"], meta["T"],
                     meta.get("activation", "silu"))
    model.mlp.params.update(params)
    return model, meta


# ---------------------------------------------------------------------------
# forward process and loss


@dataclass
class ForwardSample:
    x0: np.ndarray
    t: int
    eps: np.ndarray
    xt: np.ndarray


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> ForwardSample:
    """Closed-form marginal ``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    ts = np.asarray(t)
    if np.any(ts < 0) or np.any(ts > sched.T):
        raise IndexError(f"timestep outside [0, {sched.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ab = sched.alpha_bar[ts]
    if np.ndim(ab) == 1 and x0.ndim == 2:
        ab = ab[:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return ForwardSample(x0, t, eps, xt)


def forward_step(x_prev, t, z, sched: NoiseSchedule):
    """One transition ``q(x_t | x_{t-1})`` driven by standard normal ``z``."""
    beta = sched.beta[t]
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * z


def diffusion_loss(model, batch, sched: NoiseSchedule, rng):
    """Simplified objective: mean squared error between sampled and predicted noise.

    Draws ``t`` uniformly from ``1..T`` then ``eps ~ N(0, I)``, in that order.
    The loss is averaged over rows and dimensions, so a zero predictor scores
    about 1.0. Returns ``(loss, grads)``.
    """
    x0 = _as_batch(batch)
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    xt = forward_diffuse(x0, t, eps, sched).xt
    pred, cache = model.forward_train(xt, t)
    resid = pred - eps
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise DivergenceError("non-finite diffusion loss")
    grads = model.backward(2.0 * resid / resid.size, cache)
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    max_steps: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self):
        return asdict(self)


def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train(model: Denoiser, data, sched: NoiseSchedule, cfg: TrainConfig):
    """Fit ``model`` in place on encoded rows; returns ``(model, per-epoch mean losses)``.

    ``cfg.max_steps`` caps the total number of gradient steps; training then
    stops mid-epoch and the partial epoch's mean is still recorded.
    """
    x = np.asarray(getattr(data, "values", data), dtype=np.float64)
    if x.shape[1] != model.d:
        raise ValueError(f"data width {x.shape[1]} != model width {model.d}")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.params, cfg.learning_rate)
    trace = []
    steps = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _minibatches(len(x), cfg.batch_size, rng):
            try:
                loss, grads = diffusion_loss(model, x[idx], sched, rng)
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}", epoch) from exc
            opt.step(grads)
            losses.append(loss)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        trace.append(float(np.mean(losses)))
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    if not all(np.all(np.isfinite(p)) for p in model.params.values()):
        raise DivergenceError("non-finite parameters after training", len(trace) - 1)
    return model, trace


def sample(model, sched: NoiseSchedule, n: int, rng) -> np.ndarray:
    """Ancestral sampling with fixed variance ``sigma_t^2 = beta_t``; no noise at t=1."""
    d = model.d
    x = rng.standard_normal((n, d))
    if n == 0:
        return x
    for t in range(sched.T, 0, -1):
        eps = model(x, t)
        beta, alpha, ab = sched.beta[t], sched.alpha[t], sched.alpha_bar[t]
        mean = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
        if t > 1:
            x = mean + np.sqrt(beta) * rng.standard_normal((n, d))
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at timestep {t}")
    return x


# ---------------------------------------------------------------------------
# latent pathway


class Autoencoder:
    def __init__(self, d, latent_dim, hidden=None, seed=0, activation="silu"):
        if latent_dim > d:
            raise ValueError(f"latent_dim {latent_dim} exceeds data width {d}")
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        hidden = int(hidden or max(d, 2 * latent_dim))
        rng = np.random.default_rng(seed)
        self.d = int(d)
        self.latent_dim = int(latent_dim)
        self.hidden = hidden
        self.seed = int(seed)
        self.encoder = MLP([d, hidden, latent_dim], rng=rng, activation=activation)
        self.decoder = MLP([latent_dim, hidden, d], rng=rng, activation=activation)
        self.train_error = None

    @property
    def params(self):
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return out

    def encode(self, rows):
        rows = _as_batch(rows)
        if rows.shape[1] != self.d:
            raise ValueError(f"expected width {self.d}, got {rows.shape[1]}")
        return self.encoder.forward(rows)

    def decode(self, latents):
        latents = _as_batch(latents)
        if latents.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent width {self.latent_dim}, got {latents.shape[1]}")
        return self.decoder.forward(latents)

    def reconstruction_error(self, rows):
        rows = _as_batch(rows)
        diff = self.decode(self.encode(rows)) - rows
        return float(np.mean(diff * diff))

    def meta(self):
        return {"kind": "autoencoder", "d": self.d, "latent_dim": self.latent_dim,
                "hidden": self.hidden, "seed": self.seed, "activation": self.encoder.activation,
                "train_error": self.train_error}


def fit_autoencoder(data, latent_dim: int, cfg: TrainConfig, hidden=None,
                    activation="silu") -> Autoencoder:
    x = np.asarray(getattr(data, "values", data), dtype=np.float64)
    ae = Autoencoder(x.shape[1], latent_dim, hidden, cfg.seed, activation)
    params = ae.params
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    steps = 0
    for epoch in range(cfg.epochs):
        for idx in _minibatches(len(x), cfg.batch_size, rng):
            xb = x[idx]
            z, enc_cache = ae.encoder.forward(xb, cache=True)
            out, dec_cache = ae.decoder.forward(z, cache=True)
            resid = out - xb
            loss = float(np.mean(resid * resid))
            if not np.isfinite(loss):
                raise DivergenceError(f"autoencoder diverged at epoch {epoch}", epoch)
            dgrads, gz = ae.decoder.backward(2.0 * resid / resid.size, dec_cache)
            egrads, _ = ae.encoder.backward(gz, enc_cache)
            grads = {f"enc.{k}": v for k, v in egrads.items()}
            grads.update({f"dec.{k}": v for k, v in dgrads.items()})
            opt.step(grads)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    ae.train_error = ae.reconstruction_error(x)
    return ae


def save_autoencoder(ae: Autoencoder, stem, extra=None) -> str:
    return save_checkpoint(stem, ae.params, {**ae.meta(), **(extra or {})})


def load_autoencoder(stem):
    meta, params = load_checkpoint(stem)
    ae = Autoencoder(meta["d"], meta["latent_dim"], meta["hidden"], meta["seed"], meta["activation"])
    for k, v in params.items():
        part, name = k.split(".", 1)
        (ae.encoder if part == "enc" else ae.decoder).params[name] = v
    ae.train_error = meta.get("train_error")
    return ae, meta
