"""Heteroscedastic Gaussian regression networks for the solver outputs.

A network maps normalized parameter features to a mean and a standard
deviation per target component.  Training minimizes the Gaussian negative
log-likelihood (constant dropped) plus an L2 penalty on weight matrices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .dbsde import map_jobs
from .errors import ConfigurationError, DomainError, TrainingDivergedError
from .nn import MlpParams, MlpSpec
from .sde import derive_seed

SIGMA_FLOOR = 1e-6
STD_FLOOR = 1e-12


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        # constant features (e.g. a fixed maturity) pass through centered
        std = np.where(std < STD_FLOOR, 1.0, std)
        return cls(X.mean(axis=0), std)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.shape[0]:
            raise ConfigurationError(f"expected {self.mean.shape[0]} features, got {X.shape[-1]}")
        return (X - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class UqNetConfig:
    hidden_width: int = 128
    hidden_layers: int = 2
    activation: str = "relu"
    batch_size: int = 128
    l2: float = 3e-2
    lrs: tuple[float, ...] = (1e-3, 3e-4, 1e-4, 3e-5, 1e-5)
    epochs: tuple[int, ...] = (1000, 100, 100, 100, 100)
    batch_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.lrs) != len(self.epochs) or not self.lrs:
            raise ConfigurationError("lrs and epochs must be non-empty and of equal length")
        if self.hidden_layers < 1 or self.batch_size < 1 or self.l2 < 0:
            raise ConfigurationError("need hidden_layers >= 1, batch_size >= 1, l2 >= 0")

    def spec(self, n_features: int, n_targets: int) -> MlpSpec:
        out = 2 * n_targets
        if self.hidden_width <= out:
            raise ConfigurationError(f"hidden width {self.hidden_width} must exceed output dim {out}")
        transform = ("identity",) * n_targets + ("softplus",) * n_targets
        return MlpSpec(n_features, out, self.hidden_layers, self.hidden_width,
                       self.activation, transform, self.batch_norm)

    def to_dict(self) -> dict:
        return {
            "hidden_width": self.hidden_width, "hidden_layers": self.hidden_layers,
            "activation": self.activation, "batch_size": self.batch_size, "l2": self.l2,
            "lrs": list(self.lrs), "epochs": list(self.epochs),
            "batch_norm": self.batch_norm, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UqNetConfig":
        d = dict(d)
        for key, cast in (("lrs", float), ("epochs", int)):
            if key in d:
                d[key] = tuple(cast(v) for v in d[key])
        return cls(**d)


@dataclass
class UqModel:
    target: str  # "y" or "z"
    spec: MlpSpec
    params: MlpParams
    normalizer: Normalizer
    config: UqNetConfig
    log: dict = field(default_factory=lambda: {"train": [], "valid": []})

    @property
    def n_targets(self) -> int:
        return self.spec.output_dim // 2


# -- losses -------------------------------------------------------------------

def _check_sigma(sigma):
    if np.any(~(sigma > 0)):
        raise DomainError("standard deviations must be strictly positive")


def nll_y(y, mu, sigma) -> float:
    """Mean of ``log sigma + (y - mu)^2 / (2 sigma^2)``."""
    y, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (y, mu, sigma))
    _check_sigma(sigma)
    r = (y - mu) / sigma
    return float(np.mean(np.log(sigma) + 0.5 * r * r))


def nll_z(z, mu, sigma) -> float:
    """Batch mean of the per-component NLL summed over components."""
    z, mu, sigma = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (z, mu, sigma))
    _check_sigma(sigma)
    r = (z - mu) / sigma
    return float(np.mean(np.sum(np.log(sigma) + 0.5 * r * r, axis=1)))


def nll_grad(t, mu, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`nll_z` (or :func:`nll_y` for 1-D input) wrt ``(mu, sigma)``."""
    t, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (t, mu, sigma))
    n = t.shape[0]
    r = (t - mu) / sigma
    return -r / sigma / n, (1.0 - r * r) / sigma / n


def _split_heads(out: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    return out[:, :k], out[:, k:] + SIGMA_FLOOR


def network_loss(params: MlpParams, spec: MlpSpec, X, T, l2: float = 0.0, mode="train"):
    """NLL (summed over target columns, batch-averaged) plus the L2 term.

    Returns ``(loss, output_grad)``; ``output_grad`` is ``None`` in eval mode.
    """
    k = spec.output_dim // 2
    out = nn.forward(params, spec, X, mode)
    if not np.all(np.isfinite(out)):
        raise TrainingDivergedError("non-finite UQ network output")
    mu, sigma = _split_heads(out, k)
    loss = nll_z(T, mu, sigma) + nn.l2_penalty(params, l2)
    if mode != "train":
        return loss, None
    gmu, gsig = nll_grad(T, mu, sigma)
    return loss, np.concatenate([gmu, gsig], axis=1)


# -- training -----------------------------------------------------------------

def _as_targets(T) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    return T[:, None] if T.ndim == 1 else T


def _run_epoch(model: UqModel, Xn, T, perm, B: int, lr: float, state) -> None:
    params, spec, config = model.params, model.spec, model.config
    total = 0.0
    for start in range(0, len(perm), B):
        idx = perm[start:start + B]
        if config.batch_norm and len(idx) < 2:
            continue
        xb, tb = Xn[idx], T[idx]
        loss, g = network_loss(params, spec, xb, tb, config.l2)
        nn.adam_step(params, nn.backward(params, spec, xb, g, config.l2), state, lr)
        total += loss * len(idx)
    if not np.isfinite(total):
        raise TrainingDivergedError("non-finite UQ training loss")
    model.log["train"].append(total / len(perm))


def fit_uq(X_train, T_train, X_valid=None, T_valid=None, config: UqNetConfig = UqNetConfig(),
           target: str = "y") -> UqModel:
    """Train one mean/STD network on raw arrays."""
    T_train = _as_targets(T_train)
    if not (np.all(np.isfinite(X_train)) and np.all(np.isfinite(T_train))):
        raise DomainError("training features and targets must be finite")
    norm = Normalizer.fit(X_train)
    Xn = norm(X_train)
    Xv = norm(X_valid) if X_valid is not None and len(X_valid) else None
    Tv = _as_targets(T_valid) if Xv is not None else None
    spec = config.spec(Xn.shape[1], T_train.shape[1])
    params = nn.init_xavier_normal(spec, derive_seed(config.seed, 0))
    rng = np.random.default_rng(derive_seed(config.seed, 1))
    state = nn.AdamState.zeros_like(params.trainable())
    model = UqModel(target, spec, params, norm, config)
    n = len(Xn)
    B = min(config.batch_size, n)
    try:
        for lr, epochs in zip(config.lrs, config.epochs):
            for _ in range(epochs):
                _run_epoch(model, Xn, T_train, rng.permutation(n), B, lr, state)
                if Xv is not None:
                    model.log["valid"].append(network_loss(params, spec, Xv, Tv, 0.0, "eval")[0])
    except TrainingDivergedError as exc:
        exc.log = model.log
        raise
    return model


def _target_array(dataset, target: str) -> np.ndarray:
    if target == "y":
        return dataset.Y
    if target == "z":
        return dataset.Z
    raise ConfigurationError(f"target must be 'y' or 'z', got {target!r}")


def train_uq(dataset, target: str, config: UqNetConfig, train_idx=None) -> UqModel:
    """Fit on the dataset's train split (or ``train_idx``), tracking the valid split."""
    X = dataset.X
    T = _target_array(dataset, target)
    tr = dataset.subset("train") if train_idx is None else np.asarray(train_idx)
    va = dataset.splits.get("valid", np.array([], dtype=int))
    return fit_uq(X[tr], T[tr], X[va], T[va], config, target)


def predict(model: UqModel, x) -> tuple[np.ndarray, np.ndarray]:
    """``(mu, sigma)`` for features ``x`` of shape ``(n_features,)`` or ``(M, n_features)``.

    A Y model returns arrays of shape ``(M,)``; a Z model ``(M, d)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    Xn = model.normalizer(np.atleast_2d(x))
    out = nn.forward(model.params, model.spec, Xn, "eval")
    mu, sigma = _split_heads(out, model.n_targets)
    if model.target == "y":
        mu, sigma = mu[:, 0], sigma[:, 0]
    if single:
        return mu[0], sigma[0]
    return mu, sigma


def _train_job(args) -> UqModel:
    dataset, target, config, train_idx = args
    return train_uq(dataset, target, config, train_idx)


def model_seeds(seed: int, R: int) -> list[int]:
    return [derive_seed(seed, 1000 + r) for r in range(R)]


def ensemble_of_models(dataset, target: str, config: UqNetConfig, R: int = 10,
                       workers: int = 1, train_idx=None) -> list[UqModel]:
    """``R`` models that differ only in their derived seeds."""
    if R < 1:
        raise ConfigurationError("R must be >= 1")
    jobs = [(dataset, target, replace(config, seed=s), train_idx) for s in model_seeds(config.seed, R)]
    return map_jobs(_train_job, jobs, workers)


# -- checkpoints --------------------------------------------------------------

def uq_model_to_dict(model: UqModel) -> dict:
    return {
        "target": model.target,
        "spec": model.spec.to_dict(),
        "params": nn.params_to_dict(model.params),
        "normalizer": model.normalizer.to_dict(),
        "config": model.config.to_dict(),
        "log": {k: [float(v) for v in vals] for k, vals in model.log.items()},
    }


def uq_model_from_dict(d: dict) -> UqModel:
    return UqModel(
        d["target"], MlpSpec.from_dict(d["spec"]), nn.params_from_dict(d["params"]),
        Normalizer.from_dict(d["normalizer"]), UqNetConfig.from_dict(d["config"]),
        {k: list(v) for k, v in d.get("log", {}).items()},
    )


def save_models(path, models: list[UqModel], meta: dict | None = None) -> None:
    doc = {"meta": meta or {}, "models": [uq_model_to_dict(m) for m in models]}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_model_file(path) -> tuple[list[UqModel], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"UQ model file not found: {path}")
    doc = json.loads(path.read_text())
    return [uq_model_from_dict(d) for d in doc["models"]], doc.get("meta", {})


def load_models(path) -> list[UqModel]:
    return load_model_file(path)[0]
