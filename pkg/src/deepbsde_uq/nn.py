"""Small feed-forward networks with hand-written reverse-mode gradients.

Every network is an MLP: affine hidden layers, optional batch normalization
right after each hidden matrix multiplication, a component-wise activation,
and an affine output layer whose columns may pass through a softplus.

Parameters may carry a leading *stack* shape.  A stack of ``S`` networks
with identical architecture is evaluated with one batched ``matmul`` per
layer; the DBSDE solver uses this for its ``N - 1`` time-step subnetworks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, StaleCacheError, TrainingDivergedError

ACTIVATIONS = ("relu", "tanh", "sin")
OUTPUT_TRANSFORMS = ("identity", "softplus")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BN_EPS = 1e-6
BN_MOMENTUM = 0.99


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_layers: int
    hidden_width: int
    hidden_activation: str = "relu"
    output_transform: tuple[str, ...] | None = None
    batch_norm: bool = False

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden_width < 1:
            raise ConfigurationError("dimensions must be positive")
        if self.hidden_layers < 0:
            raise ConfigurationError("hidden_layers must be non-negative")
        if self.hidden_activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.hidden_activation!r}")
        if self.output_transform is not None:
            if len(self.output_transform) != self.output_dim:
                raise ConfigurationError("one output transform per output required")
            bad = set(self.output_transform) - set(OUTPUT_TRANSFORMS)
            if bad:
                raise ConfigurationError(f"unknown output transform(s) {sorted(bad)}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def transforms(self) -> tuple[str, ...]:
        return self.output_transform or ("identity",) * self.output_dim

    def param_count(self) -> int:
        sizes = self.layer_sizes
        n = sum(sizes[l + 1] * (sizes[l] + 1) for l in range(len(sizes) - 1))
        if self.batch_norm:
            n += 2 * self.hidden_width * self.hidden_layers
        return n

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "hidden_activation": self.hidden_activation,
            "output_transform": list(self.output_transform) if self.output_transform else None,
            "batch_norm": self.batch_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        d = dict(d)
        if d.get("output_transform") is not None:
            d["output_transform"] = tuple(d["output_transform"])
        return cls(**d)


@dataclass
class _Cache:
    batch: np.ndarray
    inputs: list  # input to each affine layer
    pre: list  # affine outputs of hidden layers (before BN)
    xhat: list  # normalized values (BN only)
    inv_std: list  # 1/sqrt(var + eps) (BN only)
    post: list  # values fed to the activation
    out_pre: np.ndarray  # output layer before transform


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray] = field(default_factory=list)
    bn_shift: list[np.ndarray] = field(default_factory=list)
    running_mean: list[np.ndarray] = field(default_factory=list)
    running_var: list[np.ndarray] = field(default_factory=list)
    _cache: _Cache | None = field(default=None, repr=False, compare=False)

    @property
    def stack(self) -> tuple[int, ...]:
        return self.weights[0].shape[:-2]

    def trainable(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, *self.bn_scale, *self.bn_shift]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [a.copy() for a in self.bn_scale],
            [a.copy() for a in self.bn_shift],
            [a.copy() for a in self.running_mean],
            [a.copy() for a in self.running_var],
        )

    def tensors(self) -> dict[str, list[np.ndarray]]:
        return {
            "weights": self.weights,
            "biases": self.biases,
            "bn_scale": self.bn_scale,
            "bn_shift": self.bn_shift,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bn_scale: list[np.ndarray]
    bn_shift: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        """Same order as :meth:`MlpParams.trainable`."""
        return [*self.weights, *self.biases, *self.bn_scale, *self.bn_shift]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning rate.

    Step ``k`` (1-based) uses the rate of the first boundary ``>= k``; steps
    past the last boundary keep the last rate.
    """

    boundaries: tuple[int, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.boundaries) != len(self.rates) or not self.rates:
            raise ConfigurationError("boundaries and rates must have equal, nonzero length")
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ConfigurationError("boundaries must be strictly ascending")
        if any(r <= 0 for r in self.rates):
            raise ConfigurationError("rates must be positive")

    @classmethod
    def constant(cls, rate: float, steps: int = 1) -> "LrSchedule":
        return cls((int(steps),), (float(rate),))

    def rate(self, step: int) -> float:
        for b, r in zip(self.boundaries, self.rates):
            if step <= b:
                return r
        return self.rates[-1]

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries), "rates": list(self.rates)}

    @classmethod
    def from_dict(cls, d: dict) -> "LrSchedule":
        return cls(tuple(int(b) for b in d["boundaries"]), tuple(float(r) for r in d["rates"]))


def init_xavier_normal(spec: MlpSpec, seed: int, stack: tuple[int, ...] = ()) -> MlpParams:
    """Zero-mean normal weights with variance 2/(fan_in + fan_out), zero biases."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.standard_normal((*stack, fan_in, fan_out)) * std)
        biases.append(np.zeros((*stack, fan_out)))
    params = MlpParams(weights, biases)
    if spec.batch_norm:
        shape = (*stack, spec.hidden_width)
        for _ in range(spec.hidden_layers):
            params.bn_scale.append(np.ones(shape))
            params.bn_shift.append(np.zeros(shape))
            params.running_mean.append(np.zeros(shape))
            params.running_var.append(np.ones(shape))
    return params


_TINY = np.finfo(np.float64).tiny


def softplus(x):
    # floored at the smallest normal float so that exp underflow never yields 0
    return np.maximum(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), _TINY)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _batch_sum(a: np.ndarray, keepdims: bool = False) -> np.ndarray:
    # sum over the sample axis (-2); a ones-row matmul beats the strided reduction
    s = np.ones((1, a.shape[-2])) @ a
    return s if keepdims else s[..., 0, :]


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return np.sin(x)


def _activation_grad(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (x > 0).astype(x.dtype)
    if name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    return np.cos(x)


def forward(params: MlpParams, spec: MlpSpec, batch: np.ndarray, mode: str = "train") -> np.ndarray:
    """Evaluate the network on ``batch`` of shape ``(*stack, m, input_dim)``.

    Train mode normalizes with batch statistics, updates the running
    statistics and caches intermediates for :func:`backward`.  Eval mode is a
    pure function of ``(params, batch)``.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ConfigurationError(f"batch width {x.shape[-1]} != input_dim {spec.input_dim}")
    train = mode == "train"
    if train and spec.batch_norm and x.shape[-2] < 2:
        raise ConfigurationError("batch normalization needs at least 2 samples in train mode")

    cache = _Cache(x, [], [], [], [], [], None) if train else None
    h = x
    for l in range(spec.hidden_layers):
        if train:
            cache.inputs.append(h)
        a = h @ params.weights[l] + params.biases[l][..., None, :]
        if spec.batch_norm:
            if train:
                m = a.shape[-2]
                mean = _batch_sum(a) / m
                centered = a - mean[..., None, :]
                var = _batch_sum(centered * centered) / m
                rm, rv = params.running_mean[l], params.running_var[l]
                rm *= BN_MOMENTUM
                rm += (1 - BN_MOMENTUM) * mean
                rv *= BN_MOMENTUM
                rv += (1 - BN_MOMENTUM) * var
            else:
                mean, var = params.running_mean[l], params.running_var[l]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mean[..., None, :]) * inv_std[..., None, :]
            z = xhat * params.bn_scale[l][..., None, :] + params.bn_shift[l][..., None, :]
            if train:
                cache.pre.append(a)
                cache.xhat.append(xhat)
                cache.inv_std.append(inv_std)
        else:
            z = a
        if train:
            cache.post.append(z)
        h = _activate(spec.hidden_activation, z)
    if train:
        cache.inputs.append(h)
    out = h @ params.weights[-1] + params.biases[-1][..., None, :]
    if train:
        cache.out_pre = out
        params._cache = cache
    mask = _softplus_mask(spec)
    if mask is not None:
        out = np.where(mask, softplus(out), out)
    return out


def _softplus_mask(spec: MlpSpec):
    if spec.output_transform is None or "softplus" not in spec.output_transform:
        return None
    return np.array([t == "softplus" for t in spec.output_transform])


def backward(
    params: MlpParams,
    spec: MlpSpec,
    batch: np.ndarray,
    loss_grad: np.ndarray,
    l2: float = 0.0,
) -> MlpGrads:
    """Gradients of a loss with respect to every trainable parameter.

    ``loss_grad`` is the gradient of the loss with respect to the network
    output.  Consumes the cache of the preceding train-mode ``forward`` on
    the same batch.  A nonzero ``l2`` adds ``2 * l2 * W`` to each weight
    gradient (the derivative of ``l2 * sum(W**2)``).
    """
    cache = params._cache
    if cache is None or cache.batch.shape != np.shape(batch) or (
        cache.batch is not batch and not np.array_equal(cache.batch, batch)
    ):
        raise StaleCacheError("backward() needs a train-mode forward() on the same batch")
    params._cache = None

    g = np.asarray(loss_grad, dtype=np.float64)
    mask = _softplus_mask(spec)
    if mask is not None:
        g = g * np.where(mask, _sigmoid(cache.out_pre), 1.0)

    n_layers = spec.hidden_layers + 1
    gw: list = [None] * n_layers
    gb: list = [None] * n_layers
    gs: list = [None] * spec.hidden_layers if spec.batch_norm else []
    gt: list = [None] * spec.hidden_layers if spec.batch_norm else []

    gw[-1] = np.swapaxes(cache.inputs[-1], -1, -2) @ g
    gb[-1] = _batch_sum(g)
    for l in reversed(range(spec.hidden_layers)):
        g = g @ np.swapaxes(params.weights[l + 1], -1, -2)
        g = g * _activation_grad(spec.hidden_activation, cache.post[l])
        if spec.batch_norm:
            xhat = cache.xhat[l]
            gt[l] = _batch_sum(g)
            gs[l] = _batch_sum(g * xhat)
            gx = g * params.bn_scale[l][..., None, :]
            m = g.shape[-2]
            g = (cache.inv_std[l][..., None, :] / m) * (
                m * gx
                - _batch_sum(gx, keepdims=True)
                - xhat * _batch_sum(gx * xhat, keepdims=True)
            )
        gw[l] = np.swapaxes(cache.inputs[l], -1, -2) @ g
        gb[l] = _batch_sum(g)
    if l2:
        gw = [gwi + 2.0 * l2 * w for gwi, w in zip(gw, params.weights)]
    return MlpGrads(gw, gb, gs, gt)


def l2_penalty(params: MlpParams, l2: float) -> float:
    return float(l2 * sum(np.sum(w * w) for w in params.weights))


def _arrays(obj) -> list[np.ndarray]:
    if isinstance(obj, MlpParams):
        return obj.trainable()
    if isinstance(obj, MlpGrads):
        return obj.arrays()
    return list(obj)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in place.

    ``params`` and ``grads`` are congruent: ``MlpParams``/``MlpGrads`` or
    parallel sequences of arrays.
    """
    ps, gs = _arrays(params), _arrays(grads)
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ConfigurationError("params, grads and Adam state are not congruent")
    for g in gs:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient component")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoints ------------------------------------------------------------

def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def decode_array(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def params_to_dict(params: MlpParams) -> dict:
    return {k: [encode_array(a) for a in v] for k, v in params.tensors().items()}


def params_from_dict(d: dict) -> MlpParams:
    return MlpParams(**{k: [decode_array(a) for a in d.get(k, [])] for k in (
        "weights", "biases", "bn_scale", "bn_shift", "running_mean", "running_var")})


def save_checkpoint(path, spec: MlpSpec, params: MlpParams, adam: AdamState | None = None) -> None:
    doc = {"spec": spec.to_dict(), "params": params_to_dict(params)}
    if adam is not None:
        doc["adam"] = {
            "m": [encode_array(a) for a in adam.m],
            "v": [encode_array(a) for a in adam.v],
            "step": adam.step,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[MlpSpec, MlpParams, AdamState | None]:
    doc = json.loads(Path(path).read_text())
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState(
            [decode_array(x) for x in a["m"]],
            [decode_array(x) for x in a["v"]],
            a["step"], a["beta1"], a["beta2"], a["eps"],
        )
    return MlpSpec.from_dict(doc["spec"]), params_from_dict(doc["params"]), adam
