"""Decoupled forward-backward SDE problems and the two benchmark instances.

Conventions for all callables, with ``m`` samples in dimension ``d``:

* ``a(t, x)``: ``(m, d) -> (m, d)`` drift
* ``b(t, x)``: ``(m, d) -> (m, d, d)`` diffusion matrix
* ``f(t, x, y, z)``: ``(m, d), (m,), (m, d) -> (m,)`` driver
* ``g(x)``: ``(m, d) -> (m,)`` terminal condition
* ``f_y``, ``f_z``: partial derivatives of the driver, shapes ``(m,)`` and
  ``(m, d)``; the solver needs them for exact gradients through the
  backward recursion.

The backward equation is ``-dY = f dt - Z dW`` with ``Y_T = g(X_T)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erfc

from .errors import ConfigurationError, DomainError

Array = np.ndarray


@dataclass(frozen=True)
class BsdeProblem:
    d: int
    a: Callable[[float, Array], Array]
    b: Callable[[float, Array], Array]
    f: Callable[[float, Array, Array, Array], Array]
    g: Callable[[Array], Array]
    x0: Array
    f_y: Callable[[float, Array, Array, Array], Array] | None = None
    f_z: Callable[[float, Array, Array, Array], Array] | None = None
    analytic: tuple[float, Array] | None = None
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def driver_partials(self, t, x, y, z, h: float = 1e-6) -> tuple[Array, Array]:
        """``(f_y, f_z)``; central differences when no closed form was given."""
        if self.f_y is not None and self.f_z is not None:
            return self.f_y(t, x, y, z), self.f_z(t, x, y, z)
        fy = (self.f(t, x, y + h, z) - self.f(t, x, y - h, z)) / (2 * h)
        fz = np.empty_like(z)
        for k in range(z.shape[1]):
            dz = np.zeros_like(z)
            dz[:, k] = h
            fz[:, k] = (self.f(t, x, y, z + dz) - self.f(t, x, y, z - dz)) / (2 * h)
        return fy, fz


def norm_cdf(x):
    """Standard normal CDF through the complementary error function."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


# -- Black-Scholes ----------------------------------------------------------

@dataclass(frozen=True)
class BlackScholesParams:
    a: float = 0.05  # expected return
    b: float = 0.2  # volatility
    S0: float = 100.0
    R: float = 0.03  # risk-free rate
    delta: float = 0.0  # dividend rate
    K: float = 100.0
    T: float = 1.0

    def __post_init__(self):
        if not (self.b > 0 and self.S0 > 0 and self.K > 0 and self.T > 0):
            raise ConfigurationError("Black-Scholes needs b, S0, K, T > 0")


def black_scholes_analytic(p: BlackScholesParams, t: float, S_t) -> tuple:
    """Call price ``Y_t`` and hedge ``Z_t`` (delta times ``b * S_t``)."""
    if t >= p.T:
        raise DomainError(f"closed form requires t < T (t={t}, T={p.T})")
    S = np.asarray(S_t, dtype=np.float64)
    tau = p.T - t
    vol = p.b * np.sqrt(tau)
    d1 = (np.log(S / p.K) + (p.R - p.delta + 0.5 * p.b**2) * tau) / vol
    d2 = d1 - vol
    disc_s = S * np.exp(-p.delta * tau) * norm_cdf(d1)
    y = disc_s - p.K * np.exp(-p.R * tau) * norm_cdf(d2)
    z = disc_s * p.b
    if y.ndim == 0:
        return float(y), float(z)
    return y, z


def black_scholes_y0_range(p: BlackScholesParams) -> tuple[float, float]:
    """Initial-guess interval for Y0 anchored at the no-arbitrage lower bound."""
    lower = max(p.S0 * np.exp(-p.delta * p.T) - p.K * np.exp(-p.R * p.T), 0.0)
    return float(lower), float(lower + 0.1 * p.K)


def black_scholes_problem(p: BlackScholesParams) -> BsdeProblem:
    drift_z = (p.a - p.R + p.delta) / p.b

    def a(t, x):
        return p.a * x

    def b(t, x):
        return (p.b * x)[:, :, None]

    def f(t, x, y, z):
        return -(p.R * y + drift_z * z[:, 0])

    def f_y(t, x, y, z):
        return np.full_like(y, -p.R)

    def f_z(t, x, y, z):
        return np.full_like(z, -drift_z)

    def g(x):
        return np.maximum(x[:, 0] - p.K, 0.0)

    y0, z0 = black_scholes_analytic(p, 0.0, p.S0)
    return BsdeProblem(
        d=1, a=a, b=b, f=f, g=g, x0=np.array([p.S0]), f_y=f_y, f_z=f_z,
        analytic=(y0, np.array([z0])), kind="black_scholes", params=asdict(p),
    )


# -- Burgers type -----------------------------------------------------------

@dataclass(frozen=True)
class BurgersParams:
    b: float = 25.0
    T: float = 0.25
    d: int = 50

    def __post_init__(self):
        if not (self.b > 0 and self.T > 0 and self.d >= 1):
            raise ConfigurationError("Burgers needs b > 0, T > 0, d >= 1")


def _logistic_ratio(s):
    e = np.exp(s)
    return e / (1.0 + e)


def burgers_analytic(p: BurgersParams, t: float, x) -> tuple:
    """``(Y_t, Z_t)`` for states ``x`` of shape ``(d,)`` or ``(m, d)``."""
    x = np.asarray(x, dtype=np.float64)
    s = t + x.mean(axis=-1)
    e = np.exp(s)
    y = _logistic_ratio(s)
    zk = (p.b / p.d) * e / (1.0 + e) ** 2
    z = np.multiply.outer(zk, np.ones(p.d))
    if x.ndim == 1:
        return float(y), z
    return y, z


def burgers_problem(p: BurgersParams) -> BsdeProblem:
    d = p.d
    coef = (2 * d + p.b**2) / (2 * p.b * d)
    eye = np.eye(d)

    def a(t, x):
        return np.zeros_like(x)

    def b(t, x):
        return np.broadcast_to(p.b * eye, (x.shape[0], d, d))

    def f(t, x, y, z):
        return (p.b / d * y - coef) * z.sum(axis=1)

    def f_y(t, x, y, z):
        return p.b / d * z.sum(axis=1)

    def f_z(t, x, y, z):
        return np.repeat((p.b / d * y - coef)[:, None], d, axis=1)

    def g(x):
        return _logistic_ratio(p.T + x.mean(axis=1))

    return BsdeProblem(
        d=d, a=a, b=b, f=f, g=g, x0=np.zeros(d), f_y=f_y, f_z=f_z,
        analytic=(0.5, np.full(d, p.b / (4 * d))), kind="burgers", params=asdict(p),
    )


def burgers_y0_range(p: BurgersParams) -> tuple[float, float]:
    return 0.0, 1.0


# -- (de)serialization ------------------------------------------------------

_FAMILIES = {
    "black_scholes": (BlackScholesParams, black_scholes_problem, black_scholes_y0_range),
    "burgers": (BurgersParams, burgers_problem, burgers_y0_range),
}


def family(kind: str):
    try:
        return _FAMILIES[kind]
    except KeyError:
        raise ConfigurationError(f"unknown problem kind {kind!r}; choose from {sorted(_FAMILIES)}")


def make_params(kind: str, values: dict):
    cls = family(kind)[0]
    return cls(**values)


def make_problem(kind: str, values: dict) -> BsdeProblem:
    params_cls, build, _ = family(kind)
    return build(params_cls(**values))


def default_y0_range(kind: str, values: dict) -> tuple[float, float]:
    params_cls, _, y0_range = family(kind)
    return y0_range(params_cls(**values))


def problem_to_dict(problem: BsdeProblem) -> dict:
    if problem.kind == "custom":
        raise ConfigurationError("custom problems hold arbitrary callables and are not serializable")
    return {"kind": problem.kind, "params": dict(problem.params)}


def problem_from_dict(d: dict) -> BsdeProblem:
    return make_problem(d["kind"], d.get("params", {}))
