"""Benchmark statistics: ensemble RMSE/STD, relative measures, log-domain
correlations, the ensemble-size equivalence of a UQ model, rank correlation,
label accuracies and mean reciprocal rank.  Logs are base 10.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError, UndefinedCorrelationError


@dataclass(frozen=True)
class EnsembleStats:
    mean: float
    std: float  # biased, divisor Q
    rmse: float | None  # against the exact solution, divisor Q
    Q: int


def ensemble_stats(values, truth: float | None = None) -> EnsembleStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 1:
        raise ConfigurationError("ensemble needs at least one value")
    mu = float(v.mean())
    std = float(np.sqrt(np.mean((v - mu) ** 2)))
    err = None if truth is None else float(np.sqrt(np.mean((v - truth) ** 2)))
    return EnsembleStats(mu, std, err, v.size)


def ensemble_arrays(ens, truth=None, q: int | None = None) -> dict:
    """Row-wise ensemble statistics for ``ens`` of shape ``(M, Q)`` (or ``(M, Q, d)``),
    using the first ``q`` runs."""
    e = np.asarray(ens, dtype=np.float64)
    if q is not None:
        e = e[:, :q]
    mu = e.mean(axis=1)
    out = {"mean": mu, "std": np.sqrt(np.mean((e - mu[:, None]) ** 2, axis=1))}
    if truth is not None:
        t = np.asarray(truth, dtype=np.float64)
        out["rmse"] = np.sqrt(np.mean((e - t[:, None]) ** 2, axis=1))
    return out


def relative(value, reference):
    """``value / |reference|``; zero denominators are a domain error."""
    value = np.asarray(value, dtype=np.float64)
    den = np.abs(np.asarray(reference, dtype=np.float64))
    if np.any(den == 0):
        bad = np.flatnonzero(np.broadcast_to(den, value.shape) == 0)
        raise DomainError(f"relative measure undefined at indices {bad.tolist()}")
    return value / den


def rmse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean((a - b) ** 2)))


# -- correlations -------------------------------------------------------------

def pearson(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigurationError("pearson needs two 1-D arrays of equal length")
    if a.size < 2:
        raise UndefinedCorrelationError("correlation needs at least 2 samples")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0 or sbb == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    r = float(da @ db) / np.sqrt(saa * sbb)
    return float(min(1.0, max(-1.0, r)))


def pearson_log(a, b) -> float:
    """Pearson correlation of ``(log10 a, log10 b)``; inputs must be positive."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    bad = np.flatnonzero(~((a > 0) & (b > 0)))
    if bad.size:
        raise DomainError(f"log-domain correlation needs positive inputs; offending indices {bad.tolist()}")
    return pearson(np.log10(a), np.log10(b))


def positive_mask(*arrays) -> np.ndarray:
    mask = np.ones(np.shape(arrays[0]), dtype=bool)
    for a in arrays:
        mask &= np.asarray(a) > 0
    return mask


def pearson_log_excluding(a, b) -> tuple[float, int]:
    """Log correlation over pairs where both entries are positive, plus the exclusion count."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    keep = positive_mask(a, b)
    return pearson_log(a[keep], b[keep]), int((~keep).sum())


def average_ranks(a) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size)
    start = 0
    while start < a.size:
        stop = start + 1
        while stop < a.size and sorted_a[stop] == sorted_a[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(a, b) -> float:
    """``1 - 6 sum(d^2) / (n (n^2 - 1))`` on average ranks."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n = a.size
    if a.shape != b.shape or n < 2:
        raise ConfigurationError("spearman needs two equal-length arrays with n >= 2")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelationError("rank correlation undefined for a constant input")
    d = average_ranks(a) - average_ranks(b)
    return float(1.0 - 6.0 * float(d @ d) / (n * (n * n - 1.0)))


@dataclass
class CorrelationSummary:
    mean: float
    std: float
    per_model: list[float]
    failed_models: int = 0
    excluded_samples: list[int] = field(default_factory=list)


def summarize_correlations(values: list[float], failed: int = 0, excluded=None) -> CorrelationSummary:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean()) if arr.size else float("nan")
    std = float(arr.std()) if arr.size else float("nan")
    return CorrelationSummary(mean, std, [float(v) for v in arr], failed, list(excluded or []))


def uq_relative_std(models, X, component: int = 0) -> list[np.ndarray]:
    """``sigma_hat / |mu_hat|`` per model, each model normalizing by its own mean."""
    from .uq_model import predict

    out = []
    for model in models:
        mu, sigma = predict(model, X)
        if mu.ndim == 2:
            mu, sigma = mu[:, component], sigma[:, component]
        with np.errstate(divide="ignore"):
            out.append(sigma / np.abs(mu))
    return out


def mean_model_correlation(models, X, reference, component: int = 0) -> CorrelationSummary:
    """Mean and STD over models of ``rho(log reference, log sigma_hat^r)``."""
    rhos, failed, excluded = [], 0, []
    for sig_rel in uq_relative_std(models, X, component):
        try:
            rho, n_ex = pearson_log_excluding(reference, sig_rel)
        except (DomainError, UndefinedCorrelationError):
            failed += 1
            continue
        rhos.append(rho)
        excluded.append(n_ex)
    if failed:
        warnings.warn(f"{failed} of {len(models)} models gave an undefined correlation", RuntimeWarning)
    return summarize_correlations(rhos, failed, excluded)


# -- ensemble-size equivalence -------------------------------------------------

@dataclass
class QEquivalence:
    q: float
    flag: str  # "inside", "below" or "above"
    curve_q: list[int]
    curve_rho: list[float]


def ensemble_correlation_curve(ens, truth, Q_max: int | None = None) -> tuple[list[int], list[float]]:
    """``rho(log eps^r, log sigma~^r_q)`` for ``q = 2..Q_max``.

    The relative RMSE uses all ``Q_max`` runs; the relative ensemble STD uses
    the first ``q``.
    """
    ens = np.asarray(ens, dtype=np.float64)
    Q_max = ens.shape[1] if Q_max is None else Q_max
    if Q_max < 2 or ens.shape[1] < Q_max:
        raise ConfigurationError(f"need Q_max >= 2 and at least Q_max runs per sample (have {ens.shape[1]})")
    truth = np.asarray(truth, dtype=np.float64)
    ref = ensemble_arrays(ens, truth, Q_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        eps_r = ref["rmse"] / np.abs(truth)
    qs, rhos = [], []
    for q in range(2, Q_max + 1):
        st = ensemble_arrays(ens, None, q)
        with np.errstate(divide="ignore", invalid="ignore"):
            sig_r = st["std"] / np.abs(st["mean"])
        rhos.append(pearson_log_excluding(eps_r, sig_r)[0])
        qs.append(q)
    return qs, rhos


def q_equivalence(ens, truth, uq_mean_corr: float, Q_max: int | None = None) -> QEquivalence:
    """Fractional ensemble size whose correlation first reaches ``uq_mean_corr``."""
    qs, rhos = ensemble_correlation_curve(ens, truth, Q_max)
    if rhos[0] >= uq_mean_corr:
        return QEquivalence(2.0, "below", qs, rhos)
    for k in range(1, len(qs)):
        lo, hi = rhos[k - 1], rhos[k]
        if lo < uq_mean_corr <= hi:
            q = qs[k - 1] + (uq_mean_corr - lo) / (hi - lo) * (qs[k] - qs[k - 1])
            return QEquivalence(float(q), "inside", qs, rhos)
    return QEquivalence(float(qs[-1]), "above", qs, rhos)


# -- labels ---------------------------------------------------------------------

def binary_labels(a, b) -> np.ndarray:
    """1 where ``a < b`` (the first column is better), else 0."""
    return (np.asarray(a) < np.asarray(b)).astype(np.int64)


def accuracy_binary(true_labels, pred_labels) -> float:
    t, p = np.asarray(true_labels), np.asarray(pred_labels)
    if t.shape != p.shape:
        raise ConfigurationError("label sets differ in length")
    return float(np.mean(t == p))


def argmin_onehot(values, N_grid) -> np.ndarray:
    """One-hot of the minimizing grid entry per row; ties go to the smallest N."""
    v = np.asarray(values, dtype=np.float64)
    grid = np.asarray(N_grid)
    order = np.argsort(grid, kind="stable")
    best = order[np.argmin(v[:, order], axis=1)]
    onehot = np.zeros(v.shape, dtype=np.int64)
    onehot[np.arange(len(v)), best] = 1
    return onehot


def _check_onehot(x):
    if x.ndim != 2 or np.any((x != 0) & (x != 1)) or np.any(x.sum(axis=1) != 1):
        raise ConfigurationError("multi-labels must be exactly one-hot")


def accuracy_multilabel(true, pred) -> float:
    t, p = np.asarray(true), np.asarray(pred)
    if t.shape != p.shape:
        raise ConfigurationError("label sets differ in shape")
    _check_onehot(t)
    _check_onehot(p)
    return float(np.mean(np.all(t == p, axis=1)))


def rank_grid(values, N_grid) -> np.ndarray:
    """Per row, the grid sorted by ascending value (ties keep the smaller N first)."""
    v = np.asarray(values, dtype=np.float64)
    grid = np.asarray(N_grid)
    order = np.argsort(grid, kind="stable")
    ranked = np.argsort(v[:, order], axis=1, kind="stable")
    return grid[order][ranked]


def mrr(true_min_N, ranked_Ns) -> float:
    """Mean of ``1 / position`` (1-based) of the true label in each ranked list."""
    ranked = np.asarray(ranked_Ns)
    true = np.asarray(true_min_N)
    recip = np.empty(len(true))
    for i, (t, row) in enumerate(zip(true, ranked)):
        pos = np.flatnonzero(row == t)
        if pos.size != 1:
            raise DomainError(f"sample {i}: label {t} not found exactly once in {row.tolist()}")
        recip[i] = 1.0 / (pos[0] + 1)
    return float(recip.mean())


def group_rows(X, drop_col: int) -> tuple[np.ndarray, np.ndarray]:
    """Group ids of rows that agree on every column except ``drop_col``, in first-seen order."""
    X = np.asarray(X, dtype=np.float64)
    keys = np.delete(X, drop_col, axis=1)
    ids, seen = np.empty(len(X), dtype=np.int64), {}
    for i, row in enumerate(keys):
        ids[i] = seen.setdefault(row.tobytes(), len(seen))
    return ids, np.unique(ids)


# -- report files -----------------------------------------------------------

def _header_lines(meta: dict) -> list[str]:
    return [f"# {k}: {v}" for k, v in meta.items()]


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_dat(path, columns: dict, meta: dict | None = None) -> Path:
    """Whitespace-separated columns below ``#`` metadata and column-name lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    cols = [np.asarray(columns[n]).ravel() for n in names]
    n = {len(c) for c in cols}
    if len(n) > 1:
        raise ConfigurationError(f"columns of unequal length: { {k: len(c) for k, c in zip(names, cols)} }")
    lines = _header_lines(meta or {})
    lines.append("# " + " ".join(names))
    for row in zip(*cols):
        lines.append(" ".join(format_value(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dat(path) -> dict:
    lines = Path(path).read_text().splitlines()
    names = [ln[2:].split() for ln in lines if ln.startswith("# ") and ":" not in ln][-1]
    rows = [list(map(float, ln.split())) for ln in lines if ln and not ln.startswith("#")]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return {n: data[:, k] for k, n in enumerate(names)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if hasattr(x, "__dataclass_fields__"):
        return _jsonable(x.__dict__)
    return x


def write_json(path, doc: dict, meta: dict | None = None) -> Path:
    """JSON report; ``meta`` goes under ``"_meta"`` and the payload under ``"data"``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"_meta": _jsonable(meta or {}), "data": _jsonable(doc)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
