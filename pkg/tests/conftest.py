import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# central differences lose relative precision below this magnitude
GRAD_FLOOR = 1e-6


def fd_max_rel_error(loss_fn, arrays, grads, h=1e-5, max_per_array=None, rng=None):
    """Largest ``|fd - g| / max(|fd|, |g|, GRAD_FLOOR)`` over (a sample of) the entries."""
    worst = 0.0
    for a, g in zip(arrays, grads):
        flat, gflat = a.reshape(-1), np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_array is not None and flat.size > max_per_array:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_array, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            den = max(abs(fd), abs(gflat[i]), GRAD_FLOOR)
            worst = max(worst, abs(fd - gflat[i]) / den)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def synthetic_heteroscedastic(seed, M=2000):
    """``y = sin(x) + eps`` with ``eps ~ N(0, (0.1 + 0.2 x^2)^2)`` on ``x in [-1, 1]``."""
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, M)
    sigma = 0.1 + 0.2 * x * x
    y = np.sin(x) + sigma * r.standard_normal(M)
    return x[:, None], y, sigma


# -- acceptance summary -----------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` prints and records one PASS/FAIL line for criterion ``k``."""

    def record(k: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE.setdefault(k, []).append((bool(ok), detail))
        print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p[0] for p in parts)
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(d for _, d in parts))
