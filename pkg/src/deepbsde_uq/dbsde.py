"""The DBSDE scheme: learnable (Y0, Z0) plus one Z-network per inner time step.

The forward process is decoupled from (Y, Z), so all paths are simulated
first and the ``N - 1`` subnetworks run as one stacked network on
``X_1, ..., X_{N-1}``.  The backward recursion for Y is then unrolled and
differentiated by hand.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import ConfigurationError, TrainingDivergedError
from .nn import LrSchedule, MlpParams, MlpSpec
from .problems import BsdeProblem, problem_from_dict, problem_to_dict
from .sde import BrownianBatch, TimeGrid, derive_seed, euler_maruyama_forward, sample_brownian

# sub-stream indices under a run seed
_STREAM_INIT, _STREAM_NETS, _STREAM_TRAIN, _STREAM_EVAL = 0, 1, 2, 3


@dataclass(frozen=True)
class DbsdeConfig:
    grid: TimeGrid
    batch_size: int = 128
    steps: int = 2000
    lr: LrSchedule = field(default_factory=lambda: LrSchedule.constant(1e-2))
    hidden_layers: int = 2
    hidden_width: int | None = None  # None: 10 + d
    activation: str = "relu"
    y0_init_range: tuple[float, float] = (0.0, 1.0)
    z0_init_range: tuple[float, float] = (-1.0, 1.0)
    base_seed: int = 0
    eval_paths: int = 256
    checkpoints: tuple[int, ...] = ()

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 for batch normalization")
        lo, hi = self.y0_init_range
        if hi < lo:
            raise ConfigurationError("y0_init_range must be ordered")

    def z_net(self, d: int) -> MlpSpec:
        width = self.hidden_width if self.hidden_width is not None else 10 + d
        return MlpSpec(d, d, self.hidden_layers, width, self.activation, batch_norm=True)

    def to_dict(self) -> dict:
        return {
            "T": self.grid.T,
            "N": self.grid.N,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "lr": self.lr.to_dict(),
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "activation": self.activation,
            "y0_init_range": list(self.y0_init_range),
            "z0_init_range": list(self.z0_init_range),
            "base_seed": self.base_seed,
            "eval_paths": self.eval_paths,
            "checkpoints": list(self.checkpoints),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DbsdeConfig":
        d = dict(d)
        grid = TimeGrid(float(d.pop("T")), int(d.pop("N")))
        if "lr" in d:
            lr = d.pop("lr")
            d["lr"] = LrSchedule.from_dict(lr) if isinstance(lr, dict) else LrSchedule.constant(float(lr))
        for key in ("y0_init_range", "z0_init_range"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        if "checkpoints" in d:
            d["checkpoints"] = tuple(int(v) for v in d["checkpoints"])
        return cls(grid=grid, **d)


@dataclass
class DbsdeModel:
    y0: np.ndarray  # (1,)
    z0: np.ndarray  # (d,)
    spec: MlpSpec
    subnets: MlpParams | None  # stacked over N - 1 steps; None when N == 1

    def trainable(self) -> list[np.ndarray]:
        nets = self.subnets.trainable() if self.subnets is not None else []
        return [self.y0, self.z0, *nets]


@dataclass
class DbsdeResult:
    y0: float
    z0: np.ndarray
    final_loss: float
    seed: int
    steps_run: int
    diverged: bool
    losses: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    checkpoints: dict = field(repr=False, default_factory=dict)  # step -> (y0, z0)
    eval_loss: float = float("nan")


@dataclass
class _Rollout:
    batch: BrownianBatch
    inputs: np.ndarray | None
    fy: np.ndarray  # (N, m)
    fz: np.ndarray  # (N, m, d)
    residual: np.ndarray  # g(X_N) - Y_N


def init_model(problem: BsdeProblem, config: DbsdeConfig, seed: int) -> DbsdeModel:
    """Y0 ~ U[y0 range], Z0 ~ U[z0 range]^d, subnetworks Xavier normal."""
    rng = np.random.default_rng(derive_seed(seed, _STREAM_INIT))
    y0 = rng.uniform(*config.y0_init_range, size=1)
    z0 = rng.uniform(*config.z0_init_range, size=problem.d)
    spec = config.z_net(problem.d)
    n_nets = config.grid.N - 1
    subnets = None
    if n_nets > 0:
        subnets = nn.init_xavier_normal(spec, derive_seed(seed, _STREAM_NETS), stack=(n_nets,))
    return DbsdeModel(y0, z0, spec, subnets)


def rollout_loss(
    model: DbsdeModel,
    problem: BsdeProblem,
    config: DbsdeConfig,
    batch: BrownianBatch,
    mode: str = "train",
) -> tuple[float, _Rollout]:
    """Mean squared mismatch between ``g(X_N)`` and the simulated ``Y_N``."""
    grid = config.grid
    dw = batch.increments
    m, n_steps, d = dw.shape
    x = euler_maruyama_forward(problem, problem.x0, grid, batch)
    inputs = None
    z_nets = None
    if model.subnets is not None:
        inputs = np.ascontiguousarray(x[:, 1:n_steps].transpose(1, 0, 2))
        z_nets = nn.forward(model.subnets, model.spec, inputs, mode)
    dt = grid.dt
    y = np.full(m, model.y0[0])
    z0 = np.broadcast_to(model.z0, (m, d))
    fy = np.empty((n_steps, m))
    fz = np.empty((n_steps, m, d))
    for n in range(n_steps):
        t = n * dt
        xn = x[:, n]
        z = z0 if n == 0 else z_nets[n - 1]
        fy[n], fz[n] = problem.driver_partials(t, xn, y, z)
        y = y - problem.f(t, xn, y, z) * dt + (z * dw[:, n]).sum(axis=1)
    residual = problem.g(x[:, -1]) - y
    loss = float(np.mean(residual * residual))
    if not np.isfinite(loss):
        raise TrainingDivergedError("non-finite rollout loss")
    return loss, _Rollout(batch, inputs, fy, fz, residual)


def rollout_grads(model: DbsdeModel, config: DbsdeConfig, cache: _Rollout) -> list[np.ndarray]:
    """Gradient of the rollout loss, congruent with ``model.trainable()``."""
    dw = cache.batch.increments
    m, n_steps, d = dw.shape
    dt = config.grid.dt
    lam = -2.0 * cache.residual / m  # dL/dY_N
    dz = np.empty((n_steps, m, d))
    for n in reversed(range(n_steps)):
        dz[n] = lam[:, None] * (dw[:, n] - cache.fz[n] * dt)
        lam = lam * (1.0 - cache.fy[n] * dt)
    grads = [np.array([lam.sum()]), dz[0].sum(axis=0)]
    if model.subnets is not None:
        net_grads = nn.backward(model.subnets, model.spec, cache.inputs, dz[1:])
        grads.extend(net_grads.arrays())
    return grads


def train(problem: BsdeProblem, config: DbsdeConfig) -> DbsdeResult:
    """Run the Adam optimization with a fresh Brownian batch at every step."""
    seed = config.base_seed
    model = init_model(problem, config, seed)
    params = model.trainable()
    state = nn.AdamState.zeros_like(params)
    train_seed = derive_seed(seed, _STREAM_TRAIN)
    checkpoints = set(config.checkpoints)
    history = {}
    if 0 in checkpoints:
        history[0] = (float(model.y0[0]), model.z0.copy())
    losses = np.full(config.steps, np.nan)
    diverged = False
    steps_run = 0
    for k in range(1, config.steps + 1):
        batch = sample_brownian(config.grid, config.batch_size, problem.d, derive_seed(train_seed, k))
        try:
            loss, cache = rollout_loss(model, problem, config, batch, "train")
            grads = rollout_grads(model, config, cache)
            nn.adam_step(params, grads, state, config.lr.rate(k))
        except (TrainingDivergedError, FloatingPointError):
            diverged = True
            break
        losses[k - 1] = loss
        steps_run = k
        if k in checkpoints:
            history[k] = (float(model.y0[0]), model.z0.copy())

    eval_loss = float("nan")
    if not diverged and config.eval_paths >= 2:
        batch = sample_brownian(
            config.grid, config.eval_paths, problem.d, derive_seed(seed, _STREAM_EVAL)
        )
        try:
            eval_loss, _ = rollout_loss(model, problem, config, batch, "eval")
        except FloatingPointError:
            pass
    final = losses[steps_run - 1] if steps_run else float("nan")
    return DbsdeResult(
        y0=float(model.y0[0]),
        z0=model.z0.copy(),
        final_loss=float(final),
        seed=seed,
        steps_run=steps_run,
        diverged=diverged,
        losses=losses[:steps_run],
        checkpoints=history,
        eval_loss=eval_loss,
    )


def run_seeds(base_seed: int, Q: int) -> list[int]:
    return [derive_seed(base_seed, q) for q in range(Q)]


def _train_job(args) -> DbsdeResult:
    problem, config = args
    if isinstance(problem, dict):
        problem = problem_from_dict(problem)
    return train(problem, config)


def ensemble_solve(
    problem: BsdeProblem, config: DbsdeConfig, Q: int, workers: int = 1
) -> list[DbsdeResult]:
    """``Q`` independent trainings with seeds derived from ``config.base_seed``."""
    if Q < 1:
        raise ConfigurationError("Q must be >= 1")
    jobs = [(problem, replace(config, base_seed=s)) for s in run_seeds(config.base_seed, Q)]
    return map_jobs(_train_job, jobs, workers, problem)


def map_jobs(fn, jobs: list, workers: int, problem: BsdeProblem | None = None) -> list:
    """Ordered map, optionally over a process pool."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    if problem is not None:
        # closures do not pickle; ship the problem description instead
        desc = problem_to_dict(problem)
        jobs = [(desc, *j[1:]) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))
