"""Dataset factory for the UQ model: sample BSDE parameter sets, solve each
one ``Q`` times and persist the results as JSON Lines.

A dataset ``foo.jsonl`` has a sidecar ``foo.config.json`` holding the
generation config and its hash.  Records are appended in index order, so an
interrupted run resumes from the first missing index.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dbsde import DbsdeConfig, DbsdeResult, ensemble_solve, map_jobs
from .errors import ConfigurationError, StaleCacheError
from .nn import LrSchedule
from .problems import default_y0_range, family, make_problem
from .sde import TimeGrid, derive_seed

POLICIES = ("fixed_N_fixed_T", "fixed_dt_vary_T", "fixed_N_vary_T", "fixed_T_vary_N_grid")


@dataclass(frozen=True)
class ParamSampler:
    """Uniform ranges for the varied parameters plus a time-grid policy.

    ``ranges`` maps family parameter names (``T`` included when it varies)
    to ``(lo, hi)``; ``fixed`` holds the remaining family parameters.
    """

    family: str
    ranges: dict
    policy: str = "fixed_N_fixed_T"
    fixed: dict = field(default_factory=dict)
    N: int | None = None
    dt: float | None = None
    N_grid: tuple[int, ...] = ()

    def __post_init__(self):
        family(self.family)
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown grid policy {self.policy!r}; choose from {POLICIES}")
        for name, (lo, hi) in self.ranges.items():
            if hi < lo:
                raise ConfigurationError(f"range for {name} is reversed: [{lo}, {hi}]")
        overlap = set(self.ranges) & set(self.fixed)
        if overlap:
            raise ConfigurationError(f"parameters both fixed and sampled: {sorted(overlap)}")
        varies_T = "T" in self.ranges
        if self.policy == "fixed_N_fixed_T":
            self._need(self.N, "N")
            if varies_T:
                raise ConfigurationError("fixed_N_fixed_T needs T in fixed, not ranges")
        elif self.policy == "fixed_dt_vary_T":
            self._need(self.dt, "dt")
            if not varies_T:
                raise ConfigurationError("fixed_dt_vary_T needs a T range")
        elif self.policy == "fixed_N_vary_T":
            self._need(self.N, "N")
            if not varies_T:
                raise ConfigurationError("fixed_N_vary_T needs a T range")
        else:
            if not self.N_grid or min(self.N_grid) < 1:
                raise ConfigurationError("fixed_T_vary_N_grid needs a non-empty N_grid")
            if varies_T:
                raise ConfigurationError("fixed_T_vary_N_grid needs T in fixed, not ranges")

    def _need(self, value, name):
        if value is None or value <= 0:
            raise ConfigurationError(f"policy {self.policy} needs a positive {name}")

    @property
    def sampled(self) -> tuple[str, ...]:
        # sorted, so the column order survives a JSON round trip and matches the config hash
        return tuple(sorted(self.ranges))

    @property
    def feature_names(self) -> tuple[str, ...]:
        extra = {
            "fixed_N_fixed_T": (),
            "fixed_dt_vary_T": ("N",),
            "fixed_N_vary_T": ("dt",),
            "fixed_T_vary_N_grid": ("N",),
        }[self.policy]
        return self.sampled + extra

    def steps_for(self, T: float) -> int:
        if self.policy == "fixed_dt_vary_T":
            return max(2, int(round(T / self.dt)))
        return int(self.N)

    def decode(self, x) -> tuple[dict, TimeGrid]:
        """Family parameters and time grid of the feature vector ``x``."""
        values = dict(self.fixed)
        names = self.feature_names
        for name, v in zip(names, x):
            if name in self.ranges:
                values[name] = float(v)
        T = float(values["T"])
        if self.policy == "fixed_T_vary_N_grid" or self.policy == "fixed_dt_vary_T":
            N = int(round(x[names.index("N")]))
        else:
            N = int(self.N)
        return values, TimeGrid(T, N)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranges"] = {k: list(v) for k, v in self.ranges.items()}
        d["N_grid"] = list(self.N_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSampler":
        d = dict(d)
        d["ranges"] = {k: (float(v[0]), float(v[1])) for k, v in d["ranges"].items()}
        d["N_grid"] = tuple(int(n) for n in d.get("N_grid", ()))
        return cls(**d)


def black_scholes_sampler(policy: str = "fixed_N_fixed_T", **kw) -> ParamSampler:
    """Option-pricing ranges spanning in/at/out-of-the-money calls (a=0.05, delta=0, K=100)."""
    K = 100.0
    ranges = {"b": (0.1, 0.4), "S0": (K - 20, K + 20), "R": (0.001, 0.1)}
    fixed = {"a": 0.05, "delta": 0.0, "K": K}
    if policy == "fixed_N_fixed_T":
        fixed["T"] = kw.pop("T", 0.25)
        kw.setdefault("N", 10)
    elif policy == "fixed_dt_vary_T":
        ranges["T"] = kw.pop("T_range", (1 / 12, 1.0))
        kw.setdefault("dt", 0.025)
    elif policy == "fixed_N_vary_T":
        ranges["T"] = kw.pop("T_range", (1 / 12, 1.0))
        kw.setdefault("N", 16)
    return ParamSampler("black_scholes", ranges, policy, fixed, **kw)


def burgers_sampler(policy: str = "fixed_N_vary_T", d: int = 50, **kw) -> ParamSampler:
    ranges = {"b": kw.pop("b_range", (0.2, 40.0))}
    fixed = {"d": d}
    if policy == "fixed_T_vary_N_grid":
        fixed["T"] = kw.pop("T", 0.3)
        kw.setdefault("N_grid", (2, 8, 32, 128))
    else:
        ranges["T"] = kw.pop("T_range", (1 / 12, 0.3))
        kw.setdefault("N", 32)
    return ParamSampler("burgers", ranges, policy, fixed, **kw)


def sample_params(sampler: ParamSampler, M: int, seed: int) -> np.ndarray:
    """Feature matrix of ``M`` i.i.d. parameter draws.

    Under the N-grid policy each draw is expanded over the grid, giving
    ``M * len(N_grid)`` rows ordered draw-major.
    """
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    rng = np.random.default_rng(seed)
    names = sampler.sampled
    lo = np.array([sampler.ranges[n][0] for n in names], dtype=np.float64)
    hi = np.array([sampler.ranges[n][1] for n in names], dtype=np.float64)
    u = rng.uniform(size=(M, len(names)))
    draws = lo + (hi - lo) * u
    if sampler.policy == "fixed_N_fixed_T":
        return draws
    if sampler.policy == "fixed_dt_vary_T":
        T = draws[:, names.index("T")]
        N = np.array([sampler.steps_for(t) for t in T], dtype=np.float64)
        return np.column_stack([draws, N])
    if sampler.policy == "fixed_N_vary_T":
        T = draws[:, names.index("T")]
        return np.column_stack([draws, T / sampler.N])
    grid = np.asarray(sampler.N_grid, dtype=np.float64)
    rep = np.repeat(draws, len(grid), axis=0)
    return np.column_stack([rep, np.tile(grid, M)])


# -- generation ---------------------------------------------------------------

SOLVER_KEYS = ("batch_size", "steps", "lr", "hidden_layers", "hidden_width", "activation",
               "eval_paths", "y0_init_range")


@dataclass(frozen=True)
class GenConfig:
    sampler: ParamSampler
    M: int
    Q: int = 1
    solver: dict = field(default_factory=dict)  # DbsdeConfig fields except grid and seed
    seed: int = 0

    def __post_init__(self):
        if self.M < 1 or self.Q < 1:
            raise ConfigurationError("M and Q must be >= 1")
        unknown = set(self.solver) - set(SOLVER_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown solver keys {sorted(unknown)}")

    def to_dict(self) -> dict:
        solver = dict(self.solver)
        if isinstance(solver.get("lr"), LrSchedule):
            solver["lr"] = solver["lr"].to_dict()
        if "y0_init_range" in solver:
            solver["y0_init_range"] = list(solver["y0_init_range"])
        return {"sampler": self.sampler.to_dict(), "M": self.M, "Q": self.Q,
                "solver": solver, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(ParamSampler.from_dict(d["sampler"]), int(d["M"]), int(d.get("Q", 1)),
                   dict(d.get("solver", {})), int(d.get("seed", 0)))

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def record_seed(gen: GenConfig, i: int) -> int:
    return derive_seed(derive_seed(gen.seed, 1), i)


def params_seed(gen: GenConfig) -> int:
    return derive_seed(gen.seed, 0)


def solver_config(gen: GenConfig, x) -> tuple[dict, DbsdeConfig]:
    """Family parameters and solver config for the feature row ``x``."""
    values, grid = gen.sampler.decode(x)
    solver = dict(gen.solver)
    if "y0_init_range" not in solver:
        solver["y0_init_range"] = default_y0_range(gen.sampler.family, values)
    solver["T"], solver["N"] = grid.T, grid.N
    return values, DbsdeConfig.from_dict(solver)


@dataclass
class UqRecord:
    i: int
    x: np.ndarray
    ens_y: np.ndarray  # (Q,)
    ens_z: np.ndarray  # (Q, d)
    seeds: list[int]
    div: list[bool]

    @property
    def y(self) -> float:
        return float(self.ens_y[0])

    @property
    def z(self) -> np.ndarray:
        return self.ens_z[0]

    def to_json(self) -> str:
        return json.dumps({
            "i": self.i,
            "x": [float(v) for v in self.x],
            "y": self.y,
            "z": [float(v) for v in self.z],
            "ens_y": [float(v) for v in self.ens_y],
            "ens_z": [[float(v) for v in row] for row in self.ens_z],
            "seeds": [int(s) for s in self.seeds],
            "div": [bool(b) for b in self.div],
        })

    @classmethod
    def from_json(cls, line: str) -> "UqRecord":
        d = json.loads(line)
        return cls(int(d["i"]), np.array(d["x"], dtype=np.float64), np.array(d["ens_y"], dtype=np.float64),
                   np.array(d["ens_z"], dtype=np.float64).reshape(len(d["ens_y"]), -1),
                   [int(s) for s in d["seeds"]], [bool(b) for b in d["div"]])


def _record_job(args) -> UqRecord:
    gen_doc, i, x = args
    gen = GenConfig.from_dict(gen_doc)
    values, config = solver_config(gen, x)
    config = replace(config, base_seed=record_seed(gen, i))
    problem = make_problem(gen.sampler.family, values)
    results: list[DbsdeResult] = ensemble_solve(problem, config, gen.Q)
    return UqRecord(
        i=i,
        x=np.asarray(x, dtype=np.float64),
        ens_y=np.array([r.y0 for r in results]),
        ens_z=np.stack([r.z0 for r in results]),
        seeds=[r.seed for r in results],
        div=[r.diverged for r in results],
    )


def rederive_record(gen: GenConfig, i: int) -> UqRecord:
    """Recompute record ``i`` from the config alone."""
    X = sample_params(gen.sampler, gen.M, params_seed(gen))
    return _record_job((gen.to_dict(), i, X[i]))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".config.json")


def _read_complete_lines(path: Path) -> list[str]:
    if not path.exists():
        return []
    text = path.read_text()
    lines = text.split("\n")
    # the last element is "" after a trailing newline, or a torn partial write
    return [ln for ln in lines[:-1] if ln]


@dataclass
class UqDataset:
    records: list[UqRecord]
    gen: GenConfig
    splits: dict = field(default_factory=dict)  # name -> sorted index array

    @property
    def kind(self) -> str:
        return self.gen.sampler.family

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.gen.sampler.feature_names

    def __len__(self):
        return len(self.records)

    @property
    def X(self) -> np.ndarray:
        return np.stack([r.x for r in self.records])

    @property
    def Y(self) -> np.ndarray:
        return np.array([r.y for r in self.records])

    @property
    def Z(self) -> np.ndarray:
        return np.stack([r.z for r in self.records])

    @property
    def ens_y(self) -> np.ndarray:
        return np.stack([r.ens_y for r in self.records])

    @property
    def ens_z(self) -> np.ndarray:
        return np.stack([r.ens_z for r in self.records])

    @property
    def diverged(self) -> np.ndarray:
        return np.array([r.div for r in self.records], dtype=bool)

    def truth(self) -> tuple[np.ndarray, np.ndarray]:
        """Analytic ``(Y0, Z0)`` for every record."""
        ys, zs = [], []
        for r in self.records:
            values, _ = self.gen.sampler.decode(r.x)
            y0, z0 = make_problem(self.kind, values).analytic
            ys.append(y0)
            zs.append(np.asarray(z0, dtype=np.float64))
        return np.array(ys), np.stack(zs)

    def subset(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise ConfigurationError(f"dataset has no {name!r} split; call split() first")
        return self.splits[name]

    def divergence_census(self) -> dict:
        """Counts of negative outputs, first runs and all runs."""
        y_bad = self.Y < 0
        z_bad = (self.Z < 0).any(axis=1)
        ens_bad = (self.ens_y < 0) | (self.ens_z < 0).any(axis=2)
        return {
            "records_y_negative": int(y_bad.sum()),
            "records_z_negative": int(z_bad.sum()),
            "records_any_negative": int((y_bad | z_bad).sum()),
            "runs_any_negative": int(ens_bad.sum()),
            "runs_non_finite": int(self.diverged.sum()),
            "records": len(self),
            "runs": int(self.ens_y.size),
        }


def generate(
    gen: GenConfig,
    out,
    workers: int = 1,
    max_new_records: int | None = None,
) -> UqDataset:
    """Solve every parameter set and append records to ``out``.

    Existing records with a matching config hash are kept, so calling again
    after an interruption continues where it stopped.  ``max_new_records``
    bounds the work done by this call.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    side = sidecar_path(out)
    doc = gen.to_dict()
    digest = config_hash(doc)
    lines = _read_complete_lines(out)
    features = list(gen.sampler.feature_names)
    if side.exists():
        stored = json.loads(side.read_text())
        if stored.get("hash") != digest:
            raise StaleCacheError(f"{out} was generated with a different config (hash {stored.get('hash')})")
        if lines and stored.get("features") != features:
            raise StaleCacheError(f"{out} stores features {stored.get('features')}, expected {features}")
    elif lines:
        raise StaleCacheError(f"{out} has records but no config sidecar {side}")
    side.write_text(json.dumps({**doc, "hash": digest, "features": features}, indent=2, sort_keys=True) + "\n")

    # rewrite without a torn trailing line
    out.write_text("".join(ln + "\n" for ln in lines))
    done = len(lines)
    X = sample_params(gen.sampler, gen.M, params_seed(gen))
    total = len(X)
    stop = total if max_new_records is None else min(total, done + max_new_records)
    jobs = [(doc, i, X[i]) for i in range(done, stop)]
    chunk = max(1, workers) * 4
    with out.open("a") as fh:
        for start in range(0, len(jobs), chunk):
            for rec in map_jobs(_record_job, jobs[start:start + chunk], workers):
                fh.write(rec.to_json() + "\n")
                fh.flush()
    return load_dataset(out)


def load_dataset(path) -> UqDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"dataset config not found: {side}")
    doc = json.loads(side.read_text())
    doc.pop("hash", None)
    features = doc.pop("features", None)
    gen = GenConfig.from_dict(doc)
    if features != list(gen.sampler.feature_names):
        raise StaleCacheError(f"{path} stores features {features}, expected {list(gen.sampler.feature_names)}")
    records = [UqRecord.from_json(ln) for ln in _read_complete_lines(path)]
    for k, r in enumerate(records):
        if r.i != k:
            raise ConfigurationError(f"{path}: record {k} has index {r.i}")
    return UqDataset(records, gen)


def default_split_sizes(M: int) -> tuple[int, int]:
    n = int(round(0.1 * M))
    return n, n


def record_groups(dataset: UqDataset) -> np.ndarray:
    """Group id per record; N-grid datasets group the grid expansion of one draw."""
    sampler = dataset.gen.sampler
    idx = np.arange(len(dataset))
    if sampler.policy == "fixed_T_vary_N_grid":
        return idx // len(sampler.N_grid)
    return idx


def split(dataset: UqDataset, M_valid: int | None = None, M_test: int | None = None,
          seed: int = 0) -> UqDataset:
    """Seeded train/valid/test partition.  Records of one group stay together,
    so N-grid sizes are rounded to whole groups."""
    M = len(dataset)
    dv, dt = default_split_sizes(M)
    M_valid = dv if M_valid is None else M_valid
    M_test = dt if M_test is None else M_test
    if M_valid < 0 or M_test < 0 or M_valid + M_test >= M:
        raise ConfigurationError(f"split sizes valid={M_valid}, test={M_test} leave no training data of M={M}")
    groups = record_groups(dataset)
    n_groups = int(groups.max()) + 1
    size = M // n_groups
    g_test, g_valid = int(round(M_test / size)), int(round(M_valid / size))
    if g_test + g_valid >= n_groups:
        raise ConfigurationError("split sizes leave no training groups")
    perm = np.random.default_rng(seed).permutation(n_groups)
    parts = {"test": perm[:g_test], "valid": perm[g_test:g_test + g_valid], "train": perm[g_test + g_valid:]}
    dataset.splits = {k: np.flatnonzero(np.isin(groups, v)) for k, v in parts.items()}
    return dataset
