import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deepbsde_uq import uq_data as U
from deepbsde_uq.errors import ConfigurationError, StaleCacheError
from deepbsde_uq.problems import BlackScholesParams, black_scholes_analytic

TINY_SOLVER = {"steps": 3, "batch_size": 8, "eval_paths": 8}


def tiny_gen(M=3, Q=2, seed=1, policy="fixed_N_fixed_T", **kw):
    sampler = U.black_scholes_sampler(policy, **kw)
    return U.GenConfig(sampler, M, Q, dict(TINY_SOLVER), seed)


# -- sampling ---------------------------------------------------------------

def test_degenerate_range_is_constant():
    s = U.ParamSampler("black_scholes", {"b": (0.2, 0.2), "S0": (80, 120)}, fixed={"T": 1.0}, N=4)
    X = U.sample_params(s, 500, 0)
    assert np.all(X[:, s.sampled.index("b")] == 0.2)


def test_feature_order_ignores_range_insertion_order():
    a = U.ParamSampler("black_scholes", {"b": (0.1, 0.4), "S0": (80, 120), "R": (0, 0.1)}, fixed={"T": 1.0}, N=4)
    b = U.ParamSampler("black_scholes", {"R": (0, 0.1), "S0": (80, 120), "b": (0.1, 0.4)}, fixed={"T": 1.0}, N=4)
    assert a.feature_names == b.feature_names
    assert np.array_equal(U.sample_params(a, 50, 1), U.sample_params(b, 50, 1))


def test_draws_stay_within_ranges():
    s = U.black_scholes_sampler("fixed_N_vary_T")
    X = U.sample_params(s, 10_000, 3)
    for k, name in enumerate(s.sampled):
        lo, hi = s.ranges[name]
        assert lo <= X[:, k].min() and X[:, k].max() <= hi
        assert X[:, k].max() - X[:, k].min() > 0.9 * (hi - lo)
    np.testing.assert_allclose(X[:, -1], X[:, s.sampled.index("T")] / 16, rtol=1e-15)


def test_fixed_dt_policy_rounds_steps():
    s = U.black_scholes_sampler("fixed_dt_vary_T")
    assert s.dt == 0.025 and s.ranges["T"] == (1 / 12, 1.0)
    X = U.sample_params(s, 2000, 4)
    T, N = X[:, s.sampled.index("T")], X[:, -1]
    assert np.array_equal(N, np.round(T / 0.025))
    assert N.min() >= 3
    for x in X[:20]:
        _, grid = s.decode(x)
        assert grid.N == x[-1] and grid.T == x[s.sampled.index("T")]


def test_sampling_is_seeded():
    s = U.burgers_sampler()
    assert np.array_equal(U.sample_params(s, 50, 7), U.sample_params(s, 50, 7))
    assert not np.array_equal(U.sample_params(s, 50, 7), U.sample_params(s, 50, 8))


def test_grid_policy_expands_each_draw():
    s = U.burgers_sampler("fixed_T_vary_N_grid", d=3)
    X = U.sample_params(s, 5, 0)
    assert X.shape == (20, 2)
    assert np.array_equal(X[:4, -1], [2, 8, 32, 128])
    assert np.all(X[:4, 0] == X[0, 0])
    values, grid = s.decode(X[2])
    assert grid.T == 0.3 and grid.N == 32 and values["d"] == 3


@pytest.mark.parametrize("bad", [
    dict(family="black_scholes", ranges={"b": (0.4, 0.1)}, fixed={"T": 1.0}, N=4),
    dict(family="black_scholes", ranges={"b": (0.1, 0.4)}, fixed={"T": 1.0}, policy="fixed_dt_vary_T", dt=0.1),
    dict(family="black_scholes", ranges={"b": (0.1, 0.4)}, fixed={"T": 1.0}),
    dict(family="black_scholes", ranges={"b": (0.1, 0.4)}, fixed={"b": 0.2, "T": 1.0}, N=4),
    dict(family="burgers", ranges={"b": (1, 2)}, fixed={"T": 1.0}, policy="fixed_T_vary_N_grid"),
    dict(family="heston", ranges={}, N=4),
])
def test_sampler_validation(bad):
    with pytest.raises(ConfigurationError):
        U.ParamSampler(**bad)


def test_sampler_roundtrip():
    for s in (U.black_scholes_sampler("fixed_dt_vary_T"), U.burgers_sampler("fixed_T_vary_N_grid")):
        assert U.ParamSampler.from_dict(json.loads(json.dumps(s.to_dict()))) == s


# -- generation -------------------------------------------------------------

def test_record_schema_and_first_run(tmp_path):
    ds = U.generate(tiny_gen(M=2), tmp_path / "d.jsonl")
    line = (tmp_path / "d.jsonl").read_text().splitlines()[0]
    doc = json.loads(line)
    assert list(doc) == ["i", "x", "y", "z", "ens_y", "ens_z", "seeds", "div"]
    assert doc["y"] == doc["ens_y"][0] and doc["z"] == doc["ens_z"][0]
    assert len(doc["ens_y"]) == 2 and len(doc["seeds"]) == 2
    assert ds.X.shape == (2, 3) and ds.Z.shape == (2, 1) and ds.ens_z.shape == (2, 2, 1)
    assert np.array_equal(ds.Y, ds.ens_y[:, 0])


def test_worker_count_does_not_change_output(tmp_path):
    gen = tiny_gen(M=4, Q=2)
    U.generate(gen, tmp_path / "a.jsonl", workers=1)
    U.generate(gen, tmp_path / "b.jsonl", workers=2)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_interrupted_generation_resumes_identically(tmp_path):
    gen = tiny_gen(M=4, Q=1)
    U.generate(gen, tmp_path / "full.jsonl")
    part = tmp_path / "part.jsonl"
    ds = U.generate(gen, part, max_new_records=1)
    assert len(ds) == 1
    U.generate(gen, part, max_new_records=1)
    with part.open("a") as fh:
        fh.write('{"i": 2, "x": [0.1')  # torn write
    U.generate(gen, part)
    assert part.read_bytes() == (tmp_path / "full.jsonl").read_bytes()


def test_changed_config_is_rejected(tmp_path):
    out = tmp_path / "d.jsonl"
    U.generate(tiny_gen(M=2, seed=1), out, max_new_records=1)
    with pytest.raises(StaleCacheError):
        U.generate(tiny_gen(M=2, seed=2), out)
    U.sidecar_path(out).unlink()
    with pytest.raises(StaleCacheError):
        U.generate(tiny_gen(M=2, seed=1), out)


def test_records_rederive_bit_exact(tmp_path):
    gen = tiny_gen(M=3, Q=2, policy="fixed_dt_vary_T")
    ds = U.generate(gen, tmp_path / "d.jsonl")
    for i in (0, 2):
        assert U.rederive_record(gen, i).to_json() == ds.records[i].to_json()


def test_truth_and_census(tmp_path):
    ds = U.generate(tiny_gen(M=3, Q=2), tmp_path / "d.jsonl")
    y, z = ds.truth()
    values, _ = ds.gen.sampler.decode(ds.X[1])
    ref = black_scholes_analytic(BlackScholesParams(**values), 0.0, values["S0"])
    assert y[1] == ref[0] and z[1, 0] == ref[1]
    census = ds.divergence_census()
    assert census["records"] == 3 and census["runs"] == 6
    assert census["records_y_negative"] == int((ds.Y < 0).sum())
    assert census["runs_non_finite"] == int(ds.diverged.sum())


def test_reloaded_dataset_decodes_like_the_generating_config(tmp_path):
    gen = tiny_gen(M=3, Q=1)
    X = U.sample_params(gen.sampler, gen.M, U.params_seed(gen))
    U.generate(gen, tmp_path / "d.jsonl")
    ds = U.load_dataset(tmp_path / "d.jsonl")
    for i in range(3):
        assert ds.gen.sampler.decode(ds.X[i])[0] == gen.sampler.decode(X[i])[0]
    rec = U.rederive_record(ds.gen, 1)
    assert np.array_equal(rec.ens_y, ds.ens_y[1])


def test_sidecar_feature_order_is_checked(tmp_path):
    U.generate(tiny_gen(M=2, Q=1), tmp_path / "d.jsonl")
    side = U.sidecar_path(tmp_path / "d.jsonl")
    doc = json.loads(side.read_text())
    doc["features"] = doc["features"][::-1]
    side.write_text(json.dumps(doc))
    with pytest.raises(StaleCacheError):
        U.load_dataset(tmp_path / "d.jsonl")
    with pytest.raises(StaleCacheError):
        U.generate(tiny_gen(M=3, Q=1), tmp_path / "d.jsonl")


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        U.load_dataset(tmp_path / "nope.jsonl")


# -- splitting --------------------------------------------------------------

def _fake_dataset(M, policy="fixed_N_fixed_T"):
    sampler = (U.black_scholes_sampler() if policy == "fixed_N_fixed_T"
               else U.burgers_sampler(policy, d=2))
    gen = U.GenConfig(sampler, M if policy == "fixed_N_fixed_T" else M // len(sampler.N_grid))
    recs = [U.UqRecord(i, np.zeros(3), np.zeros(1), np.zeros((1, 1)), [0], [False]) for i in range(M)]
    return U.UqDataset(recs, gen)


def test_small_split_sizes():
    ds = U.split(_fake_dataset(10), 2, 2, seed=0)
    assert len(ds.subset("train")) == 6
    assert len(ds.subset("valid")) == 2 and len(ds.subset("test")) == 2


@given(M=st.integers(5, 300), fv=st.floats(0, 0.4), ft=st.floats(0, 0.4), seed=st.integers(0, 100))
def test_split_partition(M, fv, ft, seed):
    mv, mt = int(fv * M), int(ft * M)
    if mv + mt >= M:
        return
    ds = U.split(_fake_dataset(M), mv, mt, seed)
    parts = [ds.subset(k) for k in ("train", "valid", "test")]
    allidx = np.concatenate(parts)
    assert np.array_equal(np.sort(allidx), np.arange(M))
    assert len(parts[0]) == M - mv - mt
    again = U.split(_fake_dataset(M), mv, mt, seed)
    assert all(np.array_equal(again.splits[k], ds.splits[k]) for k in ds.splits)


def test_split_rejects_oversized():
    with pytest.raises(ConfigurationError):
        U.split(_fake_dataset(10), 5, 5)


def test_default_split_is_ten_percent():
    ds = U.split(_fake_dataset(256))
    assert len(ds.subset("test")) == 26 and len(ds.subset("valid")) == 26


def test_grid_split_keeps_draws_together():
    ds = U.split(_fake_dataset(40, "fixed_T_vary_N_grid"), 8, 8, seed=3)
    groups = U.record_groups(ds)
    for name in ("train", "valid", "test"):
        g = set(groups[ds.subset(name)])
        others = set(groups[np.setdiff1d(np.arange(40), ds.subset(name))])
        assert not g & others
    assert len(ds.subset("test")) == 8


def test_missing_split():
    with pytest.raises(ConfigurationError):
        _fake_dataset(10).subset("train")
