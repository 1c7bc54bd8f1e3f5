"""Command-line driver: solve, error-study, gen, train-uq, eval-uq, normality.

Exit codes: 0 success, 1 numerical divergence (artifacts still written),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as mt
from .dbsde import DbsdeConfig, ensemble_solve, train
from .errors import (ConfigurationError, DomainError, SimulationDivergedError, StaleCacheError,
                     TrainingDivergedError, UndefinedCorrelationError)
from .problems import default_y0_range, family, make_problem
from .sde import derive_seed
from .stats import dagostino_pearson, histogram_with_normal_fit, write_histogram
from .uq_data import (GenConfig, ParamSampler, black_scholes_sampler, burgers_sampler, config_hash,
                      generate, load_dataset, record_groups, split)
from .uq_model import UqNetConfig, ensemble_of_models, load_model_file, predict, save_models


# -- config plumbing ----------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _pairs(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"expected name=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = _parse_value(v)
    return out


def _floats(text: str | None):
    return None if text is None else tuple(float(v) for v in text.split(","))


def _ints(text: str | None):
    return None if text is None else tuple(int(v) for v in text.split(","))


def _read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return json.loads(path.read_text())


def _meta(command: str, doc: dict, seed, **extra) -> dict:
    return {"command": command, "config_hash": config_hash(doc), "seed": seed, **extra}


def _experiment(args) -> dict:
    """Merge an experiment JSON with command-line overrides."""
    doc = _read_config(args.config)
    problem = dict(doc.get("problem", {}))
    if args.problem:
        problem["kind"] = args.problem
    problem["params"] = {**problem.get("params", {}), **_pairs(args.param)}
    if "kind" not in problem:
        raise ConfigurationError("no problem given: use --problem or a config with a 'problem' entry")
    family(problem["kind"])
    solver = dict(doc.get("solver", {}))
    for key in ("N", "steps", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            solver[key] = value
    if getattr(args, "lr", None) is not None:
        solver["lr"] = args.lr
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    out = {"problem": problem, "solver": solver, "seed": seed}
    Q = getattr(args, "Q", None)
    out["Q"] = Q if Q is not None else int(doc.get("Q", 1))
    if "sweep" in doc:
        out["sweep"] = doc["sweep"]
    return out


def _solver_config(problem: dict, solver: dict, seed: int) -> DbsdeConfig:
    params = problem["params"]
    built = make_problem(problem["kind"], params)
    d = dict(solver)
    d.setdefault("N", 16)
    d["T"] = float(built.params["T"])
    if "y0_init_range" not in d:
        d["y0_init_range"] = default_y0_range(problem["kind"], params)
    d["base_seed"] = seed
    return DbsdeConfig.from_dict(d)


def _plots(args) -> bool:
    return not getattr(args, "no_plots", False)


# -- solve --------------------------------------------------------------------

def cmd_solve(args) -> int:
    exp = _experiment(args)
    problem = make_problem(exp["problem"]["kind"], exp["problem"]["params"])
    config = _solver_config(exp["problem"], exp["solver"], exp["seed"])
    meta = _meta("solve", exp, exp["seed"])
    res = train(problem, config)
    report = {
        "y0": res.y0, "z0": res.z0, "final_loss": res.final_loss, "eval_loss": res.eval_loss,
        "steps_run": res.steps_run, "diverged": res.diverged, "seed": res.seed,
        "config": config.to_dict(),
    }
    if problem.analytic is not None:
        y_ex, z_ex = problem.analytic
        report.update(y0_exact=y_ex, z0_exact=z_ex, abs_error_y0=abs(res.y0 - y_ex),
                      abs_error_z0=np.abs(res.z0 - z_ex))
    out = Path(args.out)
    mt.write_json(out / "solve.json", report, meta)
    steps = np.arange(1, res.steps_run + 1)
    mt.write_dat(out / "loss.dat", {"step": steps, "loss": res.losses}, meta)
    if _plots(args) and res.steps_run:
        from . import plotting
        plotting.loss_curve(out / "loss.png", steps, res.losses)
    line = f"y0 = {res.y0:.6f}"
    if problem.analytic is not None:
        line += f"  (exact {problem.analytic[0]:.6f}, |error| {report['abs_error_y0']:.3e})"
    print(line)
    print("z0 =", np.array2string(res.z0, precision=6))
    if res.diverged:
        print(f"diverged after {res.steps_run} steps", file=sys.stderr)
        return 1
    return 0


# -- error study --------------------------------------------------------------

SWEEP_AXES = ("steps", "lr", "eta", "N")


def _lr_label(value, k: int) -> str:
    if isinstance(value, dict):
        return f"PC-LR{k}" if len(value["rates"]) > 1 else f"C-LR{k}"
    return f"C-LR_{value:g}"


def _variants(exp: dict) -> tuple[str, list[tuple[str, dict]], list[int]]:
    sweep = exp.get("sweep")
    if not sweep or "axis" not in sweep:
        raise ConfigurationError("error-study needs a 'sweep' entry with an 'axis' and 'values'")
    axis, values = sweep["axis"], list(sweep.get("values", []))
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    labels = sweep.get("labels")
    solver = exp["solver"]
    if axis == "steps":
        ck = sorted(int(v) for v in values)
        return axis, [("steps", {**solver, "steps": ck[-1]})], ck
    steps = int(solver.get("steps", 2000))
    ck = sorted(int(v) for v in solver.get("checkpoints", [steps]))
    key = {"lr": "lr", "eta": "hidden_width", "N": "N"}[axis]
    out = []
    for k, v in enumerate(values):
        if labels:
            label = labels[k]
        elif axis == "lr":
            label = _lr_label(v, k)
        else:
            label = f"{axis}={v}"
        out.append((label.replace(" ", "_"), {**solver, key: v, "steps": steps}))
    return axis, out, ck


def cmd_error_study(args) -> int:
    exp = _experiment(args)
    problem = make_problem(exp["problem"]["kind"], exp["problem"]["params"])
    if problem.analytic is None:
        raise ConfigurationError("error-study needs a problem with an analytic solution")
    axis, variants, ck = _variants(exp)
    Q = exp["Q"]
    comp = int(exp.get("sweep", {}).get("component", 0))
    y_ex, z_ex = problem.analytic
    meta = _meta("error-study", exp, exp["seed"], sweep_axis=axis, Q=Q,
                 checkpoint_read="mid-training iterate, optimizer state kept")
    out = Path(args.out)
    rmse_y, rmse_z, census = {}, {}, {}
    for label, solver in variants:
        config = replace(_solver_config(exp["problem"], solver, exp["seed"]), checkpoints=tuple(ck))
        results = ensemble_solve(problem, config, Q, args.workers)
        Y = np.full((len(ck), Q), np.nan)
        Zc = np.full((len(ck), Q), np.nan)
        for q, r in enumerate(results):
            for j, k in enumerate(ck):
                if k in r.checkpoints:
                    Y[j, q] = r.checkpoints[k][0]
                    Zc[j, q] = r.checkpoints[k][1][comp]
        err_y = np.abs(Y - y_ex)
        err_z = np.abs(Zc - z_ex[comp])
        rmse_y[label] = np.sqrt(np.mean(err_y**2, axis=1))
        rmse_z[label] = np.sqrt(np.mean(err_z**2, axis=1))
        mt.write_dat(out / f"abs_err_y_{label}.dat",
                     {"K": ck, **{f"run{q}": err_y[:, q] for q in range(Q)}}, meta)
        mt.write_dat(out / f"abs_err_z_{label}.dat",
                     {"K": ck, **{f"run{q}": err_z[:, q] for q in range(Q)}}, meta)
        census[label] = {"diverged_runs": [q for q, r in enumerate(results) if r.diverged],
                         "seeds": [r.seed for r in results]}
    mt.write_dat(out / "rmse_y.dat", {"K": ck, **rmse_y}, meta)
    mt.write_dat(out / "rmse_z.dat", {"K": ck, **rmse_z}, meta)
    mt.write_json(out / "divergence.json", census, meta)
    if _plots(args):
        from . import plotting
        plotting.rmse_curves(out / "rmse_y.png", ck, rmse_y, "RMSE of Y0")
        plotting.rmse_curves(out / "rmse_z.png", ck, rmse_z, f"RMSE of Z0 component {comp + 1}")
    for label in rmse_y:
        print(f"{label}: RMSE(Y0) at K={ck[-1]} = {rmse_y[label][-1]:.4e}")
    return 1 if any(c["diverged_runs"] for c in census.values()) else 0


# -- dataset generation ---------------------------------------------------------

def _sampler(args, doc: dict) -> ParamSampler:
    if "sampler" in doc and not args.problem:
        sampler = ParamSampler.from_dict(doc["sampler"])
    else:
        kind = args.problem or doc.get("problem", "black_scholes")
        policy = args.policy or doc.get("policy")
        kw = {}
        if args.N is not None:
            kw["N"] = args.N
        if args.dt is not None:
            kw["dt"] = args.dt
        if args.N_grid is not None:
            kw["N_grid"] = _ints(args.N_grid)
        if kind == "black_scholes":
            sampler = black_scholes_sampler(policy or "fixed_N_fixed_T", **kw)
        elif kind == "burgers":
            sampler = burgers_sampler(policy or "fixed_N_vary_T", d=args.d or 50, **kw)
        else:
            family(kind)
            raise ConfigurationError(f"no default sampler for {kind!r}; pass a sampler in --config")
    ranges = dict(sampler.ranges)
    fixed = dict(sampler.fixed)
    for name, value in _pairs(args.range).items():
        lo, hi = (value, value) if not isinstance(value, list) else value
        ranges[name] = (float(lo), float(hi))
        fixed.pop(name, None)
    for name, value in _pairs(args.fixed).items():
        fixed[name] = value
        ranges.pop(name, None)
    return replace(sampler, ranges=ranges, fixed=fixed)


def cmd_gen(args) -> int:
    doc = _read_config(args.config)
    sampler = _sampler(args, doc)
    solver = dict(doc.get("solver", {}))
    if args.steps is not None:
        solver["steps"] = args.steps
    if args.lr is not None:
        solver["lr"] = args.lr
    gen = GenConfig(
        sampler,
        M=args.M if args.M is not None else int(doc.get("M", 64)),
        Q=args.Q if args.Q is not None else int(doc.get("Q", 1)),
        solver=solver,
        seed=args.seed if args.seed is not None else int(doc.get("seed", 0)),
    )
    out = Path(args.out)
    path = out / "dataset.jsonl"
    ds = generate(gen, path, workers=args.workers, max_new_records=args.max_records)
    census = ds.divergence_census()
    mt.write_json(out / "census.json", census, _meta("gen", gen.to_dict(), gen.seed))
    total = len(ds.gen.sampler.N_grid) * gen.M if sampler.policy == "fixed_T_vary_N_grid" else gen.M
    print(f"{len(ds)}/{total} records in {path}")
    print("divergence census:", json.dumps(census))
    return 0


# -- UQ training --------------------------------------------------------------

def _uq_config(args, doc: dict) -> tuple[UqNetConfig, int]:
    d = dict(doc.get("uq", doc))
    R = int(d.pop("R", 10))
    for key in ("M_valid", "M_test", "split_seed", "target", "data"):
        d.pop(key, None)
    cfg = UqNetConfig.from_dict(d) if d else UqNetConfig()
    over = {}
    if args.epochs_schedule:
        over["epochs"] = _ints(args.epochs_schedule)
    if args.lr_schedule:
        over["lrs"] = _floats(args.lr_schedule)
    if args.batch is not None:
        over["batch_size"] = args.batch
    if args.l2 is not None:
        over["l2"] = args.l2
    if args.width is not None:
        over["hidden_width"] = args.width
    if args.seed is not None:
        over["seed"] = args.seed
    if args.R is not None:
        R = args.R
    return replace(cfg, **over) if over else cfg, R


def _load(path):
    if path is None:
        raise ConfigurationError("--data is required")
    return load_dataset(path)


def cmd_train_uq(args) -> int:
    doc = _read_config(args.config)
    ds = _load(args.data)
    cfg, R = _uq_config(args, doc)
    split_seed = args.split_seed if args.split_seed is not None else int(doc.get("split_seed", 0))
    split(ds, args.M_valid if args.M_valid is not None else doc.get("M_valid"),
          args.M_test if args.M_test is not None else doc.get("M_test"), split_seed)
    target = args.target
    run_doc = {"uq": cfg.to_dict(), "R": R, "target": target, "dataset": ds.gen.hash(),
               "split_seed": split_seed, "sizes": {k: len(v) for k, v in ds.splits.items()}}
    meta = _meta("train-uq", run_doc, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        models = ensemble_of_models(ds, target, cfg, R, args.workers)
    except TrainingDivergedError as exc:
        print(f"UQ training diverged: {exc}", file=sys.stderr)
        return 1
    save_models(out / f"models_{target}.json", models, {
        "dataset_hash": ds.gen.hash(), "split": {k: v.tolist() for k, v in ds.splits.items()},
        "base_config": cfg.to_dict(), "R": R, **meta})
    tr = np.array([m.log["train"] for m in models])
    cols = {"epoch": np.arange(1, tr.shape[1] + 1), "train_mean": tr.mean(0), "train_std": tr.std(0)}
    if models[0].log["valid"]:
        va = np.array([m.log["valid"] for m in models])
        cols.update(valid_mean=va.mean(0), valid_std=va.std(0))
    mt.write_dat(out / f"train_log_{target}.dat", cols, meta)
    if _plots(args):
        from . import plotting
        plotting.band(out / f"train_log_{target}.png", cols["epoch"], cols.get("valid_mean", cols["train_mean"]),
                      cols.get("valid_std", cols["train_std"]), "epoch", "NLL (validation)")
    print(f"trained {R} {target}-models; final train NLL {tr[:, -1].mean():.4f}")
    return 0


# -- UQ evaluation ----------------------------------------------------------------

def _target_views(ds, target: str, component: int):
    y_true, z_true = ds.truth()
    if target == "y":
        return ds.Y, ds.ens_y, y_true
    return ds.Z[:, component], ds.ens_z[:, :, component], z_true[:, component]


def _uq_predictions(models, X, target, component):
    mus, sigs = [], []
    for m in models:
        mu, sig = predict(m, X)
        if target == "z":
            mu, sig = mu[:, component], sig[:, component]
        mus.append(mu)
        sigs.append(sig)
    return np.array(mus), np.array(sigs)


def _log_corr(a, b):
    try:
        return mt.pearson_log_excluding(a, b)
    except (DomainError, UndefinedCorrelationError):
        return float("nan"), int(len(a))


def _model_corr(ref, values):
    rhos, excluded = [], []
    for v in values:
        rho, n_ex = _log_corr(ref, v)
        if np.isfinite(rho):
            rhos.append(rho)
            excluded.append(n_ex)
    return mt.summarize_correlations(rhos, len(values) - len(rhos), excluded)


def _ranking_report(ds, idx, eps_r, sig_t_r, sig_h_r_models) -> dict:
    """Per-group N selection: accuracy, MRR and rank correlation against the relative RMSE."""
    sampler = ds.gen.sampler
    grid = np.asarray(sampler.N_grid)
    G = len(grid)
    groups = record_groups(ds)[idx]
    full = [g for g in np.unique(groups) if np.sum(groups == g) == G]
    if not full:
        return {"groups": 0}
    rows = np.array([np.flatnonzero(groups == g) for g in full])  # positions within idx, N ascending
    true = mt.argmin_onehot(eps_r[rows], grid)
    true_N = grid[np.argmax(true, axis=1)]
    report = {"groups": len(full), "N_grid": grid}

    def block(values):
        pred = mt.argmin_onehot(values[rows], grid)
        ranked = mt.rank_grid(values[rows], grid)
        pairs = {}
        for k in range(G - 1):
            lt = mt.binary_labels(eps_r[rows][:, k + 1], eps_r[rows][:, k])
            lp = mt.binary_labels(values[rows][:, k + 1], values[rows][:, k])
            pairs[f"N{grid[k + 1]}_vs_N{grid[k]}"] = mt.accuracy_binary(lt, lp)
        keep = mt.positive_mask(eps_r, values)
        try:
            rho_s = mt.spearman(eps_r[keep], values[keep])
        except (UndefinedCorrelationError, ConfigurationError):
            rho_s = float("nan")
        return {"accuracy_multilabel": mt.accuracy_multilabel(true, pred),
                "mrr": mt.mrr(true_N, ranked), "spearman": rho_s, "accuracy_binary": pairs}

    if sig_t_r is not None:
        report["ensemble"] = block(sig_t_r)
    per_model = [block(v) for v in sig_h_r_models]
    report["uq_model"] = {
        key: {"mean": float(np.mean([p[key] for p in per_model])),
              "std": float(np.std([p[key] for p in per_model]))}
        for key in ("accuracy_multilabel", "mrr", "spearman")
    }
    return report


def _load_models_with_split(path, ds):
    path = Path(path)
    models, meta = load_model_file(path)
    if meta.get("dataset_hash") not in (None, ds.gen.hash()):
        raise StaleCacheError(f"{path} was trained on a different dataset")
    ds.splits = {k: np.asarray(v, dtype=np.int64) for k, v in meta["split"].items()}
    return models, meta


def cmd_eval_uq(args) -> int:
    ds = _load(args.data)
    if args.models is None:
        raise ConfigurationError("--models is required")
    models, mmeta = _load_models_with_split(args.models, ds)
    target = models[0].target
    comp = args.component
    which = args.split
    idx = ds.subset(which)
    first, ens, truth = _target_views(ds, target, comp)
    X = ds.X
    Q = ens.shape[1]
    tag = f"{target}_{which}"
    run_doc = {"dataset": ds.gen.hash(), "models": mmeta.get("config_hash"), "split": which,
               "component": comp, "fractions": args.fractions}
    seed = mmeta.get("seed")
    meta = _meta("eval-uq", run_doc, seed, sigma_hat_relative="sigma_hat / |mu_hat| of the same model",
                 log_base=10)
    out = Path(args.out)

    e, t = ens[idx], truth[idx]
    st = mt.ensemble_arrays(e, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        eps_r = st["rmse"] / np.abs(t)
        sig_t_r = st["std"] / np.abs(st["mean"]) if Q > 1 else None
    mu_h, sig_h = _uq_predictions(models, X[idx], target, comp)
    with np.errstate(divide="ignore"):
        sig_h_r = sig_h / np.abs(mu_h)

    table = {"split": which, "M_eval": len(idx), "R": len(models), "Q": Q, "component": comp}
    corr = {}
    if Q > 1:
        corr["ensemble_abs"], ex_a = _log_corr(st["rmse"], st["std"])
        corr["ensemble_rel"], ex_r = _log_corr(eps_r, sig_t_r)
        corr["ensemble_excluded"] = {"abs": ex_a, "rel": ex_r}
    corr["uq_abs"] = _model_corr(st["rmse"], sig_h)
    corr["uq_rel"] = _model_corr(eps_r, sig_h_r)
    table["correlations"] = corr
    rm = [mt.rmse(mu, t) for mu in mu_h]
    rm_ens = [mt.rmse(mu, st["mean"]) for mu in mu_h]
    table["mean_quality"] = {
        "rmse_ensemble_mean_vs_exact": mt.rmse(st["mean"], t),
        "rmse_first_run_vs_exact": mt.rmse(first[idx], t),
        "rmse_uq_mean_vs_exact": {"mean": float(np.mean(rm)), "std": float(np.std(rm))},
        "rmse_uq_mean_vs_ensemble_mean": {"mean": float(np.mean(rm_ens)), "std": float(np.std(rm_ens))},
    }
    if Q > 1:
        qe = mt.q_equivalence(e, t, corr["uq_rel"].mean, Q)
        table["q_equivalence"] = {"q": qe.q, "flag": qe.flag}
        mt.write_dat(out / f"qeq_{tag}.dat", {
            "q": qe.curve_q, "rho_ensemble": qe.curve_rho,
            "rho_uq_mean": np.full(len(qe.curve_q), corr["uq_rel"].mean),
            "rho_uq_std": np.full(len(qe.curve_q), corr["uq_rel"].std)}, meta)
    table["divergence_census"] = ds.divergence_census()

    # scatter data with the time step of each record
    dts = np.array([ds.gen.sampler.decode(x)[1].dt for x in X[idx]])
    sig_h_r_mean = sig_h_r.mean(axis=0)
    cols = {"i": idx, **{n: X[idx, k] for k, n in enumerate(ds.feature_names)}, "dt_step": dts}
    series = {"log_eps_r": eps_r, "log_sig_hat_r": sig_h_r_mean}
    if sig_t_r is not None:
        series["log_sig_tilde_r"] = sig_t_r
    keep = mt.positive_mask(*series.values())
    cols = {k: v[keep] for k, v in cols.items()}
    cols.update({k: np.log10(v[keep]) for k, v in series.items()})
    mt.write_dat(out / f"scatter_{tag}.dat", cols, {**meta, "excluded_non_positive": int((~keep).sum())})

    if ds.gen.sampler.policy == "fixed_T_vary_N_grid":
        table["ranking"] = _ranking_report(ds, idx, eps_r, sig_t_r, sig_h_r)

    if args.fractions:
        table["training_size"] = _training_size(ds, models, mmeta, target, comp, idx, eps_r,
                                                _floats(args.fractions), args.workers, out, tag, meta)
    mt.write_json(out / f"eval_{tag}.json", table, meta)

    if _plots(args):
        from . import plotting
        if "log_sig_tilde_r" in cols:
            plotting.log_scatter(out / f"scatter_{tag}.png", cols["log_eps_r"],
                                 {"ensemble STD": cols["log_sig_tilde_r"], "UQ model STD": cols["log_sig_hat_r"]},
                                 "log10 relative RMSE", "log10 relative STD")
        if Q > 1:
            plotting.q_equivalence(out / f"qeq_{tag}.png", qe.curve_q, qe.curve_rho,
                                   corr["uq_rel"].mean, corr["uq_rel"].std,
                                   qe.q if qe.flag == "inside" else None)
    print(f"[{tag}] UQ rho_bar(rel) = {corr['uq_rel'].mean:.4f} ({corr['uq_rel'].std:.4f})", end="")
    if Q > 1:
        print(f", ensemble rho(rel) = {corr['ensemble_rel']:.4f}, Q-equivalence {qe.q:.2f} [{qe.flag}]")
    else:
        print()
    return 0


def _training_size(ds, models, mmeta, target, comp, idx, eps_r, fractions, workers, out, tag, meta):
    base = UqNetConfig.from_dict(mmeta["base_config"])
    R = int(mmeta.get("R", len(models)))
    train_idx = ds.subset("train")
    order = np.random.default_rng(derive_seed(base.seed, 77)).permutation(train_idx)
    rows = {"fraction": [], "n_train": [], "rho_mean": [], "rho_std": [], "rmse_mean": [], "rmse_std": []}
    truth = _target_views(ds, target, comp)[2][idx]
    for f in fractions:
        n = max(2, int(round(f * len(train_idx))))
        sub = np.sort(order[:n])
        ms = ensemble_of_models(ds, target, base, R, workers, train_idx=sub)
        mu, sig = _uq_predictions(ms, ds.X[idx], target, comp)
        with np.errstate(divide="ignore"):
            s = _model_corr(eps_r, sig / np.abs(mu))
        r = [mt.rmse(m, truth) for m in mu]
        for k, v in (("fraction", f), ("n_train", n), ("rho_mean", s.mean), ("rho_std", s.std),
                     ("rmse_mean", float(np.mean(r))), ("rmse_std", float(np.std(r)))):
            rows[k].append(v)
    mt.write_dat(out / f"trainsize_{tag}.dat", rows, meta)
    return rows


# -- normality ----------------------------------------------------------------

def cmd_normality(args) -> int:
    out = Path(args.out)
    if args.data is not None:
        ds = load_dataset(args.data)
        if not 0 <= args.record < len(ds):
            raise ConfigurationError(f"record {args.record} outside dataset of size {len(ds)}")
        rec = ds.records[args.record]
        samples = {"y0": rec.ens_y, **{f"z0_{k + 1}": rec.ens_z[:, k] for k in range(rec.ens_z.shape[1])}}
        doc = {"dataset": ds.gen.hash(), "record": args.record}
        seed = rec.seeds[0]
        diverged = any(rec.div)
    else:
        exp = _experiment(args)
        problem = make_problem(exp["problem"]["kind"], exp["problem"]["params"])
        config = _solver_config(exp["problem"], exp["solver"], exp["seed"])
        results = ensemble_solve(problem, config, exp["Q"], args.workers)
        samples = {"y0": np.array([r.y0 for r in results])}
        z = np.stack([r.z0 for r in results])
        samples.update({f"z0_{k + 1}": z[:, k] for k in range(z.shape[1])})
        doc, seed = exp, exp["seed"]
        diverged = any(r.diverged for r in results)
    meta = _meta("normality", doc, seed)
    comps = args.components
    report = {"tests": {"dagostino_pearson": {}}, "shapiro_wilk": "not computed"}
    for name, values in samples.items():
        if name != "y0" and comps is not None and int(name.split("_")[1]) not in _ints(comps):
            continue
        rep = dagostino_pearson(values)
        fit = histogram_with_normal_fit(values, args.bins)
        report["tests"]["dagostino_pearson"][name] = rep
        report.setdefault("fit", {})[name] = {"mu": fit.mu, "sigma": fit.sigma}
        write_histogram(out / name, fit, meta)
        if _plots(args):
            from . import plotting
            plotting.histogram(out / f"{name}_hist.png", fit, name)
        print(f"{name}: mean {fit.mu:.5f}, std {fit.sigma:.5f}, K2 {rep.k2:.3f}, p {rep.p_value:.4f}")
    mt.write_json(out / "normality.json", report, meta)
    return 1 if diverged else 0


# -- parser -------------------------------------------------------------------

def _shared(sp):
    sp.add_argument("--config", type=Path, help="JSON config file")
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="base seed (overrides the config)")
    sp.add_argument("--workers", type=int, default=1, help="worker processes")
    sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")


def _problem_flags(sp):
    sp.add_argument("--problem", choices=["black_scholes", "burgers"])
    sp.add_argument("--param", action="append", metavar="NAME=VALUE", help="problem parameter")
    sp.add_argument("--N", type=int, help="time steps")
    sp.add_argument("--steps", type=int, help="optimization steps")
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--lr", type=float, help="constant learning rate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepbsde-uq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="train the solver once")
    _shared(sp)
    _problem_flags(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("error-study", help="RMSE against the step budget over a hyperparameter sweep")
    _shared(sp)
    _problem_flags(sp)
    sp.add_argument("--Q", type=int, help="runs per sweep value")
    sp.set_defaults(func=cmd_error_study)

    sp = sub.add_parser("gen", help="generate a UQ dataset")
    _shared(sp)
    sp.add_argument("--problem", choices=["black_scholes", "burgers"])
    sp.add_argument("--policy", choices=["fixed_N_fixed_T", "fixed_dt_vary_T", "fixed_N_vary_T",
                                         "fixed_T_vary_N_grid"])
    sp.add_argument("--M", type=int, help="parameter sets")
    sp.add_argument("--Q", type=int, help="solver runs per parameter set")
    sp.add_argument("--N", type=int)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--N-grid", dest="N_grid", help="comma-separated N values")
    sp.add_argument("--d", type=int, help="Burgers dimension")
    sp.add_argument("--range", action="append", metavar="NAME=[LO,HI]", help="sampling range")
    sp.add_argument("--fixed", action="append", metavar="NAME=VALUE", help="fixed parameter")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--max-records", dest="max_records", type=int,
                    help="stop after this many new records (resume later)")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train-uq", help="train R mean/STD models on a dataset")
    _shared(sp)
    sp.add_argument("--data", type=Path, required=True, help="dataset .jsonl")
    sp.add_argument("--target", choices=["y", "z"], default="y")
    sp.add_argument("--R", type=int, help="number of models")
    sp.add_argument("--epochs-schedule", help="comma-separated epochs per segment")
    sp.add_argument("--lr-schedule", help="comma-separated learning rates per segment")
    sp.add_argument("--batch", type=int)
    sp.add_argument("--l2", type=float)
    sp.add_argument("--width", type=int)
    sp.add_argument("--M-valid", dest="M_valid", type=int)
    sp.add_argument("--M-test", dest="M_test", type=int)
    sp.add_argument("--split-seed", dest="split_seed", type=int)
    sp.set_defaults(func=cmd_train_uq)

    sp = sub.add_parser("eval-uq", help="evaluate trained models against the ensembles")
    _shared(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--models", type=Path, required=True)
    sp.add_argument("--split", choices=["test", "train", "valid"], default="test")
    sp.add_argument("--component", type=int, default=0, help="Z component (0-based)")
    sp.add_argument("--fractions", help="training-size study, e.g. 0.1,0.5,1.0")
    sp.set_defaults(func=cmd_eval_uq)

    sp = sub.add_parser("normality", help="normality test of solver ensembles")
    _shared(sp)
    _problem_flags(sp)
    sp.add_argument("--Q", type=int, help="runs")
    sp.add_argument("--data", type=Path, help="take the ensemble of a dataset record instead")
    sp.add_argument("--record", type=int, default=0)
    sp.add_argument("--bins", type=int, default=30)
    sp.add_argument("--components", help="Z components to test (1-based, comma-separated)")
    sp.set_defaults(func=cmd_normality)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TrainingDivergedError, SimulationDivergedError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, DomainError, StaleCacheError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
