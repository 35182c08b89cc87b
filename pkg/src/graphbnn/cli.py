"""Command-line experiment runner.

Every command reads one JSON config (``--config``) merged over built-in
defaults, writes into ``--out`` and is deterministic for a given config and
seed.  Wall-clock times go to separate ``*.timing.json`` files so that every
other artifact is byte-identical across reruns.

Exit codes: 0 success, 2 invalid configuration or missing inputs, 3 numerical
failure.
"""

import argparse
import copy
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, diagnostics
from .benchmarks import MvnBenchmark, RingBenchmark, angular_spread, make_benchmark
from .errors import InvalidConfig, LayoutMismatch, NumericalError
from .io import (load_dataset, read_samples, save_dataset, write_csv,
                 write_json, write_matrix, write_samples)
from .models import ModelSpec, ParamVector, init_params
from .posterior import (GaussianPrior, MapConfig, ObservationModel, PosteriorModel,
                        fit_normalization, train_map)
from .samplers import (HmcConfig, SvgdConfig, build_active_subspace, hmc_sample,
                       psvgd_sample, svgd_sample)

DEFAULTS = {
    "seed": 0,
    "out": "run",
    "model": {"preset": "gas_node"},
    "data": {
        "source": "generate",
        "kind": "gas",
        "path": None,
        "n_samples": "0.5*Nw",
        "n_heldout": 0,
        "n_seeds": [5, 9],
        "bubble_fraction": 0.2,
        "truth": {},
        "normalize": None,
        "linear": {"coef": [0.3, 0.8], "sigma": 0.05},
    },
    "prior": {"sigma0": 1.0},
    "noise": {"sigma_eps": 0.02},
    "train": {"lr": 1e-3, "max_epochs": 5000, "patience": 50, "val_fraction": 0.1,
              "init": "random", "init_scale": None},
    "sampler": {
        "method": "svgd",
        "target": "posterior",
        "subsample_size": None,
        "hmc": {},
        "svgd": {},
        "psvgd": {"tol": 1e-2, "rank_fraction": None, "per_layer": True},
    },
    "diagnostics": {"split": "heldout", "k_neighbors": 10, "n_components": 2},
}

BENCH_HMC = {
    "mvn": {"dt": 0.3, "n_leapfrog": 8, "n_stages": 10000},
    "ring": {"dt": 0.03, "n_leapfrog": 23, "n_stages": 20000, "burn_in": 500},
}
BENCH_SVGD = {
    "mvn": {"n_particles": 96, "lr": 0.05, "n_steps": 1000, "jitter_scale": 0.5},
    "ring": {"n_particles": 96, "lr": 0.01, "n_steps": 2000, "jitter_scale": 0.3},
}


# --------------------------------------------------------------------------
# configuration

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None):
    cfg = {}
    if path is not None:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except FileNotFoundError as exc:
            raise InvalidConfig(f"config file not found: {path}", "config") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"not valid JSON ({exc})", "config") from exc
        if not isinstance(cfg, dict):
            raise InvalidConfig("top level must be an object", "config")
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise InvalidConfig(f"unknown keys {sorted(unknown)}", "config")
    cfg = _merge(DEFAULTS, cfg)
    for k, v in (overrides or {}).items():
        node = cfg
        keys = k.split(".")
        for part in keys[:-1]:
            node = node[part]
        node[keys[-1]] = v
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise InvalidConfig("must be a non-negative integer", "seed")
    return cfg


def build_spec(cfg):
    try:
        return ModelSpec.from_dict(cfg["model"])
    except (TypeError, ValueError, KeyError) as exc:
        raise InvalidConfig(str(exc), "model") from exc


_NW = re.compile(r"^\s*(?:([0-9]*\.?[0-9]+)\s*\*\s*)?Nw\s*$")


def resolve_count(value, spec, field):
    """Integer count, or an expression ``"<factor>*Nw"`` in the parameter count."""
    if isinstance(value, bool):
        raise InvalidConfig("must be an integer or '<factor>*Nw'", field)
    if isinstance(value, int):
        n = value
    elif isinstance(value, str):
        m = _NW.match(value)
        if not m:
            raise InvalidConfig(f"cannot parse {value!r}", field)
        factor = float(m.group(1)) if m.group(1) else 1.0
        n = int(np.floor(factor * spec.n_params + 0.5))
    else:
        raise InvalidConfig("must be an integer or '<factor>*Nw'", field)
    if n < 0:
        raise InvalidConfig("must be non-negative", field)
    return n


def _section(cfg_cls, values, field):
    try:
        return cfg_cls(**values)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc), field) from exc


def _paths(cfg):
    out = Path(cfg["out"])
    data = Path(cfg["data"]["path"]) if cfg["data"]["path"] else out / "dataset"
    return out, data


# --------------------------------------------------------------------------
# generate

def cmd_generate(cfg):
    spec = build_spec(cfg)
    d = cfg["data"]
    n_train = resolve_count(d["n_samples"], spec, "data.n_samples")
    n_held = resolve_count(d["n_heldout"], spec, "data.n_heldout")
    if n_train < 1:
        raise InvalidConfig("at least one training sample required", "data.n_samples")
    total = n_train + n_held
    seed = cfg["seed"]
    kind = d["kind"]
    normalize = d["normalize"]
    if kind == "gas":
        truth = _section(datagen.GenerationTruth,
                         {"n_steps": spec.n_steps, **d["truth"]}, "data.truth")
        lo, hi = d["n_seeds"]
        raw = datagen.make_raw_gas_samples(total, (lo, hi), truth, seed, d["bubble_fraction"])
        gen = {"kind": kind, "truth": truth.to_dict(), "n_seeds": [lo, hi],
               "bubble_fraction": d["bubble_fraction"], "split_rule": "SeedSequence(seed).spawn(n)"}
        normalize = True if normalize is None else normalize
    elif kind == "texture":
        lo, hi = d["n_seeds"]
        raw = datagen.make_texture_dataset(total, (lo, hi), spec.n_steps, seed, normalize=False)
        gen = {"kind": kind, "n_seeds": [lo, hi]}
        normalize = True if normalize is None else normalize
    elif kind == "linear":
        lin = d["linear"]
        raw = datagen.make_linear_dataset(total, spec.n_steps, lin["coef"], lin["sigma"], seed,
                                          spec.degree, spec.intercept)
        gen = {"kind": kind, **lin}
        normalize = False if normalize is None else normalize
    else:
        raise InvalidConfig(f"unknown kind {kind!r}", "data.kind")
    train, held = raw[:n_train], raw[n_train:]
    record = fit_normalization(train) if normalize else None
    if record is not None:
        train = [record.apply(s) for s in train]
        held = [record.apply(s) for s in held]
    manifest = {
        "generator": gen,
        "seed": seed,
        "n_params": spec.n_params,
        "normalization": record.to_dict() if record else None,
        "train": [s.name for s in train],
        "heldout": [s.name for s in held],
        "config": cfg,
    }
    _, data_dir = _paths(cfg)
    save_dataset(data_dir, train + held, manifest)
    return {"n_train": len(train), "n_heldout": len(held), "dir": str(data_dir)}


def _load_split(cfg, which):
    _, data_dir = _paths(cfg)
    if not (data_dir / "manifest.json").exists():
        raise InvalidConfig(f"no dataset at {data_dir}; run generate first", "data.path")
    samples, manifest, record = load_dataset(data_dir)
    names = manifest[which]
    return [samples[n] for n in names], manifest, record


def _posterior(cfg, spec, samples):
    prior = _section(GaussianPrior, cfg["prior"], "prior")
    obs = _section(ObservationModel, cfg["noise"], "noise")
    sub = cfg["sampler"].get("subsample_size")
    try:
        return PosteriorModel(spec, samples, prior, obs, sub)
    except ValueError as exc:
        raise InvalidConfig(str(exc), "sampler.subsample_size") from exc


# --------------------------------------------------------------------------
# train

def _read_param_file(path, spec):
    header, W, _ = read_samples(path)
    names = ParamVector(np.zeros(spec.n_params), spec.layout()).column_names()
    if header != names:
        raise LayoutMismatch(f"{path} does not match the model layout")
    return W


def cmd_train(cfg):
    spec = build_spec(cfg)
    train, _, record = _load_split(cfg, "train")
    P = _posterior(cfg, spec, train)
    t = dict(cfg["train"])
    init = t.pop("init")
    scale = t.pop("init_scale")
    if init == "random":
        w0 = init_params(spec, cfg["seed"]).data
        if scale is not None:
            w0 = w0 * scale
    else:
        p = Path(init)
        if not p.exists():
            raise InvalidConfig(f"initial parameter file {p} not found", "train.init")
        w0 = _read_param_file(p, spec)[0]
    mcfg = _section(MapConfig, {**t, "seed": cfg["seed"]}, "train")
    t0 = time.perf_counter()
    res = train_map(P, w0, mcfg)
    wall = time.perf_counter() - t0
    out, _ = _paths(cfg)
    meta = {
        "final_objective": res.history["objective"][res.best_epoch],
        "final_train_mse": res.history["train_mse"][res.best_epoch],
        "best_epoch": res.best_epoch,
        "epochs": res.epochs,
        "history": res.history,
        "train_indices": res.train_indices,
        "val_indices": res.val_indices,
        "normalization": record.to_dict() if record else None,
        "spec": spec.to_dict(),
        "config": cfg,
    }
    write_samples(out / "map.csv", res.w[None, :], spec.layout(), meta)
    write_json(out / "map.timing.json", {"wall_time_s": wall})
    return {"final_train_mse": meta["final_train_mse"], "epochs": res.epochs}


# --------------------------------------------------------------------------
# sample

def _bench_target(name):
    try:
        return make_benchmark(name)
    except ValueError as exc:
        raise InvalidConfig(str(exc), "sampler.target") from exc


def _bench_mode(target):
    if isinstance(target, MvnBenchmark):
        return target.mean.copy()
    return np.array([target.radius, 0.0, 0.0])


def run_sampler(target, method, scfg, seed, w_map, prior_sigma, threads=1,
                particles=None, rank_fraction=None):
    """Dispatch one sampler; returns ``(samples, stats)``."""
    if method == "hmc":
        hc = _section(HmcConfig, {**scfg.get("hmc", {}), "seed": seed}, "sampler.hmc")
        res = hmc_sample(target, hc, w_map)
        return res.samples, {**res.stats(), "config": hc.to_dict()}
    sv = dict(scfg.get("svgd", {}))
    sv["seed"] = seed
    sv["threads"] = threads
    if particles is not None:
        sv["n_particles"] = particles
    sc = _section(SvgdConfig, sv, "sampler.svgd")
    if method == "svgd":
        ens = svgd_sample(target, sc, w_map=w_map)
        return ens.particles, {"step_norms": ens.step_norms, "config": sc.to_dict(),
                               "bandwidth": ens.info.get("bandwidth")}
    if method == "psvgd":
        ps = dict(scfg.get("psvgd", {}))
        if rank_fraction is not None:
            ps["rank_fraction"] = rank_fraction
        rf = ps.get("rank_fraction")
        if rf is not None and not 0 < rf <= 1:
            raise InvalidConfig("must lie in (0, 1]", "sampler.psvgd.rank_fraction")
        sub = build_active_subspace(target, w_map, prior_sigma, ps.get("tol", 1e-2),
                                    ps.get("per_layer", True), rf, seed=seed)
        if sub.rank < 1:
            raise NumericalError("active subspace is empty; nothing to sample")
        ens = psvgd_sample(target, sub, sc, prior_sigma, w_map=w_map)
        return ens.particles, {"rank": sub.rank, "dim": sub.dim,
                               "eigenvalues": sub.eigenvalues.tolist(),
                               "step_norms": ens.step_norms, "config": sc.to_dict(),
                               "psvgd": {**ps}, "bandwidth": ens.info.get("bandwidth")}
    raise InvalidConfig(f"unknown method {method!r}", "sampler.method")


def cmd_sample(cfg, threads=1, particles=None, rank_fraction=None):
    s = cfg["sampler"]
    method, target_name = s["method"], s["target"]
    out, _ = _paths(cfg)
    if target_name == "posterior":
        spec = build_spec(cfg)
        train, _, _ = _load_split(cfg, "train")
        target = _posterior(cfg, spec, train)
        map_path = out / "map.csv"
        if map_path.exists():
            w_map = _read_param_file(map_path, spec)[0]
        elif method == "hmc":
            w_map = init_params(spec, cfg["seed"]).data
        else:
            raise InvalidConfig(f"{map_path} not found; run train first", "sampler.method")
        prior_sigma = target.prior.sigma0
        layout = spec.layout()
    else:
        target = _bench_target(target_name)
        w_map = _bench_mode(target)
        prior_sigma = 1.0
        layout = target.layout
        bench = {"hmc": {**BENCH_HMC[target_name], **s.get("hmc", {})},
                 "svgd": {**BENCH_SVGD[target_name], **s.get("svgd", {})}}
        s = {**s, **bench}
    t0 = time.perf_counter()
    W, stats = run_sampler(target, method, s, cfg["seed"], w_map, prior_sigma, threads,
                           particles, rank_fraction)
    wall = time.perf_counter() - t0
    meta = {"method": method, "target": target_name, "seed": cfg["seed"], "stats": stats,
            "config": cfg}
    write_samples(out / "samples.csv", W, layout, meta)
    write_json(out / "samples.timing.json", {"wall_time_s": wall})
    brief = {k: v for k, v in stats.items() if k in ("acceptance_rate", "rank")}
    return {"n_samples": int(W.shape[0]), **brief}


# --------------------------------------------------------------------------
# diagnose

def cmd_diagnose(cfg, samples_path=None):
    spec = build_spec(cfg)
    out, _ = _paths(cfg)
    split = cfg["diagnostics"]["split"]
    samples, _, _ = _load_split(cfg, "heldout" if split == "heldout" else "train")
    if not samples:
        samples, _, _ = _load_split(cfg, "train")
    spath = Path(samples_path) if samples_path else out / "samples.csv"
    if not spath.exists():
        raise InvalidConfig(f"samples file {spath} not found", "samples")
    W = _read_param_file(spath, spec)
    map_path = out / "map.csv"
    w_map = _read_param_file(map_path, spec)[0] if map_path.exists() else None
    W = diagnostics.canonical_rows(W)
    pf = diagnostics.pushforward(spec, W, samples, w_map)
    names = [s.name for s in samples]
    n, D, T = pf.predictions.shape
    rows = [(names[i], t, pf.data[i, t], pf.map_prediction[i, t], pf.q05[i, t],
             pf.q50[i, t], pf.q95[i, t], pf.kss[i, t]) for i in range(n) for t in range(T)]
    write_csv(out / "pushforward.csv",
              ["sample", "step", "data", "map", "q5", "q50", "q95", "kss"], rows)
    write_csv(out / "predictions.csv", ["sample", "draw", "step", "value"],
              [(names[i], j, t, pf.predictions[i, j, t])
               for i in range(n) for j in range(D) for t in range(T)])
    write_matrix(out / "cmn.csv", pf.cmn, [f"step{t}" for t in range(T)])
    layout = spec.layout()
    if W.shape[0] >= 2:
        dc = diagnostics.layer_dcor_table(W, layout)
    else:
        dc = [(a, b, 0.0) for i, (a, _, _) in enumerate(layout) for b, _, _ in layout[i:]]
    write_csv(out / "dcor.csv", ["layer_a", "layer_b", "dcor"], dc)
    dg = cfg["diagnostics"]
    emb = None
    if W.shape[0] >= dg["n_components"] + 2:
        k = dg["k_neighbors"]
        while emb is None:
            try:
                emb = diagnostics.spectral_embedding(W, k, dg["n_components"])
            except diagnostics.DisconnectedGraph:
                if k >= W.shape[0] - 1:
                    break
                k = min(2 * k, W.shape[0] - 1)
    header = [f"dim{j}" for j in range(dg["n_components"])]
    write_matrix(out / "embedding.csv", emb if emb is not None else
                 np.zeros((0, dg["n_components"])), header)
    summary = {
        "n_draws": D,
        "n_samples": n,
        "split": split,
        "coverage_5_95": pf.coverage(),
        "kss_per_step": pf.kss_per_step,
        "mean_kss": float(pf.kss.mean()),
        "map_discrepancy": dict(zip(names, pf.discrepancy.tolist())),
        "cases": {k: names[v] for k, v in pf.ranking.items()},
        "config": cfg,
    }
    write_json(out / "summary.json", summary)
    return {"coverage_5_95": summary["coverage_5_95"], "mean_kss": summary["mean_kss"],
            "cases": summary["cases"]}


# --------------------------------------------------------------------------
# benchmark suite

def cmd_benchmark(cfg, targets=("mvn", "ring"), threads=1, particles=None,
                  rank_fraction=None):
    out, _ = _paths(cfg)
    seed = cfg["seed"]
    report = {}
    for name in targets:
        target = _bench_target(name)
        mode = _bench_mode(target)
        s = {"hmc": {**BENCH_HMC[name], **cfg["sampler"].get("hmc", {})},
             "svgd": {**BENCH_SVGD[name], **cfg["sampler"].get("svgd", {})},
             "psvgd": cfg["sampler"]["psvgd"]}
        res = {}
        for method in ("hmc", "svgd", "psvgd"):
            W, stats = run_sampler(target, method, s, seed, mode, 1.0, threads, particles,
                                   rank_fraction)
            write_samples(out / f"{name}_{method}.csv", W, target.layout,
                          {"method": method, "target": name, "seed": seed, "stats": stats})
            entry = {"mean": W.mean(axis=0), "cov": np.cov(W.T)}
            if "acceptance_rate" in stats:
                entry["acceptance_rate"] = stats["acceptance_rate"]
            if "rank" in stats:
                entry["rank"] = stats["rank"]
            if name == "mvn":
                entry["kss_w3_vs_prior"] = diagnostics.kss_normal(W[:, 2], 0.0, 1.0)
            else:
                entry["radial_mean"] = float(np.mean(np.hypot(W[:, 0], W[:, 1])))
                entry["angular_spread"] = angular_spread(W)
            res[method] = entry
        if name == "ring":
            res["radial_mean_quadrature"] = RingBenchmark().radial_mean()
        report[name] = res
    write_json(out / "benchmark.json", {"results": report, "seed": seed, "config": cfg})
    return report


# --------------------------------------------------------------------------
# entry point

def build_parser():
    p = argparse.ArgumentParser(prog="graphbnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "sample", "diagnose", "benchmark"):
        s = sub.add_parser(name)
        s.add_argument("--config", default=None, help="JSON experiment config")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None, help="output directory")
        if name in ("sample", "benchmark"):
            s.add_argument("--target", choices=("mvn", "ring", "posterior"), default=None)
            s.add_argument("--method", choices=("hmc", "svgd", "psvgd"), default=None)
            s.add_argument("--rank-fraction", type=float, default=None)
            s.add_argument("--particles", type=int, default=None)
            s.add_argument("--threads", type=int, default=1)
        if name == "diagnose":
            s.add_argument("--samples", default=None, help="samples CSV (default out/samples.csv)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if getattr(args, "target", None):
        over["sampler.target"] = args.target
    if getattr(args, "method", None):
        over["sampler.method"] = args.method
    try:
        cfg = load_config(args.config, over)
        if getattr(args, "particles", None) is not None and args.particles < 1:
            raise InvalidConfig("must be at least 1", "particles")
        if getattr(args, "threads", 1) < 1:
            raise InvalidConfig("must be at least 1", "threads")
        if args.command == "generate":
            result = cmd_generate(cfg)
        elif args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "sample":
            result = cmd_sample(cfg, args.threads, args.particles, args.rank_fraction)
        elif args.command == "diagnose":
            result = cmd_diagnose(cfg, args.samples)
        else:
            targets = (args.target,) if args.target in ("mvn", "ring") else ("mvn", "ring")
            cmd_benchmark(cfg, targets, args.threads, args.particles, args.rank_fraction)
            result = {"report": str(Path(cfg["out"]) / "benchmark.json")}
    except (InvalidConfig, LayoutMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
