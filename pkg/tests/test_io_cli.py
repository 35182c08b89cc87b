import json

import numpy as np
import pytest

from graphbnn import cli
from graphbnn.datagen import make_linear_dataset
from graphbnn.diagnostics import kss
from graphbnn.io import (load_dataset, read_csv, read_json, read_matrix, read_samples,
                         save_dataset, write_csv, write_json, write_samples)
from graphbnn.models import ModelSpec


def conjugate_mean(samples, sigma_eps, sigma0):
    f = np.concatenate([s.time_inputs[:, 0] for s in samples])
    y = np.concatenate([s.targets for s in samples])
    Phi = np.column_stack([np.ones_like(f), f])
    A = Phi.T @ Phi / sigma_eps ** 2 + np.eye(2) / sigma0 ** 2
    return np.linalg.solve(A, Phi.T @ y / sigma_eps ** 2)


def linear_cfg(out, **extra):
    cfg = {
        "seed": 0,
        "out": str(out),
        "model": {"preset": "linear_toy", "n_steps": 5},
        "data": {"kind": "linear", "n_samples": "2*Nw", "n_heldout": 2},
        "noise": {"sigma_eps": 0.05},
        "train": {"lr": 0.01, "max_epochs": 20000, "patience": 200, "val_fraction": 0.0},
        "sampler": {"method": "svgd",
                    "svgd": {"n_particles": 16, "lr": 1e-4, "n_steps": 50,
                             "jitter_scale": 0.01}},
    }
    for k, v in extra.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    return cfg


def run(tmp_path, cfg, *argv):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return cli.main([argv[0], "--config", str(path), *argv[1:]])


# --------------------------------------------------------------------------
# io

def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    M = rng.standard_normal((4, 3))
    write_csv(tmp_path / "m.csv", ["a", "b", "c"], M.tolist())
    header, back = read_matrix(tmp_path / "m.csv")
    assert header == ["a", "b", "c"] and np.array_equal(back, M)


def test_json_sorted_and_nonfinite_to_null(tmp_path):
    write_json(tmp_path / "x.json", {"b": np.float64(np.nan), "a": np.arange(2)})
    text = (tmp_path / "x.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert read_json(tmp_path / "x.json") == {"a": [0, 1], "b": None}


def test_samples_sidecar(tmp_path):
    layout = ModelSpec.linear_toy().layout()
    write_samples(tmp_path / "s.csv", np.ones((3, 2)), layout, {"method": "x"})
    header, W, side = read_samples(tmp_path / "s.csv")
    assert header == ["linear[0]", "linear[1]"] and W.shape == (3, 2)
    assert side["method"] == "x" and side["n_rows"] == 3


def test_dataset_round_trip(tmp_path):
    data = make_linear_dataset(3, 4, seed=1)
    manifest = {"train": [s.name for s in data[:2]], "heldout": [data[2].name]}
    save_dataset(tmp_path / "d", data, manifest)
    samples, man, rec = load_dataset(tmp_path / "d")
    assert rec is None and man["heldout"] == [data[2].name]
    assert np.array_equal(samples[data[0].name].targets, data[0].targets)


# --------------------------------------------------------------------------
# config

def test_resolve_count():
    spec = ModelSpec.gas_node()
    assert cli.resolve_count("0.5*Nw", spec, "f") == 59
    assert cli.resolve_count("2*Nw", ModelSpec.gru_2d(), "f") == 410
    assert cli.resolve_count(7, spec, "f") == 7
    with pytest.raises(cli.InvalidConfig):
        cli.resolve_count("half", spec, "f")


def test_unknown_config_key_exit_code(tmp_path, capsys):
    assert run(tmp_path, {"bogus": 1}, "generate") == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_dataset_exit_code(tmp_path):
    assert run(tmp_path, linear_cfg(tmp_path / "none"), "train") == 2


# --------------------------------------------------------------------------
# pipeline

@pytest.fixture
def pipeline(tmp_path):
    out = tmp_path / "run"
    cfg = linear_cfg(out)
    assert run(tmp_path, cfg, "generate") == 0
    assert run(tmp_path, cfg, "train") == 0
    return tmp_path, out, cfg


def test_generate_sizes_from_parameter_count(pipeline):
    _, out, _ = pipeline
    man = read_json(out / "dataset" / "manifest.json")
    assert len(man["train"]) == 4 and len(man["heldout"]) == 2
    assert man["n_params"] == 2


def test_generate_single_sample(tmp_path):
    out = tmp_path / "one"
    cfg = linear_cfg(out, data={"n_samples": 1, "n_heldout": 0})
    assert run(tmp_path, cfg, "generate") == 0
    files = sorted(p.name for p in (out / "dataset").iterdir())
    assert files == ["linear_0000.json", "manifest.json"]


def test_generate_rerun_byte_identical(tmp_path):
    cfgs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cfg = linear_cfg(tmp_path / "same", data={"path": str(out)})
        assert run(tmp_path, cfg, "generate") == 0
        cfgs.append(out)
    for p in cfgs[0].iterdir():
        q = cfgs[1] / p.name
        if p.name == "manifest.json":
            a, b = read_json(p), read_json(q)
            a["config"]["data"]["path"] = b["config"]["data"]["path"] = None
            assert a == b
        else:
            assert p.read_bytes() == q.read_bytes()


def test_train_matches_conjugate(pipeline):
    _, out, _ = pipeline
    samples, man, _ = load_dataset(out / "dataset")
    mean = conjugate_mean([samples[n] for n in man["train"]], 0.05, 1.0)
    _, W, side = read_samples(out / "map.csv")
    assert np.max(np.abs(W[0] - mean)) < 1e-4
    assert "wall_time_s" not in json.dumps(side)


def test_train_zero_epochs_returns_init(tmp_path, pipeline):
    _, out, cfg = pipeline
    cfg = {**cfg, "train": {**cfg["train"], "max_epochs": 0}}
    assert run(tmp_path, cfg, "train") == 0
    _, W, _ = read_samples(out / "map.csv")
    from graphbnn.models import init_params
    assert np.array_equal(W[0], init_params(ModelSpec.linear_toy(n_steps=5), 0).data)


def test_train_resume_does_not_increase_loss(tmp_path, pipeline):
    _, out, cfg = pipeline
    first = read_json(out / "map.csv.json")["final_objective"]
    (out / "start.csv").write_bytes((out / "map.csv").read_bytes())
    cfg = {**cfg, "train": {**cfg["train"], "init": str(out / "start.csv"),
                            "max_epochs": 100}}
    assert run(tmp_path, cfg, "train") == 0
    assert read_json(out / "map.csv.json")["final_objective"] <= first


def test_sample_layout_mismatch_exit_code(tmp_path, pipeline):
    _, out, cfg = pipeline
    write_samples(out / "map.csv", np.zeros((1, 3)), (("x", 0, 3),))
    assert run(tmp_path, cfg, "sample") == 2


def test_single_particle_cli_equals_gradient_ascent(tmp_path, pipeline):
    _, out, cfg = pipeline
    cfg = {**cfg, "sampler": {"method": "svgd",
                              "svgd": {"n_particles": 1, "lr": 1e-5, "n_steps": 25,
                                       "jitter_scale": 0.0}}}
    assert run(tmp_path, cfg, "sample") == 0
    _, W, _ = read_samples(out / "samples.csv")
    _, w, _ = read_samples(out / "map.csv")
    loaded = cli.load_config(tmp_path / "config.json")
    train, _, _ = cli._load_split(loaded, "train")
    P = cli._posterior(loaded, cli.build_spec(loaded), train)
    ref = w[0].copy()
    for _ in range(25):
        ref = ref + 1e-5 * P.score(ref)
    assert np.max(np.abs(W[0] - ref)) < 1e-12


def test_sample_and_diagnose(tmp_path, pipeline):
    _, out, cfg = pipeline
    assert run(tmp_path, cfg, "sample") == 0
    assert run(tmp_path, cfg, "diagnose") == 0
    for name in ("pushforward.csv", "cmn.csv", "dcor.csv", "embedding.csv", "summary.json"):
        assert (out / name).exists()
    summary = read_json(out / "summary.json")
    assert set(summary["cases"]) == {"min", "median", "max"}

    # recompute the KSS column from the emitted prediction CSV
    header, rows = read_csv(out / "pushforward.csv")
    _, prows = read_csv(out / "predictions.csv")
    preds = {}
    for s, j, t, v in prows:
        preds.setdefault((s, int(t)), []).append(float(v))
    for row in rows:
        rec = dict(zip(header, row))
        ref = kss(preds[(rec["sample"], int(rec["step"]))], [float(rec["data"])])
        assert abs(ref - float(rec["kss"])) < 1e-12


def test_diagnose_row_order_and_rerun_identity(tmp_path, pipeline):
    _, out, cfg = pipeline
    assert run(tmp_path, cfg, "sample") == 0
    assert run(tmp_path, cfg, "diagnose") == 0
    first = {n: (out / n).read_bytes() for n in ("pushforward.csv", "cmn.csv", "dcor.csv",
                                                  "embedding.csv")}
    header, W, side = read_samples(out / "samples.csv")
    write_samples(out / "shuffled.csv", W[::-1], ModelSpec.linear_toy(n_steps=5).layout())
    assert run(tmp_path, cfg, "diagnose", "--samples", str(out / "shuffled.csv")) == 0
    for n, b in first.items():
        assert (out / n).read_bytes() == b


def test_diagnose_singleton_map_collapses(tmp_path, pipeline):
    _, out, cfg = pipeline
    assert run(tmp_path, cfg, "diagnose", "--samples", str(out / "map.csv")) == 0
    header, rows = read_csv(out / "pushforward.csv")
    for row in rows:
        rec = dict(zip(header, row))
        assert rec["q5"] == rec["q95"] == rec["map"]


def test_sample_rerun_byte_identical(tmp_path, pipeline):
    _, out, cfg = pipeline
    assert run(tmp_path, cfg, "sample") == 0
    a = (out / "samples.csv").read_bytes()
    assert run(tmp_path, cfg, "sample", "--threads", "3") == 0
    assert (out / "samples.csv").read_bytes() == a


def test_psvgd_on_mvn_reports_rank_two(tmp_path):
    out = tmp_path / "b"
    cfg = {"out": str(out), "sampler": {"svgd": {"n_steps": 50}}}
    assert run(tmp_path, cfg, "sample", "--target", "mvn", "--method", "psvgd") == 0
    assert read_json(out / "samples.csv.json")["stats"]["rank"] == 2


def test_hmc_on_mvn_default_tuning(tmp_path):
    out = tmp_path / "h"
    assert run(tmp_path, {"out": str(out)}, "sample", "--target", "mvn",
               "--method", "hmc") == 0
    rate = read_json(out / "samples.csv.json")["stats"]["acceptance_rate"]
    assert 0.6 <= rate <= 0.99


def test_invalid_rank_fraction(tmp_path):
    cfg = {"out": str(tmp_path / "r")}
    assert run(tmp_path, cfg, "sample", "--target", "mvn", "--method", "psvgd",
               "--rank-fraction", "1.5") == 2
