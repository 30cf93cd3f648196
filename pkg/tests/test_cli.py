import json

import numpy as np
import pytest
import scipy.sparse as sp

from gann import data as dio
from gann.cli import UsageError, main, parse_cli
from gann.experiment import (
    ExperimentConfig,
    export_diagnostics,
    load_bundle,
    prediction_entropy,
    read_matrix_csv,
    read_table_csv,
    record_digest,
    run_experiment,
)
from gann.model import GannConfig

SMALL_SBM = {"sbm": {"block_sizes": [20, 20], "p_in": 0.3, "p_out": 0.03, "feature_dim": 8,
                     "feature_noise": 0.8, "seed": 4}}
SMALL_MODEL = {"layers": 2, "hidden": 16, "max_iters_per_layer": 40, "topk": 5}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dataset": SMALL_SBM, "model": {**SMALL_MODEL, "lr": 0.01},
                                "per_class": 5, "val_size": 10, "out": str(tmp_path / "run")}))
    return path


def small_config(tmp_path, seeds=(0,), **model):
    return ExperimentConfig(dataset=SMALL_SBM, model=GannConfig(**{**SMALL_MODEL, **model}), per_class=5,
                            val_size=10, seeds=list(seeds), out=str(tmp_path / "run"))


def test_parse_seeds(cfg_file):
    cfg = parse_cli(["run", "--config", str(cfg_file), "--seeds", "1,2,3"])
    assert cfg.seeds == [1, 2, 3]


def test_flag_overrides_file(cfg_file):
    assert parse_cli(["run", "--config", str(cfg_file)]).model.lr == 0.01
    cfg = parse_cli(["run", "--config", str(cfg_file), "--lr", "0.05", "--lambda", "2", "--max-iters", "7"])
    assert cfg.model.lr == 0.05 and cfg.model.lam == 2.0 and cfg.model.max_iters_per_layer == 7
    assert cfg.model.layers == 2


def test_missing_config_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        parse_cli(["run", "--seeds", "1"])
    assert exc.value.code == 1
    assert "--config" in capsys.readouterr().err


def test_unknown_flag_rejected(cfg_file):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", str(cfg_file), "--learning-rate", "1"])
    assert exc.value.code == 1


def test_invalid_values_are_usage_errors(cfg_file):
    with pytest.raises(UsageError):
        parse_cli(["run", "--config", str(cfg_file), "--dropout", "1.5"])
    assert main(["run", "--config", str(cfg_file), "--tem", "0"]) == 1
    assert main(["run", "--config", "no-such-preset"]) == 1


def test_presets_parse():
    for name, layers in [("cora_ml", 12), ("citeseer", 9), ("pubmed", 11)]:
        cfg = parse_cli(["run", "--config", name])
        assert cfg.model.layers == layers and cfg.model.hidden == 5000 and cfg.model.lr == 0.01
        assert cfg.per_class == 20 and cfg.val_size == 500 and len(cfg.seeds) == 10
    assert parse_cli(["run", "--config", "pubmed"]).model.dropout == 0.2
    adagcn = parse_cli(["run", "--config", "sbm_adagcn"]).model
    assert (adagcn.beta, adagcn.gamma, adagcn.center_loss) == (0.0, 0.0, False)


def test_gen_sbm_then_load(tmp_path, capsys):
    out = tmp_path / "sbm"
    assert main(["gen-sbm", "--blocks", "5,5", "--p-in", "1", "--p-out", "0", "--feature-dim", "3",
                 "--out", str(out)]) == 0
    b = dio.load_dataset(out)
    assert b.num_nodes == 10 and len(b.graph.edge_list()) == 20
    assert "N=10" in capsys.readouterr().out


def test_convert_command(tmp_path):
    adj = sp.csr_matrix(np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]]))
    x = sp.csr_matrix(np.eye(3))
    np.savez(tmp_path / "g.npz", adj_data=adj.data, adj_indices=adj.indices, adj_indptr=adj.indptr,
             adj_shape=adj.shape, attr_data=x.data, attr_indices=x.indices, attr_indptr=x.indptr,
             attr_shape=x.shape, labels=np.array([0, 1, 1]))
    assert main(["convert", "--input", str(tmp_path / "g.npz"), "--out", str(tmp_path / "ds")]) == 0
    b = dio.load_dataset(tmp_path / "ds")
    assert b.name == "g" and b.num_nodes == 3 and b.graph.is_symmetric()
    assert main(["convert", "--input", str(tmp_path / "missing.npz"), "--out", str(tmp_path / "x")]) == 2


def test_data_error_exit_code(tmp_path, tiny6_dir, cfg_file):
    # tiny6 has only two labeled nodes in class 1
    assert main(["run", "--config", str(cfg_file), "--dataset", str(tiny6_dir), "--seeds", "0"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(cfg_file):
    assert main(["run", "--config", str(cfg_file), "--seeds", "0", "--lr", "1e300"]) == 3


def test_run_single_seed_and_diagnose(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_file), "--seeds", "0"]) == 0
    rec = dio.load_results(out / "results.json")
    assert rec["seeds"] == [0] and rec["std"] == 0.0 and rec["mean"] == rec["accuracies"][0]
    assert dio.load_curves(out / "seed_0" / "curves.csv")
    assert main(["diagnose", "--run", str(out), "--max-hop", "3"]) == 0
    diag = out / "diagnostics"
    dens = read_table_csv(diag / "hop_density.csv")
    assert dens["hop"].tolist() == [1, 2, 3]
    assert np.all(np.diff(dens["density"]) >= 0)
    gram = read_matrix_csv(diag / "gram_sorted.csv")
    assert gram.shape == (40, 40)
    np.testing.assert_allclose(gram, gram.T, atol=1e-12)
    order = read_table_csv(diag / "gram_order.csv")
    assert np.all(np.diff(order["label"]) >= 0)
    ent = read_table_csv(diag / "entropy.csv")
    assert ent["entropy"].shape == (40,) and np.all(ent["entropy"] <= np.log(2) + 1e-12)


def test_diagnostics_edgeless_and_uniform(tmp_path):
    n = 6
    graph = dio.SparseGraph.from_edges(n, [])
    bundle = dio.DatasetBundle(graph, np.eye(n)[:, :3], np.array([0, 1, 2, 0, 1, 2]), 3, "flat")
    run = tmp_path / "run"
    (run / "seed_0").mkdir(parents=True)
    np.save(run / "seed_0" / "embeddings.npy", np.random.default_rng(0).random((n, 4)))
    np.save(run / "seed_0" / "log_probs.npy", np.full((n, 3), np.log(1 / 3)))
    dio.save_results({"config_digest": "x", "config": {}, "seeds": [0], "accuracies": [0.5], "mean": 0.5,
                      "std": 0.0, "curves": {}, "layers": {}, "failures": {}, "timing": {}},
                     run / "results.json")
    files = export_diagnostics(bundle, run, tmp_path / "diag", max_hop=4)
    assert read_table_csv(files["density"])["density"].tolist() == [n / n**2] * 4
    np.testing.assert_allclose(read_table_csv(files["entropy"])["entropy"], np.log(3), rtol=1e-14)
    gram = read_matrix_csv(files["gram"])
    assert gram.shape == (n, n)
    np.testing.assert_array_equal(gram, gram.T)
    (run / "seed_0" / "embeddings.npy").unlink()
    with pytest.raises(dio.DataError, match="missing embeddings"):
        export_diagnostics(bundle, run, tmp_path / "diag")


def test_prediction_entropy():
    np.testing.assert_allclose(prediction_entropy(np.log(np.full((2, 4), 0.25))), np.log(4))
    with np.errstate(divide="ignore"):
        z = np.log(np.array([[1.0, 0.0]]))
    assert prediction_entropy(z)[0] == 0.0


def test_run_experiment_deterministic(tmp_path):
    a = run_experiment(small_config(tmp_path / "a", seeds=(0, 1)))
    b = run_experiment(small_config(tmp_path / "b", seeds=(0, 1)))
    assert a["digest"] == b["digest"] == record_digest(b)
    assert a["timing"] != {} and len(a["accuracies"]) == 2
    mean, std = dio.summarize(a["accuracies"])
    assert a["mean"] == mean and a["std"] == std


def test_parallel_seeds_match_serial(tmp_path):
    serial = run_experiment(small_config(tmp_path / "s", seeds=(0, 1)))
    cfg = small_config(tmp_path / "p", seeds=(0, 1))
    cfg.jobs = 2
    parallel = run_experiment(cfg)
    assert parallel["accuracies"] == serial["accuracies"]
    assert parallel["curves"] == serial["curves"]


def test_load_bundle_sbm_spec_defaults_to_run_seed():
    spec = {"sbm": {"block_sizes": [5, 5], "p_in": 0.5, "p_out": 0.1}}
    a, b = load_bundle(spec, 1), load_bundle(spec, 2)
    assert (a.graph.matrix != load_bundle(spec, 1).graph.matrix).nnz == 0
    assert a.features.shape == (10, 16)
    assert not np.array_equal(a.features, b.features)
    with pytest.raises(dio.DataError):
        load_bundle({"er": {}}, 0)


def test_thread_cap(monkeypatch):
    from threadpoolctl import threadpool_info

    from gann.experiment import _limit_threads

    monkeypatch.setenv("GANN_THREADS", "1")
    limiter = _limit_threads()
    try:
        assert all(pool["num_threads"] == 1 for pool in threadpool_info())
    finally:
        limiter.unregister()
    monkeypatch.delenv("GANN_THREADS")
    assert _limit_threads() is None
