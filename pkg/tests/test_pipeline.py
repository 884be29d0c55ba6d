import csv
import json

import numpy as np
import pytest
import torch

from gaithealth import pipeline as pl
from gaithealth import synth_gait as sg
from gaithealth.checkpoint import CheckpointMismatchError, load_checkpoint, read_header
from gaithealth.cli import main as cli_main

TINY = {
    "seed": 3,
    "data": {"pose_train": 4, "pose_val": 2, "gait_subjects": 10, "frames": 16},
    "train": {"epochs": 1, "batch_size": 4},
    "encoder": {"backbone_channels": 4, "stage_channels": [4, 4, 4], "fused_dim": 8, "backbone_blocks": 1},
    "gru": {"hidden_dim": 8},
    "regressor": {"hidden": 16},
}


def tiny_config(**over):
    d = json.loads(json.dumps(TINY))
    for k, v in over.items():
        d[k] = {**d.get(k, {}), **v} if isinstance(v, dict) else v
    return pl.PipelineConfig.from_dict(d)


@pytest.fixture(scope="module")
def tiny_splits():
    return pl.make_datasets(tiny_config())


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_splits):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    res = pl.train_phase1(cfg, tiny_splits["pose_train"], tiny_splits["pose_val"], out)
    return cfg, res, out


# -- config

def test_config_roundtrip_and_validation(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert pl.PipelineConfig.from_json(path).to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        pl.PipelineConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        pl.PipelineConfig.from_dict({"folds": 1})
    with pytest.raises(ValueError):
        pl.PipelineConfig.from_dict({"pool_factor": 3})


def test_default_config_values():
    cfg = pl.PipelineConfig()
    assert (cfg.pool_factor, cfg.folds, cfg.svr.kernel, cfg.svr.C, cfg.svr.epsilon) == (4, 5, "rbf", 10.0, 0.1)
    assert (cfg.train.batch_size, cfg.train.lr, cfg.train.adam_beta1, cfg.train.epochs) == (24, 1e-3, 0.9, 30)
    assert cfg.data.gait_subjects == 85


# -- folds

def test_folds_85_subjects():
    ids = [f"id{i}" for i in range(85)]
    folds = pl.make_folds(ids, 5, seed=1)
    assert [len(f.test_subject_ids) for f in folds] == [17] * 5
    assert all(len(f.train_subject_ids) == 68 for f in folds)
    assert sorted(i for f in folds for i in f.test_subject_ids) == sorted(ids)
    for f in folds:
        assert not set(f.train_subject_ids) & set(f.test_subject_ids)
    assert folds == pl.make_folds(ids, 5, seed=1)
    assert folds != pl.make_folds(ids, 5, seed=2)


def test_folds_ratio_within_one_subject():
    for n in (11, 23, 87):
        for f in pl.make_folds(range(n), 5):
            assert abs(len(f.train_subject_ids) - 4 * len(f.test_subject_ids)) <= 5


def test_folds_invalid():
    with pytest.raises(ValueError):
        pl.make_folds(range(10), 1)


# -- pooling

def test_average_pool_loop_oracle():
    v = np.random.default_rng(0).normal(size=(3, 16))
    got = pl.average_pool(v, 4)
    for i in range(3):
        for k in range(4):
            assert got[i, k] == pytest.approx(sum(v[i, 4 * k + j] for j in range(4)) / 4, rel=1e-12)
    assert np.array_equal(pl.average_pool(v, 1), v)
    with pytest.raises(ValueError):
        pl.average_pool(v, 5)


# -- phase II

def planted_table(n=60, dim=8, seed=0, label_fn=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    labels = {name: (label_fn(x, k) if label_fn else 50 + 5 * x[:, k]) for k, name in enumerate(sg.INDICATOR_NAMES)}
    return pl.FeatureTable([f"s{i}" for i in range(n)], x, labels)


def test_svr_constant_labels():
    table = planted_table(label_fn=lambda x, k: np.full(len(x), 30.0))
    res = pl.train_phase2(table, pl.make_folds(table.ids, 5), pl.SvrConfig())
    for name in sg.INDICATOR_NAMES:
        assert res.report.indicator_errors[name]["mae"] <= 0.1 + 1e-9


def test_svr_planted_linear_model():
    w = np.random.default_rng(1).normal(size=8)
    table = planted_table(n=80, label_fn=lambda x, k: 100 + x @ w + k)
    res = pl.train_phase2(table, pl.make_folds(table.ids, 5), pl.SvrConfig(kernel="linear", C=100.0, epsilon=0.01))
    for name in sg.INDICATOR_NAMES:
        assert res.report.indicator_errors[name]["mape"] < 1.0


def test_svr_shuffled_labels_match_mean_baseline():
    rng = np.random.default_rng(2)
    table = planted_table(n=85, label_fn=lambda x, k: 60 + 8 * rng.normal(size=len(x)))
    res = pl.train_phase2(table, pl.make_folds(table.ids, 5), pl.SvrConfig())
    for name in sg.INDICATOR_NAMES:
        model, base = res.report.indicator_errors[name]["mape"], res.baseline[name]["mape"]
        assert abs(model - base) <= 0.2 * base


def test_phase2_leakage_audit():
    table = planted_table(n=40)
    folds = pl.make_folds(table.ids, 5)
    res = pl.train_phase2(table, folds)
    for split, rec in zip(folds, res.folds):
        assert rec["train_ids"] == list(split.train_subject_ids)
        assert not set(rec["train_ids"]) & set(rec["test_ids"])
        train_mean = table.subset(split.train_subject_ids).features.mean(0)
        for name in sg.INDICATOR_NAMES:
            np.testing.assert_allclose(rec["scaler_mean"][name], train_mean, rtol=1e-12)
    # test-row features must not affect any fitted model
    poisoned = pl.FeatureTable(table.ids, table.features.copy(), table.labels)
    test0 = [table.ids.index(i) for i in folds[0].test_subject_ids]
    poisoned.features[test0] += 1e3
    res2 = pl.train_phase2(poisoned, folds[:1])
    for name in sg.INDICATOR_NAMES:
        assert res2.folds[0]["scaler_mean"][name] == res.folds[0]["scaler_mean"][name]


def test_phase2_rejects_tiny_training_set():
    table = planted_table(n=3)
    with pytest.raises(ValueError):
        pl.train_phase2(table, [pl.FoldSplit(0, ["s0"], ["s1", "s2"])])
    with pytest.raises(ValueError):
        pl.train_phase2(table, [pl.FoldSplit(0, ["s0", "s1"], ["s1"])])


def test_feature_table_roundtrip(tmp_path):
    table = planted_table(n=5)
    table.save(tmp_path / "f.npz")
    back = pl.FeatureTable.load(tmp_path / "f.npz")
    assert back.ids == table.ids and np.array_equal(back.features, table.features)
    for k in table.labels:
        assert np.array_equal(back.labels[k], table.labels[k])


# -- phase I plumbing

def test_epoch_windows_tile_every_frame():
    rng = np.random.default_rng(0)
    pairs = pl.epoch_windows(rng, 5, 32, 16)
    assert sorted(pairs) == [(j, s) for j in range(5) for s in (0, 16)]
    odd = pl.epoch_windows(rng, 3, 35, 16)
    assert len(odd) == 6 and all(0 <= s <= 35 - 16 for _, s in odd)


def test_batchnorm_recalibration_averages_chunk_statistics(tiny_splits):
    cfg = tiny_config()
    model, _ = pl.build_model(cfg)
    frames = torch.from_numpy(np.stack([s.frames for s in tiny_splits["pose_train"]]))
    pl.recalibrate_batchnorm(model, frames, batch=3)
    stem_bn = model.spatial.backbone.stem[1]
    with torch.no_grad():
        pre = model.spatial.backbone.stem[0](frames.reshape(-1, 1, 64, 64))
    # chunks of 3 and 1 sequences: plain average of the two chunk means
    m1 = pre[:48].mean(dim=(0, 2, 3))
    m2 = pre[48:].mean(dim=(0, 2, 3))
    assert torch.allclose(stem_bn.running_mean, (m1 + m2) / 2, atol=1e-5)
    assert stem_bn.momentum == 0.1 and not model.training


def test_zero_epochs_checkpoint_equals_init(tmp_path, tiny_splits):
    cfg = tiny_config(train={"epochs": 0})
    res = pl.train_phase1(cfg, tiny_splits["pose_train"], tiny_splits["pose_val"], tmp_path)
    init, _ = pl.build_model(cfg, pl.mean_params(tiny_splits["pose_train"]))
    loaded, _, _ = load_checkpoint(res.checkpoint)
    for (k, a), (k2, b) in zip(init.state_dict().items(), loaded.state_dict().items()):
        assert k == k2
        if a.is_floating_point():
            assert torch.equal(a, b), k
    assert res.loss_log == [] and len(res.eval_log) == 1


def test_phase1_outputs(tiny_run):
    cfg, res, out = tiny_run
    assert (out / "checkpoints" / "phase1.npz").exists()
    losses = [json.loads(line) for line in (out / "logs" / "phase1_loss.jsonl").read_text().splitlines()]
    assert len(losses) == len(res.loss_log) == 1  # 4 one-clip sequences, batch 4
    assert {"step", "lr", "loss_2d", "loss_3d", "loss_param", "loss_adv", "total"} <= set(losses[0])
    evals = [json.loads(line) for line in (out / "logs" / "phase1_eval.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in evals] == [0, 1]
    assert read_header(res.checkpoint)["encoder"]["fused_dim"] == 8


def test_phase1_rerun_is_bit_exact(tiny_run, tiny_splits):
    cfg, res, _ = tiny_run
    again = pl.train_phase1(cfg, tiny_splits["pose_train"], tiny_splits["pose_val"])
    assert json.dumps(again.loss_log) == json.dumps(res.loss_log)
    assert json.dumps(again.eval_log) == json.dumps(res.eval_log)


def test_phase1_requires_data():
    with pytest.raises(ValueError):
        pl.train_phase1(tiny_config(), [], [])


def test_checkpoint_reload_same_outputs(tiny_run, tiny_splits):
    cfg, res, _ = tiny_run
    model = pl.load_model(res.checkpoint, cfg)
    seqs = tiny_splits["gait"][:3]
    a = pl.predict_sequences(res.model, seqs)
    b = pl.predict_sequences(model, seqs)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert np.array_equal(pl.last_features(res.model, seqs), pl.last_features(model, seqs))


def test_checkpoint_config_mismatch(tiny_run):
    cfg, res, _ = tiny_run
    with pytest.raises(CheckpointMismatchError):
        pl.load_model(res.checkpoint, pl.PipelineConfig())


def test_extract_features_shape_and_constant_video(tiny_run):
    cfg, res, _ = tiny_run
    seq = sg.generate_dataset(1, seed=99, frames=16)[0]
    seq.frames = np.full_like(seq.frames, 0.5)
    t1 = pl.extract_features(res.model, [seq], pool_factor=4)
    t2 = pl.extract_features(res.model, [seq], pool_factor=4)
    assert t1.features.shape == (1, 4)
    assert np.array_equal(t1.features, t2.features)
    raw = pl.last_features(res.model, [seq])
    assert np.array_equal(pl.extract_features(res.model, [seq], pool_factor=1).features, raw)


# -- ablation and report

def test_ablate_schema(tmp_path, tiny_splits):
    tables = pl.ablate(tiny_config(), tiny_splits, tmp_path)
    assert [r["variant"] for r in tables["pose"]] == ["resnet", "extractor", "full"]
    for r in tables["pose"]:
        assert {"mpjpe", "pa_mpjpe", "pve", "limblen_error"} <= set(r)
    for r in tables["health"]:
        assert set(r["mae"]) == set(r["mape"]) == set(sg.INDICATOR_NAMES)
    md = (tmp_path / "ablation" / "ablation.md").read_text()
    assert md.count("| MAE |") == 3 and md.count("| MAPE |") == 3
    assert "| ResNet | Extractor | Fusion | MPJPE | PA-MPJPE | PVE | LimbLen Error |" in md


def test_report_empty_dir(tmp_path):
    (tmp_path / "run").mkdir()
    bundle = pl.report(tmp_path / "run", tmp_path / "out")
    assert bundle["schema_version"] == pl.BUNDLE_SCHEMA_VERSION
    assert bundle["metric_reports"] == {} and bundle["folds"] == [] and bundle["phase2"] is None
    rows = list(csv.reader(open(tmp_path / "out" / "per_frame.csv")))
    assert rows == [["report", "sequence", "frame", "mpjpe_mm", "limblen_error_mm"]]


def test_report_totals_and_csv_rows(tmp_path, tiny_run, tiny_splits):
    cfg, res, _ = tiny_run
    run = tmp_path / "run"
    rep = pl.evaluate_model(res.model, tiny_splits["pose_val"])
    rep.write_json(run / "eval" / "metrics.json")
    table = pl.extract_features(res.model, tiny_splits["gait"], cfg.pool_factor)
    p2 = pl.train_phase2(table, pl.make_folds(table.ids, 5, cfg.seed))
    (run / "phase2").mkdir(parents=True)
    (run / "phase2" / "report.json").write_text(json.dumps(p2.to_dict()))
    bundle = pl.report(run, tmp_path / "out")
    for name in sg.INDICATOR_NAMES:
        for m in ("mae", "mape"):
            fold_mean = np.mean([f["errors"][name][m] for f in bundle["folds"]])
            assert bundle["phase2"]["indicator_errors"][name][m] == pytest.approx(fold_mean, rel=1e-12)
    rows = list(csv.reader(open(tmp_path / "out" / "per_frame.csv")))
    assert len(rows) - 1 == sum(len(s) for s in tiny_splits["pose_val"])
    assert bundle["metric_reports"]["eval"]["aggregate"] == rep.aggregate


# -- CLI

def run_cli(capsys, *argv):
    code = cli_main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_synth_data(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "synth-data", "--subjects", "2", "--frames", "16", "--seed", "4",
                           "--out", str(tmp_path / "d"))
    assert code == 0
    assert json.loads(out)["sequences"] == 2
    assert len(sg.read_dataset(tmp_path / "d")) == 2


def test_cli_missing_dataset_reports_json_error(tmp_path, capsys):
    code, _, err = run_cli(capsys, "train-phase1", "--out", str(tmp_path))
    assert code != 0
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"] == "FileNotFoundError" and payload["command"] == "train-phase1"


def test_cli_bad_arguments(capsys):
    code, _, err = run_cli(capsys, "no-such-command")
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "UsageError"


def test_cli_global_flags_before_subcommand(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "--seed", "6", "--out", str(tmp_path / "d"), "synth-data",
                           "--subjects", "1", "--frames", "16")
    assert code == 0
    assert sg.read_dataset(tmp_path / "d")[0].subject_id == "s6-00000"


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    out = str(tmp_path / "run")
    steps = [("synth-data",), ("train-phase1",), ("extract-features",), ("train-phase2",), ("evaluate",),
             ("report",)]
    for step in steps:
        code, stdout, err = run_cli(capsys, *step, "--config", str(cfg), "--out", out)
        assert code == 0, (step, err)
        json.loads(stdout)
    bundle = json.loads((tmp_path / "run" / "report" / "bundle.json").read_text())
    assert bundle["phase2"] is not None and len(bundle["folds"]) == 5
    assert {"phase1", "eval"} <= set(bundle["metric_reports"])
