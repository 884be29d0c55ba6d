"""Two-phase pipeline: pose pre-training, frozen features, per-indicator SVR.

Run directory layout (everything optional, written by the step that owns it):

    data/{pose_train,pose_val,gait}/   synthetic datasets (manifest.json + *.f32)
    checkpoints/phase1.npz             phase-I weights
    logs/phase1_loss.jsonl             one record per optimizer step
    logs/phase1_eval.jsonl             held-out pose metrics per epoch (epoch 0 = init)
    eval/metrics.json, eval/per_frame.csv
    features/features.npz
    phase2/report.json
    ablation/ablation.json, ablation/ablation.md
    report/bundle.json, report/per_frame.csv
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import random
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
import torch
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVR

from . import body_model as bm
from . import metrics as mx
from . import synth_gait as sg
from .checkpoint import load_checkpoint, save_checkpoint
from .glance import VARIANTS, EncoderConfig
from .smpl_head import (PARAM_DIM, GlanceNet, LossWeights, MotionDiscriminator, Phase1Trainer,
                        RegressorConfig, TrainConfig)
from .temporal import GruConfig

logger = logging.getLogger(__name__)

BUNDLE_SCHEMA_VERSION = 1
VARIANT_FLAGS = {"resnet": (True, False, False), "extractor": (True, True, False), "full": (True, True, True)}


@dataclass
class DataConfig:
    pose_train: int = 200
    pose_val: int = 40
    gait_subjects: int = 85
    frames: int = sg.DEFAULT_FRAMES
    fps: float = sg.DEFAULT_FPS
    size: tuple = sg.DEFAULT_SIZE


@dataclass
class SvrConfig:
    kernel: str = "rbf"  # "rbf" | "linear"
    C: float = 10.0
    epsilon: float = 0.1
    per_indicator: bool = True

    def __post_init__(self):
        if self.kernel not in ("rbf", "linear"):
            raise ValueError("svr kernel must be 'rbf' or 'linear'")


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gru: GruConfig = field(default_factory=GruConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    pool_factor: int = 4
    svr: SvrConfig = field(default_factory=SvrConfig)
    folds: int = 5
    eval_batch: int = 8

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.gru.input_dim != self.encoder.fused_dim:
            self.gru = GruConfig(**{**asdict(self.gru), "input_dim": self.encoder.fused_dim})
        if self.pool_factor < 1 or self.gru.output_dim % self.pool_factor:
            raise ValueError("pool_factor must divide the temporal feature length")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _from_dict(cls, d or {})

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _from_dict(cls, d):
    kwargs = {}
    names = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in names:
            raise ValueError(f"unknown config key {cls.__name__}.{k}")
        f = names[k]
        default = f.default_factory() if callable(f.default_factory) else f.default
        if is_dataclass(default) and isinstance(v, dict):
            v = _from_dict(type(default), v)
        elif isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)  # JSON has no tuples
        kwargs[k] = v
    return cls(**kwargs)


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


# ---------------------------------------------------------------- data

def make_datasets(config: PipelineConfig, out_dir=None) -> dict:
    """Disjoint pose-train / pose-val / gait splits from one master seed."""
    d = config.data
    splits = sg.generate_splits({"pose_train": d.pose_train, "pose_val": d.pose_val,
                                 "gait": d.gait_subjects}, config.seed,
                                frames=d.frames, fps=d.fps, size=tuple(d.size))
    if out_dir is not None:
        for name, seqs in splits.items():
            sg.write_dataset(seqs, Path(out_dir) / "data" / name, master_seed=config.seed)
    return splits


def _stack(seqs):
    frames = torch.from_numpy(np.stack([s.frames for s in seqs]))
    params = torch.from_numpy(np.stack([s.gt_params for s in seqs]).astype(np.float32))
    joints = torch.from_numpy(np.stack([s.gt_joints for s in seqs]).astype(np.float32))
    return frames, params, joints


def mean_params(seqs) -> np.ndarray:
    return np.concatenate([s.gt_params for s in seqs]).mean(0)


# ---------------------------------------------------------------- phase I

class Phase1Result(NamedTuple):
    model: GlanceNet
    disc: MotionDiscriminator
    loss_log: list
    eval_log: list
    checkpoint: Optional[Path]


def predict_sequences(model: GlanceNet, seqs, batch: int = 8):
    """Run the frozen model; returns per-sequence predicted (T, 85) parameter arrays."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch):
            frames = torch.from_numpy(np.stack([s.frames for s in seqs[i:i + batch]]))
            out.extend(model(frames).to_vector().double().numpy())
    return out


def evaluate_model(model: GlanceNet, seqs, tree: bm.KinematicTree = None, batch: int = 8) -> mx.MetricReport:
    tree = tree or bm.smpl_tree()
    tt = bm.TreeTensors(tree, torch.float64)
    report = mx.MetricReport()
    for seq, pred in zip(seqs, predict_sequences(model, seqs, batch)):
        shape = torch.from_numpy(pred[:, :bm.SHAPE_DIM])
        pose = torch.from_numpy(pred[:, bm.SHAPE_DIM:-3].reshape(len(pred), -1, 3))
        gt = torch.from_numpy(seq.gt_params)
        with torch.no_grad():
            pj, _ = bm.fk_torch(tt, shape, pose)
            pp = bm.surface_torch(tt, shape, pose)
            gp = bm.surface_torch(tt, gt[:, :bm.SHAPE_DIM], gt[:, bm.SHAPE_DIM:-3].reshape(len(gt), -1, 3))
        report.add_sequence(seq.subject_id, pj.numpy(), seq.gt_joints, pp.numpy(), gp.numpy(), tree.parent)
    return report


def _eval_record(epoch, report: mx.MetricReport) -> dict:
    return {"epoch": epoch, **report.aggregate}


def build_model(config: PipelineConfig, mean=None) -> tuple:
    seed_everything(config.seed)
    model = GlanceNet(config.encoder, config.gru, config.regressor, mean)
    disc = MotionDiscriminator()
    return model, disc


def train_phase1(config: PipelineConfig, train_seqs, val_seqs, out_dir=None) -> Phase1Result:
    if not train_seqs:
        raise ValueError("phase I needs a non-empty training dataset")
    model, disc = build_model(config, mean_params(train_seqs))
    trainer = Phase1Trainer(model, disc, config.train, config.loss_weights)
    frames, params, joints = _stack(train_seqs)
    rng = np.random.default_rng(config.seed)
    tc = config.train
    clip = min(tc.clip_len, frames.shape[1])

    eval_log = [_eval_record(0, evaluate_model(model, val_seqs, batch=config.eval_batch))] if val_seqs else []
    loss_log = []
    for epoch in range(tc.epochs):
        trainer.set_lr(tc.lr_at(epoch))
        windows = epoch_windows(rng, len(train_seqs), frames.shape[1], clip)
        for i in range(0, len(windows), tc.batch_size):
            chunk = windows[i:i + tc.batch_size]
            b = [torch.stack([x[j, s:s + clip] for j, s in chunk]) for x in (frames, params, joints)]
            rec = trainer.train_step(*b)
            rec["epoch"] = epoch
            loss_log.append(rec)
        recalibrate_batchnorm(model, frames, batch=config.eval_batch)
        if val_seqs:
            eval_log.append(_eval_record(epoch + 1, evaluate_model(model, val_seqs, batch=config.eval_batch)))
            logger.info("epoch %d: %s", epoch + 1, eval_log[-1])

    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = save_checkpoint(out_dir / "checkpoints" / "phase1.npz", model, disc,
                               extra={"seed": config.seed, "epochs": tc.epochs})
        logs = out_dir / "logs"
        logs.mkdir(parents=True, exist_ok=True)
        _write_jsonl(logs / "phase1_loss.jsonl", loss_log)
        _write_jsonl(logs / "phase1_eval.jsonl", eval_log)
    return Phase1Result(model, disc, loss_log, eval_log, ckpt)


def epoch_windows(rng, n_seqs: int, length: int, clip: int) -> list:
    """Shuffled (sequence, start) pairs tiling every sequence with non-overlapping clips."""
    per_seq = length // clip
    slack = length - per_seq * clip
    offsets = rng.integers(0, slack + 1, size=n_seqs)
    pairs = [(j, int(offsets[j]) + k * clip) for j in range(n_seqs) for k in range(per_seq)]
    return [pairs[i] for i in rng.permutation(len(pairs))]


def recalibrate_batchnorm(model: GlanceNet, frames, batch: int = 8):
    """Replace BN running statistics with exact averages over ``frames`` (N, T, H, W).

    Momentum-based running averages lag behind weights that moved a lot
    within the epoch; a no-grad pass with cumulative averaging fixes that.
    """
    bns = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns or len(frames) == 0:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        for i in range(0, len(frames), batch):
            chunk = frames[i:i + batch]
            model.spatial(chunk.reshape(-1, *chunk.shape[2:]))
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.eval()


def _write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(dict(r)) + "\n")


def _read_jsonl(path) -> list:
    if not Path(path).exists():
        return []
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- phase II

@dataclass
class FeatureTable:
    ids: list
    features: np.ndarray  # (N, D / pool_factor)
    labels: dict  # indicator name -> (N,)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, ids=np.array(self.ids), features=self.features,
                     **{f"label_{k}": v for k, v in self.labels.items()})

    @classmethod
    def load(cls, path) -> "FeatureTable":
        with np.load(path, allow_pickle=False) as z:
            labels = {k[6:]: z[k] for k in z.files if k.startswith("label_")}
            return cls([str(i) for i in z["ids"]], z["features"], labels)

    def subset(self, ids) -> "FeatureTable":
        pos = {i: k for k, i in enumerate(self.ids)}
        rows = [pos[i] for i in ids]
        return FeatureTable(list(ids), self.features[rows], {k: v[rows] for k, v in self.labels.items()})


def average_pool(vectors, pool_factor: int) -> np.ndarray:
    """Non-overlapping windowed mean along the last axis."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[-1] % pool_factor:
        raise ValueError("pool_factor must divide the feature length")
    return v.reshape(*v.shape[:-1], -1, pool_factor).mean(-1)


def last_features(model: GlanceNet, seqs, batch: int = 8) -> np.ndarray:
    """(N, output_dim) last-frame temporal features from the frozen encoder."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch):
            frames = torch.from_numpy(np.stack([s.frames for s in seqs[i:i + batch]]))
            out.append(model.encode(frames).last.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.temporal.config.output_dim))


def extract_features(model: GlanceNet, seqs, pool_factor: int = 4, batch: int = 8) -> FeatureTable:
    feats = average_pool(last_features(model, seqs, batch), pool_factor)
    labels = {name: np.array([getattr(s.indicators, name) for s in seqs]) for name in sg.INDICATOR_NAMES}
    return FeatureTable([s.subject_id for s in seqs], feats, labels)


class FoldSplit(NamedTuple):
    fold_id: int
    train_subject_ids: list
    test_subject_ids: list


def make_folds(subject_ids, folds: int = 5, seed: int = 0) -> List[FoldSplit]:
    """Seeded shuffle, then contiguous partition into ``folds`` test sets."""
    ids = list(subject_ids)
    if folds < 2 or folds > len(ids):
        raise ValueError("need 2 <= folds <= number of subjects")
    perm = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(perm, folds)
    out = []
    for k, part in enumerate(parts):
        test = [ids[i] for i in part]
        test_set = set(test)
        out.append(FoldSplit(k, [i for i in ids if i not in test_set], test))
    return out


def make_svr(config: SvrConfig):
    return make_pipeline(StandardScaler(), SVR(kernel=config.kernel, C=config.C, epsilon=config.epsilon))


@dataclass
class Phase2Result:
    report: mx.MetricReport
    folds: list  # per-fold dicts: ids, predictions, errors, scaler mean
    baseline: dict  # predict-the-train-mean errors, same layout as report.indicator_errors
    models: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"indicator_errors": self.report.indicator_errors, "baseline_mean": self.baseline,
                "folds": self.folds}


def train_phase2(table: FeatureTable, folds: List[FoldSplit], svr: SvrConfig = None,
                 indicators=sg.INDICATOR_NAMES) -> Phase2Result:
    """One SVR per indicator per fold; scaler fitted on the fold's training subjects only."""
    svr = svr or SvrConfig()
    per_fold, models = [], []
    for split in folds:
        if len(split.train_subject_ids) < 2:
            raise ValueError(f"fold {split.fold_id} has fewer than 2 training subjects")
        if set(split.train_subject_ids) & set(split.test_subject_ids):
            raise ValueError(f"fold {split.fold_id} leaks subjects between train and test")
        train = table.subset(split.train_subject_ids)
        test = table.subset(split.test_subject_ids)
        rec = {"fold_id": split.fold_id, "train_ids": list(train.ids), "test_ids": list(test.ids),
               "pred": {}, "gt": {}, "baseline": {}, "errors": {}, "baseline_errors": {}, "scaler_mean": {}}
        fold_models = {}
        for name in indicators:
            model = make_svr(svr).fit(train.features, train.labels[name])
            pred = model.predict(test.features)
            base = np.full(len(test.ids), train.labels[name].mean())
            gt = test.labels[name]
            rec["pred"][name] = pred.tolist()
            rec["gt"][name] = gt.tolist()
            rec["baseline"][name] = base.tolist()
            rec["errors"][name] = {"mae": mx.mae(pred, gt), "mape": mx.mape(pred, gt)}
            rec["baseline_errors"][name] = {"mae": mx.mae(base, gt), "mape": mx.mape(base, gt)}
            rec["scaler_mean"][name] = model[0].mean_.tolist()
            fold_models[name] = model
        per_fold.append(rec)
        models.append(fold_models)

    report, baseline = mx.MetricReport(), {}
    for name in indicators:
        report.indicator_errors[name] = {
            m: float(np.mean([f["errors"][name][m] for f in per_fold])) for m in ("mae", "mape")}
        baseline[name] = {
            m: float(np.mean([f["baseline_errors"][name][m] for f in per_fold])) for m in ("mae", "mape")}
    return Phase2Result(report, per_fold, baseline, models)


# ---------------------------------------------------------------- ablation / report

def _pose_row(variant, aggregate):
    r, e, f = VARIANT_FLAGS[variant]
    return {"variant": variant, "resnet": r, "extractor": e, "fusion": f,
            **{k: aggregate[k] for k in mx.POSE_KEYS}}


def _health_row(variant, errors):
    r, e, f = VARIANT_FLAGS[variant]
    return {"variant": variant, "resnet": r, "extractor": e, "fusion": f,
            "mae": {k: errors[k]["mae"] for k in sg.INDICATOR_NAMES},
            "mape": {k: errors[k]["mape"] for k in sg.INDICATOR_NAMES}}


def ablation_markdown(tables: dict) -> str:
    tick = lambda b: "x" if b else " "
    lines = ["| ResNet | Extractor | Fusion | MPJPE | PA-MPJPE | PVE | LimbLen Error |",
             "|---|---|---|---|---|---|---|"]
    for r in tables["pose"]:
        lines.append(f"| {tick(r['resnet'])} | {tick(r['extractor'])} | {tick(r['fusion'])} | "
                     + " | ".join(f"{r[k]:.1f}" for k in mx.POSE_KEYS) + " |")
    lines += ["", "| ResNet | Extractor | Fusion | Metric | BMI | Age | Height | Weight |",
              "|---|---|---|---|---|---|---|---|"]
    for r in tables["health"]:
        flags = f"| {tick(r['resnet'])} | {tick(r['extractor'])} | {tick(r['fusion'])} "
        lines.append(flags + "| MAE | " + " | ".join(f"{r['mae'][k]:.2f}" for k in sg.INDICATOR_NAMES) + " |")
        lines.append(flags + "| MAPE | " + " | ".join(f"{r['mape'][k]:.2f}%" for k in sg.INDICATOR_NAMES) + " |")
    return "\n".join(lines) + "\n"


def ablate(config: PipelineConfig, splits: dict = None, out_dir=None, variants=VARIANTS) -> dict:
    """Both phases for every encoder variant, same data and seed; returns the two tables."""
    splits = splits or make_datasets(config)
    folds = make_folds([s.subject_id for s in splits["gait"]], config.folds, config.seed)
    pose_rows, health_rows = [], []
    for variant in variants:
        cfg = copy.deepcopy(config)
        cfg.encoder = EncoderConfig(**{**cfg.encoder.to_dict(), "variant": variant})
        vdir = Path(out_dir) / "ablation" / variant if out_dir else None
        res = train_phase1(cfg, splits["pose_train"], splits["pose_val"], vdir)
        report = evaluate_model(res.model, splits["pose_val"], batch=cfg.eval_batch)
        table = extract_features(res.model, splits["gait"], cfg.pool_factor, cfg.eval_batch)
        p2 = train_phase2(table, folds, cfg.svr)
        pose_rows.append(_pose_row(variant, report.aggregate))
        health_rows.append(_health_row(variant, p2.report.indicator_errors))
        if vdir:
            report.write_json(vdir / "metrics.json")
            (vdir / "phase2.json").write_text(json.dumps(p2.to_dict()))
    tables = {"seed": config.seed, "pose": pose_rows, "health": health_rows}
    if out_dir:
        adir = Path(out_dir) / "ablation"
        adir.mkdir(parents=True, exist_ok=True)
        (adir / "ablation.json").write_text(json.dumps(tables, indent=2))
        (adir / "ablation.md").write_text(ablation_markdown(tables))
    return tables


def report(run_dir, out_dir=None) -> dict:
    """Collate metric reports, fold summaries and loss logs found under ``run_dir``."""
    run_dir = Path(run_dir)
    bundle = {"schema_version": BUNDLE_SCHEMA_VERSION, "metric_reports": {}, "phase2": None,
              "folds": [], "loss_log": {}, "ablation": None}
    frame_rows = []
    for path in sorted(run_dir.glob("**/metrics.json")):
        if out_dir is not None and Path(out_dir) in path.parents:
            continue
        rep = mx.MetricReport.from_dict(json.loads(path.read_text()))
        name = str(path.parent.relative_to(run_dir))
        bundle["metric_reports"][name] = {"aggregate": rep.aggregate, "sequences": len(rep.per_sequence)}
        for seq_id, series in rep.per_frame.items():
            for t, (m, l) in enumerate(zip(series["mpjpe"], series["limblen_error"])):
                frame_rows.append((name, seq_id, t, m, l))
    p2 = run_dir / "phase2" / "report.json"
    if p2.exists():
        d = json.loads(p2.read_text())
        bundle["phase2"] = {"indicator_errors": d["indicator_errors"], "baseline_mean": d["baseline_mean"]}
        bundle["folds"] = [{"fold_id": f["fold_id"], "n_train": len(f["train_ids"]),
                            "n_test": len(f["test_ids"]), "errors": f["errors"]} for f in d["folds"]]
    for path in sorted(run_dir.glob("**/phase1_loss.jsonl")):
        if out_dir is not None and Path(out_dir) in path.parents:
            continue
        recs = _read_jsonl(path)
        name = str(path.parent.parent.relative_to(run_dir))
        bundle["loss_log"][name] = {"steps": len(recs), "first": recs[0] if recs else None,
                                    "last": recs[-1] if recs else None}
    abl = run_dir / "ablation" / "ablation.json"
    if abl.exists():
        bundle["ablation"] = json.loads(abl.read_text())
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bundle.json").write_text(json.dumps(bundle, indent=2))
        with open(out_dir / "per_frame.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["report", "sequence", "frame", "mpjpe_mm", "limblen_error_mm"])
            for row in frame_rows:
                w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4])])
    return bundle


def load_model(path, config: PipelineConfig = None) -> GlanceNet:
    model, _, _ = load_checkpoint(path, config.encoder if config else None, config.gru if config else None)
    return model
