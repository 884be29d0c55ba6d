"""Phase-I pose head: iterative parameter regressor, losses, motion prior.

The full phase-I network is ``GlanceNet`` (spatial encoder -> temporal
encoder -> regressor); ``Phase1Trainer`` owns it together with the motion
discriminator and both optimizers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import body_model as bm
from .glance import EncoderConfig, GlanceEncoder
from .temporal import GruConfig, TemporalEncoder

PARAM_DIM = bm.SHAPE_DIM + 3 * bm.NUM_JOINTS + 3
POSE_DIM = 3 * bm.NUM_JOINTS
CAMERA_FLOOR = 1e-4  # softplus alone underflows to 0 in float32


@dataclass
class RegressorConfig:
    iterations: int = 3
    hidden: int = 256
    param_dim: int = PARAM_DIM

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.param_dim != PARAM_DIM:
            raise ValueError(f"param_dim must be {PARAM_DIM}")


@dataclass
class LossWeights:
    w_2d: float = 1.0
    w_3d: float = 1.0
    w_param: float = 0.1
    w_adv: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and non-negative")


@dataclass
class TrainConfig:
    batch_size: int = 24
    lr: float = 1e-3
    adam_beta1: float = 0.9
    epochs: int = 30
    lr_decay_epoch: int = 5  # lr /= 10 from this epoch on
    clip_len: int = 16  # frames per training window
    disc_lr: float = 1e-3

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.adam_beta1 < 1:
            raise ValueError("need lr >= 0 and 0 <= adam_beta1 < 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr / 10.0 if epoch >= self.lr_decay_epoch else self.lr


class PredictedParams(NamedTuple):
    shape: torch.Tensor  # (..., 10)
    pose: torch.Tensor  # (..., 24, 3)
    camera: torch.Tensor  # (..., 3), positive scale

    def to_vector(self):
        return torch.cat([self.shape, self.pose.flatten(-2), self.camera], -1)


def _inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class Regressor(nn.Module):
    """Iterative error feedback: cur <- cur + MLP([feature, cur]), starting at the mean."""

    def __init__(self, feature_dim: int, config: RegressorConfig = None, mean_params=None):
        super().__init__()
        self.config = config = config or RegressorConfig()
        self.fc1 = nn.Linear(feature_dim + PARAM_DIM, config.hidden)
        self.fc2 = nn.Linear(config.hidden, PARAM_DIM)
        nn.init.xavier_uniform_(self.fc2.weight, gain=0.01)
        nn.init.zeros_(self.fc2.bias)
        if mean_params is None:
            mean_params = np.zeros(PARAM_DIM)
            mean_params[-3] = 1.0
        self.register_buffer("mean_raw", self.to_raw(torch.as_tensor(mean_params, dtype=torch.float32)))

    @staticmethod
    def to_raw(params: torch.Tensor) -> torch.Tensor:
        raw = params.clone()
        raw[..., -3] = torch.tensor([_inv_softplus(float(s) - CAMERA_FLOOR) for s in params[..., -3].reshape(-1)],
                                    dtype=params.dtype).reshape(params[..., -3].shape)
        return raw

    def set_mean(self, mean_params):
        self.mean_raw.copy_(self.to_raw(torch.as_tensor(mean_params, dtype=self.mean_raw.dtype)))

    def forward(self, feature) -> PredictedParams:
        cur = self.mean_raw.expand(*feature.shape[:-1], PARAM_DIM)
        for _ in range(self.config.iterations):
            delta = self.fc2(F.relu(self.fc1(torch.cat([feature, cur], -1))))
            cur = cur + delta
        shape = cur[..., :bm.SHAPE_DIM]
        pose = cur[..., bm.SHAPE_DIM:-3].unflatten(-1, (bm.NUM_JOINTS, 3))
        cam = torch.cat([F.softplus(cur[..., -3:-2]) + CAMERA_FLOOR, cur[..., -2:]], -1)
        return PredictedParams(shape, pose, cam)

    regress_params = forward


def loss_keypoints_3d(pred, gt):
    """Mean over joints (and leading dims) of the squared joint distance."""
    return ((pred - gt) ** 2).sum(-1).mean()


def loss_keypoints_2d(pred, gt):
    return ((pred - gt) ** 2).sum(-1).mean()


def loss_params(pred_shape, pred_pose, gt_shape, gt_pose):
    """mean((beta - beta_gt)^2) + mean((theta - theta_gt)^2), means over components."""
    return ((pred_shape - gt_shape) ** 2).mean() + ((pred_pose - gt_pose) ** 2).mean()


class MotionDiscriminator(nn.Module):
    """GRU over (B, T, 72) pose sequences -> one realness score per sequence."""

    def __init__(self, hidden: int = 64):
        super().__init__()
        self.gru = nn.GRU(POSE_DIM, hidden, batch_first=True)
        self.out = nn.Linear(hidden, 1)

    def forward(self, poses):
        if poses.dim() != 3 or poses.shape[1] < 2:
            raise ValueError("motion discriminator needs (B, T>=2, 72) pose sequences")
        h, _ = self.gru(poses)
        return self.out(h.mean(1)).squeeze(-1)


def adversarial_loss(fake_scores):
    """Generator term, least squares: mean((D(fake) - 1)^2)."""
    return ((fake_scores - 1) ** 2).mean()


def discriminator_loss(real_scores, fake_scores):
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()


class GlanceNet(nn.Module):
    def __init__(self, encoder: EncoderConfig = None, gru: GruConfig = None,
                 regressor: RegressorConfig = None, mean_params=None):
        super().__init__()
        encoder = encoder or EncoderConfig()
        gru = gru or GruConfig(input_dim=encoder.fused_dim)
        if gru.input_dim != encoder.fused_dim:
            raise ValueError("GRU input_dim must equal the encoder's fused_dim")
        self.spatial = GlanceEncoder(encoder)
        self.temporal = TemporalEncoder(gru)
        self.head = Regressor(gru.output_dim, regressor, mean_params)

    def encode(self, frames):
        """(B, T, H, W) frames -> SequenceFeature."""
        b, t = frames.shape[:2]
        feats = self.spatial(frames.reshape(b * t, *frames.shape[2:]))
        return self.temporal(feats.reshape(b, t, -1))

    def forward(self, frames) -> PredictedParams:
        return self.head(self.encode(frames).per_frame)


class LossRecord(dict):
    pass


class Phase1Trainer:
    """Single owner of the phase-I weights and optimizer state."""

    def __init__(self, model: GlanceNet, disc: MotionDiscriminator, config: TrainConfig = None,
                 weights: LossWeights = None, tree: bm.KinematicTree = None):
        self.model = model
        self.disc = disc
        self.config = config or TrainConfig()
        self.weights = weights or LossWeights()
        self.tree = tree or bm.smpl_tree()
        self.tt = bm.TreeTensors(self.tree, torch.float32)
        self.opt = torch.optim.Adam(model.parameters(), lr=self.config.lr,
                                    betas=(self.config.adam_beta1, 0.999))
        self.disc_opt = torch.optim.Adam(disc.parameters(), lr=self.config.disc_lr,
                                         betas=(self.config.adam_beta1, 0.999))
        self.step_count = 0

    def set_lr(self, lr: float):
        for g in self.opt.param_groups:
            g["lr"] = lr

    @property
    def lr(self) -> float:
        return self.opt.param_groups[0]["lr"]

    def losses(self, frames, gt_params, gt_joints):
        """Weighted loss terms for one batch; returns (total tensor, term tensors, predictions)."""
        pred = self.model(frames)
        pred_joints, _ = bm.fk_torch(self.tt, pred.shape, pred.pose)
        gt_cam = gt_params[..., -3:]
        terms = {
            "loss_2d": loss_keypoints_2d(bm.project_torch(pred_joints, pred.camera),
                                         bm.project_torch(gt_joints, gt_cam)),
            "loss_3d": loss_keypoints_3d(pred_joints, gt_joints),
            "loss_param": loss_params(pred.shape, pred.pose, gt_params[..., :bm.SHAPE_DIM],
                                      gt_params[..., bm.SHAPE_DIM:-3].unflatten(-1, (bm.NUM_JOINTS, 3))),
            "loss_adv": adversarial_loss(self.disc(pred.pose.flatten(-2))),
        }
        w = self.weights
        total = (w.w_2d * terms["loss_2d"] + w.w_3d * terms["loss_3d"]
                 + w.w_param * terms["loss_param"] + w.w_adv * terms["loss_adv"])
        return total, terms, pred

    def train_step(self, frames, gt_params, gt_joints) -> LossRecord:
        """One Adam update of encoder + head, then one discriminator update."""
        self.model.train()
        self.disc.train()
        total, terms, pred = self.losses(frames, gt_params, gt_joints)
        if not torch.isfinite(total):
            diag = {k: float(v.detach()) for k, v in terms.items()}
            raise FloatingPointError("non-finite phase-I loss: " + json.dumps({"step": self.step_count, **diag}))
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()

        self.disc_opt.zero_grad(set_to_none=True)
        real = gt_params[..., bm.SHAPE_DIM:-3]
        d_loss = discriminator_loss(self.disc(real), self.disc(pred.pose.detach().flatten(-2)))
        d_loss.backward()
        self.disc_opt.step()

        w = self.weights
        rec = LossRecord(step=self.step_count, lr=self.lr)
        rec.update({k: float(v.detach()) for k, v in terms.items()})
        rec["total"] = (w.w_2d * rec["loss_2d"] + w.w_3d * rec["loss_3d"]
                        + w.w_param * rec["loss_param"] + w.w_adv * rec["loss_adv"])
        rec["loss_disc"] = float(d_loss.detach())
        self.step_count += 1
        return rec
