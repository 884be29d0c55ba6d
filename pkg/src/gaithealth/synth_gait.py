"""Synthetic labeled gait videos on the SMPL-lite skeleton.

Subjects are sampled so that the population matches the target cohort
moments (age 21.75 +- 3.77 y, height 168.84 +- 8.93 cm, weight
64.87 +- 11.07 kg, BMI 22.71 +- 3.21). Labels are an analytic function of
the shape vector:

    height_cm = 100 * (head_y - lowest_joint_y) of the rest pose
    girth     = TEMPLATE_GIRTH * exp(0.1*b1 + 0.05*b2 + 0.05*b3)      [m]
    weight_kg = BODY_DENSITY * height_m * girth**2
    bmi       = weight_kg / height_m**2

Walks are sinusoidal joint-angle trajectories (see ``GAIT_AMPLITUDES``),
rendered as anti-aliased capsule stick figures. Left-side limbs are drawn
dimmer than right-side ones so that the depth ordering is recoverable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import body_model as bm
from .metrics import bmi as bmi_formula

logger = logging.getLogger(__name__)

GENERATOR_VERSION = "1.0"

AGE_STATS = (21.75, 3.77)
HEIGHT_STATS = (168.84, 8.93)
WEIGHT_STATS = (64.87, 11.07)
BMI_STATS = (22.71, 3.21)

TEMPLATE_GIRTH = 0.10  # m
BODY_DENSITY = 3800.0  # kg / m^3, weight = density * height * girth^2
GIRTH_COEFFS = np.array([0.1, 0.05, 0.05])  # shape components 1..3

DEFAULT_FRAMES = 32
DEFAULT_FPS = 16.0
DEFAULT_SIZE = (64, 64)
# weak-perspective camera in normalized image coordinates ([-1, 1], y up)
DEFAULT_CAMERA = np.array([0.9, 0.0, 0.08])

BASE_SPEED = 1.3  # m/s at the template leg length and mean age
BASE_STRIDE = 1.4  # m per gait cycle
AZIMUTH_RANGE = np.pi / 3

# joint name -> (axis, amplitude in rad, waveform). Every angle is the
# amplitude times the subject's amplitude scale times the waveform value:
#   "sin":   sin(phase + offset)            in [-1, 1]
#   "flex":  (1 - cos(phase + offset)) / 2  in [0, 1]
GAIT_AMPLITUDES = {
    "l_hip": (0, -0.45, "sin", 0.0),
    "r_hip": (0, -0.45, "sin", np.pi),
    "l_knee": (0, 0.70, "flex", 0.0),
    "r_knee": (0, 0.70, "flex", np.pi),
    "l_ankle": (0, 0.20, "sin", 0.0),
    "r_ankle": (0, 0.20, "sin", np.pi),
    "l_shoulder": (0, -0.35, "sin", np.pi),
    "r_shoulder": (0, -0.35, "sin", 0.0),
    "l_elbow": (0, -0.30, "flex", np.pi),
    "r_elbow": (0, -0.30, "flex", 0.0),
    "spine1": (1, 0.08, "sin", 0.0),
}

# capsule radius as a multiple of the girth proxy, per bone (child joint)
BONE_WIDTH = {
    "l_hip": 1.0, "r_hip": 1.0, "spine1": 1.0, "spine2": 1.0, "spine3": 1.0,
    "neck": 0.6, "l_collar": 0.8, "r_collar": 0.8, "head": 1.2,
    "l_knee": 0.7, "r_knee": 0.7, "l_ankle": 0.55, "r_ankle": 0.55,
    "l_foot": 0.35, "r_foot": 0.35, "l_shoulder": 0.5, "r_shoulder": 0.5,
    "l_elbow": 0.45, "r_elbow": 0.45, "l_wrist": 0.4, "r_wrist": 0.4,
    "l_hand": 0.3, "r_hand": 0.3,
}
LEFT_INTENSITY = 0.6

_TREE = bm.smpl_tree()


class CoverageWarning(UserWarning):
    pass


@dataclass
class HealthIndicators:
    age: float  # years
    height: float  # cm
    weight: float  # kg
    bmi: float  # kg/m^2

    def as_array(self) -> np.ndarray:
        return np.array([self.age, self.height, self.weight, self.bmi])


INDICATOR_NAMES = ("bmi", "age", "height", "weight")


@dataclass
class SubjectSpec:
    shape: np.ndarray
    indicators: HealthIndicators
    gait_speed: float  # m/s
    cadence: float  # gait cycles per second
    camera_azimuth: float  # rad, 0 = pure profile view

    def to_dict(self) -> dict:
        return {
            "shape": np.asarray(self.shape).tolist(),
            "indicators": asdict(self.indicators),
            "gait_speed": self.gait_speed,
            "cadence": self.cadence,
            "camera_azimuth": self.camera_azimuth,
        }

    @classmethod
    def from_dict(cls, d) -> "SubjectSpec":
        return cls(np.array(d["shape"], dtype=np.float64), HealthIndicators(**d["indicators"]),
                   d["gait_speed"], d["cadence"], d["camera_azimuth"])


@dataclass
class GaitSequence:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    gt_params: np.ndarray  # (T, 85) rows of BodyParams.to_vector()
    gt_joints: np.ndarray  # (T, 24, 3)
    indicators: HealthIndicators
    subject_id: str
    fps: float
    subject: SubjectSpec = field(default=None, repr=False)

    @property
    def params(self) -> list:
        return [bm.BodyParams.from_vector(v) for v in self.gt_params]

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------- labels

def _rest_height(tree, shape) -> float:
    j = bm.rest_joints(tree, shape)
    return float(j[bm.JOINT_NAMES.index("head"), 1] - j[:, 1].min())


def girth_proxy(shape) -> float:
    shape = np.asarray(shape, dtype=np.float64)
    return float(TEMPLATE_GIRTH * np.exp(GIRTH_COEFFS @ shape[1:4]))


def derive_indicators(shape, age: float, tree: bm.KinematicTree = _TREE) -> HealthIndicators:
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != (bm.SHAPE_DIM,) or not np.isfinite(shape).all() or not np.isfinite(age):
        raise bm.InvalidInputError("shape must be a finite 10-vector and age finite")
    height_m = _rest_height(tree, shape)
    weight = BODY_DENSITY * height_m * girth_proxy(shape) ** 2
    return HealthIndicators(float(age), 100.0 * height_m, weight, bmi_formula(weight, height_m))


def _height_coefficients(tree) -> tuple:
    h0 = _rest_height(tree, np.zeros(bm.SHAPE_DIM))
    coeffs = np.array([_rest_height(tree, np.eye(bm.SHAPE_DIM)[k]) - h0 for k in range(bm.SHAPE_DIM)])
    return h0, coeffs


TEMPLATE_HEIGHT_M, _HEIGHT_COEFFS = _height_coefficients(_TREE)
TEMPLATE_INDICATORS = derive_indicators(np.zeros(bm.SHAPE_DIM), AGE_STATS[0])
_LEG = [bm.JOINT_NAMES.index(n) for n in ("l_knee", "l_ankle")]


def _leg_ratio(shape) -> float:
    lengths = bm.bone_lengths(_TREE, shape)
    return float(lengths[_LEG].sum() / _TREE.rest_lengths_base[_LEG].sum())


def _positive_normal(rng, mean, sd) -> float:
    while True:
        x = rng.normal(mean, sd)
        if x > 0:
            return float(x)


def sample_subject(rng_seed) -> SubjectSpec:
    """Draw one subject. ``rng_seed`` is anything ``np.random.default_rng`` accepts."""
    rng = np.random.default_rng(rng_seed)
    age = _positive_normal(rng, *AGE_STATS)
    height_m = _positive_normal(rng, *HEIGHT_STATS) / 100.0
    bmi = _positive_normal(rng, *BMI_STATS)

    shape = np.zeros(bm.SHAPE_DIM)
    shape[2:4] = rng.normal(size=2)
    shape[4:] = rng.normal(size=6)
    # solve the uniform-scale and girth components for the drawn targets
    shape[0] = (height_m - TEMPLATE_HEIGHT_M - _HEIGHT_COEFFS[4:] @ shape[4:]) / _HEIGHT_COEFFS[0]
    girth = np.sqrt(bmi * height_m / BODY_DENSITY)
    shape[1] = (np.log(girth / TEMPLATE_GIRTH) - GIRTH_COEFFS[1:] @ shape[2:4]) / GIRTH_COEFFS[0]

    indicators = derive_indicators(shape, age)
    leg = _leg_ratio(shape)
    age_factor = 1.0 - 0.03 * (age - AGE_STATS[0])
    speed = BASE_SPEED * leg * age_factor * (1.0 + 0.05 * rng.normal())
    speed = float(np.clip(speed, 0.3, 2.5))
    stride = BASE_STRIDE * leg * (1.0 - 0.01 * (age - AGE_STATS[0]))
    azimuth = float(rng.uniform(-AZIMUTH_RANGE, AZIMUTH_RANGE))
    return SubjectSpec(shape, indicators, speed, speed / stride, azimuth)


# ---------------------------------------------------------------- motion

def amplitude_scale(subject: SubjectSpec) -> float:
    """Multiplier on ``GAIT_AMPLITUDES``; grows with speed, shrinks with age."""
    age = subject.indicators.age
    return float(np.clip(subject.gait_speed / BASE_SPEED, 0.0, 1.5) * (1.0 - 0.02 * (age - AGE_STATS[0])))


def gait_period(subject: SubjectSpec, fps: float) -> int:
    """Walk period in whole frames, round(fps / cadence)."""
    return max(2, int(round(fps / subject.cadence)))


def heading(subject: SubjectSpec) -> np.ndarray:
    return np.array([0.0, np.pi / 2 + subject.camera_azimuth, 0.0])


def joint_angle_ranges(subject: SubjectSpec) -> dict:
    """Documented (min, max) of every animated joint angle for this subject."""
    scale = amplitude_scale(subject) if subject.gait_speed > 0 else 0.0
    out = {}
    for name, (_, amp, wave, _) in GAIT_AMPLITUDES.items():
        a = amp * scale
        lo, hi = (-abs(a), abs(a)) if wave == "sin" else (min(0.0, a), max(0.0, a))
        out[name] = (lo, hi)
    return out


def synthesize_walk(subject: SubjectSpec, frame_count: int = DEFAULT_FRAMES,
                    fps: float = DEFAULT_FPS, camera=DEFAULT_CAMERA) -> np.ndarray:
    """(T, 85) parameter vectors of a walk cycle; standing still when speed is 0."""
    pose = np.zeros((frame_count, bm.NUM_JOINTS, 3))
    pose[:, 0] = heading(subject)
    if subject.gait_speed > 0:
        phase = 2 * np.pi * np.arange(frame_count) / gait_period(subject, fps)
        scale = amplitude_scale(subject)
        for name, (axis, amp, wave, offset) in GAIT_AMPLITUDES.items():
            p = phase + offset
            w = np.sin(p) if wave == "sin" else 0.5 * (1.0 - np.cos(p))
            pose[:, bm.JOINT_NAMES.index(name), axis] = amp * scale * w
    shape = np.broadcast_to(subject.shape, (frame_count, bm.SHAPE_DIM))
    cam = np.broadcast_to(np.asarray(camera, dtype=np.float64), (frame_count, 3))
    return np.concatenate([shape, pose.reshape(frame_count, -1), cam], axis=1)


# ---------------------------------------------------------------- rendering

_BONES = _TREE.bones
_BONE_RADIUS = np.array([BONE_WIDTH[bm.JOINT_NAMES[c]] for _, c in _BONES])
_BONE_INTENSITY = np.array([LEFT_INTENSITY if bm.JOINT_NAMES[c].startswith("l_") else 1.0
                            for _, c in _BONES])


def render_sequence(params, subject: SubjectSpec, height: int = DEFAULT_SIZE[0],
                    width: int = DEFAULT_SIZE[1], girth: float = None) -> np.ndarray:
    """Rasterize each frame's skeleton; returns (T, H, W) float32 in [0, 1].

    ``params`` is a (T, 85) array or a list of BodyParams. ``girth``
    overrides the subject's girth proxy (used by width probes).
    """
    params = [p.to_vector() if isinstance(p, bm.BodyParams) else p for p in params]
    if len(params) == 0:
        return np.zeros((0, height, width), dtype=np.float32)
    params = np.asarray(params, dtype=np.float64)
    girth = girth_proxy(subject.shape) if girth is None else girth
    tt = bm.TreeTensors(_TREE, dtype=torch.float64)
    with torch.no_grad():
        joints, _ = bm.fk_torch(tt, torch.as_tensor(params[:, :10]),
                                torch.as_tensor(params[:, 10:-3].reshape(len(params), -1, 3)))
    joints = joints.numpy()
    cam = params[:, -3:]
    uv = cam[:, None, :1] * joints[..., :2] + cam[:, None, 1:]
    px = np.stack([(uv[..., 0] + 1) / 2 * width, (1 - uv[..., 1]) / 2 * height], -1)

    inside = ((px[..., 0] >= 0) & (px[..., 0] < width) & (px[..., 1] >= 0) & (px[..., 1] < height))
    empty = np.flatnonzero(~inside.any(axis=1))
    if len(empty):
        msg = f"{len(empty)} frame(s) have every joint outside the image"
        logger.warning(msg)
        warnings.warn(msg, CoverageWarning, stacklevel=2)

    gx = (np.arange(width, dtype=np.float32) + 0.5)[None, None, None, :]
    gy = (np.arange(height, dtype=np.float32) + 0.5)[None, None, :, None]
    par = np.array([p for p, _ in _BONES])
    chi = np.array([c for _, c in _BONES])
    pxf = px.astype(np.float32)
    ax, ay = pxf[:, par, 0, None, None], pxf[:, par, 1, None, None]  # (T, B, 1, 1)
    dx, dy = pxf[:, chi, 0, None, None] - ax, pxf[:, chi, 1, None, None] - ay
    rx, ry = gx - ax, gy - ay  # (T, B, H, W)
    denom = np.maximum(dx * dx + dy * dy, np.float32(1e-12))
    t = np.clip((rx * dx + ry * dy) / denom, 0.0, 1.0)
    ex, ey = rx - t * dx, ry - t * dy
    dist = np.sqrt(ex * ex + ey * ey)
    radius = (_BONE_RADIUS * girth * cam[:, :1] * width / 2).astype(np.float32)  # (T, B)
    cover = np.clip(radius[..., None, None] + 0.5 - dist, 0.0, 1.0)
    cover *= _BONE_INTENSITY.astype(np.float32)[None, :, None, None]
    frames = cover.max(axis=1)
    return frames.astype(np.float32)


# ---------------------------------------------------------------- datasets

def make_sequence(subject: SubjectSpec, subject_id: str, frames: int = DEFAULT_FRAMES,
                  fps: float = DEFAULT_FPS, size=DEFAULT_SIZE) -> GaitSequence:
    params = synthesize_walk(subject, frames, fps)
    tt = bm.TreeTensors(_TREE, dtype=torch.float64)
    with torch.no_grad():
        joints, _ = bm.fk_torch(tt, torch.as_tensor(params[:, :10]),
                                torch.as_tensor(params[:, 10:-3].reshape(frames, -1, 3)))
    video = render_sequence(params, subject, *size)
    return GaitSequence(video, params, joints.numpy(), subject.indicators, subject_id, float(fps), subject)


def subject_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(index)])


def generate_dataset(n_subjects: int, seed: int = 0, frames: int = DEFAULT_FRAMES,
                     fps: float = DEFAULT_FPS, size=DEFAULT_SIZE, start_index: int = 0) -> list:
    """One sequence per subject; subject i draws from the stream (seed, start_index + i)."""
    out = []
    for i in range(start_index, start_index + n_subjects):
        subject = sample_subject(subject_seed(seed, i))
        out.append(make_sequence(subject, f"s{seed}-{i:05d}", frames, fps, size))
    return out


def generate_splits(sizes: dict, seed: int = 0, **kwargs) -> dict:
    """Disjoint splits: each split gets its own contiguous block of subject indices."""
    out, start = {}, 0
    for name, n in sizes.items():
        out[name] = generate_dataset(n, seed, start_index=start, **kwargs)
        start += n
    return out


def _seq_checksum(seq: GaitSequence) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(seq.gt_params, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(seq.gt_joints, dtype="<f8").tobytes())
    h.update(json.dumps([asdict(seq.indicators), seq.subject_id, seq.fps,
                         seq.subject.to_dict() if seq.subject else None], sort_keys=True).encode())
    return h.hexdigest()


def _write_array(path: Path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(("f32le " + " ".join(str(d) for d in arr.shape) + "\n").encode())
        f.write(arr.tobytes())


def _read_array(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode().split()
        if not header or header[0] != "f32le":
            raise ValueError(f"{path}: bad array header")
        dims = tuple(int(d) for d in header[1:])
        data = np.frombuffer(f.read(), dtype="<f4")
    return data.reshape(dims).astype(np.float32)


def write_dataset(sequences: Sequence[GaitSequence], directory, master_seed=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for seq in sequences:
        fname = f"{seq.subject_id}.f32"
        _write_array(directory / fname, seq.frames)
        entries.append({
            "subject_id": seq.subject_id,
            "file": fname,
            "fps": seq.fps,
            "indicators": asdict(seq.indicators),
            "subject": seq.subject.to_dict() if seq.subject else None,
            "gt_params": seq.gt_params.tolist(),
            "gt_joints": seq.gt_joints.tolist(),
            "checksum": _seq_checksum(seq),
        })
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "master_seed": master_seed,
        "count": len(entries),
        "subject_ids": [e["subject_id"] for e in entries],
        "checksum": hashlib.sha256("".join(e["checksum"] for e in entries).encode()).hexdigest(),
        "entries": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def read_dataset(directory) -> list:
    directory = Path(directory)
    manifest = read_manifest(directory)
    out = []
    for e in manifest["entries"]:
        subject = SubjectSpec.from_dict(e["subject"]) if e.get("subject") else None
        out.append(GaitSequence(
            frames=_read_array(directory / e["file"]),
            gt_params=np.array(e["gt_params"], dtype=np.float64),
            gt_joints=np.array(e["gt_joints"], dtype=np.float64),
            indicators=HealthIndicators(**e["indicators"]),
            subject_id=e["subject_id"],
            fps=e["fps"],
            subject=subject,
        ))
    return out


def dataset_checksum(sequences: Iterable[GaitSequence]) -> str:
    return hashlib.sha256("".join(_seq_checksum(s) for s in sequences).encode()).hexdigest()
