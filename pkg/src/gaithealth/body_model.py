"""SMPL-lite body model.

A fixed kinematic tree (SMPL's 24 joints) whose bone lengths are a linear
function of a 10-d shape vector, posed with axis-angle forward kinematics.
Coordinates are meters, y up, z forward, +x towards the subject's left.

The numpy functions are the reference API; ``fk_torch`` is the same
recursion on tensors and is what the training code differentiates through.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

SHAPE_DIM = 10
NUM_JOINTS = 24
POINTS_PER_BONE = 5
SURFACE_OFFSET = 0.03  # meters
MIN_BONE_LENGTH = 1e-3
TREE_FORMAT_VERSION = 1

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
]
SMPL_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]

# (direction, length in m) of the bone ending at each joint, template subject.
# Arms hang down in the rest pose so walking angles stay small.
_REST = {
    "pelvis": ((0, 1, 0), 0.0),
    "l_hip": ((1, -0.3, 0), 0.10),
    "r_hip": ((-1, -0.3, 0), 0.10),
    "spine1": ((0, 1, 0), 0.11),
    "l_knee": ((0, -1, 0), 0.43),
    "r_knee": ((0, -1, 0), 0.43),
    "spine2": ((0, 1, 0), 0.13),
    "l_ankle": ((0, -1, 0), 0.42),
    "r_ankle": ((0, -1, 0), 0.42),
    "spine3": ((0, 1, 0), 0.06),
    "l_foot": ((0, -0.5, 1), 0.13),
    "r_foot": ((0, -0.5, 1), 0.13),
    "neck": ((0, 1, 0), 0.21),
    "l_collar": ((1, 0.6, 0), 0.08),
    "r_collar": ((-1, 0.6, 0), 0.08),
    "head": ((0, 1, 0), 0.25),
    "l_shoulder": ((1, 0, 0), 0.11),
    "r_shoulder": ((-1, 0, 0), 0.11),
    "l_elbow": ((0, -1, 0), 0.27),
    "r_elbow": ((0, -1, 0), 0.27),
    "l_wrist": ((0, -1, 0), 0.25),
    "r_wrist": ((0, -1, 0), 0.25),
    "l_hand": ((0, -1, 0), 0.08),
    "r_hand": ((0, -1, 0), 0.08),
}

# Relative length change per unit of each shape component. Column 0 is a
# uniform scale (+10% per unit); columns 1-3 drive girth only and leave
# lengths untouched (see synth_gait.girth_proxy).
_BLEND_GROUPS = {
    4: (("l_knee", "r_knee", "l_ankle", "r_ankle"), 0.02),
    5: (("l_elbow", "r_elbow", "l_wrist", "r_wrist"), 0.03),
    6: (("l_collar", "r_collar", "l_shoulder", "r_shoulder"), 0.05),
    7: (("l_hip", "r_hip"), 0.05),
    8: (("neck", "head"), 0.03),
    9: (("l_foot", "r_foot", "l_hand", "r_hand"), 0.05),
}


class InvalidInputError(ValueError):
    pass


@dataclass
class KinematicTree:
    parent: np.ndarray
    rest_directions: np.ndarray
    rest_lengths_base: np.ndarray
    length_blend: np.ndarray
    names: Optional[list] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.rest_directions = np.asarray(self.rest_directions, dtype=np.float64)
        self.rest_lengths_base = np.asarray(self.rest_lengths_base, dtype=np.float64)
        self.length_blend = np.asarray(self.length_blend, dtype=np.float64)
        self.validate()

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent < 0)[0])

    @property
    def bones(self) -> list:
        """(parent, child) pairs for every non-root joint."""
        return [(int(p), i) for i, p in enumerate(self.parent) if p >= 0]

    def validate(self):
        n = len(self.parent)
        if (self.parent < 0).sum() != 1:
            raise InvalidInputError("tree must have exactly one root")
        for i in range(n):
            seen, j = set(), i
            while self.parent[j] >= 0:
                if j in seen or self.parent[j] >= n:
                    raise InvalidInputError(f"joint {i} does not reach the root")
                seen.add(j)
                j = self.parent[j]
        if self.rest_directions.shape != (n, 3):
            raise InvalidInputError("rest_directions must be (J, 3)")
        if np.abs(np.linalg.norm(self.rest_directions, axis=1) - 1.0).max() > 1e-9:
            raise InvalidInputError("rest_directions must be unit vectors")
        if self.rest_lengths_base.shape != (n,) or (self.rest_lengths_base < 0).any():
            raise InvalidInputError("rest_lengths_base must be (J,) and non-negative")
        if self.length_blend.shape != (n, SHAPE_DIM):
            raise InvalidInputError(f"length_blend must be (J, {SHAPE_DIM})")

    def order(self) -> list:
        """Joint indices sorted so that parents precede children."""
        if "order" not in self._cache:
            depth = np.zeros(self.joint_count, dtype=int)
            for i in range(self.joint_count):
                j = i
                while self.parent[j] >= 0:
                    depth[i] += 1
                    j = self.parent[j]
            self._cache["order"] = list(np.argsort(depth, kind="stable"))
        return self._cache["order"]

    def surface_basis(self) -> np.ndarray:
        """(J, POINTS_PER_BONE, 3) fixed unit offsets perpendicular to each rest bone."""
        if "basis" not in self._cache:
            out = np.zeros((self.joint_count, POINTS_PER_BONE, 3))
            phis = 2 * np.pi * np.arange(POINTS_PER_BONE) / POINTS_PER_BONE
            for i, d in enumerate(self.rest_directions):
                a = np.array([1.0, 0, 0]) if abs(d[0]) < 0.9 else np.array([0, 1.0, 0])
                e1 = a - a.dot(d) * d
                e1 /= np.linalg.norm(e1)
                e2 = np.cross(d, e1)
                out[i] = np.cos(phis)[:, None] * e1 + np.sin(phis)[:, None] * e2
            self._cache["basis"] = out
        return self._cache["basis"]

    def to_dict(self) -> dict:
        return {
            "version": TREE_FORMAT_VERSION,
            "joint_count": self.joint_count,
            "names": self.names,
            "parent": self.parent.tolist(),
            "rest_directions": self.rest_directions.tolist(),
            "rest_lengths_base": self.rest_lengths_base.tolist(),
            "length_blend": self.length_blend.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicTree":
        if d.get("version") != TREE_FORMAT_VERSION:
            raise InvalidInputError(f"unsupported tree format version {d.get('version')}")
        return cls(d["parent"], d["rest_directions"], d["rest_lengths_base"],
                   d["length_blend"], names=d.get("names"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "KinematicTree":
        return cls.from_dict(json.loads(text))


def smpl_tree() -> KinematicTree:
    """The default 24-joint tree with the SMPL hierarchy."""
    dirs = np.array([_REST[n][0] for n in JOINT_NAMES], dtype=np.float64)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    base = np.array([_REST[n][1] for n in JOINT_NAMES])
    blend = np.zeros((NUM_JOINTS, SHAPE_DIM))
    blend[:, 0] = 0.1 * base
    for col, (names, rel) in _BLEND_GROUPS.items():
        for n in names:
            i = JOINT_NAMES.index(n)
            blend[i, col] = rel * base[i]
    return KinematicTree(SMPL_PARENTS, dirs, base, blend, names=list(JOINT_NAMES))


@dataclass
class BodyParams:
    shape: np.ndarray  # (10,)
    pose: np.ndarray  # (J, 3) axis-angle, radians
    camera: np.ndarray  # (scale, tx, ty)

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.camera = np.asarray(self.camera, dtype=np.float64)

    def validate(self):
        if not (np.isfinite(self.shape).all() and np.isfinite(self.pose).all()
                and np.isfinite(self.camera).all()):
            raise InvalidInputError("body parameters must be finite")
        if (np.linalg.norm(self.pose, axis=-1) >= 2 * np.pi).any():
            raise InvalidInputError("axis-angle magnitudes must be < 2*pi")
        if self.camera[0] <= 0:
            raise InvalidInputError("camera scale must be positive")

    def to_vector(self) -> np.ndarray:
        """Flat 85-vector (shape, pose, camera)."""
        return np.concatenate([self.shape, self.pose.ravel(), self.camera])

    @classmethod
    def from_vector(cls, v) -> "BodyParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:SHAPE_DIM], v[SHAPE_DIM:-3].reshape(-1, 3), v[-3:])


def bone_lengths(tree: KinematicTree, shape) -> np.ndarray:
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != (SHAPE_DIM,) or not np.isfinite(shape).all():
        raise InvalidInputError("shape must be a finite 10-vector")
    lengths = np.maximum(tree.rest_lengths_base + tree.length_blend @ shape, MIN_BONE_LENGTH)
    lengths[tree.root] = 0.0
    return lengths


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """(..., 3) axis-angle -> (..., 3, 3) rotation matrices.

    Angles below 1e-8 use R = I + [w]x; the branch is gradient-safe.
    """
    sq = (axis_angle ** 2).sum(-1, keepdim=True)
    small = sq < 1e-16
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    angle = torch.sqrt(safe_sq)
    a = torch.where(small, torch.ones_like(sq), torch.sin(angle) / angle)
    b = torch.where(small, torch.zeros_like(sq), (1 - torch.cos(angle)) / safe_sq)
    x, y, z = axis_angle.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(*x.shape, 3, 3)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device).expand_as(k)
    return eye + a[..., None] * k + b[..., None] * (k @ k)


class TreeTensors:
    """Tensor copies of a tree's constants for batched FK."""

    def __init__(self, tree: KinematicTree, dtype=torch.float32):
        self.tree = tree
        self.dtype = dtype
        self.dirs = torch.as_tensor(tree.rest_directions, dtype=dtype)
        self.base = torch.as_tensor(tree.rest_lengths_base, dtype=dtype)
        self.blend = torch.as_tensor(tree.length_blend, dtype=dtype)
        self.basis = torch.as_tensor(tree.surface_basis(), dtype=dtype)
        self.root_mask = torch.zeros(tree.joint_count, dtype=dtype)
        self.root_mask[tree.root] = 1.0
        self.fractions = torch.as_tensor(
            (np.arange(POINTS_PER_BONE) + 0.5) / POINTS_PER_BONE, dtype=dtype)


def lengths_torch(tt: TreeTensors, shape: torch.Tensor) -> torch.Tensor:
    lengths = torch.clamp(tt.base + shape @ tt.blend.T, min=MIN_BONE_LENGTH)
    return lengths * (1 - tt.root_mask)


def fk_torch(tt: TreeTensors, shape: torch.Tensor, pose: torch.Tensor):
    """Batched FK. shape (..., 10), pose (..., J, 3) -> joints (..., J, 3), global rotations."""
    tree = tt.tree
    lengths = lengths_torch(tt, shape)
    local = rodrigues(pose)
    joints = [None] * tree.joint_count
    rots = [None] * tree.joint_count
    for i in tree.order():
        p = tree.parent[i]
        if p < 0:
            joints[i] = torch.zeros_like(pose[..., i, :])
            rots[i] = local[..., i, :, :]
        else:
            offset = lengths[..., i, None] * tt.dirs[i]
            joints[i] = joints[p] + (rots[p] @ offset[..., None])[..., 0]
            rots[i] = rots[p] @ local[..., i, :, :]
    return torch.stack(joints, -2), torch.stack(rots, -3)


def surface_torch(tt: TreeTensors, shape: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
    """(..., J*POINTS_PER_BONE, 3) surface points attached to posed bones."""
    joints, rots = fk_torch(tt, shape, pose)
    parent = torch.as_tensor(np.where(tt.tree.parent < 0, np.arange(tt.tree.joint_count), tt.tree.parent))
    start = joints[..., parent, :]
    bone_rot = rots[..., parent, :, :]
    f = tt.fractions[:, None]
    axial = start[..., None, :] + f * (joints - start)[..., None, :]
    radial = torch.einsum("...jab,jkb->...jka", bone_rot, tt.basis) * SURFACE_OFFSET
    pts = axial + radial
    return pts.reshape(*pts.shape[:-3], -1, 3)


def _as_tensors(tree, params: BodyParams):
    params.validate()
    tt = TreeTensors(tree, torch.float64)
    return tt, torch.as_tensor(params.shape), torch.as_tensor(params.pose)


def forward_kinematics(tree: KinematicTree, params: BodyParams) -> np.ndarray:
    """(J, 3) joint positions in meters, root at the origin."""
    bone_lengths(tree, params.shape)  # input validation
    tt, shape, pose = _as_tensors(tree, params)
    with torch.no_grad():
        joints, _ = fk_torch(tt, shape, pose)
    return joints.numpy()


def surface_points(tree: KinematicTree, params: BodyParams) -> np.ndarray:
    """(J*5, 3) points: five per bone at fixed fractions, offset 3 cm radially."""
    bone_lengths(tree, params.shape)
    tt, shape, pose = _as_tensors(tree, params)
    with torch.no_grad():
        return surface_torch(tt, shape, pose).numpy()


def total_limb_length(joints, tree: KinematicTree) -> float:
    joints = np.asarray(joints, dtype=np.float64)
    total = limb_lengths(joints, tree).sum(-1)
    return float(total) if np.ndim(total) == 0 else total


def limb_lengths(joints, tree: KinematicTree) -> np.ndarray:
    """Per-bone lengths measured from joint positions, (..., J-1)."""
    joints = np.asarray(joints, dtype=np.float64)
    child = [c for _, c in tree.bones]
    par = [p for p, _ in tree.bones]
    return np.linalg.norm(joints[..., child, :] - joints[..., par, :], axis=-1)


def project_weak_perspective(joints, camera) -> np.ndarray:
    joints = np.asarray(joints, dtype=np.float64)
    s, tx, ty = np.asarray(camera, dtype=np.float64)
    return s * joints[..., :2] + np.array([tx, ty])


def project_torch(joints: torch.Tensor, camera: torch.Tensor) -> torch.Tensor:
    return camera[..., None, :1] * joints[..., :2] + camera[..., None, 1:]


def rest_joints(tree: KinematicTree, shape: Optional[Sequence[float]] = None) -> np.ndarray:
    """Zero-pose joints: offsets accumulate along the tree without rotation."""
    shape = np.zeros(SHAPE_DIM) if shape is None else shape
    lengths = bone_lengths(tree, shape)
    joints = np.zeros((tree.joint_count, 3))
    for i in tree.order():
        p = tree.parent[i]
        if p >= 0:
            joints[i] = joints[p] + lengths[i] * tree.rest_directions[i]
    return joints
