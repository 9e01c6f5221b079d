"""Joint trees, 6D rotations and forward kinematics.

Conventions: +Y is up, the ground plane is ``y = 0`` and distances are meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

UP_AXIS = 1


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    offsets: np.ndarray
    foot_joints: tuple[int, ...]
    rest_heights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=np.float64)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "foot_joints", tuple(int(j) for j in self.foot_joints))
        object.__setattr__(self, "offsets", offsets)
        n = len(self.joint_names)
        if n < 2:
            raise ValueError("a skeleton needs at least 2 joints")
        if len(self.parents) != n or offsets.shape != (n, 3):
            raise ValueError(
                f"expected {n} parents and offsets of shape ({n}, 3), "
                f"got {len(self.parents)} and {offsets.shape}"
            )
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; parents must precede children")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("offsets must be finite")
        if any(not 0 <= j < n for j in self.foot_joints):
            raise ValueError("foot_joints must index existing joints")
        rest = np.zeros((n, 3))
        for j in range(1, n):
            rest[j] = rest[self.parents[j]] + offsets[j]
        heights = rest[:, UP_AXIS] - rest[:, UP_AXIS].min()
        heights.setflags(write=False)
        offsets.setflags(write=False)
        object.__setattr__(self, "rest_heights", heights)

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == j]

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=-1)

    def to_json(self) -> dict:
        return {
            "names": list(self.joint_names),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "foot_joints": list(self.foot_joints),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Skeleton":
        return cls(data["names"], data["parents"], np.asarray(data["offsets"]), data["foot_joints"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_json(json.loads(Path(path).read_text()))


def default_skeleton() -> Skeleton:
    """15-joint desk skeleton; the toes touch the ground in the rest pose."""
    joints = [
        ("pelvis", -1, (0.0, 0.0, 0.0)),
        ("spine", 0, (0.0, 0.30, 0.0)),
        ("head", 1, (0.0, 0.35, 0.0)),
        ("l_shoulder", 1, (0.18, 0.05, 0.0)),
        ("l_wrist", 3, (0.0, -0.55, 0.0)),
        ("r_shoulder", 1, (-0.18, 0.05, 0.0)),
        ("r_wrist", 5, (0.0, -0.55, 0.0)),
        ("l_hip", 0, (0.10, -0.05, 0.0)),
        ("l_knee", 7, (0.0, -0.41, 0.0)),
        ("l_ankle", 8, (0.0, -0.41, 0.0)),
        ("l_toe", 9, (0.0, -0.08, 0.12)),
        ("r_hip", 0, (-0.10, -0.05, 0.0)),
        ("r_knee", 11, (0.0, -0.41, 0.0)),
        ("r_ankle", 12, (0.0, -0.41, 0.0)),
        ("r_toe", 13, (0.0, -0.08, 0.12)),
    ]
    names, parents, offsets = zip(*joints)
    foot = [names.index(n) for n in ("r_ankle", "r_toe", "l_ankle", "l_toe")]
    return Skeleton(names, parents, np.array(offsets), foot)


# -- rotations ---------------------------------------------------------------


def rot6d_to_matrix(d6: torch.Tensor) -> torch.Tensor:
    """Gram-Schmidt the two stored columns into a rotation matrix (..., 3, 3)."""
    a1, a2 = d6[..., :3], d6[..., 3:]
    b1 = torch.nn.functional.normalize(a1, dim=-1)
    b2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = torch.nn.functional.normalize(b2, dim=-1)
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(mat: torch.Tensor) -> torch.Tensor:
    return torch.cat([mat[..., :, 0], mat[..., :, 1]], dim=-1)


def axis_angle_to_matrix(axis_angle) -> np.ndarray:
    """Rodrigues formula for arrays of rotation vectors (..., 3)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    k = np.divide(v, theta, out=np.zeros_like(v), where=theta > 0)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def yaw_matrix(angle) -> np.ndarray:
    """Rotation about +Y; angle 0 faces +Z."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    m = np.zeros(angle.shape + (3, 3))
    m[..., 0, 0], m[..., 0, 2] = c, s
    m[..., 1, 1] = 1.0
    m[..., 2, 0], m[..., 2, 2] = -s, c
    return m


def _as_matrices(rotations: torch.Tensor) -> torch.Tensor:
    if rotations.shape[-1] == 6:
        return rot6d_to_matrix(rotations)
    if rotations.shape[-2:] == (3, 3):
        return rotations
    raise ValueError(f"rotations must be (..., 6) or (..., 3, 3), got {tuple(rotations.shape)}")


def fk_torch(
    offsets: torch.Tensor, parents, root_positions: torch.Tensor, rotations: torch.Tensor
) -> torch.Tensor:
    """Differentiable FK. ``rotations`` is (..., J, 6) or (..., J, 3, 3) local frames."""
    mats = _as_matrices(rotations)
    world_rot = [mats[..., 0, :, :]]
    world_pos = [root_positions]
    for j in range(1, len(parents)):
        p = parents[j]
        world_pos.append(world_pos[p] + (world_rot[p] @ offsets[j].unsqueeze(-1)).squeeze(-1))
        world_rot.append(world_rot[p] @ mats[..., j, :, :])
    return torch.stack(world_pos, dim=-2)


def forward_kinematics(skeleton: Skeleton, root_positions, local_rotations) -> np.ndarray:
    """World joint positions (F, J, 3) from root translations and local rotations.

    ``local_rotations`` may be 6D vectors (F, J, 6) or matrices (F, J, 3, 3).
    """
    root = np.asarray(root_positions, dtype=np.float64)
    rot = np.asarray(local_rotations, dtype=np.float64)
    n_frames = root.shape[0]
    if root.ndim != 2 or root.shape[1] != 3:
        raise ValueError(f"root_positions must be (F, 3), got {root.shape}")
    expected = (n_frames, skeleton.joint_count)
    if rot.shape[:2] != expected or rot.shape[2:] not in ((6,), (3, 3)):
        raise ValueError(f"local_rotations must be {expected} x (6 | 3x3), got {rot.shape}")
    if not (np.all(np.isfinite(root)) and np.all(np.isfinite(rot))):
        raise ValueError("non-finite FK input")
    with torch.no_grad():
        pos = fk_torch(
            torch.tensor(skeleton.offsets),
            skeleton.parents,
            torch.tensor(root),
            torch.tensor(rot),
        )
    return pos.numpy()


# -- inverse kinematics ------------------------------------------------------


def _align(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector a onto unit vector b."""
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    s = np.linalg.norm(v)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 0.0, 1.0])
        return axis_angle_to_matrix(np.pi * perp / np.linalg.norm(perp))
    return axis_angle_to_matrix(v / s * np.arctan2(s, c))


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation R minimizing sum |R src_i - dst_i|^2 (rows are vectors)."""
    u, _, vt = np.linalg.svd(dst.T @ src)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def inverse_kinematics(skeleton: Skeleton, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Root positions and local rotation matrices reproducing ``positions``.

    Joints with a single child get the minimal swing; twist about that bone is
    unobservable and left at zero. Leaf joints get identity rotations.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n_frames, n_joints = pos.shape[:2]
    offsets = skeleton.offsets
    local = np.tile(np.eye(3), (n_frames, n_joints, 1, 1))
    world = np.tile(np.eye(3), (n_frames, n_joints, 1, 1))
    for j in range(n_joints):
        kids = skeleton.children(j)
        p = skeleton.parents[j]
        parent_rot = world[:, p] if p >= 0 else np.tile(np.eye(3), (n_frames, 1, 1))
        if not kids:
            world[:, j] = parent_rot
            continue
        src = offsets[kids]
        use_kabsch = len(kids) >= 2 and np.linalg.matrix_rank(src, tol=1e-9) >= 2
        for f in range(n_frames):
            dst = pos[f, kids] - pos[f, j]
            if use_kabsch:
                w = _kabsch(src, dst)
            else:
                cur = parent_rot[f] @ src[0]
                w = _align(cur / np.linalg.norm(cur), dst[0] / np.linalg.norm(dst[0])) @ parent_rot[f]
            world[f, j] = w
            local[f, j] = parent_rot[f].T @ w
    return pos[:, 0].copy(), local
