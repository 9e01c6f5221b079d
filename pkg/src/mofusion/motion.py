"""Motion containers, the feature codec, ``.mot`` IO and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .skeleton import Skeleton, forward_kinematics, inverse_kinematics, matrix_to_rot6d

POSITIONS = "positions"
ROOT_ROTATIONS = "root_rotations"
MOT_VERSION = 1


class MotionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RepresentationSpec:
    kind: str
    joint_count: int
    rotation_encoding: str = "6d"

    def __post_init__(self):
        if self.kind not in (POSITIONS, ROOT_ROTATIONS):
            raise ValueError(f"unknown representation kind {self.kind!r}")
        if self.joint_count < 2:
            raise ValueError("joint_count must be >= 2")

    @property
    def feature_dim(self) -> int:
        if self.kind == POSITIONS:
            return 3 * self.joint_count
        return 3 + 6 * self.joint_count

    def to_json(self) -> dict:
        return {"kind": self.kind, "joint_count": self.joint_count, "rotation_encoding": self.rotation_encoding}

    @classmethod
    def from_json(cls, data: dict) -> "RepresentationSpec":
        return cls(data["kind"], int(data["joint_count"]), data.get("rotation_encoding", "6d"))


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """A fixed-fps feature matrix (frames x features) with a prefix validity mask."""

    fps: float
    features: np.ndarray
    mask: np.ndarray | None = None
    label: tuple[str, ...] | None = None
    spec: RepresentationSpec | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be (F >= 1, M), got {feats.shape}")
        mask = np.ones(feats.shape[0], bool) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != (feats.shape[0],):
            raise ValueError("mask must have one entry per frame")
        n_valid = int(mask.sum())
        if not mask[:n_valid].all():
            raise ValueError("mask must be a contiguous prefix of valid frames")
        if not np.all(np.isfinite(feats[:n_valid])):
            raise ValueError("features must be finite on valid frames")
        if self.spec is not None and self.spec.feature_dim != feats.shape[1]:
            raise ValueError(f"feature_dim {feats.shape[1]} does not match spec {self.spec.feature_dim}")
        feats.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "fps", float(self.fps))
        if self.label is not None:
            object.__setattr__(self, "label", tuple(self.label))

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def valid_features(self) -> np.ndarray:
        return self.features[: self.n_valid]

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return (
            self.fps == other.fps
            and self.label == other.label
            and self.spec == other.spec
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class JointPositions:
    positions: np.ndarray
    fps: float = 20.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 3 or pos.shape[-1] != 3:
            raise ValueError(f"positions must be (F, J, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", pos)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]


# -- codec -------------------------------------------------------------------


def _check(spec: RepresentationSpec, skeleton: Skeleton):
    if spec.joint_count != skeleton.joint_count:
        raise ValueError(
            f"spec has {spec.joint_count} joints but skeleton has {skeleton.joint_count}"
        )


def features_to_positions(features, spec: RepresentationSpec, skeleton: Skeleton) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if spec.kind == POSITIONS:
        return feats.reshape(n, spec.joint_count, 3)
    root = feats[:, :3]
    rot = feats[:, 3:].reshape(n, spec.joint_count, 6)
    return forward_kinematics(skeleton, root, rot)


def decode_features(motion: MotionSequence, spec: RepresentationSpec, skeleton: Skeleton) -> JointPositions:
    """Joint positions of the valid frames of ``motion``."""
    _check(spec, skeleton)
    if motion.feature_dim != spec.feature_dim:
        raise ValueError(f"motion has feature_dim {motion.feature_dim}, spec expects {spec.feature_dim}")
    return JointPositions(features_to_positions(motion.valid_features(), spec, skeleton), motion.fps)


def encode_positions(
    positions: JointPositions,
    spec: RepresentationSpec,
    skeleton: Skeleton,
    label: Sequence[str] | None = None,
    bone_tolerance: float = 0.01,
) -> MotionSequence:
    _check(spec, skeleton)
    pos = positions.positions
    if pos.shape[1] != spec.joint_count:
        raise ValueError(f"positions have {pos.shape[1]} joints, spec expects {spec.joint_count}")
    n = pos.shape[0]
    if spec.kind == POSITIONS:
        feats = pos.reshape(n, -1)
    else:
        lengths = np.linalg.norm(pos[:, 1:] - pos[:, list(skeleton.parents[1:])], axis=-1)
        rest = skeleton.bone_lengths()[1:]
        rel = np.abs(lengths - rest) / np.maximum(rest, 1e-9)
        if rel.max() > bone_tolerance:
            f, b = np.unravel_index(rel.argmax(), rel.shape)
            raise ValueError(
                f"bone {skeleton.joint_names[b + 1]} at frame {f} has length {lengths[f, b]:.4f} m, "
                f"skeleton offset is {rest[b]:.4f} m (tolerance {bone_tolerance:.0%})"
            )
        root, local = inverse_kinematics(skeleton, pos)
        d6 = matrix_to_rot6d(torch.from_numpy(local)).numpy()
        feats = np.concatenate([root, d6.reshape(n, -1)], axis=1)
    return MotionSequence(positions.fps, feats, label=label, spec=spec)


# -- normalization -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-feature z-score computed on valid training frames."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, motions: Sequence[MotionSequence], eps: float = 1e-2) -> "Normalizer":
        stacked = np.concatenate([m.valid_features().astype(np.float64) for m in motions])
        return cls(stacked.mean(0), np.maximum(stacked.std(0), eps))

    def normalize(self, x):
        return (x - self.mean.astype(np.float32)) / self.std.astype(np.float32)

    def denormalize(self, x):
        return x * self.std.astype(np.float32) + self.mean.astype(np.float32)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, data) -> "Normalizer":
        return cls(np.asarray(data["mean"], np.float64), np.asarray(data["std"], np.float64))


def pad_and_mask(batch: Sequence[MotionSequence], target_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack valid frames into (B, target_len, M) zero-padded features and (B, target_len) masks."""
    if not batch:
        raise ValueError("empty batch")
    dim = batch[0].feature_dim
    feats = np.zeros((len(batch), target_len, dim), np.float32)
    masks = np.zeros((len(batch), target_len), bool)
    for i, m in enumerate(batch):
        n = m.n_valid
        if n > target_len:
            raise ValueError(f"motion {i} has {n} frames, longer than target_len {target_len}")
        if m.feature_dim != dim:
            raise ValueError("all motions in a batch must share feature_dim")
        feats[i, :n] = m.valid_features()
        masks[i, :n] = True
    return feats, masks


# -- .mot files --------------------------------------------------------------


def save_motion(motion: MotionSequence, path) -> None:
    header = {
        "version": MOT_VERSION,
        "fps": motion.fps,
        "frames": motion.n_frames,
        "feature_dim": motion.feature_dim,
        "spec_kind": motion.spec.kind if motion.spec else None,
        "joint_count": motion.spec.joint_count if motion.spec else None,
        "label_tokens": list(motion.label) if motion.label is not None else None,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(motion.features.astype("<f4").tobytes(order="C"))
        fh.write(motion.mask.astype(np.uint8).tobytes())


def load_motion(path) -> MotionSequence:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise MotionFormatError(f"{path}: malformed header (no newline terminator)")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
        frames, dim = int(header["frames"]), int(header["feature_dim"])
        fps = header["fps"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MotionFormatError(f"{path}: malformed header ({exc})") from exc
    if header.get("version") != MOT_VERSION:
        raise MotionFormatError(f"{path}: unsupported version {header.get('version')!r}")
    expected = frames * dim * 4 + frames
    body = raw[newline + 1 :]
    if len(body) != expected:
        raise MotionFormatError(
            f"{path}: expected {expected} payload bytes for {frames}x{dim} features plus mask, "
            f"found {len(body)}"
        )
    feats = np.frombuffer(body[: frames * dim * 4], dtype="<f4").reshape(frames, dim)
    mask = np.frombuffer(body[frames * dim * 4 :], dtype=np.uint8)
    if not np.isin(mask, (0, 1)).all():
        raise MotionFormatError(f"{path}: mask bytes must be 0 or 1")
    spec = None
    if header.get("spec_kind") is not None:
        spec = RepresentationSpec(header["spec_kind"], int(header["joint_count"]))
    label = header.get("label_tokens")
    return MotionSequence(
        fps, feats.astype(np.float32), mask.astype(bool), tuple(label) if label is not None else None, spec
    )
