"""Procedural labeled motion corpus for the default skeleton.

Every generator returns world joint positions plus ground-truth contact labels
for the foot joints, so detectors can be scored against construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .motion import POSITIONS, JointPositions, MotionSequence, RepresentationSpec, encode_positions
from .skeleton import Skeleton, default_skeleton, yaw_matrix

CLASS_LABELS: dict[str, tuple[str, ...]] = {
    "walk_forward": ("walk", "forward"),
    "walk_circle": ("walk", "in", "a", "circle"),
    "arm_wave": ("wave", "arm"),
    "squat": ("squat", "down"),
    "jump": ("jump", "up"),
    # injected foot sliding; same prompt as the clean walk
    "walk_forward_skate": ("walk", "forward"),
}
DEFAULT_CLASSES = ("walk_forward", "walk_circle", "arm_wave", "squat")

PAD = "<pad>"


class Vocabulary:
    """Closed word list; id 0 is padding and the empty sequence is the null condition."""

    def __init__(self, words):
        self.words = (PAD,) + tuple(sorted(set(words) - {PAD}))
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, tokens, max_len: int | None = None) -> list[int]:
        unknown = [t for t in tokens if t not in self._ids]
        if unknown:
            raise KeyError(f"tokens not in vocabulary: {unknown}")
        ids = [self._ids[t] for t in tokens]
        if max_len is not None:
            if len(ids) > max_len:
                raise ValueError(f"prompt has {len(ids)} tokens, limit is {max_len}")
            ids = ids + [0] * (max_len - len(ids))
        return ids

    def decode(self, ids) -> tuple[str, ...]:
        return tuple(self.words[i] for i in ids if i != 0)

    def to_json(self) -> list[str]:
        return list(self.words[1:])

    @classmethod
    def from_json(cls, words) -> "Vocabulary":
        return cls(words)


def default_vocabulary() -> Vocabulary:
    return Vocabulary(w for label in CLASS_LABELS.values() for w in label)


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple[str, ...] = DEFAULT_CLASSES
    samples_per_class: int = 64
    length_range: tuple[int, int] = (32, 64)
    fps: float = 20.0
    seed: int = 0
    representation: str = POSITIONS


# -- body helpers ------------------------------------------------------------

_SK = default_skeleton()
_J = {n: i for i, n in enumerate(_SK.joint_names)}
THIGH = float(np.linalg.norm(_SK.offsets[_J["l_knee"]]))
SHIN = float(np.linalg.norm(_SK.offsets[_J["l_ankle"]]))
ARM = float(np.linalg.norm(_SK.offsets[_J["l_wrist"]]))
ANKLE_REST = float(_SK.rest_heights[_J["l_ankle"]])
UP = np.array([0.0, 1.0, 0.0])


def _rot(yaw, v):
    return np.einsum("fij,j->fi", yaw_matrix(yaw), np.asarray(v, float))


def _two_bone(hip, ankle, forward):
    """Knee position bending towards ``forward``; pulls the ankle in if out of reach."""
    d = ankle - hip
    dist = np.linalg.norm(d, axis=-1, keepdims=True)
    u = d / dist
    reach = np.clip(dist, abs(THIGH - SHIN) + 1e-6, THIGH + SHIN - 1e-6)
    ankle = hip + u * reach
    a = (THIGH**2 - SHIN**2 + reach**2) / (2 * reach)
    h = np.sqrt(np.maximum(THIGH**2 - a**2, 0.0))
    n = forward - (forward * u).sum(-1, keepdims=True) * u
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return hip + a * u + h * n, ankle


def _arm_dir(side, swing, raise_):
    """Unit arm vector in the body frame: ``swing`` forward, ``raise_`` sideways from hanging."""
    return np.stack(
        [side * np.sin(raise_), -np.cos(raise_) * np.cos(swing), np.cos(raise_) * np.sin(swing)], -1
    )


def _assemble(pelvis, yaw, ankles, foot_yaws, arm_angles):
    """Full (F, J, 3) pose from pelvis path, ankle targets and arm angles.

    ``ankles`` / ``foot_yaws`` map 'l'/'r' to per-frame arrays; ``arm_angles``
    maps 'l'/'r' to (swing, raise) per-frame arrays.
    """
    n = pelvis.shape[0]
    pos = np.zeros((n, _SK.joint_count, 3))
    off = _SK.offsets
    pos[:, _J["pelvis"]] = pelvis
    pos[:, _J["spine"]] = pelvis + _rot(yaw, off[_J["spine"]])
    pos[:, _J["head"]] = pos[:, _J["spine"]] + _rot(yaw, off[_J["head"]])
    forward = _rot(yaw, (0.0, 0.0, 1.0))
    for s, sign in (("l", 1.0), ("r", -1.0)):
        sh = pos[:, _J["spine"]] + _rot(yaw, off[_J[f"{s}_shoulder"]])
        pos[:, _J[f"{s}_shoulder"]] = sh
        swing, raise_ = arm_angles[s]
        arm = _arm_dir(sign, np.broadcast_to(swing, (n,)), np.broadcast_to(raise_, (n,)))
        pos[:, _J[f"{s}_wrist"]] = sh + ARM * np.einsum("fij,fj->fi", yaw_matrix(yaw), arm)
        hip = pelvis + _rot(yaw, off[_J[f"{s}_hip"]])
        knee, ankle = _two_bone(hip, ankles[s], forward)
        pos[:, _J[f"{s}_hip"]] = hip
        pos[:, _J[f"{s}_knee"]] = knee
        pos[:, _J[f"{s}_ankle"]] = ankle
        pos[:, _J[f"{s}_toe"]] = ankle + _rot(foot_yaws[s], off[_J[f"{s}_toe"]])
    return pos


def _contacts(left, right):
    """Ground-truth contact columns ordered like ``skeleton.foot_joints`` (r_ankle, r_toe, l_ankle, l_toe)."""
    return np.stack([right, right, left, left], axis=1)


# -- generators --------------------------------------------------------------


def _walk(t, rng, path, skate=0.0):
    cadence = rng.uniform(0.9, 1.1)
    speed = rng.uniform(0.5, 0.9)
    lift = rng.uniform(0.08, 0.12)
    tc, duty = 1.0 / cadence, 0.6
    pos_fn, yaw_fn = path(speed)

    ankles, yaws, contact, swings = {}, {}, {}, {}
    for s, sign, off in (("l", 1.0, 0.0), ("r", -1.0, 0.5)):
        def plant(c):
            tm = (c + duty / 2 - off) * tc
            return pos_fn(tm) + _rot(yaw_fn(tm), (sign * 0.10, 0.0, 0.0)) + ANKLE_REST * UP, tm

        def stance(c, time):
            p, tm = plant(c)
            return p + skate * (time - tm)[:, None] * _rot(yaw_fn(tm), (0.0, 0.0, 1.0))

        phase = t / tc + off
        c = np.floor(phase)
        phi = phase - c
        on = phi < duty
        u = np.clip((phi - duty) / (1 - duty), 0.0, 1.0)
        w = (1 - np.cos(np.pi * u)) / 2
        a0 = stance(c, (c + duty - off) * tc)
        a1 = stance(c + 1, (c + 1 - off) * tc)
        swing_pos = a0 + w[:, None] * (a1 - a0) + (lift * np.sin(np.pi * u))[:, None] * UP
        ankles[s] = np.where(on[:, None], stance(c, t), swing_pos)
        y0, y1 = yaw_fn(plant(c)[1]), yaw_fn(plant(c + 1)[1])
        yaws[s] = np.where(on, y0, y0 + w * (y1 - y0))
        contact[s] = on
        swings[s] = 0.35 * np.sin(2 * np.pi * (phase + 0.25))

    pelvis = pos_fn(t) + (0.86 + 0.015 * np.cos(4 * np.pi * t / tc))[:, None] * UP
    # arms swing against the same-side leg
    arms = {"l": (swings["r"], 0.08), "r": (swings["l"], 0.08)}
    pos = _assemble(pelvis, yaw_fn(t), ankles, yaws, arms)
    return pos, _contacts(contact["l"], contact["r"])


def _straight(speed):
    def pos_fn(t):
        t = np.asarray(t, float)
        return np.stack([np.zeros_like(t), np.zeros_like(t), speed * t], -1)

    return pos_fn, lambda t: np.zeros_like(np.asarray(t, float))


def _circle(radius, turn):
    def path(speed):
        omega = turn * speed / radius

        def pos_fn(t):
            t = np.asarray(t, float)
            return np.stack(
                [speed / omega * (1 - np.cos(omega * t)), np.zeros_like(t), speed / omega * np.sin(omega * t)], -1
            )

        return pos_fn, lambda t: omega * np.asarray(t, float)

    return path


def _stand(n, sway=0.0, height=0.90):
    pelvis = np.zeros((n, 3))
    pelvis[:, 0] = sway
    pelvis[:, 1] = height
    return pelvis


def walk_forward(t, rng):
    return _walk(t, rng, _straight)


def walk_forward_skate(t, rng):
    return _walk(t, rng, _straight, skate=rng.uniform(0.15, 0.3))


def walk_circle(t, rng):
    return _walk(t, rng, _circle(rng.uniform(1.5, 2.5), rng.choice([-1.0, 1.0])))


def arm_wave(t, rng):
    n = t.shape[0]
    freq, phase = rng.uniform(1.0, 2.0), rng.uniform(0, 2 * np.pi)
    sway = 0.02 * np.sin(2 * np.pi * 0.5 * t + phase)
    pelvis = _stand(n, sway=sway)
    feet = {s: np.tile([sign * 0.10, ANKLE_REST, 0.0], (n, 1)) for s, sign in (("l", 1.0), ("r", -1.0))}
    wave = 2.5 + 0.35 * np.sin(2 * np.pi * freq * t + phase)
    waving = "l" if rng.random() < 0.5 else "r"
    arms = {s: ((0.2, wave) if s == waving else (0.0, 0.1)) for s in ("l", "r")}
    zero = np.zeros(n)
    pos = _assemble(pelvis, zero, feet, {"l": zero, "r": zero}, arms)
    on = np.ones(n, bool)
    return pos, _contacts(on, on)


def squat(t, rng):
    n = t.shape[0]
    depth, period, phase = rng.uniform(0.25, 0.4), rng.uniform(1.5, 2.5), rng.uniform(-0.3, 0.3)
    frac = (1 - np.cos(2 * np.pi * t / period + phase)) / 2
    pelvis = np.stack([np.zeros(n), 0.90 - depth * frac, -0.35 * depth * frac], -1)
    feet = {s: np.tile([sign * 0.12, ANKLE_REST, 0.0], (n, 1)) for s, sign in (("l", 1.0), ("r", -1.0))}
    arms = {s: (np.pi / 2 * frac, 0.05) for s in ("l", "r")}
    zero = np.zeros(n)
    pos = _assemble(pelvis, zero, feet, {"l": zero, "r": zero}, arms)
    on = np.ones(n, bool)
    return pos, _contacts(on, on)


def jump(t, rng, g=9.81):
    n = t.shape[0]
    height = rng.uniform(0.2, 0.35)
    v0 = np.sqrt(2 * g * height)
    flight = 2 * v0 / g
    t0 = rng.uniform(0.1, max(0.1, t[-1] - 1.5))
    crouch, push, land = 0.3, 0.15, 0.3
    t1 = t0 + crouch + push
    y = np.full(n, 0.90)
    down = (t >= t0) & (t < t0 + crouch)
    y[down] = 0.90 - 0.18 * (1 - np.cos(np.pi * (t[down] - t0) / crouch)) / 2
    up = (t >= t0 + crouch) & (t < t1)
    y[up] = 0.72 + 0.18 * (t[up] - t0 - crouch) / push
    air = (t >= t1) & (t < t1 + flight)
    tau = t[air] - t1
    y[air] = 0.90 + v0 * tau - g * tau**2 / 2
    rec = (t >= t1 + flight) & (t < t1 + flight + land)
    y[rec] = 0.90 - 0.12 * np.sin(np.pi * (t[rec] - t1 - flight) / land)
    pelvis = _stand(n, height=y)
    lift = np.where(air, y - 0.90, 0.0)
    feet = {
        s: np.stack([np.full(n, sign * 0.10), ANKLE_REST + lift, np.zeros(n)], -1)
        for s, sign in (("l", 1.0), ("r", -1.0))
    }
    arms = {s: (0.0, 0.1 + 0.4 * air) for s in ("l", "r")}
    zero = np.zeros(n)
    pos = _assemble(pelvis, zero, feet, {"l": zero, "r": zero}, arms)
    return pos, _contacts(~air, ~air)


GENERATORS: dict[str, Callable] = {
    "walk_forward": walk_forward,
    "walk_circle": walk_circle,
    "arm_wave": arm_wave,
    "squat": squat,
    "jump": jump,
    "walk_forward_skate": walk_forward_skate,
}
CLASS_IDS = {name: i for i, name in enumerate(GENERATORS)}


def synth_motion(name: str, n_frames: int, fps: float = 20.0, seed=0) -> tuple[JointPositions, np.ndarray]:
    """One motion of class ``name``: positions and (F, 4) ground-truth foot contacts."""
    if name not in GENERATORS:
        raise KeyError(f"unknown motion class {name!r}; choose from {sorted(GENERATORS)}")
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / fps
    pos, contacts = GENERATORS[name](t, rng)
    return JointPositions(pos, fps), contacts


def synth_dataset(config: SynthConfig = SynthConfig(), skeleton: Skeleton | None = None) -> list[MotionSequence]:
    """Deterministic labeled corpus, ``samples_per_class`` motions per class in class order."""
    if not config.classes:
        raise ValueError("classes must not be empty")
    unknown = [c for c in config.classes if c not in GENERATORS]
    if unknown:
        raise ValueError(f"unknown motion classes {unknown}; choose from {sorted(GENERATORS)}")
    lo, hi = config.length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length_range {config.length_range}")
    skeleton = skeleton or default_skeleton()
    spec = RepresentationSpec(config.representation, skeleton.joint_count)
    out = []
    for name in config.classes:
        for i in range(config.samples_per_class):
            rng = np.random.default_rng((config.seed, CLASS_IDS[name], i))
            n = int(rng.integers(lo, hi + 1))
            sub_seed = int(rng.integers(2**63))
            positions, _ = synth_motion(name, n, config.fps, seed=sub_seed)
            out.append(encode_positions(positions, spec, skeleton, label=CLASS_LABELS[name]))
    return out
