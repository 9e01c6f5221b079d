"""Foot contact detection, skating segments and optimization-based cleanup.

Heights are measured from each foot joint's rest height, so an ankle resting
8 cm above a toe on flat ground still reads as height 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .motion import POSITIONS, MotionSequence, RepresentationSpec
from .skeleton import UP_AXIS, Skeleton, fk_torch, matrix_to_rot6d, rot6d_to_matrix

HORIZONTAL = [a for a in range(3) if a != UP_AXIS]


@dataclass(frozen=True)
class ContactConfig:
    height_thresh: float = 0.06
    speed_thresh: float = 0.5
    skate_speed_thresh: float = 0.05
    min_segment_frames: int = 3
    force_thresh: float = 0.02
    proxy: str = "heuristic"

    def __post_init__(self):
        if min(self.height_thresh, self.speed_thresh, self.skate_speed_thresh, self.force_thresh) <= 0:
            raise ValueError("contact thresholds must be positive")
        if self.min_segment_frames < 1:
            raise ValueError("min_segment_frames must be >= 1")
        if self.proxy not in ("heuristic", "learned"):
            raise ValueError("proxy must be 'heuristic' or 'learned'")


@dataclass(frozen=True)
class ContactSegment:
    joint: int  # skeleton joint index, one of skeleton.foot_joints
    start: int
    end: int  # exclusive
    anchor: tuple[float, float, float]

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("segment end must exceed start")
        if not all(math.isfinite(a) for a in self.anchor):
            raise ValueError("anchor must be finite")

    @property
    def frame_range(self) -> range:
        return range(self.start, self.end)

    def to_json(self) -> dict:
        return {"joint": self.joint, "start": self.start, "end": self.end, "anchor": list(self.anchor)}


@dataclass(frozen=True)
class CleanupConfig:
    w_pose: float = 1.0
    w_foot: float = 10.0
    w_traj: float = 1.0
    w_vgrf: float = 0.1
    step_size: float = 0.01
    iterations: int = 100
    tolerance: float = 1e-6

    def __post_init__(self):
        weights = (self.w_pose, self.w_foot, self.w_traj, self.w_vgrf)
        if min(weights) < 0 or max(weights) <= 0:
            raise ValueError("cleanup weights must be non-negative with at least one positive")
        if self.step_size <= 0 or self.iterations < 0:
            raise ValueError("step_size must be positive and iterations non-negative")


# -- kinematic signals --------------------------------------------------------


def _to_tensor(positions) -> torch.Tensor:
    if isinstance(positions, torch.Tensor):
        return positions
    return torch.tensor(np.asarray(getattr(positions, "positions", positions)), dtype=torch.float64)


def foot_signals(pos: torch.Tensor, skeleton: Skeleton, fps: float):
    """(height above rest, speed, horizontal speed) for each foot joint, shaped (F, K).

    A frame's speed is the smaller of its backward and forward difference speeds,
    so the landing and lift-off frames of a planted foot read as still.
    """
    feet = list(skeleton.foot_joints)
    p = pos[:, feet]
    rest = torch.as_tensor(skeleton.rest_heights[feet], dtype=p.dtype)
    height = p[..., UP_AXIS] - rest
    if p.shape[0] < 2:
        zero = torch.zeros_like(height)
        return height, zero, zero
    d = (p[1:] - p[:-1]) * fps
    full = torch.sqrt((d * d).sum(-1) + 1e-12)
    horiz = torch.sqrt((d[..., HORIZONTAL] ** 2).sum(-1) + 1e-12)

    def one_sided_min(v):
        fwd = torch.cat([v, v[-1:]], dim=0)
        bwd = torch.cat([v[:1], v], dim=0)
        return torch.minimum(fwd, bwd)

    return height, one_sided_min(full), one_sided_min(horiz)


class LearnedVGRF(torch.nn.Module):
    """Logistic contact regressor on (height, horizontal speed, vertical speed)."""

    def __init__(self):
        super().__init__()
        self.linear = torch.nn.Linear(3, 1).double()

    def inputs(self, pos, skeleton, fps):
        height, speed, hspeed = foot_signals(pos, skeleton, fps)
        vspeed = torch.sqrt(torch.clamp(speed**2 - hspeed**2, min=0) + 1e-12)
        return torch.stack([height * 10, hspeed, vspeed], dim=-1)

    def forward(self, pos, skeleton, fps):
        return torch.sigmoid(self.linear(self.inputs(pos, skeleton, fps))[..., 0])

    @classmethod
    def fit(cls, samples, skeleton: Skeleton, fps: float, seed: int = 0) -> "LearnedVGRF":
        """Fit on (positions (F, J, 3), contact labels (F, K)) pairs."""
        torch.manual_seed(seed)
        model = cls()
        x = torch.cat([model.inputs(_to_tensor(p), skeleton, fps).reshape(-1, 3) for p, _ in samples])
        y = torch.cat([torch.as_tensor(np.asarray(c, np.float64)).reshape(-1) for _, c in samples])
        opt = torch.optim.LBFGS(model.parameters(), max_iter=200, line_search_fn="strong_wolfe")

        def closure():
            opt.zero_grad()
            loss = torch.nn.functional.binary_cross_entropy_with_logits(model.linear(x)[:, 0], y)
            loss.backward()
            return loss

        opt.step(closure)
        return model


def vgrf_proxy(positions, skeleton: Skeleton, fps: float, config: ContactConfig = ContactConfig(),
               learned: LearnedVGRF | None = None, normalize: bool = True):
    """Per-frame support estimate for each foot joint, (F, K).

    Heuristic: max(0, 1 - h / h_t) * max(0, 1 - v / v_t). Normalized values are
    divided by the number of foot joints so all feet flat and still sum to 1.
    Returns a tensor when given a tensor, else an ndarray.
    """
    if not skeleton.foot_joints:
        raise ValueError("skeleton has no foot joints")
    pos = _to_tensor(positions)
    if config.proxy == "learned":
        if learned is None:
            raise ValueError("learned proxy requested without a fitted regressor")
        force = learned(pos, skeleton, fps)
    else:
        height, speed, _ = foot_signals(pos, skeleton, fps)
        force = torch.clamp(1 - height / config.height_thresh, min=0) * torch.clamp(
            1 - speed / config.speed_thresh, min=0
        )
    if normalize:
        force = force / len(skeleton.foot_joints)
    return force if isinstance(positions, torch.Tensor) else force.detach().numpy()


# -- contacts and segments ----------------------------------------------------------


def _runs(flags: np.ndarray):
    """(start, end) of each run of True values."""
    padded = np.concatenate([[False], flags, [False]]).astype(np.int8)
    edges = np.diff(padded)
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def _clean_timeline(flags: np.ndarray, min_frames: int) -> np.ndarray:
    out = flags.copy()
    # close single-frame gaps between contacts
    gaps = _runs(~out)
    for s, e in gaps:
        if s > 0 and e < len(out) and e - s < 2:
            out[s:e] = True
    for s, e in _runs(out):
        if e - s < min_frames:
            out[s:e] = False
    return out


def detect_contacts(positions, skeleton: Skeleton, fps: float, config: ContactConfig = ContactConfig(),
                    learned: LearnedVGRF | None = None) -> np.ndarray:
    """Boolean contact timeline (F, K) with K = len(skeleton.foot_joints)."""
    pos = _to_tensor(positions).detach()
    if config.proxy == "learned":
        raw = vgrf_proxy(pos, skeleton, fps, config, learned).detach().numpy() > config.force_thresh
    else:
        height, speed, _ = foot_signals(pos, skeleton, fps)
        raw = ((height < config.height_thresh) & (speed < config.speed_thresh)).numpy()
    return np.stack([_clean_timeline(raw[:, k], config.min_segment_frames) for k in range(raw.shape[1])], 1)


def extract_skating_segments(contacts: np.ndarray, positions, skeleton: Skeleton, fps: float,
                             config: ContactConfig = ContactConfig()) -> list[ContactSegment]:
    pos = _to_tensor(positions).detach()
    _, _, hspeed = foot_signals(pos, skeleton, fps)
    hspeed = hspeed.numpy()
    pos = pos.numpy()
    segments = []
    for k, j in enumerate(skeleton.foot_joints):
        for s, e in _runs(contacts[:, k]):
            if e - s < config.min_segment_frames or hspeed[s:e, k].mean() <= config.skate_speed_thresh:
                continue
            mid = s + (e - s) // 2
            anchor = pos[mid, j].copy()
            anchor[UP_AXIS] = max(anchor[UP_AXIS], skeleton.rest_heights[j])
            segments.append(ContactSegment(j, int(s), int(e), tuple(float(a) for a in anchor)))
    return segments


def skate_ratio(positions, skeleton: Skeleton, fps: float, config: ContactConfig = ContactConfig(),
                learned: LearnedVGRF | None = None) -> float:
    """Share of contact frames whose horizontal foot speed exceeds the skate threshold, averaged over feet."""
    pos = _to_tensor(positions).detach()
    contacts = detect_contacts(pos, skeleton, fps, config, learned)
    _, _, hspeed = foot_signals(pos, skeleton, fps)
    ratios = [
        float((hspeed[:, k].numpy()[contacts[:, k]] > config.skate_speed_thresh).mean())
        for k in range(contacts.shape[1])
        if contacts[:, k].any()
    ]
    return float(np.mean(ratios)) if ratios else 0.0


# -- losses ----------------------------------------------------------------------


def foot_loss(pos: torch.Tensor, segments: list[ContactSegment]) -> torch.Tensor:
    """Sum over segments and their frames of |P_j(f) - p|^2."""
    total = pos.new_zeros(())
    for seg in segments:
        anchor = torch.as_tensor(seg.anchor, dtype=pos.dtype)
        total = total + ((pos[seg.start : seg.end, seg.joint] - anchor) ** 2).sum()
    return total


def skating_mask(n_frames: int, skeleton: Skeleton, segments: list[ContactSegment]) -> np.ndarray:
    """(F, K) true on segment frames of the segment's foot joint."""
    mask = np.zeros((n_frames, len(skeleton.foot_joints)), bool)
    for seg in segments:
        mask[seg.start : seg.end, skeleton.foot_joints.index(seg.joint)] = True
    return mask


def auxiliary_losses(original: torch.Tensor, candidate: torch.Tensor, skeleton: Skeleton, fps: float,
                     segments: list[ContactSegment] = (), config: ContactConfig = ContactConfig(),
                     learned: LearnedVGRF | None = None):
    """(L_pose, L_trajectory, L_vGRFs) of ``candidate`` against ``original`` positions (F, J, 3)."""
    feet = set(skeleton.foot_joints)
    body = [j for j in range(1, skeleton.joint_count) if j not in feet]
    rel_c = candidate[:, body] - candidate[:, :1]
    rel_o = original[:, body] - original[:, :1]
    l_pose = ((rel_c - rel_o) ** 2).sum(-1).mean()
    l_traj = ((candidate[:, 0, HORIZONTAL] - original[:, 0, HORIZONTAL]) ** 2).sum(-1).mean()
    keep = torch.as_tensor(~skating_mask(candidate.shape[0], skeleton, list(segments)))
    f_c = vgrf_proxy(candidate, skeleton, fps, config, learned)
    f_o = vgrf_proxy(original, skeleton, fps, config, learned)
    diff = (f_c - f_o) ** 2
    l_vgrf = (diff * keep).sum() / keep.sum().clamp(min=1)
    return l_pose, l_traj, l_vgrf


def combined_loss(original, candidate, segments, skeleton, fps, weights: CleanupConfig,
                  config: ContactConfig = ContactConfig(), learned=None) -> torch.Tensor:
    l_pose, l_traj, l_vgrf = auxiliary_losses(original, candidate, skeleton, fps, segments, config, learned)
    return (weights.w_pose * l_pose + weights.w_foot * foot_loss(candidate, segments)
            + weights.w_traj * l_traj + weights.w_vgrf * l_vgrf)


# -- cleanup ---------------------------------------------------------------------


@dataclass
class CleanupReport:
    segments: list[ContactSegment]
    loss_curve: list[float] = field(default_factory=list)
    skate_ratio_before: float = 0.0
    skate_ratio_after: float = 0.0
    max_pose_deviation_m: float = 0.0
    warning: str | None = None

    def to_json(self) -> dict:
        return {
            "segments": [s.to_json() for s in self.segments],
            "loss_curve": self.loss_curve,
            "skate_ratio_before": self.skate_ratio_before,
            "skate_ratio_after": self.skate_ratio_after,
            "max_pose_deviation_m": self.max_pose_deviation_m,
            "warning": self.warning,
        }


def _positions_fn(spec: RepresentationSpec, skeleton: Skeleton):
    if spec.kind == POSITIONS:
        return lambda f: f.reshape(f.shape[0], spec.joint_count, 3)
    offsets = torch.tensor(skeleton.offsets)
    return lambda f: fk_torch(offsets.to(f.dtype), skeleton.parents, f[:, :3],
                              f[:, 3:].reshape(f.shape[0], spec.joint_count, 6))


def cleanup_features(features: np.ndarray, spec: RepresentationSpec, skeleton: Skeleton, fps: float,
                     config: CleanupConfig = CleanupConfig(), contact_cfg: ContactConfig = ContactConfig(),
                     learned: LearnedVGRF | None = None) -> tuple[np.ndarray, CleanupReport]:
    """Gradient descent on the motion parameters (raw positions, or root + 6D rotations).

    Returns the input array itself when nothing is skating or the budget is zero.
    """
    to_pos = _positions_fn(spec, skeleton)
    feats0 = torch.tensor(np.asarray(features), dtype=torch.float64)
    with torch.no_grad():
        original = to_pos(feats0)
    contacts = detect_contacts(original, skeleton, fps, contact_cfg, learned)
    segments = extract_skating_segments(contacts, original, skeleton, fps, contact_cfg)
    before = skate_ratio(original, skeleton, fps, contact_cfg, learned)
    report = CleanupReport(segments, skate_ratio_before=before, skate_ratio_after=before)
    if not segments or config.iterations == 0:
        return features, report

    params = feats0.clone().requires_grad_(True)
    best, best_loss = feats0.clone(), math.inf
    prev, rising = math.inf, 0
    for _ in range(config.iterations):
        loss = combined_loss(original, to_pos(params), segments, skeleton, fps, config, contact_cfg, learned)
        value = loss.item()
        report.loss_curve.append(value)
        if value < best_loss:
            best_loss, best = value, params.detach().clone()
        rising = rising + 1 if value > prev else 0
        if rising >= 10 or not math.isfinite(value):
            report.warning = "cleanup diverged; returning best iterate"
            warnings.warn(report.warning, RuntimeWarning)
            break
        if 0 <= prev - value < config.tolerance:
            break
        prev = value
        (grad,) = torch.autograd.grad(loss, params)
        with torch.no_grad():
            params -= config.step_size * grad
    else:
        # score the final iterate too
        with torch.no_grad():
            value = float(combined_loss(original, to_pos(params), segments, skeleton, fps, config, contact_cfg, learned))
        if value < best_loss:
            best_loss, best = value, params.detach().clone()

    if spec.kind != POSITIONS:
        rot = best[:, 3:].reshape(best.shape[0], spec.joint_count, 6)
        best[:, 3:] = matrix_to_rot6d(rot6d_to_matrix(rot)).reshape(best.shape[0], -1)
    with torch.no_grad():
        final = to_pos(best)
    report.skate_ratio_after = skate_ratio(final, skeleton, fps, contact_cfg, learned)
    report.max_pose_deviation_m = float((final - original).norm(dim=-1).max())
    return best.numpy().astype(np.asarray(features).dtype), report


def cleanup(motion: MotionSequence, spec: RepresentationSpec, skeleton: Skeleton,
            config: CleanupConfig = CleanupConfig(), contact_cfg: ContactConfig = ContactConfig(),
            learned: LearnedVGRF | None = None) -> tuple[MotionSequence, CleanupReport]:
    """Clean the valid frames of ``motion``; skate-free input is returned as is."""
    valid = motion.valid_features()
    feats, report = cleanup_features(valid, spec, skeleton, motion.fps, config, contact_cfg, learned)
    if feats is valid:
        return motion, report
    out = motion.features.copy()
    out[: motion.n_valid] = feats
    return MotionSequence(motion.fps, out, motion.mask, motion.label, motion.spec), report


def in_loop_cleanup(spec: RepresentationSpec, skeleton: Skeleton, normalizer, lengths, fps: float,
                    t_start: float, every_k: int = 1, config: CleanupConfig = CleanupConfig(iterations=20),
                    contact_cfg: ContactConfig = ContactConfig()):
    """Sampler hook cleaning the x0 prediction at steps whose timestep is below ``t_start``.

    Active steps are thinned to every ``every_k``-th; the final step is always
    cleaned when any step is active. The hook signature is ``hook(i, t, x0)``.
    """
    if every_k < 1:
        raise ValueError("every_k must be >= 1")
    state = {"active": 0}

    def hook(i: int, t: float, x0: torch.Tensor, final: bool = False) -> torch.Tensor:
        if t_start <= 0 or config.iterations == 0 or t >= t_start:
            return x0
        k = state["active"]
        state["active"] += 1
        if k % every_k and not final:
            return x0
        feats = normalizer.denormalize(x0.numpy().astype(np.float32)).astype(np.float64)
        out = x0.clone()
        for b, n in enumerate(lengths):
            try:
                cleaned, _ = cleanup_features(feats[b, :n], spec, skeleton, fps, config, contact_cfg)
            except (ValueError, FloatingPointError) as exc:
                warnings.warn(f"in-loop cleanup failed for sample {b}: {exc}", RuntimeWarning)
                continue
            if cleaned is not feats[b, :n]:
                out[b, :n] = torch.as_tensor(normalizer.normalize(cleaned), dtype=x0.dtype)
        return out

    return hook
