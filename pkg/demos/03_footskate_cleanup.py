"""
Cleaning up a sliding foot
==========================

A standing pose whose left foot slides 10 cm while it should be planted.
Contact detection finds the planted frames; optimization pulls the foot to
an anchor while the rest of the body barely moves.
"""

# %%
import numpy as np

from mofusion.footskate import cleanup_features, detect_contacts, extract_skating_segments, skate_ratio
from mofusion.motion import POSITIONS, RepresentationSpec
from mofusion.skeleton import default_skeleton, forward_kinematics

fps = 20.0
skel = default_skeleton()
frames = 24

# rest pose, pelvis at 0.95 m so the toes touch the ground
pos = forward_kinematics(skel, np.tile([0.0, 0.95, 0.0], (frames, 1)),
                         np.tile(np.eye(3), (frames, skel.joint_count, 1, 1)))
left = [skel.index("l_ankle"), skel.index("l_toe")]
off = np.zeros((frames, 3))
off[:8, 1] = off[16:, 1] = 0.2     # foot in the air
off[8:16, 2] = np.linspace(0, 0.1, 8)
off[16:, 2] = 0.1
pos[:, left] += off[:, None]

# %%
contacts = detect_contacts(pos, skel, fps)
for seg in extract_skating_segments(contacts, pos, skel, fps):
    print(f"{skel.joint_names[seg.joint]:8s} frames {seg.start}-{seg.end - 1}  anchor {np.round(seg.anchor, 3)}")
print("skate ratio before:", round(skate_ratio(pos, skel, fps), 3))

# %% [markdown]
# Cleanup runs plain gradient descent on joint positions. The report keeps
# the loss curve and the largest change made to any joint.

# %%
fixed, report = cleanup_features(pos.reshape(frames, -1), RepresentationSpec(POSITIONS, skel.joint_count), skel, fps)
fixed = fixed.reshape(frames, -1, 3)
print("skate ratio after:", round(report.skate_ratio_after, 3))
print("loss {:.4f} -> {:.2e} in {} iterations".format(report.loss_curve[0], report.loss_curve[-1],
                                                      len(report.loss_curve)))
moved = np.linalg.norm(fixed - pos, axis=-1).mean(0)
for j in np.argsort(moved)[::-1][:4]:
    print(f"  {skel.joint_names[j]:10s} moved {moved[j] * 100:.2f} cm on average")
