"""Dataset directories: numbered .mot files, a manifest and the skeleton."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Sequence

from .motion import MotionSequence, load_motion, save_motion
from .skeleton import Skeleton
from .synth import Vocabulary

DATASET_VERSION = 1


def save_dataset(motions: Sequence[MotionSequence], path, vocab: Vocabulary, skeleton: Skeleton,
                 extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for i, m in enumerate(motions):
        name = f"{i:05d}.mot"
        save_motion(m, path / name)
        files.append({"file": name, "label": list(m.label or ()), "frames": m.n_valid})
    manifest = {
        "version": DATASET_VERSION,
        "count": len(motions),
        "fps": motions[0].fps if motions else None,
        "representation": motions[0].spec.to_json() if motions and motions[0].spec else None,
        "vocabulary": vocab.to_json(),
        "files": files,
        **(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (path / "skeleton.json").write_text(json.dumps(skeleton.to_json(), indent=1))


def load_dataset(path) -> tuple[list[MotionSequence], Vocabulary, Skeleton]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{path}: not a dataset directory (manifest.json missing)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: dataset version {manifest.get('version')!r}, expected {DATASET_VERSION}")
    motions = [load_motion(path / entry["file"]) for entry in manifest["files"]]
    if not motions:
        raise ValueError(f"{path}: dataset is empty")
    skeleton = Skeleton.from_json(json.loads((path / "skeleton.json").read_text()))
    return motions, Vocabulary.from_json(manifest["vocabulary"]), skeleton


def dataset_digest(path) -> str:
    """Content hash of a dataset directory (manifest plus every motion file)."""
    path = Path(path)
    h = hashlib.sha256((path / "manifest.json").read_bytes())
    for entry in json.loads((path / "manifest.json").read_text())["files"]:
        h.update((path / entry["file"]).read_bytes())
    return h.hexdigest()[:16]
