"""Loading a generated dataset directory back into memory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .io import read_json
from .lie import Pose
from .scene import Camera
from .synth import read_tracks_csv


@dataclass
class Frame:
    index: int
    time: float
    exposure: float
    image: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    initial_pose: Pose
    sharp: np.ndarray | None = None
    true_mid_pose: Pose | None = None


class Dataset:
    """Frames, camera, tracks and (when present) ground-truth oracles."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise DataError(f"{path}: manifest not found")
        self.manifest = m = read_json(path)
        try:
            cam = m["camera"]
            self.camera = Camera(cam["fx"], cam["fy"], cam["cx"], cam["cy"], cam["width"], cam["height"])
            self.background = np.asarray(m.get("background_color", [0.0, 0.0, 0.0]), dtype=float)
            self.canonical_frame = int(m["canonical_frame"])
            self.track_stride = int(m.get("track_stride", 1))
            self.frames = [self._frame(fr) for fr in m["frames"]]
        except KeyError as exc:
            raise DataError(f"{path}: missing field {exc}") from exc
        F = len(self.frames)
        if F == 0:
            raise DataError(f"{path}: no frames")
        if "tracks" in m and (self.root / m["tracks"]).exists():
            self.tracks2d, self.track_visible = read_tracks_csv(self.root / m["tracks"], F)
        else:
            self.tracks2d, self.track_visible = np.zeros((0, F, 2)), np.zeros((0, F), dtype=bool)
        self.tracks3d = self._optional(m.get("tracks3d"))

    def _optional(self, name):
        if name and (self.root / name).exists():
            return np.load(self.root / name)
        return None

    def _frame(self, fr) -> Frame:
        image = np.load(self.root / fr["blurry"]).astype(float)
        mask = np.load(self.root / fr["mask"]).astype(bool)
        depth = np.load(self.root / fr["depth"]).astype(float)
        if image.shape[:2] != mask.shape or mask.shape != depth.shape:
            raise DataError(f"frame {fr['index']}: image/mask/depth shapes disagree")
        if not fr["exposure"] > 0:
            raise DataError(f"frame {fr['index']}: non-positive exposure")
        sharp = self._optional(fr.get("sharp"))
        return Frame(
            index=int(fr["index"]),
            time=float(fr["time"]),
            exposure=float(fr["exposure"]),
            image=image,
            mask=mask,
            depth=depth,
            initial_pose=Pose.from_array(fr["initial_pose"]),
            sharp=None if sharp is None else sharp.astype(float),
            true_mid_pose=Pose.from_array(fr["true_mid_pose"]) if "true_mid_pose" in fr else None,
        )

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]

    def seed_pixels(self):
        """Strided dynamic-mask pixels of the canonical frame as ``(x, y)`` rows, row-major."""
        mask = self.frames[self.canonical_frame].mask
        s = self.track_stride
        ys, xs = np.nonzero(mask)
        keep = (xs % s == 0) & (ys % s == 0)
        return np.stack([xs[keep], ys[keep]], axis=1).astype(float)
