"""Vessel landmark tracks and an automatic template tracker."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.feature import match_template


@dataclass
class LandmarkTrack:
    """In-plane positions of one vessel cross-section over time.

    ``positions`` rows are ``(time index, row, column)`` in slice voxels.
    """

    label: str
    positions: np.ndarray
    plane_offset: float
    subject_id: str = "S1"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {"label": self.label, "positions": self.positions.tolist(),
                "plane_offset": self.plane_offset, "subject_id": self.subject_id}

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkTrack":
        return cls(d["label"], np.asarray(d["positions"]), float(d["plane_offset"]), d.get("subject_id", "S1"))


def save_tracks(path, tracks: list[LandmarkTrack]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([t.to_dict() for t in tracks], indent=1) + "\n")


def load_tracks(path) -> list[LandmarkTrack]:
    return [LandmarkTrack.from_dict(d) for d in json.loads(Path(path).read_text())]


def quadratic_peak(surface: np.ndarray) -> tuple[float, float]:
    """Sub-sample location of the global maximum of a 2D array.

    A 2D quadratic is least-squares fitted to the 3x3 neighbourhood of the
    maximum; at the array border the integer location is returned.
    """
    r, c = np.unravel_index(int(np.argmax(surface)), surface.shape)
    if r == 0 or c == 0 or r == surface.shape[0] - 1 or c == surface.shape[1] - 1:
        return float(r), float(c)
    z = surface[r - 1:r + 2, c - 1:c + 2].astype(np.float64).ravel()
    y, x = np.mgrid[-1:2, -1:2]
    y, x = y.ravel().astype(float), x.ravel().astype(float)
    design = np.column_stack([np.ones(9), x, y, x * x, x * y, y * y])
    a0, bx, by, axx, axy, ayy = np.linalg.lstsq(design, z, rcond=None)[0]
    hessian = np.array([[2 * ayy, axy], [axy, 2 * axx]])
    if np.linalg.det(hessian) <= 0 or hessian[0, 0] >= 0:
        return float(r), float(c)
    dy, dx = np.linalg.solve(hessian, -np.array([by, bx]))
    return float(r + np.clip(dy, -1, 1)), float(c + np.clip(dx, -1, 1))


def track_template(frames: np.ndarray, reference: np.ndarray, rest_position, patch_radius: int = 8,
                   search_radius: int = 8) -> np.ndarray:
    """Track the patch of ``reference`` around ``rest_position`` through ``frames``.

    Normalised cross-correlation over integer shifts within ``search_radius``
    followed by a quadratic peak fit.  Returns ``(T, 2)`` positions, i.e.
    ``rest_position`` plus the estimated shift in each frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    rest = np.asarray(rest_position, dtype=np.float64)
    r0, c0 = int(round(rest[0])), int(round(rest[1]))
    p, s = patch_radius, search_radius
    pad = p + s + 1
    ref = np.pad(np.asarray(reference, dtype=np.float64), pad, mode="edge")
    template = ref[r0 + pad - p:r0 + pad + p + 1, c0 + pad - p:c0 + pad + p + 1]
    out = np.empty((frames.shape[0], 2))
    for t, frame in enumerate(frames):
        f = np.pad(frame, pad, mode="edge")
        region = f[r0 + pad - p - s:r0 + pad + p + s + 1, c0 + pad - p - s:c0 + pad + p + s + 1]
        score = match_template(region, template)
        pr, pc = quadratic_peak(score)
        out[t] = rest + np.array([pr - s, pc - s])
    return out


def track_landmarks(frames: np.ndarray, reference: np.ndarray, rest_positions: dict,
                    plane_offset: float, subject_id: str = "S1", time_indices=None,
                    patch_radius: int = 8, search_radius: int = 8) -> list[LandmarkTrack]:
    """Track every landmark of ``rest_positions`` (label -> (row, col) in ``reference``)."""
    frames = np.asarray(frames)
    times = np.arange(frames.shape[0]) if time_indices is None else np.asarray(time_indices)
    tracked = []
    for label, rest in rest_positions.items():
        pos = track_template(frames, reference, rest, patch_radius, search_radius)
        rows = np.column_stack([times.astype(np.float64), pos])
        tracked.append(LandmarkTrack(label, rows, float(plane_offset), subject_id))
    return tracked
