from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.spatial.transform import Rotation

from arit.errors import DataError

# Images are plain float32 arrays of shape (H, W, C); this alias documents intent.
ImageTensor = np.ndarray

MIN_SIZE = 8


def as_image(data, *, clip: bool = False) -> ImageTensor:
    """Validate (and optionally clip) an array as an ImageTensor.

    Accepts (H, W) or (H, W, C) with C in {1, 3}; returns float32 (H, W, C).
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DataError(f"image must be HxW or HxWxC with C in 1,3; got shape {arr.shape}")
    if arr.shape[0] < MIN_SIZE or arr.shape[1] < MIN_SIZE:
        raise DataError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}; got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise DataError("image contains non-finite values")
    if clip:
        arr = np.clip(arr, 0.0, 1.0)
    elif arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    return np.ascontiguousarray(arr)


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> 3x3 rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(m) -> np.ndarray:
    """3x3 rotation matrix -> unit quaternion (w, x, y, z) with w >= 0."""
    x, y, z, w = Rotation.from_matrix(np.asarray(m, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world pose. Camera axes follow the OpenCV convention
    (x right, y down, z forward); positions are in millimeters."""

    position: np.ndarray
    quaternion: np.ndarray  # (w, x, y, z)

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(q)):
            raise DataError("pose contains non-finite values")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise DataError(f"pose quaternion must have unit norm, got {np.linalg.norm(q):.8f}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "quaternion", q)

    @property
    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation matrix."""
        return quat_to_matrix(self.quaternion)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation

    def to_json(self) -> dict:
        return {"position": self.position.tolist(), "quaternion": self.quaternion.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "CameraPose":
        try:
            return cls(obj["position"], obj["quaternion"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed pose record: {exc}") from exc

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(
            self.quaternion, other.quaternion
        )

    __hash__ = None


@dataclass
class SceneSample:
    virtual_image: ImageTensor
    real_image: ImageTensor
    depth: np.ndarray  # (H, W) float32, millimeters
    pose: CameraPose
    frame_id: int

    def __post_init__(self):
        self.virtual_image = as_image(self.virtual_image)
        self.real_image = as_image(self.real_image)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        shape = self.virtual_image.shape[:2]
        if self.real_image.shape[:2] != shape or self.depth.shape != shape:
            raise DataError("virtual image, real image and depth must share height/width")
        if not np.all(self.depth > 0):
            raise DataError("depth must be strictly positive")


SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetManifest:
    """Split lists and generation parameters for a dataset directory.

    Defaults applied to hand-written manifests: ``root_path="."``,
    ``resolution=64``, ``seed=0``, empty ``generator_params`` and ``metadata``,
    and any of train/val/test missing from ``splits`` becomes an empty list.
    When ``frame_ids`` is omitted it is the union of the splits.
    """

    splits: dict[str, list[int]]
    root_path: str = "."
    resolution: int = 64
    seed: int = 0
    generator_params: dict[str, Any] = field(default_factory=dict)
    frame_ids: list[int] | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        splits = {name: [int(i) for i in self.splits.get(name, [])] for name in SPLIT_NAMES}
        extra = set(self.splits) - set(SPLIT_NAMES)
        for name in sorted(extra):
            splits[name] = [int(i) for i in self.splits[name]]
        self.splits = splits
        self.validate()

    def validate(self) -> None:
        seen: dict[int, str] = {}
        for name, ids in self.splits.items():
            for i in ids:
                if i in seen:
                    raise DataError(f"frame {i} appears in both '{seen[i]}' and '{name}' splits")
                seen[i] = name
        if self.frame_ids is None:
            self.frame_ids = sorted(seen)
        else:
            self.frame_ids = [int(i) for i in self.frame_ids]
            unknown = set(seen) - set(self.frame_ids)
            if unknown:
                raise DataError(f"splits reference unknown frame ids {sorted(unknown)[:5]}")
            missing = set(self.frame_ids) - set(seen)
            if missing:
                raise DataError(f"frames {sorted(missing)[:5]} are not assigned to any split")

    def to_json(self) -> dict:
        return {
            "root_path": self.root_path,
            "resolution": self.resolution,
            "seed": self.seed,
            "splits": self.splits,
            "frame_ids": self.frame_ids,
            "generator_params": self.generator_params,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        if not isinstance(obj, dict) or "splits" not in obj:
            raise DataError("manifest must be a JSON object with a 'splits' field")
        return cls(
            splits=obj["splits"],
            root_path=obj.get("root_path", "."),
            resolution=int(obj.get("resolution", 64)),
            seed=int(obj.get("seed", 0)),
            generator_params=dict(obj.get("generator_params", {})),
            frame_ids=obj.get("frame_ids"),
            metadata=dict(obj.get("metadata", {})),
        )
