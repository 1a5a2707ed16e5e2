"""On-disk formats: 8-bit PNG images, PFM depth, JSON poses and manifests,
and the dataset directory layout ``root/{virtual,real,depth,pose}/frame_%06d.*``."""
from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from arit.errors import DataError
from arit.imagecore.types import CameraPose, DatasetManifest, SceneSample, as_image

FRAME_NAME = "frame_{:06d}"
_FRAME_RE = re.compile(r"frame_(\d{6})\.png$")


def quantize(image) -> np.ndarray:
    """float [0,1] -> uint8 via round(v * 255)."""
    img = as_image(image)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image) -> None:
    q = quantize(image)
    mode = "L" if q.shape[2] == 1 else "RGB"
    arr = q[:, :, 0] if mode == "L" else q
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing image file {path}")
    with Image.open(path) as im:
        if im.format != "PNG":
            raise DataError(f"{path} is not a PNG file")
        if im.mode not in ("L", "RGB"):
            raise DataError(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit RGB or grayscale)")
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: unsupported bit depth")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float32) / np.float32(255.0)


def image_io(path, mode: str, image=None):
    """Read or write one image. ``mode`` is ``"read"`` or ``"write"``."""
    if mode == "read":
        return read_png(path)
    if mode == "write":
        if image is None:
            raise DataError("write mode requires an image")
        write_png(path, image)
        return None
    raise ValueError(f"unknown mode {mode!r}")


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM (scanlines stored bottom-to-top)."""
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise DataError("PFM writer expects a 2-D depth map")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{d.shape[1]} {d.shape[0]}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing depth file {path}")
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise DataError(f"{path}: not a PFM file")
        channels = 1 if header == b"Pf" else 3
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != width * height * channels:
        raise DataError(f"{path}: truncated PFM body")
    # color PFMs are accepted; only the first channel is kept
    data = data.reshape(height, width, channels)[::-1, :, 0]
    return np.ascontiguousarray(data.astype(np.float32))


def write_pose(path, pose: CameraPose) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(pose.to_json()) + "\n")


def read_pose(path) -> CameraPose:
    try:
        return CameraPose.from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read pose {path}: {exc}") from exc


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest JSON in {path}: {exc}") from exc
    return DatasetManifest.from_json(obj)


def manifest_io(path, mode: str, manifest: DatasetManifest | None = None):
    if mode == "read":
        return read_manifest(path)
    if mode == "write":
        if manifest is None:
            raise DataError("write mode requires a manifest")
        write_manifest(path, manifest)
        return None
    raise ValueError(f"unknown mode {mode!r}")


def write_dataset(root, samples, manifest: DatasetManifest) -> None:
    root = Path(root)
    for s in samples:
        name = FRAME_NAME.format(s.frame_id)
        write_png(root / "virtual" / f"{name}.png", s.virtual_image)
        write_png(root / "real" / f"{name}.png", s.real_image)
        write_pfm(root / "depth" / f"{name}.pfm", s.depth)
        write_pose(root / "pose" / f"{name}.json", s.pose)
    write_manifest(root / "manifest.json", manifest)


def read_sample(root, frame_id: int) -> SceneSample:
    root = Path(root)
    name = FRAME_NAME.format(frame_id)
    return SceneSample(
        virtual_image=read_png(root / "virtual" / f"{name}.png"),
        real_image=read_png(root / "real" / f"{name}.png"),
        depth=read_pfm(root / "depth" / f"{name}.pfm"),
        pose=read_pose(root / "pose" / f"{name}.json"),
        frame_id=frame_id,
    )


def read_dataset(root, split: str | None = None):
    """Load a dataset directory. Returns (samples, manifest)."""
    root = Path(root)
    manifest = read_manifest(root / "manifest.json")
    if split is None:
        ids = manifest.frame_ids
    else:
        if split not in manifest.splits:
            raise DataError(f"unknown split {split!r}")
        ids = manifest.splits[split]
    return [read_sample(root, i) for i in ids], manifest


def list_images(directory) -> list[Path]:
    """PNG files of a flat image directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def frame_id_of(path) -> int | None:
    m = _FRAME_RE.search(os.fspath(path))
    return int(m.group(1)) if m else None
