"""Indirect evaluation: depth estimation and retrieval-based registration."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from arit.errors import DataError, FormatVersionError, NumericError
from arit.metrics import MetricReport, depth_errors, recall_at

# --------------------------------------------------------------------------- depth


@dataclass(frozen=True)
class DepthNetSpec:
    base_channels: int = 16
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0


class DepthNet(nn.Module):
    """Three-level conv encoder-decoder with skip connections; softplus output
    in millimeters, so every prediction is strictly positive."""

    def __init__(self, spec: DepthNetSpec = DepthNetSpec()):
        super().__init__()
        c = spec.base_channels

        def block(cin, cout, stride=1):
            return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU())

        self.enc1 = nn.Sequential(block(3, c), block(c, c))
        self.enc2 = nn.Sequential(block(c, 2 * c, 2), block(2 * c, 2 * c))
        self.enc3 = nn.Sequential(block(2 * c, 4 * c, 2), block(4 * c, 4 * c))
        self.dec2 = block(4 * c + 2 * c, 2 * c)
        self.dec1 = block(2 * c + c, c)
        self.head = nn.Conv2d(c, 1, 3, padding=1)
        # start near a typical lumen depth so the log-depth loss is well scaled
        nn.init.constant_(self.head.bias, float(np.log(np.expm1(20.0))))

    def forward(self, x01: torch.Tensor) -> torch.Tensor:
        if x01.shape[-1] % 4 or x01.shape[-2] % 4:
            raise DataError(f"resolution {tuple(x01.shape[-2:])} not divisible by 4")
        e1 = self.enc1(x01 * 2 - 1)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2, mode="nearest"), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], 1))
        return F.softplus(self.head(d1)).squeeze(1) + 1e-3


def log_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return (torch.log(pred) - torch.log(gt)).abs().mean()


def _images(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@dataclass
class DepthModel:
    net: DepthNet
    spec: DepthNetSpec
    losses: list[float]

    @property
    def final_loss(self) -> float | None:
        return self.losses[-1] if self.losses else None

    @torch.no_grad()
    def predict(self, images, batch_size: int = 32) -> np.ndarray:
        self.net.eval()
        images = list(images)
        out = [self.net(_images(images[i : i + batch_size])).numpy() for i in range(0, len(images), batch_size)]
        return np.concatenate(out)


def train_depth_net(virtual_samples, spec: DepthNetSpec = DepthNetSpec()) -> DepthModel:
    """Fit log-depth L1 on (virtual image, depth) pairs. ``losses`` holds the mean loss per epoch."""
    samples = list(virtual_samples)
    if not samples:
        raise DataError("need at least one training sample")
    x = _images([im for im, _ in samples])
    y = torch.from_numpy(np.stack([np.asarray(d, dtype=np.float32) for _, d in samples]))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        net = DepthNet(spec)
    opt = torch.optim.Adam(net.parameters(), lr=spec.lr)
    losses = []
    rng = np.random.default_rng(spec.seed)
    for epoch in range(spec.epochs):
        net.train()
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), spec.batch_size):
            idx = torch.from_numpy(order[start : start + spec.batch_size])
            loss = log_l1(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite depth loss at epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(order))
    return DepthModel(net, spec, losses)


def eval_depth_pipeline(depth_model: DepthModel, translated_images, gt_depths) -> MetricReport:
    images, gts = list(translated_images), list(gt_depths)
    if not images:
        raise DataError("no images to evaluate")
    if len(images) != len(gts):
        raise DataError("image and depth lists differ in length")
    preds = depth_model.predict(images)
    rows = [depth_errors(p, g) for p, g in zip(preds, gts)]
    per = {k: [r[i] for r in rows] for i, k in enumerate(("abs_rel", "sq_rel", "rmse"))}
    return MetricReport({k: float(np.mean(v)) for k, v in per.items()}, per)


# --------------------------------------------------------------------------- retrieval

RIDX_MAGIC = b"RIDX"
RIDX_VERSION = 1


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("cannot normalize a zero embedding")
    return (x / norms).astype(np.float32)


@dataclass
class RetrievalIndex:
    embeddings: np.ndarray  # (n, d) float32, unit rows
    positions: np.ndarray  # (n, 3) camera positions, mm
    quaternions: np.ndarray  # (n, 4)
    embedder_id: str

    def __len__(self):
        return len(self.embeddings)

    def poses(self):
        from arit.imagecore import CameraPose

        return [CameraPose(p, q) for p, q in zip(self.positions, self.quaternions)]

    def nearest(self, query_embeddings: np.ndarray) -> np.ndarray:
        """Index of the most cosine-similar entry per query; ties go to the lowest id."""
        q = _normalize(query_embeddings).astype(np.float64)
        sims = q @ self.embeddings.astype(np.float64).T
        return np.argmax(sims, axis=1)  # argmax returns the first maximum

    def save(self, path) -> None:
        n, d = self.embeddings.shape
        meta = json.dumps(
            {"embedder_id": self.embedder_id, "positions": self.positions.tolist(), "quaternions": self.quaternions.tolist()},
            sort_keys=True,
        ).encode()
        body = [RIDX_MAGIC, struct.pack("<III", RIDX_VERSION, n, d), np.ascontiguousarray(self.embeddings, "<f4").tobytes()]
        body += [struct.pack("<I", len(meta)), meta]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(b"".join(body))

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        data = Path(path).read_bytes()
        if data[:4] != RIDX_MAGIC:
            raise FormatVersionError(f"{path}: not a retrieval index (bad magic)")
        if len(data) < 16:
            raise FormatVersionError(f"{path}: index is truncated")
        version, n, d = struct.unpack("<III", data[4:16])
        if version != RIDX_VERSION:
            raise FormatVersionError(f"{path}: index version {version}, expected {RIDX_VERSION}")
        end = 16 + 4 * n * d
        if len(data) < end + 4:
            raise FormatVersionError(f"{path}: index is truncated")
        emb = np.frombuffer(data[16:end], dtype="<f4").reshape(n, d).copy()
        (mlen,) = struct.unpack("<I", data[end : end + 4])
        if len(data) != end + 4 + mlen:
            raise FormatVersionError(f"{path}: index is truncated")
        meta = json.loads(data[end + 4 :].decode())
        return cls(emb, np.asarray(meta["positions"]), np.asarray(meta["quaternions"]), meta["embedder_id"])


def _embed(embedder, images) -> np.ndarray:
    return np.asarray(embedder(list(images)), dtype=np.float64)


def build_index(virtual_images, poses, embedder, embeddings=None) -> RetrievalIndex:
    """Embed, normalize and store the database. ``embeddings`` bypasses the embedder."""
    poses = list(poses)
    n = len(poses) if embeddings is not None else len(list(virtual_images))
    if embeddings is None:
        virtual_images = list(virtual_images)
        if len(virtual_images) != len(poses):
            raise DataError("image and pose lists differ in length")
    if n < 1 or n != len(poses):
        raise DataError("need at least one database entry with one pose each")
    emb = _embed(embedder, virtual_images) if embeddings is None else np.asarray(embeddings, dtype=np.float64)
    if len(emb) != len(poses):
        raise DataError("embedding and pose counts differ")
    return RetrievalIndex(
        _normalize(emb),
        np.array([p.position for p in poses], dtype=np.float64),
        np.array([p.quaternion for p in poses], dtype=np.float64),
        getattr(embedder, "id", type(embedder).__name__),
    )


def register(queries, query_poses, index: RetrievalIndex, threshold_mm: float = 5.0, embedder=None, query_embeddings=None):
    """Nearest database entry per query and recall@threshold. ``query_embeddings``
    bypasses the embedder."""
    if len(index) == 0:
        raise DataError("empty retrieval index")
    query_poses = list(query_poses)
    if query_embeddings is None:
        queries = list(queries)
        if not queries:
            raise DataError("no queries")
        if embedder is None:
            raise DataError("an embedder is required unless query embeddings are given")
        query_embeddings = _embed(embedder, queries)
    if len(query_embeddings) == 0:
        raise DataError("no queries")
    if len(query_embeddings) != len(query_poses):
        raise DataError("query and pose lists differ in length")
    ids = index.nearest(query_embeddings)
    retrieved = [index.positions[i] for i in ids]
    recall = recall_at([p.position for p in query_poses], retrieved, threshold_mm)
    dist = [float(np.linalg.norm(p.position - r)) for p, r in zip(query_poses, retrieved)]
    return MetricReport(
        {"recall": recall},
        {"nearest_id": [int(i) for i in ids], "distance_mm": dist},
        {"embedder_id": index.embedder_id, "threshold_mm": threshold_mm},
    )
