"""Frame and video descriptors from a frozen encoder, and the on-disk feature bank.

Bank layout::

    b"HVQFB1\\n"                magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON: schema_version, dim, count, records, sha256
    payload                     float32 little-endian, row-major (count, dim)

``records`` holds (video_id, n_frames_pooled, checkpoint_hash) per row and
``sha256`` is the digest of the payload bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from hdrvqa.contrastive.models import ContrastiveModel
from hdrvqa.contrastive.views import half_scale
from hdrvqa.errors import BankError, BankVersionError
from hdrvqa.media import FrameGeometry, HdrFrame, Layout, count_frames, load_frames, ycbcr_to_rgb

BANK_MAGIC = b"HVQFB1\n"
BANK_SCHEMA_VERSION = 1


@dataclass
class VideoFeature:
    video_id: str
    vector: np.ndarray
    n_frames_pooled: int = 1
    checkpoint_hash: str = ""

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32).ravel()
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"{self.video_id}: non-finite feature entries")
        if self.n_frames_pooled < 1:
            raise ValueError("n_frames_pooled must be at least 1")

    def __eq__(self, other):
        return (isinstance(other, VideoFeature) and self.video_id == other.video_id
                and self.n_frames_pooled == other.n_frames_pooled
                and self.checkpoint_hash == other.checkpoint_hash
                and self.vector.tobytes() == other.vector.tobytes())


def frame_rgb(frame) -> np.ndarray:
    if isinstance(frame, HdrFrame):
        if frame.pixel_layout is Layout.YCBCR:
            frame = ycbcr_to_rgb(frame)
        return frame.rgb()
    return np.asarray(frame, dtype=np.float32)


@torch.no_grad()
def extract_frame_feature(frame, model: ContrastiveModel, crop: int | None = None) -> np.ndarray:
    """Encoder features of a frame at native and half scale, concatenated (length 2D).

    ``crop`` selects a centred square crop instead of the full frame.
    The projector is not applied.
    """
    rgb = frame_rgb(frame)
    if crop is not None:
        h, w = rgb.shape[:2]
        if h < crop or w < crop:
            raise ValueError(f"frame {w}x{h} smaller than crop {crop}")
        top, left = (h - crop) // 2, (w - crop) // 2
        rgb = rgb[top:top + crop, left:left + crop]
    model.eval()
    scales = [rgb, half_scale(rgb)]
    parts = []
    for img in scales:
        x = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None]
        parts.append(model.encoder(x)[0].numpy())
    return np.concatenate(parts).astype(np.float32)


@torch.no_grad()
def extract_batch(frames: Sequence[np.ndarray], model: ContrastiveModel, batch_size: int = 64) -> np.ndarray:
    """Features for equally sized RGB frames, batched; same values as :func:`extract_frame_feature`."""
    model.eval()
    out = []
    for i in range(0, len(frames), batch_size):
        chunk = [np.asarray(f, dtype=np.float32) for f in frames[i:i + batch_size]]
        native = torch.from_numpy(np.stack(chunk)).permute(0, 3, 1, 2)
        half = torch.from_numpy(np.stack([half_scale(f) for f in chunk])).permute(0, 3, 1, 2)
        out.append(torch.cat([model.encoder(native), model.encoder(half)], dim=1).numpy())
    return np.concatenate(out).astype(np.float32)


def pool_video(features: Sequence, video_id: str = "", checkpoint_hash: str = "") -> VideoFeature:
    """Temporal mean of frame features."""
    if len(features) == 0:
        raise ValueError("cannot pool an empty list of frame features")
    lengths = {np.asarray(f).size for f in features}
    if len(lengths) != 1:
        raise ValueError(f"ragged frame features: lengths {sorted(lengths)}")
    stacked = np.stack([np.asarray(f, dtype=np.float64).ravel() for f in features])
    return VideoFeature(video_id, stacked.mean(axis=0), len(features), checkpoint_hash)


def extract_video(path: str | os.PathLike, geometry: FrameGeometry, model: ContrastiveModel,
                  frame_stride: int = 1, video_id: str | None = None, checkpoint_hash: str = "",
                  crop: int | None = None) -> VideoFeature:
    """Pool frame features over every ``frame_stride``-th frame of a raw video."""
    if frame_stride < 1:
        raise ValueError("frame_stride must be at least 1")
    n = count_frames(path, geometry)
    indices = list(range(0, n, frame_stride)) if frame_stride <= n else []
    if frame_stride > n or not indices:
        raise ValueError(f"stride {frame_stride} selects no frames from a {n}-frame video")
    feats = []
    for i in indices:
        (frame,) = load_frames(path, geometry, [i])
        feats.append(extract_frame_feature(frame, model, crop))
    return pool_video(feats, video_id or Path(path).stem, checkpoint_hash)


# ---------------------------------------------------------------------------
# bank


def save_features(path: str | os.PathLike, features: Sequence[VideoFeature]) -> None:
    ids = [f.video_id for f in features]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise BankError(f"duplicate video ids: {dupes}")
    dims = {f.vector.size for f in features}
    if len(dims) > 1:
        raise BankError(f"mixed feature lengths in one bank: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    matrix = np.stack([f.vector for f in features]).astype("<f4") if features else np.zeros((0, 0), "<f4")
    payload = matrix.tobytes(order="C")
    header = json.dumps({
        "schema_version": BANK_SCHEMA_VERSION,
        "dim": dim,
        "count": len(features),
        "records": [[f.video_id, f.n_frames_pooled, f.checkpoint_hash] for f in features],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def _read_header(fh, path) -> tuple[dict, int]:
    if fh.read(len(BANK_MAGIC)) != BANK_MAGIC:
        raise BankError(f"{path}: not a feature bank")
    (n,) = struct.unpack("<Q", fh.read(8))
    try:
        header = json.loads(fh.read(n))
    except ValueError as exc:
        raise BankError(f"{path}: corrupted header") from exc
    if header.get("schema_version") != BANK_SCHEMA_VERSION:
        raise BankVersionError(
            f"{path}: bank schema version {header.get('schema_version')}, expected {BANK_SCHEMA_VERSION}")
    return header, len(BANK_MAGIC) + 8 + n


def load_features(path: str | os.PathLike, mmap: bool = False, verify: bool = True) -> list[VideoFeature]:
    """Read a bank back. With ``mmap`` the matrix is memory-mapped instead of read."""
    with open(path, "rb") as fh:
        header, offset = _read_header(fh, path)
    count, dim = header["count"], header["dim"]
    expected = offset + count * dim * 4
    if os.path.getsize(path) != expected:
        raise BankError(f"{path}: truncated or padded payload")
    if count == 0:
        return []
    if mmap:
        matrix = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(count, dim))
    else:
        with open(path, "rb") as fh:
            fh.seek(offset)
            matrix = np.frombuffer(fh.read(), dtype="<f4").reshape(count, dim)
    if verify and hashlib.sha256(np.ascontiguousarray(matrix).tobytes()).hexdigest() != header["sha256"]:
        raise BankError(f"{path}: checksum mismatch")
    return [VideoFeature(vid, matrix[i], n_frames, ckpt)
            for i, (vid, n_frames, ckpt) in enumerate(header["records"])]


def bank_matrix(features: Sequence[VideoFeature], ids: Sequence[str]) -> np.ndarray:
    by_id = {f.video_id: f for f in features}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise BankError(f"no features for {len(missing)} videos, e.g. {missing[:3]}")
    return np.stack([by_id[i].vector for i in ids]).astype(np.float64)


def export_csv(path: str | os.PathLike, features: Sequence[VideoFeature]) -> None:
    dim = features[0].vector.size if features else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id"] + [f"f{i}" for i in range(dim)])
        for f in features:
            writer.writerow([f.video_id] + [repr(float(v)) for v in f.vector])
