"""HDR frame representation, raw planar I/O, colour conversion and transfer functions.

Frames are held as three float32 planes of code values normalised to [0, 1].
Transfer-function math is done in float64 and never clips its inputs; values
outside a curve's domain raise :class:`TransferDomainError`.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hdrvqa.errors import FrameIndexError, GeometryError, MetadataError, TransferDomainError


class Primaries(str, enum.Enum):
    REC2020 = "Rec2020"
    REC709 = "Rec709"


class Transfer(str, enum.Enum):
    PQ = "PQ"
    HLG = "HLG"
    GAMMA709 = "Gamma709"


class Layout(str, enum.Enum):
    YCBCR = "YCbCr"
    RGB = "RGB"


class Chroma(str, enum.Enum):
    C444 = "444"
    C420 = "420"


@dataclass(frozen=True)
class FrameGeometry:
    """Sidecar description of a headerless raw planar video file."""

    width: int
    height: int
    bit_depth: int = 10
    pixel_layout: Layout = Layout.YCBCR
    transfer: Transfer = Transfer.PQ
    color_primaries: Primaries = Primaries.REC2020
    chroma: Chroma = Chroma.C420
    full_range: bool = False

    def __post_init__(self):
        for name, cls in (("pixel_layout", Layout), ("transfer", Transfer),
                          ("color_primaries", Primaries), ("chroma", Chroma)):
            object.__setattr__(self, name, cls(getattr(self, name)))
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"frame dimensions must be positive, got {self.width}x{self.height}")
        if self.bit_depth not in (8, 10, 12):
            raise GeometryError(f"bit_depth must be 8, 10 or 12, got {self.bit_depth}")
        if self.chroma is Chroma.C420:
            if self.pixel_layout is Layout.RGB:
                raise GeometryError("RGB frames cannot be chroma subsampled")
            if self.width % 2 or self.height % 2:
                raise GeometryError("4:2:0 frames need even width and height")

    @property
    def plane_shapes(self) -> list[tuple[int, int]]:
        luma = (self.height, self.width)
        if self.chroma is Chroma.C420:
            sub = (self.height // 2, self.width // 2)
            return [luma, sub, sub]
        return [luma, luma, luma]

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("u1") if self.bit_depth == 8 else np.dtype("<u2")

    @property
    def frame_bytes(self) -> int:
        return sum(h * w for h, w in self.plane_shapes) * self.dtype.itemsize

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key, value in d.items():
            if isinstance(value, enum.Enum):
                d[key] = value.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameGeometry":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise GeometryError(f"unknown geometry keys: {sorted(unknown)}")
        return cls(**d)


def read_geometry(path: str | os.PathLike) -> FrameGeometry:
    with open(path) as fh:
        return FrameGeometry.from_dict(json.load(fh))


def write_geometry(path: str | os.PathLike, geometry: FrameGeometry) -> None:
    with open(path, "w") as fh:
        json.dump(geometry.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sidecar_path(video_path: str | os.PathLike) -> Path:
    """Conventional location of the geometry sidecar next to a raw file."""
    return Path(str(video_path) + ".json")


@dataclass(frozen=True)
class HdrFrame:
    """One decoded frame: three planes in [0, 1] plus signalling metadata."""

    planes: tuple[np.ndarray, np.ndarray, np.ndarray]
    bit_depth: int = 10
    color_primaries: Primaries = Primaries.REC2020
    transfer: Transfer = Transfer.PQ
    pixel_layout: Layout = Layout.YCBCR
    chroma: Chroma = Chroma.C444
    full_range: bool = False

    def __post_init__(self):
        for name, cls in (("pixel_layout", Layout), ("transfer", Transfer),
                          ("color_primaries", Primaries), ("chroma", Chroma)):
            object.__setattr__(self, name, cls(getattr(self, name)))
        planes = tuple(np.asarray(p, dtype=np.float32) for p in self.planes)
        if len(planes) != 3 or any(p.ndim != 2 for p in planes):
            raise GeometryError("a frame needs exactly three 2-D planes")
        h, w = planes[0].shape
        expected = (h // 2, w // 2) if self.chroma is Chroma.C420 else (h, w)
        if planes[1].shape != expected or planes[2].shape != expected:
            raise GeometryError(f"chroma planes must be {expected}, got {planes[1].shape}/{planes[2].shape}")
        object.__setattr__(self, "planes", planes)

    @property
    def width(self) -> int:
        return self.planes[0].shape[1]

    @property
    def height(self) -> int:
        return self.planes[0].shape[0]

    def replace(self, **changes) -> "HdrFrame":
        return dataclasses.replace(self, **changes)

    def rgb(self) -> np.ndarray:
        """Planes stacked as an (H, W, 3) float32 array; RGB frames only."""
        if self.pixel_layout is not Layout.RGB:
            raise MetadataError("rgb() needs an RGB frame; convert with ycbcr_to_rgb first")
        return np.stack(self.planes, axis=-1)

    @classmethod
    def from_rgb(cls, rgb: np.ndarray, **meta) -> "HdrFrame":
        rgb = np.asarray(rgb)
        meta.setdefault("pixel_layout", Layout.RGB)
        meta.setdefault("chroma", Chroma.C444)
        return cls(planes=(rgb[..., 0], rgb[..., 1], rgb[..., 2]), **meta)


# ---------------------------------------------------------------------------
# raw planar I/O


def count_frames(path: str | os.PathLike, geometry: FrameGeometry) -> int:
    size = os.path.getsize(path)
    if size % geometry.frame_bytes:
        raise GeometryError(
            f"{path}: size {size} is not a multiple of the frame stride {geometry.frame_bytes}; "
            "the geometry does not match the file")
    return size // geometry.frame_bytes


def load_frames(path: str | os.PathLike, geometry: FrameGeometry,
                frame_indices: Sequence[int]) -> list[HdrFrame]:
    """Read selected frames from a headerless planar file.

    Samples are little-endian 16-bit containers for 10/12-bit video, bytes for
    8-bit. Code values are divided by ``2**bit_depth - 1``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such video file: {path}")
    n = count_frames(path, geometry)
    indices = [int(i) for i in frame_indices]
    bad = [i for i in indices if not 0 <= i < n]
    if bad:
        raise FrameIndexError(f"frame indices {bad} out of range for {n}-frame file {path}")

    data = np.memmap(path, dtype=geometry.dtype, mode="r")
    samples_per_frame = geometry.frame_bytes // geometry.dtype.itemsize
    max_code = (1 << geometry.bit_depth) - 1
    frames = []
    for i in indices:
        raw = np.asarray(data[i * samples_per_frame:(i + 1) * samples_per_frame])
        if raw.max(initial=0) > max_code:
            raise GeometryError(f"frame {i} holds codes above {max_code}; wrong bit depth?")
        planes, offset = [], 0
        for h, w in geometry.plane_shapes:
            plane = raw[offset:offset + h * w].reshape(h, w)
            planes.append((plane.astype(np.float64) / max_code).astype(np.float32))
            offset += h * w
        frames.append(HdrFrame(
            planes=tuple(planes), bit_depth=geometry.bit_depth,
            color_primaries=geometry.color_primaries, transfer=geometry.transfer,
            pixel_layout=geometry.pixel_layout, chroma=geometry.chroma,
            full_range=geometry.full_range))
    del data
    return frames


def write_frames(path: str | os.PathLike, frames: Sequence[HdrFrame], append: bool = False) -> FrameGeometry:
    """Quantise frames back to integer codes and write them as raw planar video."""
    if not frames:
        raise ValueError("no frames to write")
    first = frames[0]
    geometry = FrameGeometry(
        width=first.width, height=first.height, bit_depth=first.bit_depth,
        pixel_layout=first.pixel_layout, transfer=first.transfer,
        color_primaries=first.color_primaries, chroma=first.chroma, full_range=first.full_range)
    max_code = (1 << geometry.bit_depth) - 1
    with open(path, "ab" if append else "wb") as fh:
        for frame in frames:
            if (frame.width, frame.height) != (geometry.width, geometry.height):
                raise GeometryError("all frames in one file must share a geometry")
            for plane in frame.planes:
                codes = np.rint(np.clip(plane.astype(np.float64), 0.0, 1.0) * max_code)
                fh.write(codes.astype(geometry.dtype).tobytes())
    return geometry


# ---------------------------------------------------------------------------
# transfer functions (SMPTE ST 2084 / ITU-R BT.2100)

PQ_M1 = 2610 / 16384
PQ_M2 = 2523 / 4096 * 128
PQ_C1 = 3424 / 4096
PQ_C2 = 2413 / 4096 * 32
PQ_C3 = 2392 / 4096 * 32
PQ_PEAK_NITS = 10000.0

HLG_A = 0.17883277
HLG_B = 1 - 4 * HLG_A
HLG_C = 0.5 - HLG_A * np.log(4 * HLG_A)

# BT.2020 non-constant-luminance weights
KR_2020 = 0.2627
KB_2020 = 0.0593
KG_2020 = 1 - KR_2020 - KB_2020


def _check_domain(x, lo: float, hi: float, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x >= lo) & (x <= hi)):
        bad = x[~((x >= lo) & (x <= hi))]
        raise TransferDomainError(f"{what} must lie in [{lo}, {hi}]; got e.g. {bad.flat[0]!r}")
    return x


def pq_eotf(code):
    """PQ code value in [0, 1] to absolute luminance in nits."""
    e = _check_domain(code, 0.0, 1.0, "PQ code")
    p = e ** (1 / PQ_M2)
    y = (np.maximum(p - PQ_C1, 0.0) / (PQ_C2 - PQ_C3 * p)) ** (1 / PQ_M1)
    return PQ_PEAK_NITS * y


def pq_oetf(luminance):
    """Absolute luminance in nits to PQ code value (the inverse EOTF)."""
    y = _check_domain(luminance, 0.0, PQ_PEAK_NITS, "luminance (nits)") / PQ_PEAK_NITS
    ym = y ** PQ_M1
    return ((PQ_C1 + PQ_C2 * ym) / (1 + PQ_C3 * ym)) ** PQ_M2


def hlg_oetf(scene):
    """Normalised scene-linear light in [0, 1] to HLG signal."""
    e = _check_domain(scene, 0.0, 1.0, "HLG scene light")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_branch = HLG_A * np.log(np.maximum(12 * e - HLG_B, 1e-300)) + HLG_C
    return np.where(e <= 1 / 12, np.sqrt(3 * e), log_branch)


def hlg_inverse_oetf(signal):
    """HLG signal in [0, 1] to normalised scene-linear light."""
    s = _check_domain(signal, 0.0, 1.0, "HLG signal")
    return np.where(s <= 0.5, s * s / 3, (np.exp((s - HLG_C) / HLG_A) + HLG_B) / 12)


def hlg_system_gamma(peak_nits: float) -> float:
    """Nominal OOTF gamma; 1.2 for a 1000-nit display."""
    return 1.2 + 0.42 * np.log10(peak_nits / 1000.0)


def hlg_ootf(rgb_scene: np.ndarray, peak_nits: float = 1000.0) -> np.ndarray:
    """Scene-linear RGB (last axis) to display light in nits, zero black level."""
    rgb_scene = np.asarray(rgb_scene, dtype=np.float64)
    ys = rgb_scene @ np.array([KR_2020, KG_2020, KB_2020])
    gain = peak_nits * ys ** (hlg_system_gamma(peak_nits) - 1)
    return rgb_scene * gain[..., None]


# ---------------------------------------------------------------------------
# colour conversion


def _upsample2(c: np.ndarray, axis: int) -> np.ndarray:
    # co-sited samples: even outputs copy, odd outputs average neighbours (edge clamped)
    c = np.moveaxis(c, axis, 0)
    nxt = np.concatenate([c[1:], c[-1:]], axis=0)
    out = np.empty((2 * c.shape[0],) + c.shape[1:], dtype=c.dtype)
    out[0::2] = c
    out[1::2] = 0.5 * (c + nxt)
    return np.moveaxis(out, 0, axis)


def upsample_chroma(plane: np.ndarray) -> np.ndarray:
    """Bilinear co-sited 2x upsampling of a chroma plane."""
    return _upsample2(_upsample2(np.asarray(plane, dtype=np.float64), 0), 1)


def _ycbcr_signal(frame: HdrFrame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    max_code = (1 << frame.bit_depth) - 1
    y, cb, cr = (p.astype(np.float64) * max_code for p in frame.planes)
    if frame.chroma is Chroma.C420:
        cb, cr = upsample_chroma(cb), upsample_chroma(cr)
    mid = 1 << (frame.bit_depth - 1)
    if frame.full_range:
        return y / max_code, (cb - mid) / max_code, (cr - mid) / max_code
    scale = 1 << (frame.bit_depth - 8)
    return (y - 16 * scale) / (219 * scale), (cb - mid) / (224 * scale), (cr - mid) / (224 * scale)


def ycbcr_to_rgb(frame: HdrFrame) -> HdrFrame:
    """Y'CbCr (BT.2020 non-constant luminance) to R'G'B' in [0, 1]."""
    if frame.pixel_layout is not Layout.YCBCR:
        raise MetadataError(f"expected a YCbCr frame, got {frame.pixel_layout.value}")
    if frame.color_primaries is not Primaries.REC2020:
        raise MetadataError(f"unsupported primaries {frame.color_primaries.value}; only Rec2020 is handled")
    y, cb, cr = _ycbcr_signal(frame)
    r = y + 2 * (1 - KR_2020) * cr
    b = y + 2 * (1 - KB_2020) * cb
    g = (y - KR_2020 * r - KB_2020 * b) / KG_2020
    planes = tuple(np.clip(p, 0.0, 1.0).astype(np.float32) for p in (r, g, b))
    return frame.replace(planes=planes, pixel_layout=Layout.RGB, chroma=Chroma.C444, full_range=True)


def hlg_to_pq(frame: HdrFrame, peak_nits: float = 1000.0) -> HdrFrame:
    """Re-encode an HLG frame as PQ via display light at ``peak_nits``.

    Y'CbCr input is converted to R'G'B' first; the result is an RGB frame.
    Zero display light is written as code 0 rather than the curve's
    sub-LSB offset, so black stays black.
    """
    if frame.transfer is not Transfer.HLG:
        raise MetadataError(f"hlg_to_pq needs an HLG frame, got {frame.transfer.value}")
    if frame.pixel_layout is Layout.YCBCR:
        frame = ycbcr_to_rgb(frame)
    signal = np.stack([p.astype(np.float64) for p in frame.planes], axis=-1)
    display = hlg_ootf(hlg_inverse_oetf(signal), peak_nits)
    pq = np.where(display > 0, pq_oetf(np.minimum(display, PQ_PEAK_NITS)), 0.0)
    planes = tuple(np.clip(pq[..., i], 0.0, 1.0).astype(np.float32) for i in range(3))
    return frame.replace(planes=planes, transfer=Transfer.PQ)


# ---------------------------------------------------------------------------
# resampling


def _lanczos3(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 3, np.sinc(x) * np.sinc(x / 3), 0.0)


def _triangle(x: np.ndarray) -> np.ndarray:
    return np.maximum(1 - np.abs(x), 0.0)


FILTERS = {"lanczos3": (_lanczos3, 3.0), "bilinear": (_triangle, 1.0)}


def resample_matrix(n_in: int, n_out: int, filter: str = "lanczos3") -> np.ndarray:
    """Dense (n_out, n_in) weight matrix for 1-D resampling with pixel-centre alignment.

    When shrinking, the kernel is stretched by the reduction factor so it
    also acts as the anti-alias filter. Taps falling outside the signal are
    clamped to the edge sample.
    """
    kernel, support = FILTERS[filter]
    scale = n_out / n_in
    stretch = max(1.0, 1.0 / scale)
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    radius = support * stretch
    first = np.floor(centers - radius).astype(int)
    n_taps = int(np.ceil(2 * radius)) + 2
    taps = first[:, None] + np.arange(n_taps)[None, :]
    w = kernel((taps - centers[:, None]) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    rows = np.broadcast_to(np.arange(n_out)[:, None], taps.shape)
    np.add.at(m, (rows, np.clip(taps, 0, n_in - 1)), w)
    return m


def resize_plane(plane: np.ndarray, size: tuple[int, int], filter: str = "lanczos3") -> np.ndarray:
    """Resize a 2-D array to ``size`` = (width, height); returns float64, unclipped."""
    h, w = plane.shape
    width, height = size
    out = np.asarray(plane, dtype=np.float64)
    if height != h:
        out = resample_matrix(h, height, filter) @ out
    if width != w:
        out = out @ resample_matrix(w, width, filter).T
    return out


def rescale(frame: HdrFrame, target: tuple[int, int], filter: str = "lanczos3") -> HdrFrame:
    """Resize a frame to ``target`` = (width, height), clipping the result to [0, 1]."""
    width, height = (int(v) for v in target)
    if width <= 0 or height <= 0:
        raise GeometryError(f"target dimensions must be positive, got {width}x{height}")
    if filter not in FILTERS:
        raise ValueError(f"unknown filter {filter!r}; choose from {sorted(FILTERS)}")
    if (width, height) == (frame.width, frame.height):
        return frame.replace(planes=tuple(p.copy() for p in frame.planes))
    sizes = [(width, height)] * 3
    if frame.chroma is Chroma.C420:
        if width % 2 or height % 2:
            raise GeometryError("4:2:0 frames need an even target size")
        sizes[1] = sizes[2] = (width // 2, height // 2)
    planes = tuple(np.clip(resize_plane(p, s, filter), 0.0, 1.0).astype(np.float32)
                   for p, s in zip(frame.planes, sizes))
    return frame.replace(planes=planes)
