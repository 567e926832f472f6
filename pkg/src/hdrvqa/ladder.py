"""Fine-tuning corpus construction.

Long HDR sources are cut into consecutive 120 s windows with one random
10 s clip per window. Each pristine clip is pushed through the bitrate /
resolution ladder by an external encoder, every output is scaled back to
3840x2160, and each resulting clip gets a distortion class: 0 for the
pristine clip, 1..9 for the rungs in ladder order.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hdrvqa.errors import ClipError, EncoderError
from hdrvqa.media import FrameGeometry, HdrFrame, load_frames

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
FULL_RES = (3840, 2160)
RUNG_RESOLUTIONS = {(3840, 2160), (1920, 1080), (1280, 720), (960, 540)}
CLIP_SECONDS = 10.0
SCENE_SECONDS = 120.0
MIN_SOURCE_SECONDS = 240.0
SOURCE_BITRATE_MBPS = 30.0
BITRATE_TOLERANCE = 0.15


@dataclass(frozen=True)
class LadderRung:
    name: str
    width: int
    height: int
    bitrate: float  # Mbps

    def __post_init__(self):
        if not self.bitrate > 0:
            raise ValueError(f"rung {self.name}: bitrate must be positive")
        if (self.width, self.height) not in RUNG_RESOLUTIONS:
            raise ValueError(f"rung {self.name}: unsupported resolution {self.width}x{self.height}")

    @property
    def bitrate_kbps(self) -> int:
        return int(round(self.bitrate * 1000))


def default_ladder() -> list[LadderRung]:
    """The nine (resolution, bitrate) rungs; list position + 1 is the distortion class."""
    table = [
        ((3840, 2160), "2160p", (15, 6, 3)),
        ((1920, 1080), "1080p", (9, 6, 1)),
        ((1280, 720), "720p", (4.6, 2.6)),
        ((960, 540), "540p", (2.2,)),
    ]
    return [LadderRung(f"{label}@{rate:g}M", w, h, float(rate))
            for (w, h), label, rates in table for rate in rates]


def load_ladder(path: str | os.PathLike | None) -> list[LadderRung]:
    """``None`` or ``"default"`` gives :func:`default_ladder`; otherwise a JSON list of rungs."""
    if path is None or str(path) == "default":
        return default_ladder()
    with open(path) as fh:
        return [LadderRung(**r) for r in json.load(fh)]


@dataclass
class SourceVideo:
    source_id: str
    duration: float
    transfer: str = "PQ"
    path: str = ""
    fps: float = 25.0


@dataclass
class ClipRecord:
    source_id: str
    clip_id: str
    scene_start: float
    clip_start: float
    duration: float = CLIP_SECONDS
    distortion_class: int = 0
    path: str = ""
    rng_seed: int = 0
    fps: float = 25.0
    width: int = FULL_RES[0]
    height: int = FULL_RES[1]
    rung: str | None = None
    target_bitrate_kbps: int | None = None
    achieved_bitrate_kbps: float | None = None
    training_frame: int | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.duration != CLIP_SECONDS:
            raise ClipError(f"{self.clip_id}: clips are {CLIP_SECONDS:g} s long, got {self.duration}")
        if not 0 <= self.distortion_class <= 9:
            raise ClipError(f"{self.clip_id}: distortion class {self.distortion_class} outside 0..9")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def derive_seed(global_seed: int, key: str) -> int:
    return int(np.random.SeedSequence([global_seed, stable_hash(key)]).generate_state(1)[0])


def fixed_windows(source: SourceVideo) -> list[tuple[float, float]]:
    n = int(source.duration // SCENE_SECONDS)
    return [(i * SCENE_SECONDS, (i + 1) * SCENE_SECONDS) for i in range(n)]


def segment_clips(source: SourceVideo, rng_seed: int,
                  scene_detector: Callable[[SourceVideo], Sequence[tuple[float, float]]] | None = None
                  ) -> list[ClipRecord]:
    """One uniformly placed 10 s clip inside each scene window of ``source``.

    Scenes default to consecutive 120 s windows; a detector returning
    (start, end) pairs may replace them. Clips never straddle a scene boundary.
    """
    if source.duration < MIN_SOURCE_SECONDS:
        raise ClipError(
            f"{source.source_id}: {source.duration:g} s is shorter than the {MIN_SOURCE_SECONDS:g} s minimum")
    scenes = list(scene_detector(source) if scene_detector else fixed_windows(source))
    rng = np.random.default_rng(rng_seed)
    clips = []
    for k, (start, end) in enumerate(scenes):
        if end - start < CLIP_SECONDS:
            continue
        offset = float(rng.uniform(0.0, end - start - CLIP_SECONDS))
        clips.append(ClipRecord(
            source_id=source.source_id, clip_id=f"{source.source_id}_s{k:03d}",
            scene_start=float(start), clip_start=round(start + offset, 3),
            rng_seed=rng_seed, fps=source.fps))
    return clips


def training_frame_index(clip_id: str, rng_seed: int, n_frames: int) -> int:
    """Uniform frame index in [0, n_frames), fixed by (clip_id, rng_seed)."""
    if n_frames < 1:
        raise ClipError(f"{clip_id}: no frames to sample")
    return int(np.random.default_rng([rng_seed, stable_hash(clip_id)]).integers(0, n_frames))


# ---------------------------------------------------------------------------
# external encoder


_X265_HDR10 = "hdr10=1:colorprim=bt2020:transfer=smpte2084:colormatrix=bt2020nc:repeat-headers=1"
_HLG_TO_PQ = ("zscale=tin=arib-std-b67:pin=bt2020:min=bt2020nc:t=linear:npl=1000,"
              "zscale=t=smpte2084:p=bt2020:m=bt2020nc,format=yuv420p10le")


@dataclass
class EncoderContract:
    """Templated commands for the external media tools.

    Every template is an argv list; ``{placeholders}`` in each element are
    filled with ``str.format``. A command succeeds iff it exits with 0
    within ``timeout`` seconds. ``probe`` must print ffprobe-style JSON
    (``streams[0].width/height/bit_rate`` and optionally ``format.bit_rate``).
    """

    cut: list[str] = field(default_factory=lambda: [
        "ffmpeg", "-v", "error", "-y", "-ss", "{start}", "-t", "{duration}", "-i", "{input}",
        "-vf", "{transfer_filter}", "-c:v", "libx265", "-pix_fmt", "{pix_fmt}",
        "-x265-params", "crf=4:" + _X265_HDR10, "-an", "{output}"])
    encode: list[str] = field(default_factory=lambda: [
        "ffmpeg", "-v", "error", "-y", "-i", "{input}", "-vf", "scale={width}:{height}:flags=lanczos",
        "-c:v", "libx265", "-pix_fmt", "{pix_fmt}", "-b:v", "{bitrate_kbps}k",
        "-x265-params", _X265_HDR10, "-an", "{output}"])
    upscale: list[str] = field(default_factory=lambda: [
        "ffmpeg", "-v", "error", "-y", "-i", "{input}", "-vf", "scale={width}:{height}:flags=lanczos",
        "-c:v", "libx265", "-pix_fmt", "{pix_fmt}", "-x265-params", "crf=4:" + _X265_HDR10,
        "-an", "{output}"])
    probe: list[str] = field(default_factory=lambda: [
        "ffprobe", "-v", "error", "-select_streams", "v:0",
        "-show_entries", "stream=width,height,bit_rate:format=bit_rate,duration", "-of", "json", "{input}"])
    decode_frame: list[str] = field(default_factory=lambda: [
        "ffmpeg", "-v", "error", "-y", "-i", "{input}", "-vf", "select=eq(n\\,{index})",
        "-vframes", "1", "-f", "rawvideo", "-pix_fmt", "{pix_fmt}", "{output}"])
    pix_fmt: str = "yuv420p10le"
    hlg_filter: str = _HLG_TO_PQ
    pq_filter: str = "null"
    container: str = ".mp4"
    timeout: float = 3600.0

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderContract":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown encoder keys: {unknown}")
        return cls(**d)

    def run(self, template: list[str], **values) -> str:
        values.setdefault("pix_fmt", self.pix_fmt)
        argv = [part.format(**values) for part in template]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except subprocess.TimeoutExpired as exc:
            raise EncoderError(f"{argv[0]} timed out after {self.timeout:g} s") from exc
        except OSError as exc:
            raise EncoderError(f"cannot run {argv[0]}: {exc}") from exc
        if proc.returncode != 0:
            raise EncoderError(f"{' '.join(argv)} exited with {proc.returncode}: {proc.stderr.strip()[-500:]}")
        return proc.stdout

    def probe_file(self, path: str | os.PathLike) -> dict:
        info = json.loads(self.run(self.probe, input=str(path)))
        stream = info["streams"][0]
        rate = stream.get("bit_rate") or info.get("format", {}).get("bit_rate")
        return {"width": int(stream["width"]), "height": int(stream["height"]),
                "bitrate_kbps": float(rate) / 1000 if rate is not None else None}


def apply_ladder(clip: ClipRecord, rungs: Sequence[LadderRung], encoder: EncoderContract,
                 out_dir: str | os.PathLike, tolerance: float = BITRATE_TOLERANCE,
                 resume: bool = False) -> list[ClipRecord]:
    """Encode a pristine 4K clip at every rung and bring each result back to 4K.

    Achieved bitrates outside ``tolerance`` are recorded as warnings on the
    returned records, not raised.
    """
    if clip.distortion_class != 0:
        raise ClipError(f"{clip.clip_id}: the ladder applies to pristine (class 0) clips only")
    if (clip.width, clip.height) != FULL_RES:
        raise ClipError(f"{clip.clip_id}: pristine clips must be {FULL_RES[0]}x{FULL_RES[1]}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for k, rung in enumerate(rungs, start=1):
        stem = f"{clip.clip_id}_c{k}"
        encoded = out_dir / f"{stem}_{rung.width}x{rung.height}{encoder.container}"
        final = out_dir / f"{stem}{encoder.container}"
        if not (resume and encoded.exists()):
            encoder.run(encoder.encode, input=clip.path, output=str(encoded), width=rung.width,
                        height=rung.height, bitrate_kbps=rung.bitrate_kbps)
        got = encoder.probe_file(encoded)
        warnings = []
        if got["bitrate_kbps"] is None:
            warnings.append("achieved bitrate unavailable from probe")
        elif abs(got["bitrate_kbps"] - rung.bitrate_kbps) > tolerance * rung.bitrate_kbps:
            warnings.append(f"achieved {got['bitrate_kbps']:.0f} kbps vs target {rung.bitrate_kbps} kbps "
                            f"(outside +/-{tolerance:.0%})")
        if not (resume and final.exists()):
            encoder.run(encoder.upscale, input=str(encoded), output=str(final),
                        width=FULL_RES[0], height=FULL_RES[1])
        up = encoder.probe_file(final)
        if (up["width"], up["height"]) != FULL_RES:
            raise EncoderError(f"{final}: upscaled output is {up['width']}x{up['height']}, expected 3840x2160")
        for w in warnings:
            log.warning("%s: %s", stem, w)
        records.append(dataclasses.replace(
            clip, clip_id=stem, distortion_class=k, path=str(final), rung=rung.name,
            target_bitrate_kbps=rung.bitrate_kbps, achieved_bitrate_kbps=got["bitrate_kbps"],
            width=up["width"], height=up["height"], training_frame=None, warnings=warnings))
    return records


def sample_training_frame(clip: ClipRecord, rng_seed: int, encoder: EncoderContract,
                          work_dir: str | os.PathLike) -> HdrFrame:
    """Decode the clip's pre-selected training frame."""
    index = training_frame_index(clip.clip_id, rng_seed, clip.n_frames)
    out = Path(work_dir) / f"{clip.clip_id}_f{index}.yuv"
    encoder.run(encoder.decode_frame, input=clip.path, output=str(out), index=index)
    geometry = FrameGeometry(width=clip.width, height=clip.height)
    (frame,) = load_frames(out, geometry, [0])
    return frame


# ---------------------------------------------------------------------------
# manifest


@dataclass
class CorpusManifest:
    sources: list[SourceVideo]
    clips: list[ClipRecord]
    ladder: list[LadderRung]
    global_seed: int
    encoder: dict = field(default_factory=dict)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        if d.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"manifest schema {d.get('schema_version')}, expected {MANIFEST_SCHEMA_VERSION}")
        return cls(sources=[SourceVideo(**s) for s in d["sources"]],
                   clips=[ClipRecord(**c) for c in d["clips"]],
                   ladder=[LadderRung(**r) for r in d["ladder"]],
                   global_seed=d["global_seed"], encoder=d.get("encoder", {}),
                   schema_version=d["schema_version"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike) -> str:
        text = self.dumps()
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CorpusManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def validate_manifest(manifest: CorpusManifest) -> None:
    """Check expansion, class partition and non-overlap; raises ClipError on violation."""
    pristine = [c for c in manifest.clips if c.distortion_class == 0]
    expected = len(pristine) * (1 + len(manifest.ladder))
    if len(manifest.clips) != expected:
        raise ClipError(f"manifest has {len(manifest.clips)} clips, expected {expected}")
    for c in manifest.clips:
        if (c.distortion_class == 0) != (c.rung is None):
            raise ClipError(f"{c.clip_id}: class {c.distortion_class} inconsistent with rung {c.rung}")
    by_source: dict[str, list[ClipRecord]] = {}
    for c in pristine:
        by_source.setdefault(c.source_id, []).append(c)
    for sid, clips in by_source.items():
        for a in range(len(clips)):
            for b in range(a + 1, len(clips)):
                x, y = clips[a], clips[b]
                if x.clip_start < y.clip_start + y.duration and y.clip_start < x.clip_start + x.duration:
                    raise ClipError(f"{sid}: clips {x.clip_id} and {y.clip_id} overlap")


def read_sources(path: str | os.PathLike) -> list[SourceVideo]:
    """Source list as JSON (list of objects) or CSV with a header row."""
    path = Path(path)
    if path.suffix == ".json":
        return [SourceVideo(**s) for s in json.loads(path.read_text())]
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [SourceVideo(source_id=r["source_id"], duration=float(r["duration"]),
                        transfer=r.get("transfer") or "PQ", path=r.get("path", ""),
                        fps=float(r.get("fps") or 25.0)) for r in rows]


def _cut_clip(clip: ClipRecord, source: SourceVideo, encoder: EncoderContract, out_dir: Path,
              resume: bool) -> ClipRecord:
    path = out_dir / f"{clip.clip_id}_c0{encoder.container}"
    if not (resume and path.exists()):
        encoder.run(encoder.cut, input=source.path, output=str(path), start=f"{clip.clip_start:.3f}",
                    duration=f"{clip.duration:g}",
                    transfer_filter=encoder.hlg_filter if source.transfer.upper() == "HLG" else encoder.pq_filter)
    info = encoder.probe_file(path)
    return dataclasses.replace(clip, clip_id=f"{clip.clip_id}_c0", path=str(path),
                               width=info["width"], height=info["height"])


def forge_clip(clip: ClipRecord, source: SourceVideo, ladder: Sequence[LadderRung],
               encoder: EncoderContract, out_dir: str | os.PathLike, global_seed: int = 0,
               resume: bool = False) -> list[ClipRecord]:
    """Cut one planned clip from its source and run it down the ladder: 1 + len(ladder) records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pristine = _cut_clip(clip, source, encoder, out_dir, resume)
    group = [pristine] + apply_ladder(pristine, ladder, encoder, out_dir, resume=resume)
    for c in group:
        c.training_frame = training_frame_index(c.clip_id, global_seed, c.n_frames)
    return group


def forge(sources: Sequence[SourceVideo], ladder: Sequence[LadderRung], global_seed: int,
          out_dir: str | os.PathLike, encoder: EncoderContract | None = None, workers: int = 1,
          resume: bool = False,
          scene_detector: Callable[[SourceVideo], Sequence[tuple[float, float]]] | None = None
          ) -> CorpusManifest:
    """Build the whole corpus; a pure function of (sources, ladder, global_seed) up to encoder output."""
    encoder = encoder or EncoderContract()
    out_dir = Path(out_dir)
    clip_dir = out_dir / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    by_id = {s.source_id: s for s in sources}
    if len(by_id) != len(sources):
        raise ClipError("duplicate source ids")

    planned = []
    for src in sources:
        planned.extend(segment_clips(src, derive_seed(global_seed, src.source_id), scene_detector))

    def job(clip: ClipRecord) -> list[ClipRecord]:
        return forge_clip(clip, by_id[clip.source_id], ladder, encoder, clip_dir, global_seed, resume)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, planned))
    else:
        results = [job(c) for c in planned]

    clips = [c for group in results for c in group]
    manifest = CorpusManifest(sources=list(sources), clips=clips, ladder=list(ladder),
                              global_seed=global_seed, encoder=dataclasses.asdict(encoder))
    validate_manifest(manifest)
    manifest.save(out_dir / "manifest.json")
    return manifest


def expected_corpus_size(n_pristine: int, n_rungs: int = 9) -> int:
    return n_pristine * (1 + n_rungs)


def windows_for(duration: float) -> int:
    return int(math.floor(duration / SCENE_SECONDS))
