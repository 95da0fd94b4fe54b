"""Synthetic dense audio-visual event datasets, plus feature/annotation I/O.

Feature files use the DELF container: magic ``DELF``, a version byte, then
one block per stream (video first, audio second), each block being
``u32 rows, u32 cols`` followed by row-major little-endian float32 values.
Annotations and dataset manifests are JSON.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

__all__ = [
    "FeatureSequence",
    "EventAnnotation",
    "SynthConfig",
    "FeatureFileError",
    "BadMagicError",
    "TruncatedPayloadError",
    "ShapeMismatchError",
    "AnnotationError",
    "generate_synthetic_dataset",
    "save_features",
    "load_features",
    "save_annotations",
    "load_annotations",
    "read_annotation_record",
    "pad_or_crop",
    "clip_annotations",
    "write_dataset",
    "load_manifest",
    "load_split",
]

MAGIC = b"DELF"
VERSION = 1


class FeatureFileError(ValueError):
    """Base class for feature-container parse failures."""


class BadMagicError(FeatureFileError):
    pass


class TruncatedPayloadError(FeatureFileError):
    pass


class ShapeMismatchError(FeatureFileError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass
class EventAnnotation:
    """One ground-truth event, boundaries in segment-index units."""

    start: float
    end: float
    label: int

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise AnnotationError(f"non-finite boundaries ({self.start}, {self.end})")
        if self.end <= self.start:
            raise AnnotationError(f"event end {self.end} <= start {self.start}")
        if self.start < 0:
            raise AnnotationError(f"negative event start {self.start}")
        if self.label < 0:
            raise AnnotationError(f"negative label {self.label}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class FeatureSequence:
    """Paired per-segment visual/audio feature matrices for one video."""

    id: str
    video: np.ndarray
    audio: np.ndarray
    frame_rate_hint: float | None = None

    def __post_init__(self):
        self.video = np.asarray(self.video, dtype=np.float64)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        for name, m in (("video", self.video), ("audio", self.audio)):
            if m.ndim != 2 or m.shape[0] < 1:
                raise ValueError(f"{name} stream must be a non-empty 2-D matrix")
            if not np.isfinite(m).all():
                raise ValueError(f"{name} stream contains non-finite values")


@dataclass
class SynthConfig:
    num_videos: int = 200
    T: int = 64
    d_v: int = 32
    d_a: int = 32
    num_classes: int = 5
    events_mean: float = 2.5
    events_max: int = 4
    overlap_probability: float = 0.25
    duration_min: int = 6
    duration_max: int = 20
    modality_coupling: str = "coupled"  # audio_only | visual_only | coupled
    misalignment_jitter: int = 0
    snr: float = 3.0
    seed: int = 7

    def validate(self) -> None:
        if self.num_videos < 1 or self.T < 1 or self.d_v < 1 or self.d_a < 1:
            raise ValueError("num_videos, T and feature widths must be >= 1")
        if self.num_classes < 1:
            raise ValueError("need at least one event class")
        if not (0 < self.duration_min <= self.duration_max <= self.T):
            raise ValueError(
                f"duration range ({self.duration_min}, {self.duration_max}) must lie within (0, T={self.T}]")
        if not 0.0 <= self.overlap_probability <= 1.0:
            raise ValueError("overlap_probability must be in [0, 1]")
        if self.events_max < 1 or self.events_mean <= 0:
            raise ValueError("events_per_video distribution must allow at least one event")
        if self.modality_coupling not in ("audio_only", "visual_only", "coupled"):
            raise ValueError(f"unknown modality_coupling {self.modality_coupling!r}")
        if self.misalignment_jitter < 0:
            raise ValueError("misalignment_jitter must be >= 0")
        if self.snr < 0:
            raise ValueError("snr must be >= 0")


# -- signal construction ------------------------------------------------------

# Split-noise scale relative to the per-channel code amplitude: large enough
# that one stream alone carries almost no class information.
_SPLIT_NOISE_FACTOR = 4.0


def _orthonormal_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if n > d:
        raise ValueError(f"cannot draw {n} orthonormal directions in {d} dims")
    q, _ = np.linalg.qr(rng.standard_normal((d, n)))
    return q.T[:n]


def class_signatures(cfg: SynthConfig) -> dict:
    """Deterministic per-class signal directions and code words.

    Coupled mode assigns each class a +-1 code word over ceil(log2(K))
    channels; each channel's code is split antisymmetrically across the
    two streams so a single stream sees only code/2 plus heavy shared
    noise, while the sum across streams recovers the code exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC1A55]))
    k = cfg.num_classes
    n_channels = max(1, math.ceil(math.log2(max(k, 2))))
    codes = np.ones((k, n_channels))
    for c in range(k):
        for j in range(n_channels):
            codes[c, j] = 1.0 if (c >> j) & 1 else -1.0
    return {
        "channels_v": _orthonormal_rows(rng, n_channels, cfg.d_v),
        "channels_a": _orthonormal_rows(rng, n_channels, cfg.d_a),
        "codes": codes,
        "class_v": _orthonormal_rows(rng, min(k, cfg.d_v), cfg.d_v),
        "class_a": _orthonormal_rows(rng, min(k, cfg.d_a), cfg.d_a),
    }


def _place_events(rng: np.random.Generator, cfg: SynthConfig) -> list[EventAnnotation]:
    n = int(np.clip(rng.poisson(cfg.events_mean), 1, cfg.events_max))
    events: list[EventAnnotation] = []
    for _ in range(n):
        dur = int(rng.integers(cfg.duration_min, cfg.duration_max + 1))
        label = int(rng.integers(cfg.num_classes))
        allow_overlap = rng.random() < cfg.overlap_probability
        start = None
        for _attempt in range(64):
            cand = int(rng.integers(0, cfg.T - dur + 1))
            if allow_overlap or all(cand + dur <= e.start or cand >= e.end for e in events):
                start = cand
                break
        if start is None:
            continue  # no room left at this duration
        events.append(EventAnnotation(float(start), float(start + dur), label))
    return events


def _inject(video: np.ndarray, audio: np.ndarray, ev: EventAnnotation,
            sig: dict, cfg: SynthConfig, rng: np.random.Generator) -> None:
    v_lo, v_hi = int(ev.start), int(ev.end)
    jitter = int(rng.integers(-cfg.misalignment_jitter, cfg.misalignment_jitter + 1)) \
        if cfg.misalignment_jitter > 0 else 0
    a_lo = int(np.clip(v_lo + jitter, 0, cfg.T - (v_hi - v_lo)))
    a_hi = a_lo + (v_hi - v_lo)
    amp = cfg.snr
    if cfg.modality_coupling == "audio_only":
        audio[a_lo:a_hi] += amp * sig["class_a"][ev.label % len(sig["class_a"])]
        rng.standard_normal()  # keep the draw sequence coupling-independent
    elif cfg.modality_coupling == "visual_only":
        video[v_lo:v_hi] += amp * sig["class_v"][ev.label % len(sig["class_v"])]
        rng.standard_normal()
    else:
        code = sig["codes"][ev.label]
        for j in range(code.shape[0]):
            eta = rng.standard_normal() * (_SPLIT_NOISE_FACTOR * amp)
            video[v_lo:v_hi] += (amp * code[j] / 2.0 + eta) * sig["channels_v"][j]
            audio[a_lo:a_hi] += (amp * code[j] / 2.0 - eta) * sig["channels_a"][j]


def generate_synthetic_dataset(cfg: SynthConfig):
    """Build ``cfg.num_videos`` feature sequences with exact annotations.

    Deterministic per seed; features are quantized to float32 values so
    DELF round trips are bit-identical.
    """
    cfg.validate()
    sig = class_signatures(cfg)
    sequences: list[FeatureSequence] = []
    annotations: list[list[EventAnnotation]] = []
    for idx in range(cfg.num_videos):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x71DE0, idx]))
        video = rng.standard_normal((cfg.T, cfg.d_v))
        audio = rng.standard_normal((cfg.T, cfg.d_a))
        events = _place_events(rng, cfg)
        for ev in events:
            _inject(video, audio, ev, sig, cfg, rng)
        video = video.astype(np.float32).astype(np.float64)
        audio = audio.astype(np.float32).astype(np.float64)
        sequences.append(FeatureSequence(id=f"synth_{idx:05d}", video=video, audio=audio))
        annotations.append(sorted(events, key=lambda e: (e.start, e.end, e.label)))
    return sequences, annotations


# -- DELF container -----------------------------------------------------------


def _pack_matrix(m: np.ndarray) -> bytes:
    rows, cols = m.shape
    return struct.pack("<II", rows, cols) + m.astype("<f4").tobytes()


def save_features(seq: FeatureSequence, path) -> None:
    payload = MAGIC + bytes([VERSION]) + _pack_matrix(seq.video) + _pack_matrix(seq.audio)
    Path(path).write_bytes(payload)


def _read_matrix(buf: bytes, off: int, what: str) -> tuple[np.ndarray, int]:
    if off + 8 > len(buf):
        raise TruncatedPayloadError(f"{what}: header cut short at byte {off}")
    rows, cols = struct.unpack_from("<II", buf, off)
    off += 8
    if rows == 0 or cols == 0:
        raise ShapeMismatchError(f"{what}: header declares degenerate shape {rows}x{cols}")
    nbytes = rows * cols * 4
    if off + nbytes > len(buf):
        raise TruncatedPayloadError(
            f"{what}: header declares {rows}x{cols} but payload holds "
            f"{(len(buf) - off) // 4} of {rows * cols} values")
    m = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).astype(np.float64)
    return m.reshape(rows, cols), off + nbytes


def load_features(path, id: str | None = None, frame_rate_hint: float | None = None) -> FeatureSequence:
    p = Path(path)
    buf = p.read_bytes()
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise BadMagicError(f"{p}: not a DELF feature file")
    if buf[4] != VERSION:
        raise BadMagicError(f"{p}: unsupported DELF version {buf[4]}")
    video, off = _read_matrix(buf, 5, "video block")
    audio, off = _read_matrix(buf, off, "audio block")
    if off != len(buf):
        raise ShapeMismatchError(f"{p}: {len(buf) - off} trailing bytes beyond declared shapes")
    return FeatureSequence(id=id or p.stem, video=video, audio=audio,
                           frame_rate_hint=frame_rate_hint)


# -- annotation JSON ----------------------------------------------------------


def save_annotations(video_id: str, duration: float, events, path) -> None:
    doc = {
        "id": video_id,
        "duration": float(duration),
        "events": [{"start": e.start, "end": e.end, "label": e.label} for e in events],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def read_annotation_record(path) -> tuple[str, float, list[EventAnnotation]]:
    doc = json.loads(Path(path).read_text())
    try:
        events = [EventAnnotation(float(e["start"]), float(e["end"]), int(e["label"]))
                  for e in doc["events"]]
        return str(doc["id"]), float(doc["duration"]), events
    except KeyError as exc:
        raise AnnotationError(f"{path}: missing field {exc}") from exc


def load_annotations(path) -> list[EventAnnotation]:
    return read_annotation_record(path)[2]


# -- fixed-length standardization ----------------------------------------------


def pad_or_crop(seq: FeatureSequence, t_fixed: int) -> FeatureSequence:
    """Zero-pad or crop both streams at the tail to exactly t_fixed rows."""
    if t_fixed < 1:
        raise ValueError("t_fixed must be >= 1")

    def fit(m: np.ndarray) -> np.ndarray:
        if m.shape[0] == t_fixed:
            return m.copy()
        if m.shape[0] > t_fixed:
            return m[:t_fixed].copy()
        out = np.zeros((t_fixed, m.shape[1]))
        out[:m.shape[0]] = m
        return out

    return FeatureSequence(id=seq.id, video=fit(seq.video), audio=fit(seq.audio),
                           frame_rate_hint=seq.frame_rate_hint)


def clip_annotations(events, t_fixed: int) -> list[EventAnnotation]:
    """Clip events to [0, t_fixed]; events entirely outside are dropped."""
    out = []
    for e in events:
        start = max(0.0, min(e.start, float(t_fixed)))
        end = max(0.0, min(e.end, float(t_fixed)))
        if end > start:
            out.append(EventAnnotation(start, end, e.label))
    return out


# -- dataset directories --------------------------------------------------------


def write_dataset(out_dir, splits: dict, cfg: SynthConfig | None = None) -> dict:
    """Write features/annotations/manifest for {split: [(seq, events), ...]}."""
    root = Path(out_dir)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "avloc-dataset",
        "version": 1,
        "t": cfg.T if cfg else None,
        "num_classes": cfg.num_classes if cfg else None,
        "config": asdict(cfg) if cfg else None,
        "splits": {},
        "files": {},
    }
    for split, items in splits.items():
        ids = []
        for seq, events in items:
            feat_rel = f"features/{seq.id}.delf"
            ann_rel = f"annotations/{seq.id}.json"
            save_features(seq, root / feat_rel)
            save_annotations(seq.id, seq.video.shape[0], events, root / ann_rel)
            manifest["files"][seq.id] = {"features": feat_rel, "annotations": ann_rel}
            ids.append(seq.id)
        manifest["splits"][split] = ids
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {data_dir}")
    return json.loads(path.read_text())


def load_split(data_dir, split: str):
    """Load (FeatureSequence, events) pairs for one manifest split."""
    root = Path(data_dir)
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in manifest (have {list(manifest['splits'])})")
    items = []
    for vid in manifest["splits"][split]:
        entry = manifest["files"][vid]
        seq = load_features(root / entry["features"], id=vid)
        events = load_annotations(root / entry["annotations"])
        items.append((seq, events))
    return items
