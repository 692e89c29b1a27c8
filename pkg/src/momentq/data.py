"""Synthetic grounding videos, QVHighlights-style annotations and MQFT feature files.

MQFT layout (little-endian)::

    b"MQFT" | u32 version | u32 rows | u32 cols | rows*cols values | [u32 trailer]

Version 1 stores float32 values (feature files). Version 2 stores float64
values and is only used inside checkpoints, where parameters must survive a
round trip bit-exactly. The optional trailer carries the patch count P for
flattened (T*P) x d patch matrices.
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

MQFT_MAGIC = b"MQFT"
_HEADER = struct.Struct("<4sIII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class UnsupportedVersionError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class AnnotationError(ValueError):
    pass


# ---------------------------------------------------------------- MQFT


def encode_features(matrix, version: int = 1, trailer: Optional[int] = None) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FeatureFormatError(f"expected a 2-D matrix, got shape {m.shape}")
    if version not in _DTYPES:
        raise UnsupportedVersionError(f"unsupported MQFT version {version}")
    if not np.all(np.isfinite(m)):
        raise FeatureFormatError("matrix contains non-finite values")
    payload = np.ascontiguousarray(m, dtype=_DTYPES[version]).tobytes()
    out = _HEADER.pack(MQFT_MAGIC, version, m.shape[0], m.shape[1]) + payload
    if trailer is not None:
        out += struct.pack("<I", trailer)
    return out


def read_matrix(fh: BinaryIO, allow_trailer: bool = False) -> Tuple[np.ndarray, Optional[int]]:
    """Read one MQFT matrix from an open stream; returns (matrix, trailer)."""
    head = fh.read(_HEADER.size)
    if len(head) < 4 or head[:4] != MQFT_MAGIC:
        raise BadMagicError("not an MQFT file")
    if len(head) < _HEADER.size:
        raise TruncatedPayloadError("truncated MQFT header")
    _, version, rows, cols = _HEADER.unpack(head)
    if version not in _DTYPES:
        raise UnsupportedVersionError(f"unsupported MQFT version {version}")
    dt = _DTYPES[version]
    need = rows * cols * dt.itemsize
    payload = fh.read(need)
    if len(payload) < need:
        got = len(payload) // max(cols * dt.itemsize, 1)
        raise TruncatedPayloadError(
            f"truncated MQFT payload: header says {rows}x{cols} but only {got} full rows present")
    values = np.frombuffer(payload, dtype=dt).astype(np.float64).reshape(rows, cols)
    trailer = None
    if allow_trailer:
        rest = fh.read()
        if len(rest) == 4:
            trailer = struct.unpack("<I", rest)[0]
        elif rest:
            raise FeatureFormatError(f"unexpected {len(rest)} trailing bytes")
    return values, trailer


def write_features(path, matrix, trailer: Optional[int] = None, version: int = 1) -> None:
    Path(path).write_bytes(encode_features(matrix, version=version, trailer=trailer))


def read_features(path, with_trailer: bool = False):
    with open(path, "rb") as fh:
        values, trailer = read_matrix(fh, allow_trailer=True)
    return (values, trailer) if with_trailer else values


def write_patches(path, patches) -> None:
    """Store a T x P x d patch tensor flattened to (T*P) x d with P in the trailer."""
    p = np.asarray(patches)
    T, P, d = p.shape
    write_features(path, p.reshape(T * P, d), trailer=P)


def read_patches(path) -> np.ndarray:
    flat, P = read_features(path, with_trailer=True)
    if not P:
        raise FeatureFormatError(f"{path}: patch file lacks the P trailer")
    if flat.shape[0] % P:
        raise FeatureFormatError(f"{path}: {flat.shape[0]} rows not divisible by P={P}")
    return flat.reshape(flat.shape[0] // P, P, flat.shape[1])


# ---------------------------------------------------------------- samples & annotations


@dataclass
class VideoSample:
    vid: str
    duration: float
    clip_features: np.ndarray
    query_features: np.ndarray
    gt_windows: List[List[float]]
    saliency_labels: np.ndarray
    patch_features: Optional[np.ndarray] = None
    qid: int = 0
    query: Optional[str] = None
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_clips(self) -> int:
        return self.clip_features.shape[0]

    @property
    def clip_len(self) -> float:
        return self.duration / self.num_clips


@dataclass
class AnnotationRecord:
    qid: int
    vid: str
    duration: float
    relevant_windows: List[List[float]]
    saliency: List[float]
    query: Optional[str] = None

    def to_json(self) -> dict:
        out = {"qid": self.qid, "vid": self.vid, "duration": self.duration,
               "relevant_windows": self.relevant_windows, "saliency": self.saliency}
        if self.query is not None:
            out["query"] = self.query
        return out


def validate_record(raw: dict) -> AnnotationRecord:
    """Parse one annotation dict, raising AnnotationError on any invariant breach."""
    for key in ("qid", "vid", "duration", "relevant_windows", "saliency"):
        if key not in raw:
            raise AnnotationError(f"missing field {key!r}")
    duration = float(raw["duration"])
    if not duration > 0:
        raise AnnotationError("duration must be positive")
    windows = []
    for w in raw["relevant_windows"]:
        if len(w) != 2:
            raise AnnotationError(f"window {w} is not a [start, end] pair")
        s, e = float(w[0]), float(w[1])
        if s >= e:
            raise AnnotationError(f"window {w}: start ≥ end")
        if s < 0 or e > duration:
            raise AnnotationError(f"window {w} outside [0, {duration}]")
        windows.append([s, e])
    saliency = [float(v) for v in raw["saliency"]]
    if not saliency:
        raise AnnotationError("empty saliency array")
    return AnnotationRecord(int(raw["qid"]), str(raw["vid"]), duration, windows, saliency,
                            raw.get("query"))


def load_annotations(path) -> List[AnnotationRecord]:
    """Read a JSON Lines annotation file.

    Malformed JSON raises with the line number; records that parse but break
    an invariant are skipped and logged.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(raw, dict):
                raise AnnotationError(f"{path}:{lineno}: expected a JSON object")
            try:
                records.append(validate_record(raw))
            except (AnnotationError, TypeError, ValueError) as exc:
                log.warning("%s:%d: rejected record: %s", path, lineno, exc)
    return records


def write_annotations(path, records: Sequence[AnnotationRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def labels_from_windows(windows, num_clips: int, clip_len: float) -> np.ndarray:
    """1.0 for clips whose center lies inside any window, else 0.0."""
    centers = (np.arange(num_clips) + 0.5) * clip_len
    lab = np.zeros(num_clips)
    for s, e in windows:
        lab[(centers >= s) & (centers <= e)] = 1.0
    return lab


def sample_to_record(sample: VideoSample) -> AnnotationRecord:
    return AnnotationRecord(sample.qid, sample.vid, float(sample.duration),
                            [list(map(float, w)) for w in sample.gt_windows],
                            [float(v) for v in sample.saliency_labels], sample.query)


# ---------------------------------------------------------------- synthetic generator


@dataclass
class SyntheticSpec:
    num_videos: int = 250
    T: int = 32
    P: int = 4
    d: int = 64
    num_prototypes: int = 16
    moments_per_video: Tuple[int, int] = (1, 3)
    moment_length: Tuple[int, int] = (2, 6)
    noise_sigma: float = 0.5
    foreground_similarity: float = 0.7
    query_tokens: int = 8
    clip_len: float = 2.0
    num_val: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.num_prototypes < 2:
            raise ValueError("num_prototypes must be at least 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.T < 4:
            raise ValueError("T must be at least 4")
        if not -1.0 <= self.foreground_similarity <= 1.0:
            raise ValueError("foreground_similarity must lie in [-1, 1]")
        lo, hi = self.moments_per_video
        mlo, mhi = self.moment_length
        if not 1 <= lo <= hi or not 1 <= mlo <= mhi:
            raise ValueError("moment count and length ranges must be positive and ordered")
        # each moment needs a background clip after it
        if hi * (mhi + 1) > self.T:
            raise ValueError(f"infeasible spec: {hi} moments of up to {mhi} clips do not fit in "
                             f"T={self.T} clips")
        if not 0 <= self.num_val < self.num_videos:
            raise ValueError("num_val must be in [0, num_videos)")
        if self.query_tokens < 1 or self.P < 0 or self.d < 2:
            raise ValueError("query_tokens >= 1, P >= 0 and d >= 2 required")


@dataclass
class Dataset:
    train: List[VideoSample]
    val: List[VideoSample]
    prototypes: Optional[np.ndarray] = None


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def hard_background(fg: np.ndarray, similarity: float, rng) -> np.ndarray:
    """Unit vector at exactly the given cosine to unit vector ``fg``."""
    u = rng.normal(size=fg.shape)
    u = _unit(u - (u @ fg) * fg)
    return similarity * fg + np.sqrt(max(0.0, 1.0 - similarity ** 2)) * u


def _f32(a):
    # keep features float32-representable so MQFT round trips are exact
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _place_moments(rng, spec: SyntheticSpec) -> List[Tuple[int, int]]:
    n = int(rng.integers(spec.moments_per_video[0], spec.moments_per_video[1] + 1))
    lengths = rng.integers(spec.moment_length[0], spec.moment_length[1] + 1, size=n)
    # split the spare clips into n+1 gaps, interior gaps at least one clip
    spare = spec.T - int(lengths.sum()) - (n - 1)
    cuts = np.sort(rng.integers(0, spare + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans, t = [], 0
    for i in range(n):
        t += int(gaps[i]) + (1 if i else 0)
        spans.append((t, t + int(lengths[i])))
        t += int(lengths[i])
    return spans


def _make_video(idx: int, spec: SyntheticSpec, protos: np.ndarray) -> VideoSample:
    rng = np.random.default_rng([spec.seed, idx])
    d, T = spec.d, spec.T
    fg_id = int(rng.integers(len(protos)))
    fg = protos[fg_id]
    hard = hard_background(fg, spec.foreground_similarity, rng)
    others = [i for i in range(len(protos)) if i != fg_id]
    bg_ids = rng.choice(others, size=min(2, len(others)), replace=False)
    bg_pool = np.vstack([hard[None, :], protos[bg_ids]])

    spans = _place_moments(rng, spec)
    is_fg = np.zeros(T, dtype=bool)
    for s, e in spans:
        is_fg[s:e] = True
    # background scenes come in runs; the hard negative always appears
    scene = np.empty(T, dtype=int)
    t = 0
    while t < T:
        run = int(rng.integers(2, 7))
        scene[t:t + run] = int(rng.integers(len(bg_pool)))
        t += run
    bg_clips = np.flatnonzero(~is_fg)
    scene[bg_clips[int(rng.integers(len(bg_clips)))]] = 0
    base = np.where(is_fg[:, None], fg[None, :], bg_pool[scene])

    sigma = spec.noise_sigma / np.sqrt(d)
    if spec.P > 0:
        patches = base[:, None, :] + sigma * rng.normal(size=(T, spec.P, d))
        patches = _f32(patches)
        clips = patches.max(axis=1)
    else:
        patches = None
        clips = _f32(base + sigma * rng.normal(size=(T, d)))
    query = _f32(fg[None, :] + sigma * rng.normal(size=(spec.query_tokens, d)))

    windows = [[s * spec.clip_len, e * spec.clip_len] for s, e in spans]
    duration = T * spec.clip_len
    return VideoSample(
        vid=f"v{idx:05d}", duration=duration, clip_features=clips, query_features=query,
        gt_windows=windows, saliency_labels=labels_from_windows(windows, T, spec.clip_len),
        patch_features=patches, qid=idx, query=f"prototype {fg_id}",
        meta={"fg_prototype": fg_id, "fg": fg, "hard": hard, "scene": scene, "is_fg": is_fg},
    )


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate a seeded train/val split of synthetic grounding videos.

    Features are unit-norm scene prototypes plus isotropic noise with
    per-element standard deviation ``noise_sigma / sqrt(d)``. Every video
    gets a "hard" background prototype sitting at cosine
    ``foreground_similarity`` from its foreground prototype.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    protos = _unit(rng.normal(size=(spec.num_prototypes, spec.d)))
    videos = [_make_video(i, spec, protos) for i in range(spec.num_videos)]
    n_train = spec.num_videos - spec.num_val
    return Dataset(train=videos[:n_train], val=videos[n_train:], prototypes=protos)


# ---------------------------------------------------------------- on-disk datasets


SPLITS = ("train", "val")


def save_dataset(dataset: Dataset, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    feat = out / "features"
    feat.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in SPLITS:
        samples = getattr(dataset, split)
        p = out / f"{split}.jsonl"
        write_annotations(p, [sample_to_record(s) for s in samples])
        paths[split] = p
        for s in samples:
            write_features(feat / f"{s.vid}.clip.mqft", s.clip_features)
            write_features(feat / f"q{s.qid}.text.mqft", s.query_features)
            if s.patch_features is not None:
                write_patches(feat / f"{s.vid}.patch.mqft", s.patch_features)
    return paths


def load_split(data_dir, split: str) -> List[VideoSample]:
    root = Path(data_dir)
    feat = root / "features"
    samples = []
    for rec in load_annotations(root / f"{split}.jsonl"):
        clips = read_features(feat / f"{rec.vid}.clip.mqft")
        text = read_features(feat / f"q{rec.qid}.text.mqft")
        patch_path = feat / f"{rec.vid}.patch.mqft"
        patches = read_patches(patch_path) if patch_path.exists() else None
        if len(rec.saliency) != clips.shape[0]:
            log.warning("qid %s: %d saliency values for %d clips; skipped",
                        rec.qid, len(rec.saliency), clips.shape[0])
            continue
        samples.append(VideoSample(
            vid=rec.vid, duration=rec.duration, clip_features=clips, query_features=text,
            gt_windows=rec.relevant_windows, saliency_labels=np.asarray(rec.saliency),
            patch_features=patches, qid=rec.qid, query=rec.query))
    return samples


def load_dataset(data_dir) -> Dataset:
    return Dataset(train=load_split(data_dir, "train"), val=load_split(data_dir, "val"))


def dataset_bytes(dataset: Dataset) -> bytes:
    """Canonical byte serialization, used for determinism checks."""
    buf = io.BytesIO()
    for split in SPLITS:
        for s in getattr(dataset, split):
            buf.write(json.dumps(sample_to_record(s).to_json()).encode())
            buf.write(encode_features(s.clip_features, version=2))
            buf.write(encode_features(s.query_features, version=2))
            if s.patch_features is not None:
                buf.write(encode_features(s.patch_features.reshape(-1, s.patch_features.shape[-1]),
                                          version=2))
    return buf.getvalue()
