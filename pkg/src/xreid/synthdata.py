"""Synthetic two-modality video dataset and its binary file format.

File layout (little-endian)::

    b"XRD1"  u32 version
    u32 Y  u32 clips_per_modality  u32 T  u32 H  u32 W
    repeated Y*2*clips times:
        u32 identity  u8 modality (0=VIS, 1=IR)  u32 clip_index
        f32[T*H*W] frames, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

VIS, IR = 0, 1
MODALITY_NAMES = {VIS: "VIS", IR: "IR"}

MAGIC = b"XRD1"
VERSION = 1
_HEADER = struct.Struct("<4sI5I")
_CLIP_HEADER = struct.Struct("<IBI")


class DatasetFormatError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_ids: int = 16
    clips_per_modality: int = 4
    T: int = 4
    H: int = 32
    W: int = 16
    identity_strength: float = 1.0
    gap: float = 0.5
    jitter: float = 0.25
    noise: float = 0.05
    p_occ: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("identity_strength", "gap", "jitter", "noise", "p_occ"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.p_occ > 1:
            raise ValueError("p_occ must be <= 1")


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W) in [0, 1]
    identity: int
    modality: int
    clip_index: int
    clip_id: int


@dataclass
class Dataset:
    n_ids: int
    clips_per_modality: int
    T: int
    H: int
    W: int
    clips: list[VideoClip] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clips)

    def split(self, part: str) -> list[VideoClip]:
        """Closed-set split: the first half of each identity's clips per modality train, the rest test."""
        cut = max(1, self.clips_per_modality // 2)
        if part == "train":
            return [c for c in self.clips if c.clip_index < cut]
        if part == "test":
            return [c for c in self.clips if c.clip_index >= cut]
        if part == "all":
            return list(self.clips)
        raise ValueError(f"unknown split {part!r}")


def _identity_pattern(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    # coarse body layout: 8 vertical bands x 4 columns, upsampled and softened
    coarse = rng.uniform(0.0, 1.0, size=(8, 4))
    img = np.kron(coarse, np.ones((cfg.H // 8, cfg.W // 4)))
    img = uniform_filter(img, size=3, mode="nearest")
    return 0.5 + cfg.identity_strength * (img - 0.5)


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    return np.roll(img, (dy, dx), axis=(0, 1))


def ir_transform(img: np.ndarray, gap: float) -> np.ndarray:
    """Blend toward an inverted, blurred intensity remap; identity at gap=0."""
    remapped = 0.9 - 0.8 * uniform_filter(img, size=3, mode="nearest")
    return (1.0 - gap) * img + gap * remapped


def _make_clip(pattern: np.ndarray, cfg: SynthConfig, rng: np.random.Generator, modality: int) -> np.ndarray:
    frames = np.empty((cfg.T, cfg.H, cfg.W))
    base = np.rint(rng.normal(0.0, 2.0 * cfg.jitter, size=2)).astype(int)
    gain = 1.0 + rng.normal(0.0, 0.1) if cfg.noise > 0 else 1.0
    for t in range(cfg.T):
        d = base + np.rint(rng.normal(0.0, cfg.jitter, size=2)).astype(int)
        img = _shift(pattern, int(d[0]), int(d[1])) * gain
        if modality == IR:
            img = ir_transform(img, cfg.gap)
        if cfg.noise > 0:
            img = img + rng.normal(0.0, cfg.noise, size=img.shape)
        if rng.uniform() < cfg.p_occ:
            h, w = cfg.H // 2, cfg.W // 2
            y0 = rng.integers(0, cfg.H - h + 1)
            x0 = rng.integers(0, cfg.W - w + 1)
            img[y0:y0 + h, x0:x0 + w] = rng.uniform()
        frames[t] = img
    # stored as float32 on disk; keep memory and file bit-identical
    return np.clip(frames, 0.0, 1.0).astype(np.float32).astype(np.float64)


def generate(cfg: SynthConfig) -> Dataset:
    """Deterministic dataset; clips enumerate (identity, modality, clip index) in order."""
    ds = Dataset(cfg.n_ids, cfg.clips_per_modality, cfg.T, cfg.H, cfg.W)
    for y in range(cfg.n_ids):
        pattern = _identity_pattern(np.random.default_rng([cfg.seed, y]), cfg)
        for m in (VIS, IR):
            for k in range(cfg.clips_per_modality):
                rng = np.random.default_rng([cfg.seed, y, m, k])
                frames = _make_clip(pattern, cfg, rng, m)
                ds.clips.append(VideoClip(frames, y, m, k, len(ds.clips)))
    return ds


def expected_size(Y: int, clips: int, T: int, H: int, W: int) -> int:
    return _HEADER.size + Y * 2 * clips * (_CLIP_HEADER.size + 4 * T * H * W)


def write_dataset(ds: Dataset, path) -> None:
    parts = [_HEADER.pack(MAGIC, VERSION, ds.n_ids, ds.clips_per_modality, ds.T, ds.H, ds.W)]
    for c in ds.clips:
        parts.append(_CLIP_HEADER.pack(c.identity, c.modality, c.clip_index))
        parts.append(np.ascontiguousarray(c.frames, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(buf)} bytes, need {_HEADER.size} (offset 0)")
    magic, version, Y, clips, T, H, W = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version} at offset 4")
    ds = Dataset(Y, clips, T, H, W)
    n_vals = T * H * W
    off = _HEADER.size
    for i in range(Y * 2 * clips):
        end = off + _CLIP_HEADER.size + 4 * n_vals
        if end > len(buf):
            raise DatasetFormatError(f"truncated clip {i} at offset {off}: need {end - off} bytes, have {len(buf) - off}")
        y, m, k = _CLIP_HEADER.unpack_from(buf, off)
        if m not in (VIS, IR):
            raise DatasetFormatError(f"bad modality {m} at offset {off + 4}")
        vals = np.frombuffer(buf, dtype="<f4", count=n_vals, offset=off + _CLIP_HEADER.size)
        ds.clips.append(VideoClip(vals.astype(np.float64).reshape(T, H, W), y, m, k, i))
        off = end
    if off != len(buf):
        raise DatasetFormatError(f"{len(buf) - off} trailing bytes at offset {off}")
    return ds
