"""Synthetic moving-texture video corpus.

Each class pairs a texture frequency with a motion speed: classes ``2m`` and
``2m + 1`` share a texture and differ only in how fast the shape travels, so
telling them apart needs the temporal signal. Shapes live on a torus, so a
clip of any length stays smooth at the frame borders.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import (
    DatasetManifest,
    ManifestEntry,
    deserialize_tensor,
    load_manifest,
    serialize_tensor,
    write_manifest,
)

log = logging.getLogger(__name__)

SPEEDS = (0.35, 1.6)  # pixels per frame, slow / fast
RADIUS = 9.0
MAX_NEIGHBOR_MAD = 0.2


@dataclass
class VideoClip:
    frames: np.ndarray  # T x C x H x W in [0, 1]
    label: int
    clip_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 2:
            raise ValueError(f"clip frames must be T x C x H x W with T >= 2, got {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class ImageSample:
    image: np.ndarray
    source_clip: str | None = None
    frame_index: int | None = None


def class_params(label: int, classes: int) -> tuple[float, float, float]:
    """(texture cycles per 32 px, speed in px/frame, heading in radians)."""
    texture = 3.0 + 3.0 * (label // 2)
    speed = SPEEDS[label % 2]
    heading = 2 * np.pi * label / classes
    return texture, speed, heading


def render_clip(label: int, classes: int, T: int, H: int, W: int, rng: np.random.Generator,
                channels: int = 3) -> np.ndarray:
    texture, speed, heading = class_params(label, classes)
    heading += rng.uniform(-0.25, 0.25)
    speed *= rng.uniform(0.9, 1.1)
    start = rng.uniform(0, [H, W])
    phase = rng.uniform(0, 2 * np.pi, size=2)
    color = rng.uniform(0.85, 0.95, size=channels)
    bg_level = rng.uniform(0.23, 0.27, size=channels)
    bg_freq = rng.uniform(0.5, 1.5, size=2)
    bg_phase = rng.uniform(0, 2 * np.pi, size=2)

    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    bg = 0.08 * np.sin(2 * np.pi * bg_freq[0] * yy / H + bg_phase[0]) * np.cos(2 * np.pi * bg_freq[1] * xx / W + bg_phase[1])
    background = bg_level[:, None, None] + bg[None]

    velocity = speed * np.array([np.sin(heading), np.cos(heading)])
    k = 2 * np.pi * texture / 32.0
    frames = np.empty((T, channels, H, W), dtype=np.float32)
    for t in range(T):
        cy, cx = start + velocity * t
        dy = (yy - cy + H / 2) % H - H / 2
        dx = (xx - cx + W / 2) % W - W / 2
        dist = np.hypot(dy, dx)
        mask = np.clip(RADIUS - dist + 0.5, 0.0, 1.0)
        tex = 0.5 + 0.5 * np.cos(k * dx + phase[0]) * np.cos(k * dy + phase[1])
        shape = color[:, None, None] * (0.3 + 0.7 * tex)[None]
        frames[t] = np.clip(background * (1 - mask) + shape * mask, 0.0, 1.0)
    return frames


def generate_dataset(classes: int, clips_per_class: int, T: int, H: int, W: int, seed: int, out_dir,
                     channels: int = 3) -> DatasetManifest:
    """Render the corpus, one seeded frame per clip as the image set, and a manifest."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if T < 4:
        raise ValueError("need at least 4 frames per clip")
    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    ss = np.random.SeedSequence(int(seed))
    render_ss, pick_ss = ss.spawn(2)
    render_rng = np.random.default_rng(render_ss)
    pick_rng = np.random.default_rng(pick_ss)

    clip_entries, image_entries = [], []
    idx = 0
    for c in range(classes):
        for _ in range(clips_per_class):
            frames = render_clip(c, classes, T, H, W, render_rng, channels)
            mad = np.abs(np.diff(frames, axis=0)).mean(axis=(1, 2, 3)).max()
            if mad >= MAX_NEIGHBOR_MAD:
                raise RuntimeError(f"clip {idx}: neighbor-frame MAD {mad:.3f} breaks temporal consistency")
            t = int(pick_rng.integers(T))
            clip_rel = f"clips/clip_{idx:05d}.btct"
            img_rel = f"images/img_{idx:05d}_f{t:03d}.btct"
            serialize_tensor(frames, out / clip_rel)
            serialize_tensor(frames[t], out / img_rel)
            clip_entries.append(ManifestEntry(clip_rel, c, "clip"))
            image_entries.append(ManifestEntry(img_rel, c, "image"))
            idx += 1
    params = {"classes": str(classes), "clips_per_class": str(clips_per_class), "frames": str(T),
              "height": str(H), "width": str(W), "channels": str(channels)}
    manifest = DatasetManifest(out, clip_entries + image_entries, int(seed), params)
    write_manifest(manifest, out / "manifest.txt")
    log.info("wrote %d clips and %d images to %s", len(clip_entries), len(image_entries), out)
    return manifest


def load_clip(path, label: int = -1) -> VideoClip:
    frames = deserialize_tensor(path)
    if frames.ndim != 4:
        raise ValueError(f"{path}: clip tensor must be rank 4, got rank {frames.ndim}")
    return VideoClip(frames, label, Path(path).stem)


def load_dataset(path) -> DatasetManifest:
    """Load a manifest from a file path or a directory containing ``manifest.txt``."""
    p = Path(path)
    return load_manifest(p / "manifest.txt" if p.is_dir() else p)


def mean_neighbor_feature_similarity(clips, spec, layer: int = 2) -> float:
    """Mean cosine similarity between features of consecutive clean frames."""
    from .analysis import neighbor_similarity

    return float(np.mean([neighbor_similarity(c.frames, spec, layer) for c in clips]))
