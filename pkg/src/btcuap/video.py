"""Fit an N-frame UAP to T-frame videos: cyclic repetition, temporal shift, addition."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import VideoClip
from .uap import UapState


@dataclass
class AppliedPerturbation:
    delta_T: np.ndarray  # T x C x H x W
    source_N: int
    shift: int = 0

    @property
    def T(self) -> int:
        return self.delta_T.shape[0]


def _delta(state) -> np.ndarray:
    return state.delta if isinstance(state, UapState) else np.asarray(state)


def repeat_uap(state, T: int, shift: int = 0, warn: bool = True) -> AppliedPerturbation:
    """Tile the UAP frames along time: frame t uses UAP frame ``(t - 1 + shift) mod N + 1``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    delta = _delta(state)
    N = delta.shape[0]
    if not 0 <= shift < N:
        raise ValueError(f"shift {shift} outside [0, {N})")
    if N > T and warn:
        warnings.warn(f"UAP has {N} frames but the video only {T}; truncating", stacklevel=2)
    idx = (np.arange(T) + shift) % N
    return AppliedPerturbation(delta[idx], N, shift)


def shift_uap(state: UapState, s: int) -> UapState:
    """Cyclic rotation: new frame i is old frame ``(i - 1 + s) mod N + 1``."""
    if not 0 <= s < state.N:
        raise ValueError(f"shift {s} outside [0, {state.N})")
    out = state.copy()
    out.delta = np.roll(state.delta, -s, axis=0)
    out.adam = out.adam[s:] + out.adam[:s]
    return out


def apply_uap(clip: VideoClip, pert: AppliedPerturbation) -> VideoClip:
    """Add the repeated UAP and clamp pixels to [0, 1]; the label is kept.

    The pixel change never exceeds the largest perturbation magnitude, even
    after rounding back to float32.
    """
    if clip.frames.shape != pert.delta_T.shape:
        raise ValueError(f"clip {clip.frames.shape} and perturbation {pert.delta_T.shape} differ in shape")
    clean = clip.frames.astype(np.float64)
    delta = pert.delta_T.astype(np.float64)
    adv = np.clip(clean + delta, 0.0, 1.0).astype(np.float32)
    # float32 rounding can overshoot |delta| by half an ulp; step back toward the clean pixel
    over = np.abs(adv.astype(np.float64) - clean) > np.abs(delta)
    if over.any():
        adv[over] = np.nextafter(adv[over], clip.frames[over])
    return VideoClip(adv, clip.label, clip.clip_id)


def linf_distance(a: VideoClip, b: VideoClip) -> float:
    return float(np.max(np.abs(a.frames.astype(np.float64) - b.frames)))
