"""Similarity heatmaps, attack success rates, sweeps and report files."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import VideoClip
from .models import FeatureExtractorSpec, VideoClassifierModel, classify_video, frame_features
from .uap import BtcConfig, UapState, config_dict, from_delta, optimize_uap
from .video import AppliedPerturbation, apply_uap, repeat_uap

log = logging.getLogger(__name__)


def worker_count() -> int:
    """Worker cap from ``BTC_THREADS`` (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("BTC_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _map(fn, items):
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))  # map keeps input order


# ---------------------------------------------------------------- similarity


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    layer: int
    subject: str = "clean"

    def neighbor_mean(self, distance: int = 1) -> float:
        return float(np.mean(np.diagonal(self.values, offset=distance)))


def _cosine_matrix(feats: np.ndarray) -> np.ndarray:
    f = feats.astype(np.float64)
    norms = np.linalg.norm(f, axis=1)
    ok = norms >= 1e-12
    unit = np.zeros_like(f)
    unit[ok] = f[ok] / norms[ok, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, np.where(ok, 1.0, 0.0))
    return sim


def similarity_matrix(clip: VideoClip, spec: FeatureExtractorSpec, layer: int = 2,
                      pert: AppliedPerturbation | None = None) -> SimilarityMatrix:
    frames = clip.frames
    if tuple(frames.shape[1:]) != spec.input_shape:
        raise ValueError(f"clip frames {frames.shape[1:]} do not match extractor {spec.input_shape}")
    subject = "clean"
    if pert is not None:
        frames = apply_uap(clip, pert).frames
        subject = "adversarial"
    return SimilarityMatrix(_cosine_matrix(frame_features(spec, frames, layer)), layer, subject)


def neighbor_similarity(frames: np.ndarray, spec: FeatureExtractorSpec, layer: int = 2) -> float:
    """Mean cosine similarity of consecutive frames' features."""
    f = frame_features(spec, frames, layer).astype(np.float64)
    a, b = f[:-1], f[1:]
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    sims = np.where(den >= 1e-24, np.sum(a * b, axis=1) / np.maximum(den, 1e-300), 0.0)
    return float(np.mean(sims))


def mean_neighbor_similarity(clips, spec: FeatureExtractorSpec, layer: int = 2, state: UapState | None = None,
                             shift: int = 0) -> float:
    """Average over clips of the consecutive-frame similarity, optionally under a UAP."""
    def one(clip):
        frames = clip.frames
        if state is not None:
            frames = apply_uap(clip, repeat_uap(state, clip.T, shift, warn=False)).frames
        return neighbor_similarity(frames, spec, layer)

    return float(np.mean(_map(one, clips)))


def average_similarity_matrix(clips, spec, layer: int = 2, state: UapState | None = None) -> SimilarityMatrix:
    """Elementwise mean of per-clip matrices; all clips must share T."""
    clips = list(clips)
    Ts = {c.T for c in clips}
    if len(Ts) != 1:
        raise ValueError(f"clips have differing lengths {sorted(Ts)}")
    mats = _map(lambda c: similarity_matrix(c, spec, layer, repeat_uap(state, c.T, warn=False) if state else None).values, clips)
    return SimilarityMatrix(np.mean(mats, axis=0), layer, "adversarial" if state else "clean")


# ---------------------------------------------------------------- attack success


@dataclass
class AttackReport:
    asr: float
    per_class_asr: list[float | None]
    clean_accuracy: float
    n_clips: int
    shift: int = 0
    model_id: str = ""
    uap_id: str = ""
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def attack_success_rate(model: VideoClassifierModel, clips, state: UapState, shift: int = 0,
                        config: BtcConfig | None = None, model_id: str = "", uap_id: str = "") -> AttackReport:
    """Fraction of all clips misclassified after adding the (shifted, repeated) UAP."""
    clips = list(clips)
    if not clips:
        raise ValueError("empty clip set")

    def one(clip):
        clean_pred, _ = classify_video(model, clip)
        adv = apply_uap(clip, repeat_uap(state, clip.T, shift, warn=False))
        adv_pred, _ = classify_video(model, adv)
        return clean_pred, adv_pred

    results = _map(one, clips)
    labels = np.array([c.label for c in clips])
    clean = np.array([r[0] for r in results])
    adv = np.array([r[1] for r in results])
    fooled = adv != labels
    # None marks classes absent from the clip set (keeps the JSON strict)
    per_class = [float(np.mean(fooled[labels == c])) if np.any(labels == c) else None
                 for c in range(model.class_count)]
    return AttackReport(
        asr=float(np.mean(fooled)),
        per_class_asr=per_class,
        clean_accuracy=float(np.mean(clean == labels)),
        n_clips=len(clips),
        shift=shift,
        model_id=model_id,
        uap_id=uap_id,
        config=config_dict(config) if config is not None else {},
    )


def noise_uap(N: int, frame_shape, epsilon: float, seed: int = 0) -> UapState:
    """Uniform-noise UAP in [-epsilon, epsilon], the untrained reference."""
    from .uap import budget_bound

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 77]))
    e = float(budget_bound(epsilon))
    return from_delta(rng.uniform(-e, e, size=(N, *frame_shape)).astype(np.float32), epsilon)


@dataclass
class ShiftSweep:
    reports: list[AttackReport]

    @property
    def asrs(self) -> list[float]:
        return [r.asr for r in self.reports]

    @property
    def spread(self) -> float:
        return max(self.asrs) - min(self.asrs)

    @property
    def std(self) -> float:
        return float(np.std(self.asrs))


def shift_invariance_sweep(model, clips, state: UapState, shifts) -> ShiftSweep:
    clips = list(clips)
    return ShiftSweep([attack_success_rate(model, clips, state, s) for s in shifts])


# ---------------------------------------------------------------- ablations

SWEEPS = ("k", "j", "n", "shift", "temporal")


@dataclass
class AblationTable:
    sweep: str
    rows: list[dict]

    COLUMNS = ("sweep", "setting", "asr", "clean_accuracy", "final_loss", "mean_loss",
               "neighbor_similarity", "n_clips")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows:
            w.writerow([_csv_cell(row[c]) for c in self.COLUMNS])
        return buf.getvalue()


def _csv_cell(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _setting_config(sweep: str, value, base: BtcConfig) -> BtcConfig:
    if sweep == "k":
        return replace(base, K=int(value))
    if sweep == "j":
        m = int(value)
        return replace(base, J=tuple(range(-m, 0)) + tuple(range(1, m + 1)))
    if sweep == "n":
        n = int(value)
        J = tuple(j for j in base.J if abs(j) < n)
        return replace(base, N=n, J=J)
    if sweep == "temporal":
        return replace(base, temporal_enabled=_truthy(value))
    if sweep == "shift":
        return base
    raise ValueError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")


def _truthy(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "on", "yes")
    return bool(value)


def ablation_run(sweep: str, grid, base: BtcConfig, images, attacker: FeatureExtractorSpec,
                 model: VideoClassifierModel, clips) -> AblationTable:
    """Re-optimise a UAP per grid setting (same seeds) and evaluate it on ``clips``.

    The shift sweep optimises once and evaluates every shift.
    """
    sweep = sweep.lower()
    if sweep not in SWEEPS:
        raise ValueError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    images = list(images)
    clips = list(clips)
    rows = []
    shared = None
    for value in grid:
        cfg = _setting_config(sweep, value, base)
        if sweep == "shift":
            if shared is None:
                shared = optimize_uap(images, attacker, cfg)
            state, shift = shared, int(value)
        else:
            state, shift = optimize_uap(images, attacker, cfg), 0
        report = attack_success_rate(model, clips, state, shift, cfg)
        rows.append({
            "sweep": sweep,
            "setting": value,
            "asr": report.asr,
            "clean_accuracy": report.clean_accuracy,
            "final_loss": state.losses[-1] if state.losses else float("nan"),
            "mean_loss": float(np.mean(state.losses)) if state.losses else float("nan"),
            "neighbor_similarity": mean_neighbor_similarity(clips, attacker, cfg.layer, state, shift),
            "n_clips": report.n_clips,
        })
        log.info("ablation %s=%s: asr %.3f", sweep, value, report.asr)
    return AblationTable(sweep, rows)


# ---------------------------------------------------------------- reports


def heatmap_pixels(values: np.ndarray) -> np.ndarray:
    """Map similarity in [-1, 1] to 8-bit grey: round(255 * (s + 1) / 2)."""
    s = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.round(255.0 * (s + 1.0) / 2.0).astype(np.uint8)


def encode_pgm(values: np.ndarray) -> bytes:
    px = heatmap_pixels(values)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ValueError("not a binary P5 PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only maxval 255 is supported")
    px = np.frombuffer(parts[3], dtype=np.uint8)
    if px.size != w * h:
        raise ValueError(f"PGM payload has {px.size} bytes, expected {w * h}")
    return px.reshape(h, w)


def matrix_csv(values: np.ndarray) -> str:
    return "".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in np.asarray(values, dtype=np.float64))


def emit_report(report, path, fmt: str | None = None) -> Path:
    """Write an AttackReport/sweep as JSON, a matrix or table as CSV, or a matrix as PGM."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if isinstance(report, SimilarityMatrix):
        values = report.values
    elif isinstance(report, np.ndarray):
        values = report
    else:
        values = None
    if fmt == "json":
        if isinstance(report, AttackReport):
            payload = report.to_json()
        elif isinstance(report, ShiftSweep):
            payload = json.dumps({"reports": [asdict(r) for r in report.reports],
                                  "spread": report.spread, "std": report.std}, indent=2)
        elif isinstance(report, AblationTable):
            payload = json.dumps(asdict(report), indent=2)
        else:
            payload = json.dumps(report, indent=2)
        data = (payload + "\n").encode("utf-8")
    elif fmt == "csv":
        if isinstance(report, AblationTable):
            data = report.to_csv().encode("utf-8")
        elif values is not None:
            data = matrix_csv(values).encode("utf-8")
        else:
            raise ValueError(f"cannot write {type(report).__name__} as CSV")
    elif fmt == "pgm":
        if values is None:
            raise ValueError(f"cannot write {type(report).__name__} as PGM")
        data = encode_pgm(values)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return path
