"""Seeded image feature extractor and the toy temporal video classifier."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import formats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerDef:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2
    pad: int = 1


DEFAULT_LAYERS = (LayerDef(8), LayerDef(16), LayerDef(32))
DEFAULT_INPUT_SHAPE = (3, 32, 32)


@dataclass
class FeatureExtractorSpec:
    """Frozen random conv net: blocks of pad -> conv -> relu -> avgpool.

    Each filter is drawn uniformly in +-1/sqrt(fan_in) and then has its mean
    removed. The weights are a pure function of ``seed`` and ``layer_defs``; they are
    drawn when the spec is constructed (or supplied when loading a file).
    """

    seed: int
    layer_defs: tuple[LayerDef, ...] = DEFAULT_LAYERS
    input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE
    weights: list[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.layer_defs = tuple(self.layer_defs)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.weights is None:
            self.weights = _init_weights(self.seed, self.layer_defs, self.input_shape[0])
        # shape check doubles as divisibility check for every pool window
        self.output_shapes()

    @property
    def num_blocks(self) -> int:
        return len(self.layer_defs)

    def output_shapes(self) -> list[tuple[int, int, int]]:
        c, h, w = self.input_shape
        shapes = []
        for i, ld in enumerate(self.layer_defs):
            h = (h + 2 * ld.pad - ld.kernel) // ld.stride + 1
            w = (w + 2 * ld.pad - ld.kernel) // ld.stride + 1
            if h < 1 or w < 1 or h % ld.pool or w % ld.pool:
                raise ValueError(f"block {i + 1}: conv output {h}x{w} not divisible by pool {ld.pool}")
            c, h, w = ld.out_channels, h // ld.pool, w // ld.pool
            shapes.append((c, h, w))
        return shapes

    def feature_dim(self, layer: int | None = None) -> int:
        c, h, w = self.output_shapes()[(layer or self.num_blocks) - 1]
        return c * h * w


def _init_weights(seed: int, layer_defs, in_channels: int) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    weights = []
    c = in_channels
    for ld in layer_defs:
        fan_in = c * ld.kernel * ld.kernel
        w = rng.uniform(-1.0, 1.0, size=(ld.out_channels, c, ld.kernel, ld.kernel)) / np.sqrt(fan_in)
        # zero-DC filters: flat regions give no response, like edge/texture detectors
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
        weights.append(w.astype(np.float32))
        c = ld.out_channels
    return weights


def build_feature_extractor(seed: int, input_shape=DEFAULT_INPUT_SHAPE,
                            layer_defs=DEFAULT_LAYERS) -> FeatureExtractorSpec:
    return FeatureExtractorSpec(seed=int(seed), layer_defs=tuple(layer_defs), input_shape=tuple(input_shape))


def extract_features(spec: FeatureExtractorSpec, x, layer: int) -> dc.Tensor:
    """Feature map after block ``layer`` (1-based) for one image or a batch.

    ``x`` may be ``C x H x W`` or ``B x C x H x W``; gradients flow back to it
    when it is a tensor with ``requires_grad``.
    """
    if not 1 <= layer <= spec.num_blocks:
        raise ValueError(f"layer {layer} out of range 1..{spec.num_blocks}")
    h = dc.as_tensor(x)
    if tuple(h.shape[-3:]) != spec.input_shape:
        raise ValueError(f"input shape {h.shape} does not match extractor {spec.input_shape}")
    for ld, w in zip(spec.layer_defs[:layer], spec.weights[:layer]):
        h = dc.pad2d(h, ld.pad)
        h = dc.conv2d(h, dc.Tensor(w), ld.stride)
        h = dc.relu(h)
        h = dc.avgpool2d(h, ld.pool)
    return h


def frame_features(spec: FeatureExtractorSpec, frames: np.ndarray, layer: int) -> np.ndarray:
    """Flattened features for a stack of frames, no graph recorded."""
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    return extract_features(spec, frames, layer).data.reshape(frames.shape[0], -1)


# ---------------------------------------------------------------- classifier

POOLING_MODES = ("abs", "signed")


@dataclass
class VideoClassifierModel:
    extractor: FeatureExtractorSpec
    head_weights: np.ndarray
    class_count: int
    temporal_pooling: str = "abs"

    def __post_init__(self):
        if self.temporal_pooling not in POOLING_MODES:
            raise ValueError(f"temporal_pooling must be one of {POOLING_MODES}")
        # last row is the bias
        expected = (2 * self.extractor.layer_defs[-1].out_channels + 1, self.class_count)
        if self.head_weights.shape != expected:
            raise ValueError(f"head_weights shape {self.head_weights.shape}, expected {expected}")


def pooled_video_features(spec: FeatureExtractorSpec, frames: np.ndarray, temporal_pooling: str = "abs") -> np.ndarray:
    """Concatenate the frame-mean feature and the mean consecutive-frame difference.

    Both terms are averaged over frames and spatial positions of the last
    block's feature map. With ``"abs"`` pooling the difference term is the mean of
    ``|F(V[t+1]) - F(V[t])|``; ``"signed"`` keeps the sign (which telescopes
    to an endpoint difference).
    """
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError(f"expected T x C x H x W with T >= 2, got {frames.shape}")
    if tuple(frames.shape[1:]) != spec.input_shape:
        raise ValueError(f"frame shape {frames.shape[1:]} does not match extractor {spec.input_shape}")
    feats = extract_features(spec, np.ascontiguousarray(frames, dtype=np.float32), spec.num_blocks).data
    feats = feats.astype(np.float64)
    diffs = feats[1:] - feats[:-1]
    if temporal_pooling == "abs":
        diffs = np.abs(diffs)
    # spatial positions are averaged too, leaving one value per channel
    return np.concatenate([feats.mean(axis=(0, 2, 3)), diffs.mean(axis=(0, 2, 3))])


def classify_video(model: VideoClassifierModel, clip) -> tuple[int, np.ndarray]:
    """Return ``(label, probabilities)``; argmax ties go to the first index."""
    frames = clip.frames if hasattr(clip, "frames") else np.asarray(clip)
    pooled = pooled_video_features(model.extractor, frames, model.temporal_pooling)
    probs = dc.softmax(head_logits(model.head_weights, pooled))
    return int(np.argmax(probs)), probs


def head_logits(head_weights: np.ndarray, pooled: np.ndarray) -> np.ndarray:
    w = head_weights.astype(np.float64)
    return np.asarray(pooled, dtype=np.float64) @ w[:-1] + w[-1]


def classify_pooled(model: VideoClassifierModel, pooled: np.ndarray) -> np.ndarray:
    """Labels for a batch of precomputed pooled features."""
    return np.argmax(head_logits(model.head_weights, pooled), axis=1)


@dataclass
class TrainReport:
    train_accuracy: float
    val_accuracy: float
    epochs: int
    n_train: int
    n_val: int


def init_head(feature_dim: int, class_count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    return (rng.standard_normal((feature_dim, class_count)) * 0.01).astype(np.float32)


def train_classifier(manifest, epochs: int = 30, seed: int = 0, lr: float = 0.01,
                     extractor_seed: int = 1, val_fraction: float = 0.2, batch_size: int = 16,
                     temporal_pooling: str = "abs", clips=None) -> tuple[VideoClassifierModel, TrainReport]:
    """Train only the linear head (Adam, cross-entropy) over frozen pooled features.

    ``clips`` may be passed instead of reading them from ``manifest``.
    """
    from .uap import AdamState, adam_step

    clips = list(clips) if clips is not None else list(manifest.load_clips())
    if not clips:
        raise ValueError("empty dataset")
    labels = np.array([c.label for c in clips], dtype=np.int64)
    class_count = int(labels.max()) + 1
    if len(set(labels.tolist())) < 2:
        raise ValueError("training needs at least 2 classes")
    spec = build_feature_extractor(extractor_seed, clips[0].frames.shape[1:])
    pooled = np.stack([pooled_video_features(spec, c.frames, temporal_pooling) for c in clips])
    # train on standardised features, then fold the affine map back into the head
    center = pooled.mean(axis=0)
    scale = pooled.std(axis=0) + 1e-6

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    order = rng.permutation(len(clips))
    n_val = int(round(len(clips) * val_fraction)) if len(clips) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    head = init_head(pooled.shape[1] + 1, class_count, seed)
    z = np.concatenate([(pooled - center) / scale, np.ones((len(clips), 1))], axis=1).astype(np.float32)
    adam = AdamState.zeros(head.shape)
    w = head.copy()
    for _ in range(epochs):
        perm = rng.permutation(train_idx)
        for start in range(0, len(perm), batch_size):
            batch = perm[start:start + batch_size]
            leaf = dc.Tensor(w, requires_grad=True)
            loss = dc.cross_entropy(dc.matmul(dc.Tensor(z[batch]), leaf), labels[batch])
            dc.backward(loss)
            w = (w + adam_step(adam, leaf.grad, lr)).astype(np.float32)
    if epochs > 0:
        w64 = w.astype(np.float64)
        feat_rows = w64[:-1] / scale[:, None]
        bias = w64[-1] - center @ feat_rows
        head_weights = np.vstack([feat_rows, bias]).astype(np.float32)
    else:
        head_weights = head
    model = VideoClassifierModel(spec, head_weights, class_count, temporal_pooling)

    pred = classify_pooled(model, pooled)
    acc = lambda idx: float(np.mean(pred[idx] == labels[idx])) if len(idx) else float("nan")
    report = TrainReport(acc(train_idx), acc(val_idx), epochs, len(train_idx), len(val_idx))
    log.info("trained head: train acc %.3f, val acc %.3f", report.train_accuracy, report.val_accuracy)
    return model, report


# ---------------------------------------------------------------- persistence


def _seed_parts(seed: int) -> np.ndarray:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.array([(seed >> s) & 0xFFFF for s in (0, 16, 32, 48)], dtype=np.float32)


def _seed_from_parts(parts: np.ndarray) -> int:
    return sum(int(p) << s for p, s in zip(parts, (0, 16, 32, 48)))


def save_model(model: VideoClassifierModel, path) -> None:
    spec = model.extractor
    tensors = {
        "extractor.seed": _seed_parts(spec.seed),
        "extractor.input_shape": np.array(spec.input_shape, dtype=np.float32),
        "extractor.layer_defs": np.array(
            [[ld.out_channels, ld.kernel, ld.stride, ld.pool, ld.pad] for ld in spec.layer_defs], dtype=np.float32
        ),
    }
    for i, w in enumerate(spec.weights):
        tensors[f"extractor.conv{i + 1}"] = w
    tensors["head.weights"] = model.head_weights
    tensors["head.meta"] = np.array(
        [model.class_count, POOLING_MODES.index(model.temporal_pooling)], dtype=np.float32
    )
    formats.write_archive(path, tensors)


def load_model(path) -> VideoClassifierModel:
    t = formats.read_archive(path)
    try:
        layer_defs = tuple(LayerDef(*(int(v) for v in row)) for row in t["extractor.layer_defs"])
        weights = [t[f"extractor.conv{i + 1}"] for i in range(len(layer_defs))]
        spec = FeatureExtractorSpec(
            seed=_seed_from_parts(t["extractor.seed"]),
            layer_defs=layer_defs,
            input_shape=tuple(int(v) for v in t["extractor.input_shape"]),
            weights=weights,
        )
        class_count, pooling = (int(v) for v in t["head.meta"])
        return VideoClassifierModel(spec, t["head.weights"], class_count, POOLING_MODES[pooling])
    except KeyError as exc:
        raise formats.FormatError(f"{Path(path)}: model archive missing tensor {exc}") from None
