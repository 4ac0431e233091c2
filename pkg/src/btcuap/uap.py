"""BTC-UAP optimisation: an N-frame universal perturbation trained on images.

For image ``x`` and cursor frame ``n`` the loss is

    sum_k cos(F(x + noise_k), F(x + delta[n]))          # adversarial term
  + sum_j cos(F(x + delta[n]), F(x + delta[n + j]))     # temporal term

minimised by Adam on ``delta[n]`` alone, after which ``delta[n]`` is clipped
to the l-inf budget and the cursor advances cyclically.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import formats
from .models import FeatureExtractorSpec, extract_features

log = logging.getLogger(__name__)

INIT_VALUE = 0.01 / 255


@dataclass
class BtcConfig:
    K: int = 4
    J: tuple[int, ...] = (-2, -1, 1, 2)
    layer: int = 2
    alpha: float = 0.004
    epsilon: float = 16 / 255
    N: int = 32
    epochs: int = 5
    seed: int = 0
    temporal_enabled: bool = True
    update_neighbors: bool = False

    def __post_init__(self):
        self.J = tuple(int(j) for j in self.J)
        self.validate()

    def validate(self) -> None:
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if 0 in self.J:
            raise ValueError("J must not contain 0")
        if any(abs(j) >= self.N for j in self.J):
            raise ValueError(f"every |j| must be < N={self.N}, got J={self.J}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BtcConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in kinds:
                raise ValueError(f"config line {lineno}: cannot parse {line!r}")
            default = getattr(cls(), key)
            if isinstance(default, bool):
                kw[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, tuple):
                kw[key] = tuple(int(v) for v in value.split(",") if v.strip())
            else:
                kw[key] = type(default)(value)
        return cls(**kw)


def budget_bound(epsilon: float) -> np.float32:
    """Largest float32 not exceeding ``epsilon``."""
    e = np.float32(epsilon)
    if float(e) > epsilon:
        e = np.nextafter(e, np.float32(0))
    return e


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape, dtype=np.float64), np.zeros(shape, dtype=np.float64))


def adam_step(adam: AdamState, grad, alpha: float) -> np.ndarray:
    """Advance the moments and return the (descent) update to add to the parameter."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != adam.m.shape:
        raise ValueError(f"gradient shape {g.shape} does not match moments {adam.m.shape}")
    adam.step_count += 1
    adam.m = adam.beta1 * adam.m + (1 - adam.beta1) * g
    adam.v = adam.beta2 * adam.v + (1 - adam.beta2) * g * g
    m_hat = adam.m / (1 - adam.beta1 ** adam.step_count)
    v_hat = adam.v / (1 - adam.beta2 ** adam.step_count)
    return -alpha * m_hat / (np.sqrt(v_hat) + adam.eps_hat)


@dataclass
class UapState:
    delta: np.ndarray  # N x C x H x W
    epsilon: float
    adam: list[AdamState]
    cursor: int = 1
    losses: list[float] = field(default_factory=list)  # per-epoch mean BTC loss

    @property
    def N(self) -> int:
        return self.delta.shape[0]

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return self.delta.shape[1:]

    def linf(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    def copy(self) -> "UapState":
        return UapState(
            self.delta.copy(), self.epsilon,
            [AdamState(a.m.copy(), a.v.copy(), a.step_count, a.beta1, a.beta2, a.eps_hat) for a in self.adam],
            self.cursor, list(self.losses),
        )


def init_uap(config: BtcConfig, frame_shape=(3, 32, 32)) -> UapState:
    config.validate()
    shape = (config.N, *frame_shape)
    delta = np.full(shape, INIT_VALUE, dtype=np.float32)
    return UapState(delta, float(config.epsilon), [AdamState.zeros(frame_shape) for _ in range(config.N)])


def from_delta(delta, epsilon: float) -> UapState:
    delta = np.asarray(delta, dtype=np.float32)
    return UapState(delta, float(epsilon), [AdamState.zeros(delta.shape[1:]) for _ in range(delta.shape[0])])


def neighbor_frame_index(n: int, j: int, N: int) -> int:
    """1-based cyclic neighbour ``n + j`` of frame ``n`` among ``N`` frames."""
    if abs(j) >= N:
        raise ValueError(f"|j|={abs(j)} must be < N={N}")
    return (n - 1 + j) % N + 1


def sample_noise(rng: np.random.Generator, epsilon: float, shape, K: int) -> list[np.ndarray]:
    return [rng.uniform(-epsilon, epsilon, size=shape).astype(np.float32) for _ in range(K)]


def clip_to_budget(delta_frame, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    e = budget_bound(epsilon)
    return np.clip(np.asarray(delta_frame, dtype=np.float32), -e, e)


def frame_leaves(state: UapState, indices, dtype=np.float32) -> dict[int, dc.Tensor]:
    """Differentiable leaves for the given 1-based frame indices."""
    return {i: dc.Tensor(state.delta[i - 1].astype(dtype), requires_grad=True) for i in dict.fromkeys(indices)}


def _image_array(x) -> np.ndarray:
    return np.asarray(x.image if hasattr(x, "image") else x)


def _terms(x, n: int, state: UapState, spec: FeatureExtractorSpec, config: BtcConfig, *,
           noises=None, rng=None, leaves=None, adversarial=True, temporal=True) -> dc.Tensor:
    x = _image_array(x)
    if tuple(x.shape) != state.frame_shape:
        raise ValueError(f"image shape {x.shape} does not match UAP frame {state.frame_shape}")
    temporal = temporal and config.temporal_enabled and bool(config.J)
    neighbors = [neighbor_frame_index(n, j, state.N) for j in config.J] if temporal else []
    if leaves is None:
        leaves = frame_leaves(state, [n, *neighbors], dtype=x.dtype if x.dtype == np.float64 else np.float32)
    dtype = leaves[n].dtype
    xt = dc.Tensor(x.astype(dtype))

    # adversarial frames go through the extractor as one batch
    order = list(dict.fromkeys([n, *neighbors]))
    batch = dc.stack([dc.add(xt, leaves[i]) for i in order])
    feats = extract_features(spec, batch, config.layer)
    feat = {i: dc.select(feats, b) for b, i in enumerate(order)}

    terms = []
    if adversarial and config.K > 0:
        if noises is None:
            if rng is None:
                raise ValueError("need either frozen noises or an rng")
            noises = sample_noise(rng, state.epsilon, x.shape, config.K)
        if len(noises) != config.K:
            raise ValueError(f"expected {config.K} noises, got {len(noises)}")
        clean = extract_features(spec, np.stack([x + eta for eta in noises]).astype(dtype), config.layer)
        for k in range(config.K):
            terms.append(dc.cosine_similarity(dc.Tensor(clean.data[k]), feat[n]))
    for j, i in zip(config.J if temporal else (), neighbors):
        terms.append(dc.cosine_similarity(feat[n], feat[i]))
    if not terms:
        return dc.Tensor(np.zeros((), dtype=dtype))
    return dc.add_n(terms)


def adversarial_loss(x, n, state, spec, config, *, noises=None, rng=None, leaves=None) -> dc.Tensor:
    """Feature-diversity adversarial term; gradient reaches only ``delta[n]``."""
    return _terms(x, n, state, spec, config, noises=noises, rng=rng, leaves=leaves, temporal=False)


def temporal_similarity_loss(x, n, state, spec, config, *, leaves=None) -> dc.Tensor:
    """Neighbour-frame similarity of the pseudo video; zero when the temporal term is off."""
    return _terms(x, n, state, spec, config, leaves=leaves, adversarial=False)


def btc_loss(x, n, state, spec, config, *, noises=None, rng=None, leaves=None) -> dc.Tensor:
    return _terms(x, n, state, spec, config, noises=noises, rng=rng, leaves=leaves)


@dataclass
class StepRecord:
    step: int
    epoch: int
    image_index: int
    frame: int
    loss: float
    linf: float


def optimize_uap(images, spec: FeatureExtractorSpec, config: BtcConfig,
                 on_step: Callable[[StepRecord, UapState], None] | None = None) -> UapState:
    """Run the cyclic single-frame optimisation for ``config.epochs`` passes.

    ``images`` is a manifest (its image entries are used) or a sequence of
    ``C x H x W`` arrays. ``on_step`` is called after every update.
    """
    if isinstance(images, formats.DatasetManifest):
        images = images.load_images()
    images = [np.ascontiguousarray(_image_array(im), dtype=np.float32) for im in images]
    if not images:
        raise ValueError("empty image set")
    config.validate()
    state = init_uap(config, images[0].shape)
    ss = np.random.SeedSequence(int(config.seed))
    order_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    bound = budget_bound(config.epsilon)
    step = 0
    for epoch in range(config.epochs):
        epoch_losses = []
        for idx in order_rng.permutation(len(images)):
            n = state.cursor
            temporal = config.temporal_enabled and bool(config.J)
            neighbors = [neighbor_frame_index(n, j, state.N) for j in config.J] if temporal else []
            leaves = frame_leaves(state, [n, *neighbors])
            loss = btc_loss(images[idx], n, state, spec, config, rng=noise_rng, leaves=leaves)
            if loss.requires_grad:
                dc.backward(loss)
            updated = [n] + ([i for i in dict.fromkeys(neighbors) if i != n] if config.update_neighbors else [])
            for i in updated:
                g = leaves[i].grad if leaves[i].grad is not None else np.zeros(state.frame_shape, np.float32)
                upd = adam_step(state.adam[i - 1], g, config.alpha)
                state.delta[i - 1] = np.clip((state.delta[i - 1] + upd).astype(np.float32), -bound, bound)
            state.cursor = n + 1 if n < state.N else 1
            epoch_losses.append(loss.item())
            step += 1
            if on_step is not None:
                on_step(StepRecord(step, epoch, int(idx), n, loss.item(), state.linf()), state)
        state.losses.append(float(np.mean(epoch_losses)))
        log.info("epoch %d: mean BTC loss %.4f", epoch + 1, state.losses[-1])
    return state


# ---------------------------------------------------------------- persistence


def save_uap(state: UapState, path, config: BtcConfig | None = None) -> Path:
    """Write ``delta``/``epsilon``/``n_frames`` to a BTCA archive plus a ``.cfg`` text record."""
    path = Path(path)
    formats.write_archive(path, {
        "delta": state.delta,
        "epsilon": np.array(state.epsilon, dtype=np.float32),
        "n_frames": np.array(state.N, dtype=np.float32),
    })
    if config is not None:
        config_path(path).write_text(config.to_text(), encoding="utf-8")
    return path


def config_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def load_uap(path) -> tuple[UapState, BtcConfig | None]:
    t = formats.read_archive(path)
    try:
        delta, eps, n = t["delta"], t["epsilon"], t["n_frames"]
    except KeyError as exc:
        raise formats.FormatError(f"{path}: UAP archive missing tensor {exc}") from None
    if delta.ndim != 4 or int(n) != delta.shape[0]:
        raise formats.FormatError(f"{path}: field 'n_frames'={int(n)} inconsistent with delta {delta.shape}")
    cfg_file = config_path(path)
    config = BtcConfig.from_text(cfg_file.read_text(encoding="utf-8")) if cfg_file.exists() else None
    epsilon = config.epsilon if config is not None else float(eps)
    return from_delta(delta, epsilon), config


def config_dict(config: BtcConfig) -> dict:
    d = asdict(config)
    d["J"] = list(config.J)
    return d
