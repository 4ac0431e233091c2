import numpy as np

from btcuap import diffcore as dc
from btcuap import models


def relu_masks(spec, images, layer):
    """Sign pattern of every relu input on the way to ``layer``."""
    h = dc.as_tensor(np.asarray(images, dtype=np.float64))
    masks = []
    for ld, w in zip(spec.layer_defs[:layer], spec.weights[:layer]):
        pre = dc.conv2d(dc.pad2d(h, ld.pad), dc.Tensor(w.astype(np.float64)), ld.stride)
        masks.append(pre.data > 0)
        h = dc.avgpool2d(dc.relu(pre), ld.pool)
    return masks


def kink_crossings(spec, layer, images_of, point, h):
    """Coordinates of ``point`` whose +-h step flips some relu.

    ``images_of(point)`` returns the batch of extractor inputs that depends on
    ``point``. Central differences straddling a flip do not estimate the
    gradient, so a finite-difference oracle is only meaningful when this is empty.
    All perturbed points go through the extractor as one batch.
    """
    def inputs(p):
        imgs = np.asarray(images_of(p), dtype=np.float64)
        return imgs[None] if imgs.ndim == 3 else imgs

    point = np.array(point, dtype=np.float64)
    base = inputs(point)
    per_point = base.shape[0]
    steps = np.concatenate([np.eye(point.size) * h, np.eye(point.size) * -h]).reshape(-1, *point.shape)
    batch = np.concatenate([base] + [inputs(point + s) for s in steps])
    masks = relu_masks(spec, batch, layer)
    flipped = np.zeros(2 * point.size, dtype=bool)
    for m in masks:
        m = m.reshape(-1, per_point, *m.shape[1:])
        flipped |= np.any(m[1:] != m[:1], axis=tuple(range(2, m.ndim)) + (1,))
    return sorted({int(i) % point.size for i in np.flatnonzero(flipped)})


def float64_extractor(seed, layer_defs, input_shape):
    spec = models.FeatureExtractorSpec(seed, layer_defs, input_shape)
    spec.weights = [w.astype(np.float64) for w in spec.weights]
    return spec


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(key: str, passed: bool, detail: str, seconds: float | None = None) -> str:
    timing = f" [{seconds:.1f}s]" if seconds is not None else ""
    line = f"criterion {key}: {'PASS' if passed else 'FAIL'} - {detail}{timing}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int("".join(c for c in k if c.isdigit()) or 0), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
