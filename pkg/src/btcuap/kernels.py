"""Backend selection for the convolution hot loops.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementation in ``_pykernels`` is used. Set ``BTC_KERNELS=python`` to
force the fallback.

The compiled loops beat numpy only while the per-output reduction
(in_channels * k * k) is short; above ``COMPILED_MAX_FAN_IN`` numpy's BLAS
contraction is faster, so those calls go to numpy even when the extension is
available (see ``benchmarks/bench_kernels.py``). Passing ``impl`` explicitly
bypasses the rule.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("BTC_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


COMPILED_MAX_FAN_IN = 72  # blocks 1-2 of the default extractor


def _c(a):
    return np.ascontiguousarray(a)


def _pick(w):
    return _impl if w.shape[1] * w.shape[2] * w.shape[3] <= COMPILED_MAX_FAN_IN else _pykernels


def conv2d_forward(x, w, stride, impl=None):
    impl = impl or _pick(w)
    return impl.conv2d_forward(_c(x), _c(w.astype(x.dtype, copy=False)), int(stride))


def conv2d_backward_input(gy, w, stride, H, W, impl=None):
    impl = impl or _pick(w)
    return impl.conv2d_backward_input(_c(gy), _c(w.astype(gy.dtype, copy=False)), int(stride), int(H), int(W))


def conv2d_backward_weight(gy, x, k, stride, impl=None):
    impl = impl or (_impl if x.shape[1] * k * k <= COMPILED_MAX_FAN_IN else _pykernels)
    return impl.conv2d_backward_weight(_c(gy), _c(x.astype(gy.dtype, copy=False)), int(k), int(stride))
