"""SGD and Adam with global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, TrainingDivergenceError


class OptimState:
    """Mutable optimizer state for one parameter list.

    Adam moments are keyed by tensor identity and created lazily, so the
    same state object can be reused across training phases as long as the
    parameter tensors persist.
    """

    def __init__(self, algorithm="adam", lr=1e-3, clip_norm=5.0,
                 betas=(0.9, 0.999), eps=1e-8):
        if algorithm not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer algorithm: {algorithm!r}")
        self.algorithm = algorithm
        self.lr = lr
        self.clip_norm = clip_norm
        self.betas = betas
        self.eps = eps
        self.step = 0
        self._m = {}
        self._v = {}


def clip_by_global_norm(grad_arrays, max_norm):
    """Scale gradients in place so their joint L2 norm is at most max_norm."""
    if max_norm is None or max_norm <= 0:
        return 1.0
    total = 0.0
    for g in grad_arrays:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = total ** 0.5
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for g in grad_arrays:
        g *= factor
    return factor


def optimizer_step(opt, params, grads):
    """Apply one update to params given a Gradients object (in place)."""
    garrs = []
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient encountered")
        garrs.append(np.asarray(g, dtype=p.data.dtype))
    clip_by_global_norm(garrs, opt.clip_norm)
    opt.step += 1
    if opt.algorithm == "sgd":
        for p, g in zip(params, garrs):
            p.data -= opt.lr * g
        return
    b1, b2 = opt.betas
    bias1 = 1.0 - b1 ** opt.step
    bias2 = 1.0 - b2 ** opt.step
    for p, g in zip(params, garrs):
        key = id(p)
        m = opt._m.get(key)
        if m is None:
            m = opt._m[key] = np.zeros_like(p.data)
            opt._v[key] = np.zeros_like(p.data)
        v = opt._v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= opt.lr * (m / bias1) / (np.sqrt(v / bias2) + opt.eps)
