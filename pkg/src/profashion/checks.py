"""Finite-difference checks of the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .diffusion import loss_offset
from .fpi import (fta_query_concat, fta_resample, fta_resample_backward, init_offset_head, offset_head_backward,
                  predict_offsets)
from .numcore import GradCheckResult, ParamStore, grad_check, make_rng


def quadratic_selftest(seed: int = 0, n: int = 6) -> GradCheckResult:
    """0.5 x^T A x + b^T x against its exact gradient."""
    rng = make_rng([seed, 11])
    a = rng.standard_normal((n, n))
    a = a @ a.T
    b = rng.standard_normal(n)
    x = rng.standard_normal(n)
    return grad_check(lambda v: 0.5 * v @ a @ v + b @ v, x, a @ x + b)


def offset_instance(seed: int = 0, n_frames: int = 2, size: int = 16, channels: int = 4, hidden: int = 8):
    """Small offset-head problem: query features, key features, a sparse target flow and a warp target."""
    rng = make_rng([seed, 12])
    store = ParamStore(seed)
    prefix = "chk.offset"
    init_offset_head(store, prefix, channels, hidden)
    # non-zero last layer so the offsets land at fractional positions
    store[prefix + ".conv2.w"] = 0.05 * rng.standard_normal(store[prefix + ".conv2.w"].shape)
    store[prefix + ".conv2.b"] = np.array([0.31, -0.27])
    q = rng.standard_normal((n_frames, channels, size, size))
    z_c = rng.standard_normal((n_frames, channels, size, size))
    delta = np.zeros((n_frames, 2, size, size))
    for _ in range(6):
        y, x = rng.integers(2, size - 2, size=2)
        delta[1:, :, y - 1:y + 2, x - 1:x + 2] = rng.uniform(-1.5, 1.5, size=(2, 1, 1))
    target = rng.standard_normal((n_frames, channels, size, size))
    return store, prefix, q, z_c, delta, target


def offset_objective(store: ParamStore, prefix: str, q, z_c, delta, target, lam: float = 0.1,
                     with_grad: bool = False):
    """``0.5 mean (u - target)^2 + lam * L_o`` with ``u`` the warped predecessor features."""
    o, cache = predict_offsets(fta_query_concat(q), store, prefix, return_cache=True)
    u = fta_resample(z_c, o)
    r = u - target
    loss_w = 0.5 * float(np.mean(r ** 2))
    if not with_grad:
        return loss_w + lam * loss_offset([o], [delta])
    l_o, (g_lo,) = loss_offset([o], [delta], with_grad=True)
    g_o = fta_resample_backward(z_c, o, r / r.size) + lam * g_lo
    return loss_w + lam * l_o, offset_head_backward(cache, g_o, store, prefix)


def offset_gradcheck(seed: int = 0, h: float = 1e-6, lam: float = 0.1) -> GradCheckResult:
    """Offset-head parameters, through the bilinear warp and the masked offset loss."""
    store, prefix, q, z_c, delta, target = offset_instance(seed)
    _, grads = offset_objective(store, prefix, q, z_c, delta, target, lam, with_grad=True)
    names = sorted(grads)
    params = {n: store[n] for n in names}

    def f(p):
        for n in names:
            store[n] = p[n]
        return offset_objective(store, prefix, q, z_c, delta, target, lam)

    try:
        return grad_check(f, params, grads, h=h)
    finally:
        for n in names:
            store[n] = params[n]
