"""Finite-difference verification of analytic gradients.

The harness replays a deterministic scalar closure while perturbing
parameters in place: per-coordinate central differences for small tensors,
random probe directions for large ones. Double precision is assumed; the
relative-error denominator is floored so zero gradients compare cleanly.
"""

from __future__ import annotations

import numpy as np

from . import autograd
from .errors import NumericError

REL_ERR_FLOOR = 1e-8


def _loss_value(loss_closure):
    with autograd.no_grad():
        out = loss_closure()
    value = out.item() if isinstance(out, autograd.Tensor) else float(out)
    if not np.isfinite(value):
        raise NumericError("loss closure returned a non-finite value")
    return value


def _rel_err(a, b, noise_floor=0.0):
    # A difference below the FD roundoff floor (eps * |f| / step) is within
    # the harness's own measurement noise: consistent, not an error.
    if abs(a - b) <= noise_floor:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_FLOOR)


def gradient_check(loss_closure, params, step=1e-5, max_coords=64, probes=64, seed=0):
    """Return the max relative error between analytic and FD gradients.

    `params` is a list of Parameters or (name, Parameter) tuples. Tensors
    with at most `max_coords` entries are checked coordinate by coordinate;
    larger ones with `probes` random direction probes, which also keeps
    isolated near-zero-gradient coordinates from drowning in roundoff.
    """
    plist = [p[1] if isinstance(p, tuple) else p for p in params]
    for p in plist:
        p.grad = None
    loss = loss_closure()
    if not isinstance(loss, autograd.Tensor):
        raise TypeError("loss closure must return a Tensor")
    if not np.isfinite(loss.data):
        raise NumericError("loss closure returned a non-finite value")
    loss.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in plist
    ]

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    eps = float(np.finfo(np.float64).eps)
    worst = 0.0
    for p, grad in zip(plist, analytic):
        flat = p.data.reshape(-1)
        if flat.size <= max_coords:
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                f_plus = _loss_value(loss_closure)
                flat[i] = keep - step
                f_minus = _loss_value(loss_closure)
                flat[i] = keep
                fd = (f_plus - f_minus) / (2.0 * step)
                noise = 4.0 * eps * max(abs(f_plus), abs(f_minus), 1.0) / step
                worst = max(worst, _rel_err(gflat[i], fd, noise))
        else:
            for _ in range(probes):
                v = rng.standard_normal(flat.size)
                v /= np.linalg.norm(v)
                directional = float(grad.reshape(-1) @ v)
                saved = flat.copy()
                flat += step * v
                f_plus = _loss_value(loss_closure)
                flat[:] = saved - step * v
                f_minus = _loss_value(loss_closure)
                flat[:] = saved
                fd = (f_plus - f_minus) / (2.0 * step)
                noise = 4.0 * eps * max(abs(f_plus), abs(f_minus), 1.0) / step
                worst = max(worst, _rel_err(directional, fd, noise))
    for p in plist:
        p.grad = None
    return worst
