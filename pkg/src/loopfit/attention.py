"""Monotonic Gaussian-mixture attention over phoneme positions.

The attention network reads the flattened memory buffer and emits, per
mixture component, a prior, a positive mean shift, and a log-variance. Means
only ever move forward, which is what makes the read head monotone. At
inference time the shift of the dominant component is shared across all
components; weights always use the full mixture.

All functions are batched with a leading batch axis; use batch size 1 for
single sequences. Everything is a pure function of explicit state, so
parallel rollouts just use separate state tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd
from .autograd import Tensor, softmax
from .errors import NumericError


@dataclass
class AttentionParams:
    """Per-step mixture parameters; each field has shape (batch, components)."""

    priors: Tensor
    mean_shifts: Tensor
    log_variances: Tensor

    @property
    def n_components(self):
        return self.priors.shape[1]


@dataclass
class AttentionDiagnostics:
    """Counters for rare numeric fallbacks during weight computation."""

    weight_fallbacks: int = 0
    fallback_steps: list = field(default_factory=list)


def attention_params(buffer_flat, net, n_components, shift_scale=1.0) -> AttentionParams:
    """Run the attention network and unpack its tanh-squashed output.

    The raw (batch, 3M) output passes through tanh, then: softmax over the
    first M values gives the priors, exp of the next M gives strictly
    positive bounded shifts (times `shift_scale`), and the last M are used
    directly as log-variances.
    """
    if not np.isfinite(buffer_flat.data).all():
        raise NumericError("attention input buffer contains non-finite values")
    m = n_components
    raw = net(buffer_flat).tanh()
    priors = softmax(raw[:, :m], axis=1)
    shifts = raw[:, m : 2 * m].exp()
    if shift_scale != 1.0:
        shifts = shifts * shift_scale
    log_variances = raw[:, 2 * m : 3 * m]
    return AttentionParams(priors=priors, mean_shifts=shifts, log_variances=log_variances)


def advance_means(means, params: AttentionParams, mode="train"):
    """Move every mean forward; inference shares the dominant component's shift.

    Ties in the prior argmax resolve to the lowest component index.
    """
    if mode == "train":
        return means + params.mean_shifts
    if mode != "inference":
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    dominant = np.argmax(params.priors.data, axis=1)
    rows = np.arange(means.shape[0])
    shared = params.mean_shifts[rows, dominant].reshape(-1, 1)
    return means + shared


def position_weights(means, params: AttentionParams, lengths, grid_len=None,
                     diagnostics=None, step_index=None):
    """Normalized mixture weights over 1-based phoneme positions.

    `lengths` gives each sample's true position count; columns beyond it are
    masked to zero before normalization so every row is a probability vector
    over its own positions. If a row underflows to all zeros the weight
    collapses to a one-hot at the dominant mean (clamped into range) and the
    diagnostics counter is bumped; that branch is constant, not differentiable.

    One fused tape node: this runs every decoder step, so the mixture math
    and its backward are hand-written rather than composed from primitives.
    """
    lengths = np.asarray(lengths)
    batch = means.shape[0]
    if grid_len is None:
        grid_len = int(lengths.max())
    priors = params.priors
    log_vars = params.log_variances
    grid = np.arange(1, grid_len + 1, dtype=means.data.dtype)
    mask = (grid[None, :] <= lengths.reshape(-1, 1)).astype(means.data.dtype)

    inv_var = np.exp(-log_vars.data)                      # (B, M)
    d = means.data[:, :, None] - grid[None, None, :]      # (B, M, L)
    e = np.exp(-0.5 * d * d * inv_var[:, :, None])        # (B, M, L)
    phi = np.einsum("bm,bml->bl", priors.data, e)
    phi *= mask
    totals = phi.sum(axis=1, keepdims=True)               # (B, 1)

    dead = totals[:, 0] == 0.0
    one_hot = None
    if dead.any():
        if diagnostics is not None:
            diagnostics.weight_fallbacks += int(dead.sum())
            if step_index is not None:
                diagnostics.fallback_steps.append(step_index)
        dominant = np.argmax(priors.data, axis=1)
        one_hot = np.zeros((batch, grid_len), dtype=means.data.dtype)
        for row in np.nonzero(dead)[0]:
            pos = int(np.clip(round(float(means.data[row, dominant[row]])), 1, lengths[row]))
            one_hot[row, pos - 1] = 1.0
        safe_totals = totals + dead[:, None]
        weights = phi / safe_totals + one_hot * dead[:, None]
    else:
        safe_totals = totals
        weights = phi / totals

    def backward(g):
        # through the normalization: g_phi = (g - <g, w>) / S, zero for
        # fallback rows (their output is constant)
        inner = (g * weights).sum(axis=1, keepdims=True)
        g_phi = (g - inner) / safe_totals
        if dead.any():
            g_phi = g_phi * (~dead)[:, None]
        g_phi = g_phi * mask
        pe = priors.data[:, :, None] * e
        if priors.requires_grad:
            priors._accumulate(np.einsum("bl,bml->bm", g_phi, e))
        if means.requires_grad or log_vars.requires_grad:
            g_pe = g_phi[:, None, :] * pe                 # (B, M, L)
            if means.requires_grad:
                means._accumulate(
                    -np.einsum("bml,bml->bm", g_pe, d) * inv_var
                )
            if log_vars.requires_grad:
                log_vars._accumulate(
                    0.5 * np.einsum("bml,bml->bm", g_pe, d * d) * inv_var
                )

    return Tensor._result(weights, (means, priors, log_vars), backward)


def context(weights, embeddings):
    """Weighted sum of embedding-matrix columns: (B, d_p, L) x (B, L) -> (B, d_p)."""
    if embeddings.ndim != 3 or weights.ndim != 2 or embeddings.shape[2] != weights.shape[1] \
            or embeddings.shape[0] != weights.shape[0]:
        raise ValueError(
            f"shape mismatch: embeddings {embeddings.shape}, weights {weights.shape}"
        )
    out = np.einsum("bpl,bl->bp", embeddings.data, weights.data)

    def backward(g):
        if embeddings.requires_grad:
            embeddings._accumulate(np.einsum("bp,bl->bpl", g, weights.data))
        if weights.requires_grad:
            weights._accumulate(np.einsum("bp,bpl->bl", g, embeddings.data))

    return Tensor._result(out, (weights, embeddings), backward)
