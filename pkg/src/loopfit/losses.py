"""Reconstruction, contrastive, and cycle losses plus their weighted total.

Per-sample sums follow the written loss terms exactly; batch values are
means over samples (or triples) so the loss weights keep their meaning
across batch sizes. The reduction order is fixed ascending sample index,
which keeps logged values bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .errors import ConfigError

DEFAULT_ALPHA = 10.0
DEFAULT_BETA = 10.0
DEFAULT_MARGIN = 1.0


@dataclass
class LossBreakdown:
    """Scalar components of one step's loss, always in float64."""

    mse: float
    contrast: float
    cycle: float
    alpha: float
    beta: float
    total: float

    def check(self, rel_tol=1e-9):
        expected = self.mse + self.alpha * self.contrast + self.beta * self.cycle
        scale = max(abs(expected), abs(self.total), 1e-30)
        if abs(expected - self.total) / scale > rel_tol:
            raise AssertionError(
                f"loss breakdown inconsistent: total={self.total}, parts={expected}"
            )
        for name in ("mse", "contrast", "cycle", "total"):
            if not np.isfinite(getattr(self, name)):
                raise AssertionError(f"loss component {name} is not finite")
        return self

    def log_line(self, step):
        return (
            f"{step} {self.mse!r} {self.contrast!r} {self.cycle!r} {self.total!r}"
        )


def mse_loss(outputs, targets):
    """Frame reconstruction error of one aligned pair: sum over frames of the
    squared frame distance, divided by the feature width."""
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if not isinstance(outputs, Tensor):
        outputs = Tensor(np.asarray(outputs))
    if outputs.shape != targets.shape:
        raise ValueError(
            f"output shape {outputs.shape} does not match target {targets.shape}"
        )
    d_o = targets.shape[-1]
    diff = outputs - Tensor(targets.astype(outputs.dtype, copy=False))
    return (diff * diff).sum() * (1.0 / d_o)


def masked_mse_batch(outputs, targets, frame_lengths):
    """Batch-mean reconstruction loss over a padded (B, T, d_o) batch."""
    b, t, d_o = outputs.shape
    frame_lengths = np.asarray(frame_lengths)
    mask = (np.arange(t)[None, :] < frame_lengths[:, None]).astype(outputs.dtype)
    diff = outputs - Tensor(np.asarray(targets, dtype=outputs.dtype))
    per_sample = (diff * diff * Tensor(mask[:, :, None])).sum(axis=(1, 2))
    return per_sample.sum() * (1.0 / (d_o * b))


def contrastive_loss(z1, z2, z3, margin=DEFAULT_MARGIN):
    """One triple: pull same-speaker embeddings together, push the negative
    at least `margin` away (squared hinge)."""
    z1, z2, z3 = (_as_row(z) for z in (z1, z2, z3))
    pull = ((z1 - z2) ** 2).sum()
    dist_neg = (((z2 - z3) ** 2).sum()).sqrt()
    push = (Tensor(np.asarray(margin, dtype=dist_neg.dtype)) - dist_neg).relu() ** 2
    return (pull + push) * 0.5


def _as_row(z):
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=np.float64))
    return z.reshape(-1)


def contrastive_batch(z, layout, margin=DEFAULT_MARGIN):
    """Mean triple loss over a batch of embeddings (B, d_z) under a layout."""
    idx1 = np.array([t[0] for t in layout.triples])
    idx2 = np.array([t[1] for t in layout.triples])
    idx3 = np.array([t[2] for t in layout.triples])
    z1 = z[idx1]
    z2 = z[idx2]
    z3 = z[idx3]
    pull = ((z1 - z2) ** 2).sum(axis=1)
    dist_neg = ((z2 - z3) ** 2).sum(axis=1).sqrt()
    margin_t = Tensor(np.asarray(margin, dtype=z.dtype))
    push = (margin_t - dist_neg).relu() ** 2
    return ((pull + push) * 0.5).mean()


def cycle_embedding_loss(z_input, z_output):
    """Mean squared embedding distance between input and regenerated audio."""
    diff = z_input - z_output
    return (diff * diff).sum(axis=1).mean()


def cycle_loss(model, encoder, y, s, training=True):
    """Standalone cycle pass for one sample: embed the target, decode with
    that embedding, re-embed the output, and return the squared embedding
    distance. Gradients flow through both encoder passes and the decoder."""
    from .loop import teacher_forced_batch

    frames = y.frames[None, :, :]
    lengths = np.array([y.n_frames])
    z = encoder.forward(frames, lengths=lengths, training=training)
    outputs, _ = teacher_forced_batch(model, [s.ids], frames, z=z)
    z_out = encoder.forward(outputs, lengths=lengths, training=training)
    return cycle_embedding_loss(z, z_out)


def total_loss(mse, contrast, cycle, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA):
    """Weighted combination; returns (scalar tensor, float64 breakdown)."""
    if alpha < 0 or beta < 0:
        raise ConfigError(f"loss weights must be nonnegative, got alpha={alpha} beta={beta}")
    total = mse
    if alpha != 0:
        total = total + contrast * alpha
    if beta != 0:
        total = total + cycle * beta
    breakdown = LossBreakdown(
        mse=float(mse.data),
        contrast=float(contrast.data),
        cycle=float(cycle.data),
        alpha=float(alpha),
        beta=float(beta),
        total=float(mse.data) + float(alpha) * float(contrast.data)
        + float(beta) * float(cycle.data),
    )
    return total, breakdown.check()
