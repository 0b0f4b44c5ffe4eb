"""Feed-forward speaker-fitting encoder.

Maps an untranscribed vocoder-feature sequence to a unit-norm embedding:
a stack of 3x3 conv + batchnorm + ReLU layers over the (time, feature)
plane, masked mean pooling over time, two fully connected layers, and a
normalized affine head. Fitting a new voice is a single forward pass of
this network; no optimization happens at fitting time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd
from .autograd import Tensor
from .errors import NumericError
from .features import VocoderFrameSequence
from .nn import BatchNorm2d, Conv2d, Linear

_NORM_TOL = 1e-6


@dataclass
class SpeakerEmbedding:
    """Unit-norm speaker vector produced by the fitting encoder."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.isfinite(v).all():
            raise ValueError("embedding contains non-finite values")
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > _NORM_TOL:
            raise ValueError(f"embedding norm {norm} is not 1 within {_NORM_TOL}")
        self.vector = v

    @property
    def d_z(self):
        return self.vector.size


@dataclass
class EncoderConfig:
    d_o: int
    d_z: int = 256
    channels: int = 32
    conv_layers: int = 5
    fc_width: int = 256
    fc_layers: int = 2
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def min_input_frames(self):
        # same padding at stride 1 in every conv layer: no downsampling, so
        # any sequence of at least one frame embeds
        return 1


class SpeakerEncoder:
    def __init__(self, config: EncoderConfig, rng):
        self.config = config
        c = config
        dtype = c.np_dtype
        self.convs = []
        self.bns = []
        for i in range(c.conv_layers):
            c_in = 1 if i == 0 else c.channels
            self.convs.append(Conv2d(c_in, c.channels, rng, dtype=dtype, bias=False))
            self.bns.append(BatchNorm2d(c.channels, dtype=dtype))
        self.fcs = []
        width_in = c.channels * c.d_o
        for _ in range(c.fc_layers):
            self.fcs.append(Linear(width_in, c.fc_width, rng, dtype=dtype))
            width_in = c.fc_width
        self.head = Linear(width_in, c.d_z, rng, dtype=dtype)

    def named_parameters(self):
        out = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out.extend(conv.named_parameters(f"conv{i}."))
            out.extend(bn.named_parameters(f"bn{i}."))
        for i, fc in enumerate(self.fcs):
            out.extend(fc.named_parameters(f"enc_fc{i}."))
        out.extend(self.head.named_parameters("head."))
        return out

    def state_arrays(self):
        out = {}
        for i, bn in enumerate(self.bns):
            out.update(bn.state_arrays(f"bn{i}."))
        return out

    def load_state_arrays(self, arrays):
        for i, bn in enumerate(self.bns):
            bn.load_state_arrays(arrays, f"bn{i}.")

    # -- forward -------------------------------------------------------------

    def forward(self, frames, lengths=None, training=False):
        """Embed a padded batch: frames (B, m, d_o) -> unit-norm (B, d_z).

        `frames` may be an ndarray or a Tensor already on the tape (the cycle
        pass feeds decoder outputs through here, so gradients must flow into
        the input as well as the weights). `lengths` gives each sample's true
        frame count; padded positions are re-zeroed after every layer so they
        behave exactly like the zero padding a solo forward pass would see,
        and pooling averages only over real frames.
        """
        if not isinstance(frames, Tensor):
            frames = Tensor(np.asarray(frames, dtype=self.config.np_dtype))
        if frames.ndim != 3 or frames.shape[1] < 1:
            raise ValueError(f"expected (B, m, d_o) with m >= 1, got {frames.shape}")
        b, m, d_o = frames.shape
        if lengths is None:
            lengths = np.full(b, m)
        lengths = np.asarray(lengths)
        x = frames.reshape(b, 1, m, d_o)
        ragged = bool((lengths < m).any())
        mask = None
        mask_t = None
        if ragged:
            mask = (np.arange(m)[None, :] < lengths[:, None]).astype(
                self.config.np_dtype
            )[:, None, :, None]
            mask_t = Tensor(mask)
            x = x * mask_t
        for conv, bn in zip(self.convs, self.bns):
            x = conv(x)
            x = bn(x, mask=mask if training else None, training=training)
            x = x.relu()
            if ragged:
                x = x * mask_t
        if ragged:
            pooled = x.sum(axis=2) / Tensor(
                lengths.astype(self.config.np_dtype).reshape(b, 1, 1)
            )
        else:
            pooled = x.mean(axis=2)
        flat = pooled.reshape(b, -1)
        for fc in self.fcs:
            flat = fc(flat).relu()
        z = self.head(flat)
        norms_sq = (z * z).sum(axis=1, keepdims=True)
        if (norms_sq.data < 1e-24).any():
            raise NumericError("embedding collapsed to the zero vector")
        return z / norms_sq.sqrt()

    def embed(self, seq: VocoderFrameSequence) -> SpeakerEmbedding:
        """Single-utterance embedding with eval-mode statistics (deterministic)."""
        with autograd.no_grad():
            z = self.forward(seq.frames[None, :, :], training=False)
        return SpeakerEmbedding(z.data[0].copy())

    def embed_batch(self, seqs):
        """Embed variable-length sequences together; each result matches its
        solo embedding in eval mode."""
        lengths = np.array([s.n_frames for s in seqs])
        m = int(lengths.max())
        d_o = seqs[0].d_o
        padded = np.zeros((len(seqs), m, d_o), dtype=self.config.np_dtype)
        for i, s in enumerate(seqs):
            if s.d_o != d_o:
                raise ValueError("mixed feature widths in one batch")
            padded[i, : s.n_frames] = s.frames
        with autograd.no_grad():
            z = self.forward(padded, lengths=lengths, training=False)
        return [SpeakerEmbedding(z.data[i].copy()) for i in range(len(seqs))]

def export_embeddings(encoder, manifest, out_path, read_frames_fn=None):
    """Write one `utterance_id speaker z...` line per record (for external
    plotting of the embedding space)."""
    from .features import read_frames

    reader = read_frames_fn or read_frames
    with open(out_path, "w", encoding="utf-8") as fh:
        for record in manifest.records:
            seq = reader(manifest.resolve(record))
            emb = encoder.embed(seq)
            values = " ".join(repr(float(v)) for v in emb.vector)
            fh.write(f"{record.utterance_id} {record.speaker} {values}\n")
