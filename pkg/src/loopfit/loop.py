"""The shifting-buffer decoder.

A k-slot FIFO buffer is the only recurrent state. Each step runs three
stages: (1) the attention head turns the previous buffer into a context
vector over the phoneme embedding columns, (2) the update network writes a
new representation vector into the buffer, (3) the output network emits the
next vocoder frame from the updated buffer. Speaker conditioning enters as
a projected embedding (embedded mode) or not at all (agnostic mode, where
voice identity must come from the buffer contents, e.g. via priming).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention, autograd
from .attention import AttentionDiagnostics
from .autograd import Parameter, Tensor, concat, embedding
from .errors import ConfigError, NumericError
from .features import PhonemeSequence, VocoderFrameSequence
from .nn import MLP


@dataclass
class LoopConfig:
    n_phonemes: int
    d_o: int = 63
    buffer_slots: int = 100          # k
    d_b: int = 256
    d_p: int = 128
    d_z: int = 256
    n_components: int = 10
    hidden: int = 256
    mode: str = "embedded"           # "embedded" | "agnostic"
    shift_scale: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.mode not in ("embedded", "agnostic"):
            raise ConfigError(f"unknown decoder mode {self.mode!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class LoopModel:
    """Decoder parameters: embedding table, projections, and the three nets."""

    def __init__(self, config: LoopConfig, rng):
        self.config = config
        c = config
        dtype = c.np_dtype
        self.phoneme_table = Parameter(
            rng.normal(0.0, 1.0 / np.sqrt(c.d_p), size=(c.n_phonemes, c.d_p)), dtype=dtype
        )
        if c.mode == "embedded":
            self.speaker_to_context = Parameter(
                rng.normal(0.0, 1.0 / np.sqrt(c.d_z), size=(c.d_z, c.d_p)), dtype=dtype
            )
            self.speaker_to_output = Parameter(
                rng.normal(0.0, 1.0 / np.sqrt(c.d_z), size=(c.d_z, c.d_p)), dtype=dtype
            )
        else:
            self.speaker_to_context = None
            self.speaker_to_output = None
        flat = c.buffer_slots * c.d_b
        self.update_net = MLP([flat + c.d_p + c.d_o, c.hidden, c.d_b], rng, dtype=dtype)
        self.attention_net = MLP([flat, c.hidden, 3 * c.n_components], rng, dtype=dtype)
        out_in = flat + (c.d_p if c.mode == "embedded" else 0)
        self.output_net = MLP([out_in, c.hidden, c.d_o], rng, dtype=dtype)

    @property
    def is_embedded(self):
        return self.config.mode == "embedded"

    def named_parameters(self):
        out = [("phoneme_table", self.phoneme_table)]
        if self.is_embedded:
            out.append(("speaker_to_context", self.speaker_to_context))
            out.append(("speaker_to_output", self.speaker_to_output))
        out.extend(self.update_net.named_parameters("update_net."))
        out.extend(self.attention_net.named_parameters("attention_net."))
        out.extend(self.output_net.named_parameters("output_net."))
        return out

    def _check_z(self, z):
        if self.is_embedded and z is None:
            raise ConfigError("embedded-mode decoder requires a speaker embedding")
        if not self.is_embedded and z is not None:
            raise ConfigError("agnostic-mode decoder takes no speaker embedding")


@dataclass
class LoopState:
    """Rollout state: buffer (B, k, d_b), attention means (B, M), previous
    output (B, d_o), and the step counter."""

    buffer: Tensor
    means: Tensor
    prev_output: Tensor
    t: int = 0


def init_state(model: LoopModel, batch_size=1) -> LoopState:
    c = model.config
    dtype = c.np_dtype
    return LoopState(
        buffer=Tensor(np.zeros((batch_size, c.buffer_slots, c.d_b), dtype=dtype)),
        means=Tensor(np.zeros((batch_size, c.n_components), dtype=dtype)),
        prev_output=Tensor(np.zeros((batch_size, c.d_o), dtype=dtype)),
        t=0,
    )


def embed_phonemes(model: LoopModel, s: PhonemeSequence):
    """Phoneme ids -> embedding matrix E with one column per position (d_p, l)."""
    return embedding(model.phoneme_table, s.ids).transpose()


def embed_phoneme_batch(model: LoopModel, id_lists):
    """Pad a batch of id sequences and embed: returns (E (B, d_p, L), lengths)."""
    lengths = np.array([len(ids) for ids in id_lists])
    max_len = int(lengths.max())
    padded = np.zeros((len(id_lists), max_len), dtype=np.int64)
    for i, ids in enumerate(id_lists):
        padded[i, : len(ids)] = ids
    flat = embedding(model.phoneme_table, padded.reshape(-1))
    e = flat.reshape(len(id_lists), max_len, -1).transpose(0, 2, 1)
    return e, lengths


def buffer_push(buffer, u):
    """Insert u at slot 0 and shift the rest right; the oldest slot falls off."""
    b, _, d_b = buffer.shape
    if u.shape != (b, d_b):
        raise ValueError(f"expected update of shape {(b, d_b)}, got {u.shape}")
    data = np.empty_like(buffer.data)
    data[:, 0, :] = u.data
    data[:, 1:, :] = buffer.data[:, :-1, :]

    def backward(g):
        if u.requires_grad:
            u._accumulate(g[:, 0, :].copy())
        if buffer.requires_grad:
            gb = np.zeros_like(buffer.data)
            gb[:, :-1, :] = g[:, 1:, :]
            buffer._accumulate(gb)

    return Tensor._result(data, (buffer, u), backward)


def compute_u(model: LoopModel, buffer, ctx, z, o_prev):
    """New representation vector from buffer, context (+ projected speaker),
    and the previous output frame."""
    model._check_z(z)
    b = buffer.shape[0]
    flat = buffer.reshape(b, -1)
    if model.is_embedded:
        ctx = ctx + z @ model.speaker_to_context
    return model.update_net(concat([flat, ctx, o_prev], axis=1))


def compute_o(model: LoopModel, buffer, z):
    """Next output frame from the updated buffer (+ projected speaker)."""
    model._check_z(z)
    b = buffer.shape[0]
    flat = buffer.reshape(b, -1)
    if model.is_embedded:
        flat = concat([flat, z @ model.speaker_to_output], axis=1)
    return model.output_net(flat)


@dataclass
class StepInfo:
    params: attention.AttentionParams
    weights: Tensor


def step(model, state: LoopState, e, lengths, z=None, teacher_frame=None,
         attention_mode="train", diagnostics=None):
    """One decoder step; returns (o_t, new_state, info).

    `teacher_frame` (B, d_o), when given, replaces the stored previous output
    as the update network's input and becomes the stored previous output of
    the new state (teacher forcing).
    """
    b = state.buffer.shape[0]
    params = attention.attention_params(
        state.buffer.reshape(b, -1),
        model.attention_net,
        model.config.n_components,
        shift_scale=model.config.shift_scale,
    )
    means = attention.advance_means(state.means, params, mode=attention_mode)
    weights = attention.position_weights(
        means, params, lengths, grid_len=e.shape[2],
        diagnostics=diagnostics, step_index=state.t,
    )
    ctx = attention.context(weights, e)

    prev = teacher_frame if teacher_frame is not None else state.prev_output
    u = compute_u(model, state.buffer, ctx, z, prev)
    if not np.isfinite(u.data).all():
        raise NumericError("non-finite buffer update", step=state.t)
    buffer = buffer_push(state.buffer, u)
    o = compute_o(model, buffer, z)
    if not np.isfinite(o.data).all():
        raise NumericError("non-finite output frame", step=state.t)

    new_state = LoopState(
        buffer=buffer,
        means=means,
        prev_output=teacher_frame if teacher_frame is not None else o,
        t=state.t + 1,
    )
    return o, new_state, StepInfo(params=params, weights=weights)


def teacher_forced_batch(model, id_lists, targets, z=None, diagnostics=None):
    """Teacher-forced rollout over a padded batch.

    `targets` is a (B, T, d_o) array; step t consumes frame t-1 (zeros at
    t=0) and the rollout runs for T steps, so outputs align with targets
    frame for frame. Returns (outputs (B, T, d_o) tensor, final state).
    """
    dtype = model.config.np_dtype
    targets = np.asarray(targets, dtype=dtype)
    b, total, d_o = targets.shape
    e, lengths = embed_phoneme_batch(model, id_lists)
    state = init_state(model, b)
    outs = []
    zero = Tensor(np.zeros((b, d_o), dtype=dtype))
    for t in range(total):
        teacher = zero if t == 0 else Tensor(targets[:, t - 1, :])
        o, state, _ = step(
            model, state, e, lengths, z=z, teacher_frame=teacher,
            attention_mode="train", diagnostics=diagnostics,
        )
        outs.append(o.reshape(b, 1, d_o))
    outputs = concat(outs, axis=1)
    return outputs, state


def teacher_forced_pass(model, s: PhonemeSequence, y, z=None, return_state=False):
    """Single-sequence teacher-forced pass; output length equals target length."""
    frames = y.frames if isinstance(y, VocoderFrameSequence) else np.asarray(y)
    outputs, state = teacher_forced_batch(model, [s.ids], frames[None, :, :], z=z)
    out = outputs.reshape(frames.shape[0], frames.shape[1])
    if return_state:
        return out, state
    return out


@dataclass
class FreeRunInfo:
    entry_buffer: np.ndarray
    stop_reason: str
    final_means: np.ndarray
    diagnostics: AttentionDiagnostics


def free_run(model, s: PhonemeSequence, z=None, max_frames=1000,
             initial_state=None, return_info=False):
    """Autoregressive synthesis in inference attention mode.

    Stops once the dominant mixture component's mean walks past the last
    phoneme position (l + 1) or at `max_frames`; at least one frame is
    always emitted.
    """
    if max_frames < 1:
        raise ValueError("max_frames must be positive")
    l = len(s)
    diagnostics = AttentionDiagnostics()
    with autograd.no_grad():
        e, lengths = embed_phoneme_batch(model, [s.ids])
        state = initial_state if initial_state is not None else init_state(model, 1)
        entry_buffer = state.buffer.data.copy()
        frames = []
        stop_reason = "max_frames"
        for _ in range(max_frames):
            o, state, info = step(
                model, state, e, lengths, z=z, attention_mode="inference",
                diagnostics=diagnostics,
            )
            frames.append(o.data[0].copy())
            dominant = int(np.argmax(info.params.priors.data[0]))
            if float(state.means.data[0, dominant]) > l + 1:
                stop_reason = "attention_done"
                break
    seq = VocoderFrameSequence(np.stack(frames).astype(np.float32))
    if return_info:
        return seq, FreeRunInfo(
            entry_buffer=entry_buffer,
            stop_reason=stop_reason,
            final_means=state.means.data.copy(),
            diagnostics=diagnostics,
        )
    return seq


@dataclass
class PrimingInfo:
    primed_buffer: np.ndarray
    generation_entry_buffer: np.ndarray
    primer_frames_used: int
    stop_reason: str


def prime_and_generate(model, primer_y: VocoderFrameSequence, primer_s: PhonemeSequence,
                       new_s: PhonemeSequence, primer_frames=300, max_frames=1000):
    """Teacher-force a primer through the decoder, then synthesize new text
    from the primed buffer without resetting it.

    Only agnostic-mode models support this; the attention state is fresh for
    the new text while the buffer and previous-output carry over.
    """
    if model.is_embedded:
        raise ConfigError("priming requires an agnostic-mode model")
    if primer_frames > len(primer_y):
        raise ValueError(
            f"primer_frames={primer_frames} exceeds primer length {len(primer_y)}"
        )
    if primer_frames == 0:
        seq, info = free_run(model, new_s, max_frames=max_frames, return_info=True)
        zero_buffer = info.entry_buffer.copy()
        return seq, PrimingInfo(
            primed_buffer=zero_buffer,
            generation_entry_buffer=info.entry_buffer,
            primer_frames_used=0,
            stop_reason=info.stop_reason,
        )
    with autograd.no_grad():
        _, primed = teacher_forced_batch(
            model, [primer_s.ids], primer_y.frames[None, :primer_frames, :]
        )
    c = model.config
    handoff = LoopState(
        buffer=Tensor(primed.buffer.data),
        means=Tensor(np.zeros((1, c.n_components), dtype=c.np_dtype)),
        prev_output=Tensor(primed.prev_output.data),
        t=0,
    )
    seq, info = free_run(
        model, new_s, max_frames=max_frames, initial_state=handoff, return_info=True
    )
    return seq, PrimingInfo(
        primed_buffer=primed.buffer.data.copy(),
        generation_entry_buffer=info.entry_buffer,
        primer_frames_used=primer_frames,
        stop_reason=info.stop_reason,
    )
