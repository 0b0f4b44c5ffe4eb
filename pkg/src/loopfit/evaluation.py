"""Evaluation harness: aligned spectral distortion, speaker identification,
same/not-same verification, and quality-based speaker stratification.

The identification network reuses the fitting encoder's architecture with a
linear classification head; verification scores pairs by the cosine distance
of its penultimate (pre-head, unit-norm) activations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd, checkpoint, kernels
from .autograd import log_softmax
from .encoder import EncoderConfig, SpeakerEncoder
from .errors import NumericError
from .features import VocoderFrameSequence, add_noise, crop
from .nn import Adam, Linear

MCD_CONSTANT = 10.0 / np.log(10.0)


# -- dynamic time warping --------------------------------------------------------


@dataclass
class DtwResult:
    """Monotone alignment path (0-based index pairs) and its cumulative cost."""

    path: list
    cost: float


def _frames_of(x):
    return x.frames if isinstance(x, VocoderFrameSequence) else np.asarray(x)


def dtw_align(a, b, dims=None) -> DtwResult:
    """Minimal-cost monotone alignment under steps {diag, down, right} with
    per-cell Euclidean frame distance. Ties prefer diag, then advancing the
    first sequence, then the second."""
    fa = _frames_of(a).astype(np.float64)
    fb = _frames_of(b).astype(np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[0] < 1 or fb.shape[0] < 1:
        raise ValueError("dtw_align expects two non-empty frame matrices")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(
            f"feature widths differ: {fa.shape[1]} vs {fb.shape[1]}"
        )
    if dims is not None:
        dims = list(dims)
        if not dims:
            raise ValueError("dims subset must be non-empty")
        fa = fa[:, dims]
        fb = fb[:, dims]
    diff = fa[:, None, :] - fb[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    cost, back = kernels.dtw_table(dist)
    i, j = fa.shape[0] - 1, fb.shape[0] - 1
    path = [(i, j)]
    while back[i, j] != -1:
        move = back[i, j]
        if move == 0:
            i, j = i - 1, j - 1
        elif move == 1:
            i -= 1
        else:
            j -= 1
        path.append((i, j))
    path.reverse()
    return DtwResult(path=path, cost=float(cost[-1, -1]))


def mcd_dtw(a, b, dims=None) -> float:
    """Mel-cepstral-distortion-style score after DTW alignment: the standard
    (10/ln 10) * sqrt(2 * squared frame distance), averaged over the path."""
    fa = _frames_of(a).astype(np.float64)
    fb = _frames_of(b).astype(np.float64)
    result = dtw_align(fa, fb, dims=dims)
    if dims is not None:
        fa = fa[:, list(dims)]
        fb = fb[:, list(dims)]
    total = 0.0
    for i, j in result.path:
        total += MCD_CONSTANT * np.sqrt(2.0 * ((fa[i] - fb[j]) ** 2).sum())
    return total / len(result.path)


# -- speaker identification --------------------------------------------------------


class SpeakerClassifier:
    """Fitting-encoder trunk plus a linear head; the unit-norm embedding in
    front of the head is the verification feature."""

    def __init__(self, encoder_config, class_names, rng):
        self.trunk = SpeakerEncoder(encoder_config, rng)
        self.class_names = list(class_names)
        self.head = Linear(
            encoder_config.d_z, len(self.class_names), rng, dtype=encoder_config.np_dtype
        )

    def named_parameters(self):
        return self.trunk.named_parameters() + self.head.named_parameters("head_cls.")

    def logits(self, frames, lengths=None, training=False):
        z = self.trunk.forward(frames, lengths=lengths, training=training)
        return self.head(z)

    def penultimate(self, seq: VocoderFrameSequence) -> np.ndarray:
        """Pre-head activations (the unit-norm embedding) for one utterance."""
        return self.trunk.embed(seq).vector

    def predict(self, seqs):
        out = []
        with autograd.no_grad():
            for seq in seqs:
                scores = self.logits(seq.frames[None, :, :], training=False)
                out.append(self.class_names[int(np.argmax(scores.data[0]))])
        return out


def smooth_frames(frames, width):
    """Box-filter a frame matrix along time (edge-padded)."""
    if width <= 1:
        return frames
    kernel = np.ones(width, dtype=frames.dtype) / width
    pad = (width // 2, width - 1 - width // 2)
    out = np.empty_like(frames)
    for d in range(frames.shape[1]):
        out[:, d] = np.convolve(
            np.pad(frames[:, d], pad, mode="edge"), kernel, mode="valid"
        )
    return out


def train_classifier(classifier: SpeakerClassifier, samples, seed=0, epochs=20,
                     batch_size=32, max_len=100, noise_sd=0.1, lr=1e-3,
                     smooth_prob=0.0, smooth_widths=(4, 16)):
    """Cross-entropy training on (sequence, label) pairs; deterministic in
    (seed, data order).

    `smooth_prob` optionally applies a random time box-filter to a fraction
    of the crops: synthesized sequences are smoother than ground truth, so a
    classifier meant to score them should see that regime in training.
    """
    label_index = {name: i for i, name in enumerate(classifier.class_names)}
    optimizer = Adam(classifier.named_parameters(), lr=lr)
    dtype = classifier.trunk.config.np_dtype
    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 7, epoch)))
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            chosen = order[start : start + batch_size]
            seqs = []
            labels = []
            for idx in chosen:
                seq, label = samples[int(idx)]
                seq = crop(seq, max_len, seed=int(rng.integers(2**63)))
                if smooth_prob > 0 and rng.random() < smooth_prob:
                    width = int(rng.integers(smooth_widths[0], smooth_widths[1] + 1))
                    seq = VocoderFrameSequence(
                        smooth_frames(seq.frames, width), seq.frame_period_ms
                    )
                if noise_sd > 0:
                    seq = add_noise(seq, noise_sd, seed=int(rng.integers(2**63)))
                seqs.append(seq)
                labels.append(label_index[label])
            lengths = np.array([s.n_frames for s in seqs])
            t_max = int(lengths.max())
            frames = np.zeros((len(seqs), t_max, seqs[0].d_o), dtype=np.float32)
            for i, s in enumerate(seqs):
                frames[i, : s.n_frames] = s.frames
            logits = classifier.logits(
                frames.astype(dtype), lengths=lengths, training=True
            )
            logp = log_softmax(logits, axis=1)
            picked = logp[np.arange(len(labels)), np.array(labels)]
            loss = -picked.mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
    return classifier


def train_speaker_id(samples, class_names, encoder_config, seed=0, **train_kw):
    """Build and train the identification network on ground-truth samples."""
    if len(class_names) < 2:
        raise ValueError("speaker identification needs at least two classes")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 6)))
    classifier = SpeakerClassifier(encoder_config, class_names, rng)
    return train_classifier(classifier, samples, seed=seed, **train_kw)


def save_classifier(path, classifier: SpeakerClassifier):
    cfg = classifier.trunk.config
    record = {
        "type": "speaker-classifier",
        "format.version": 1,
        "enc.d_o": cfg.d_o,
        "enc.d_z": cfg.d_z,
        "enc.channels": cfg.channels,
        "enc.conv_layers": cfg.conv_layers,
        "enc.fc_width": cfg.fc_width,
        "enc.fc_layers": cfg.fc_layers,
        "enc.dtype": cfg.dtype,
        "classes": ",".join(classifier.class_names),
    }
    tensors = {f"trunk.{n}": p.data for n, p in classifier.trunk.named_parameters()}
    tensors.update(
        {f"trunk.{n}": a for n, a in classifier.trunk.state_arrays().items()}
    )
    tensors.update({n: p.data for n, p in classifier.head.named_parameters("head_cls.")})
    checkpoint.save_checkpoint(path, record, tensors)


def load_classifier(path) -> SpeakerClassifier:
    record, tensors = checkpoint.load_checkpoint(path)
    if record.get("type") != "speaker-classifier":
        raise ValueError(f"{path!r} is not a speaker-classifier checkpoint")
    cfg = EncoderConfig(
        d_o=int(record["enc.d_o"]),
        d_z=int(record["enc.d_z"]),
        channels=int(record["enc.channels"]),
        conv_layers=int(record["enc.conv_layers"]),
        fc_width=int(record["enc.fc_width"]),
        fc_layers=int(record["enc.fc_layers"]),
        dtype=record["enc.dtype"],
    )
    clf = SpeakerClassifier(cfg, record["classes"].split(","), np.random.default_rng(0))
    dtype = cfg.np_dtype
    for name, p in clf.trunk.named_parameters():
        p.data = np.asarray(tensors[f"trunk.{name}"], dtype=dtype).reshape(p.data.shape)
    clf.trunk.load_state_arrays(
        {
            name[len("trunk.") :]: arr
            for name, arr in tensors.items()
            if name.startswith("trunk.bn")
        }
    )
    for name, p in clf.head.named_parameters("head_cls."):
        p.data = np.asarray(tensors[name], dtype=dtype).reshape(p.data.shape)
    return clf


def top1_accuracy(classifier, labeled_samples) -> float:
    """Fraction of samples whose argmax class matches the label."""
    if not labeled_samples:
        raise ValueError("cannot score an empty sample set")
    preds = classifier.predict([seq for seq, _ in labeled_samples])
    hits = sum(p == label for p, (_, label) in zip(preds, labeled_samples))
    return hits / len(labeled_samples)


# -- verification -----------------------------------------------------------------


@dataclass
class RocCurve:
    false_positive_rates: np.ndarray
    true_positive_rates: np.ndarray
    thresholds: np.ndarray
    auc: float


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cosine distance of a zero vector")
    return 1.0 - float(u @ v) / (nu * nv)


def rank_auc(same_scores, notsame_scores) -> float:
    """P(random same-pair scores below a random not-same pair), ties half.

    Computed from the Mann-Whitney rank statistic with average ranks.
    """
    same = np.asarray(same_scores, dtype=np.float64)
    notsame = np.asarray(notsame_scores, dtype=np.float64)
    pooled = np.concatenate([same, notsame])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled))
    sorted_vals = pooled[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_same = ranks[: len(same)].sum()
    u = rank_sum_same - len(same) * (len(same) + 1) / 2.0
    return 1.0 - u / (len(same) * len(notsame))


def roc_points(same_scores, notsame_scores):
    same = np.asarray(same_scores, dtype=np.float64)
    notsame = np.asarray(notsame_scores, dtype=np.float64)
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([same, notsame])), [np.inf]])
    tpr = [(same <= t).mean() for t in thresholds]
    fpr = [(notsame <= t).mean() for t in thresholds]
    return np.array(fpr), np.array(tpr), thresholds


def verification_auc(embedder, same_pairs, notsame_pairs):
    """Score pairs by cosine distance of their embeddings (same pairs should
    score low); returns (RocCurve, auc)."""
    if not same_pairs or not notsame_pairs:
        raise ValueError("both pair sets must be non-empty")
    same_scores = [cosine_distance(embedder(a), embedder(b)) for a, b in same_pairs]
    notsame_scores = [cosine_distance(embedder(a), embedder(b)) for a, b in notsame_pairs]
    return scores_to_roc(same_scores, notsame_scores)


def scores_to_roc(same_scores, notsame_scores):
    auc = rank_auc(same_scores, notsame_scores)
    fpr, tpr, thresholds = roc_points(same_scores, notsame_scores)
    return RocCurve(
        false_positive_rates=fpr,
        true_positive_rates=tpr,
        thresholds=thresholds,
        auc=auc,
    ), auc


def fitting_verification_scores(generated_by_speaker, reals_by_speaker, embedder):
    """Pair scores for the fitted-voice verification protocol.

    Same pairs couple an unused real sample of speaker A with a sample
    generated from a voice fitted on a different sample of A; not-same pairs
    swap the real sample's speaker. Returns (same_scores, notsame_scores)
    as cosine distances under `embedder`.
    """
    gen_emb = {
        spk: [np.asarray(embedder(g), dtype=np.float64) for g in gens]
        for spk, gens in sorted(generated_by_speaker.items())
    }
    real_emb = {
        spk: [np.asarray(embedder(r), dtype=np.float64) for r in reals]
        for spk, reals in sorted(reals_by_speaker.items())
    }
    same, notsame = [], []
    for spk in sorted(gen_emb):
        for g in gen_emb[spk]:
            for r in real_emb.get(spk, []):
                same.append(cosine_distance(r, g))
            for other in sorted(real_emb):
                if other == spk:
                    continue
                for r in real_emb[other]:
                    notsame.append(cosine_distance(r, g))
    return same, notsame


# -- quality stratification ----------------------------------------------------------


def quality_stratify(samples_by_speaker, embedder, threshold):
    """Keep speakers whose mean between-speaker embedding distance exceeds
    `threshold` times their mean within-speaker distance."""
    activations = {}
    for speaker, seqs in sorted(samples_by_speaker.items()):
        if len(seqs) < 2:
            warnings.warn(
                f"speaker {speaker!r} has fewer than 2 samples; excluded",
                stacklevel=2,
            )
            continue
        activations[speaker] = [np.asarray(embedder(s), dtype=np.float64) for s in seqs]
    kept = []
    speakers = sorted(activations)
    for speaker in speakers:
        own = activations[speaker]
        intra_vals = [
            cosine_distance(own[i], own[j])
            for i in range(len(own))
            for j in range(i + 1, len(own))
        ]
        intra = float(np.mean(intra_vals))
        inter_vals = [
            cosine_distance(a, b)
            for a in own
            for other in speakers
            if other != speaker
            for b in activations[other]
        ]
        inter = float(np.mean(inter_vals))
        if intra == 0.0:
            kept.append(speaker)
            continue
        if inter / intra > threshold:
            kept.append(speaker)
    return kept


# -- report files -----------------------------------------------------------------


def write_report(metrics, path):
    """Line-oriented `name value` report."""
    with open(path, "w", encoding="utf-8") as fh:
        for name in sorted(metrics):
            fh.write(f"{name} {metrics[name]!r}\n")


def write_roc_csv(curve: RocCurve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fpr,tpr,threshold\n")
        for f, t, th in zip(
            curve.false_positive_rates, curve.true_positive_rates, curve.thresholds
        ):
            fh.write(f"{f!r},{t!r},{th!r}\n")
