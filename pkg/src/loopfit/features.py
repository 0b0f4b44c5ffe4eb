"""Vocoder-feature data model, file formats, and the synthetic toy corpus.

Frame files use the "VLF1" binary layout; manifests are one tab-separated
record per line. The toy corpus substitutes for real speech at desk scale:
each speaker colors shared per-phoneme frame patterns with a private gain
and offset, so speaker identity is a linear coloration that a small encoder
can learn and a closed-form oracle can verify.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusError, FrameFormatError, TripletLayoutError

FRAME_PERIOD_MS = 5.0
DEFAULT_D_O = 63

_MAGIC = b"VLF1"
_HEADER = struct.Struct("<4sIIf")  # magic, d_o, n_frames, frame_period_ms


@dataclass
class VocoderFrameSequence:
    """l x d_o matrix of vocoder features at a fixed frame period."""

    frames: np.ndarray
    frame_period_ms: float = FRAME_PERIOD_MS

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"frames must be 2-D (l, d_o), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"frames must be non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("frames contain non-finite values")
        self.frames = np.ascontiguousarray(arr)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def d_o(self):
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class PhonemeSequence:
    """Integer phoneme ids drawn from an inventory of size P."""

    ids: np.ndarray
    inventory_size: int

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("phoneme sequence must be a non-empty 1-D id list")
        if ids.min() < 0 or ids.max() >= self.inventory_size:
            raise ValueError(
                f"phoneme ids must lie in [0, {self.inventory_size}), "
                f"got {ids.min()}..{ids.max()}"
            )
        self.ids = ids

    def __len__(self):
        return self.ids.size


def write_frames(seq: VocoderFrameSequence, path):
    """Write a frame sequence in the VLF1 layout (bit-exact round trip)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, seq.d_o, seq.n_frames, seq.frame_period_ms))
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def read_frames(path, expected_d_o=None) -> VocoderFrameSequence:
    """Read a VLF1 frame file; errors name the failing byte offset."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < 4 or header[:4] != _MAGIC:
            raise FrameFormatError(f"bad magic in {path!r}", 0)
        if len(header) < _HEADER.size:
            raise FrameFormatError(f"truncated header in {path!r}", len(header))
        _, d_o, n_frames, period = _HEADER.unpack(header)
        if d_o < 1 or n_frames < 1:
            raise FrameFormatError(f"invalid header counts in {path!r}", 4)
        payload = fh.read(4 * d_o * n_frames)
        if len(payload) < 4 * d_o * n_frames:
            raise FrameFormatError(
                f"truncated payload in {path!r}: expected {4 * d_o * n_frames} bytes",
                _HEADER.size + len(payload),
            )
    if expected_d_o is not None and d_o != expected_d_o:
        raise CorpusError(f"{path!r} has d_o={d_o}, corpus uses d_o={expected_d_o}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, d_o)
    return VocoderFrameSequence(frames=frames.copy(), frame_period_ms=float(period))


def add_noise(seq: VocoderFrameSequence, sd, seed) -> VocoderFrameSequence:
    """Add i.i.d. Gaussian noise with standard deviation `sd`, deterministically."""
    if sd < 0:
        raise ValueError(f"noise sd must be nonnegative, got {sd}")
    if sd == 0:
        return VocoderFrameSequence(seq.frames.copy(), seq.frame_period_ms)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    noise = rng.standard_normal(seq.frames.shape, dtype=np.float32) * np.float32(sd)
    return VocoderFrameSequence(seq.frames + noise, seq.frame_period_ms)


def crop(seq: VocoderFrameSequence, max_len, seed) -> VocoderFrameSequence:
    """Random contiguous window of at most `max_len` frames."""
    if max_len < 1:
        raise ValueError(f"max_len must be positive, got {max_len}")
    l = seq.n_frames
    if l <= max_len:
        return seq
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    start = int(rng.integers(0, l - max_len, endpoint=True))
    return VocoderFrameSequence(
        seq.frames[start : start + max_len].copy(), seq.frame_period_ms
    )


# -- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    speaker: str
    phoneme_ids: tuple
    frame_path: str
    n_frames: int
    split: str  # "train" | "test"


@dataclass
class DatasetManifest:
    """Per-utterance records driving bucketing and triplet batching."""

    records: list = field(default_factory=list)
    root: str = "."

    def __post_init__(self):
        ids = [r.utterance_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate utterance ids in manifest")

    def __len__(self):
        return len(self.records)

    def resolve(self, record) -> str:
        return os.path.join(self.root, record.frame_path)

    def subset(self, predicate) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if predicate(r)], root=self.root)

    def speakers(self):
        seen = []
        for r in self.records:
            if r.speaker not in seen:
                seen.append(r.speaker)
        return seen

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                ids = ",".join(str(i) for i in r.phoneme_ids)
                fh.write(
                    f"{r.utterance_id}\t{r.speaker}\t{ids}\t{r.frame_path}\t{r.n_frames}\t{r.split}\n"
                )

    @staticmethod
    def load(path, verify=True) -> "DatasetManifest":
        root = os.path.dirname(os.path.abspath(path))
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 6:
                    raise CorpusError(f"{path}:{line_no}: expected 6 fields, got {len(fields)}")
                utt, spk, ids, frame_path, n_frames, split = fields
                if split not in ("train", "test"):
                    raise CorpusError(f"{path}:{line_no}: bad split tag {split!r}")
                records.append(
                    ManifestRecord(
                        utterance_id=utt,
                        speaker=spk,
                        phoneme_ids=tuple(int(i) for i in ids.split(",")),
                        frame_path=frame_path,
                        n_frames=int(n_frames),
                        split=split,
                    )
                )
        manifest = DatasetManifest(records, root=root)
        if verify:
            manifest.verify()
        return manifest

    def verify(self):
        """Check that every frame file resolves and its header matches."""
        d_o = None
        for r in self.records:
            path = self.resolve(r)
            if not os.path.exists(path):
                raise CorpusError(f"frame file missing for {r.utterance_id}: {path}")
            with open(path, "rb") as fh:
                header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size or header[:4] != _MAGIC:
                raise FrameFormatError(f"bad frame file {path!r}", 0)
            _, file_d_o, file_frames, _ = _HEADER.unpack(header)
            if file_frames != r.n_frames:
                raise CorpusError(
                    f"{r.utterance_id}: manifest says {r.n_frames} frames, "
                    f"file header says {file_frames}"
                )
            if d_o is None:
                d_o = file_d_o
            elif file_d_o != d_o:
                raise CorpusError(
                    f"{r.utterance_id}: d_o={file_d_o} differs from corpus d_o={d_o}"
                )


def partition_by_length(manifest: DatasetManifest, n_parts) -> list:
    """Split records into length-sorted buckets of near-equal size.

    Sorting is by frame count with utterance-id tie-break, so buckets are
    deterministic; sizes differ by at most one.
    """
    if n_parts < 1:
        raise ValueError(f"n_parts must be positive, got {n_parts}")
    if len(manifest.records) < n_parts:
        raise ValueError(
            f"cannot split {len(manifest.records)} records into {n_parts} parts"
        )
    ordered = sorted(manifest.records, key=lambda r: (r.n_frames, r.utterance_id))
    q, rem = divmod(len(ordered), n_parts)
    parts = []
    start = 0
    for i in range(n_parts):
        size = q + (1 if i < rem else 0)
        parts.append(DatasetManifest(ordered[start : start + size], root=manifest.root))
        start += size
    return parts


# -- triplet batches ----------------------------------------------------------


@dataclass(frozen=True)
class TripletBatchLayout:
    """Index triples (anchor, positive, negative) over a flattened pair batch."""

    triples: tuple


def make_triplet_batch(pair_speakers) -> TripletBatchLayout:
    """Arrange an ordered list of same-speaker pairs into triples.

    Pair i contributes (2i, 2i+1, first element of pair i+1); the last pair
    wraps around to the first. `pair_speakers` holds the speaker label of
    each pair's two elements.
    """
    pairs = list(pair_speakers)
    if len(pairs) < 2:
        raise TripletLayoutError("need at least two pairs to form negatives")
    for i, (a, b) in enumerate(pairs):
        if a != b:
            raise TripletLayoutError(f"pair {i} mixes speakers {a!r} and {b!r}")
    for i in range(len(pairs)):
        nxt = (i + 1) % len(pairs)
        if pairs[i][0] == pairs[nxt][0]:
            raise TripletLayoutError(
                f"adjacent pairs {i} and {nxt} share speaker {pairs[i][0]!r}"
            )
    n = len(pairs)
    triples = tuple((2 * i, 2 * i + 1, 2 * ((i + 1) % n)) for i in range(n))
    return TripletBatchLayout(triples=triples)


# -- toy corpus ----------------------------------------------------------------


def render_utterance(patterns, gain, offset, ids, jitter_sd=0.0, rng=None):
    """Concatenate speaker-colored phoneme patterns into one frame matrix."""
    chunks = []
    for p in ids:
        base = gain * patterns[int(p)] + offset
        if jitter_sd > 0:
            base = base + rng.normal(0.0, jitter_sd, size=base.shape)
        chunks.append(base)
    return np.concatenate(chunks, axis=0).astype(np.float32)


def generate_toy_corpus(
    out_dir,
    n_speakers=12,
    utterances_per_speaker=40,
    phoneme_inventory_size=16,
    seed=0,
    d_o=DEFAULT_D_O,
    jitter_sd=0.05,
) -> DatasetManifest:
    """Generate a deterministic synthetic corpus and write it under out_dir.

    Every phoneme gets a smooth base pattern of 8..20 frames; every speaker
    gets a gain in [0.5, 1.5] and an offset in [-1, 1] per feature dim. An
    utterance concatenates gain * pattern + offset over a random phoneme
    string of length 5..15, plus Gaussian jitter. The manifest carries a
    90/10 train/test split per speaker.
    """
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    if phoneme_inventory_size < 3:
        raise ValueError("need a phoneme inventory of at least 3")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    durations = rng.integers(8, 20, size=phoneme_inventory_size, endpoint=True)
    patterns = []
    for p in range(phoneme_inventory_size):
        raw = rng.normal(size=(int(durations[p]) + 4, d_o))
        kernel = np.ones(5) / 5.0
        smooth = np.empty((int(durations[p]), d_o))
        for dim in range(d_o):
            smooth[:, dim] = np.convolve(raw[:, dim], kernel, mode="valid")
        smooth -= smooth.mean()
        smooth /= max(smooth.std(), 1e-8)
        # each phoneme also carries a constant per-dim level, so utterance
        # statistics vary with content and speaker-invariant embeddings have
        # to be learned rather than falling out of pooling for free
        smooth += rng.normal(0.0, 0.6, size=d_o)[None, :]
        patterns.append(smooth)

    gains = rng.uniform(0.5, 1.5, size=(n_speakers, d_o))
    offsets = rng.uniform(-1.0, 1.0, size=(n_speakers, d_o))

    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    n_train = int(round(utterances_per_speaker * 0.9))
    records = []
    for s in range(n_speakers):
        speaker = f"spk{s:02d}"
        for u in range(utterances_per_speaker):
            length = int(rng.integers(5, 15, endpoint=True))
            ids = rng.integers(0, phoneme_inventory_size, size=length)
            frames = render_utterance(
                patterns, gains[s], offsets[s], ids, jitter_sd=jitter_sd, rng=rng
            )
            utt_id = f"{speaker}_u{u:03d}"
            rel_path = os.path.join("frames", f"{utt_id}.vlf")
            write_frames(
                VocoderFrameSequence(frames), os.path.join(out_dir, rel_path)
            )
            records.append(
                ManifestRecord(
                    utterance_id=utt_id,
                    speaker=speaker,
                    phoneme_ids=tuple(int(i) for i in ids),
                    frame_path=rel_path,
                    n_frames=frames.shape[0],
                    split="train" if u < n_train else "test",
                )
            )
    manifest = DatasetManifest(records, root=os.path.abspath(out_dir))
    manifest.save(os.path.join(out_dir, "manifest.tsv"))
    with open(os.path.join(out_dir, "corpus.cfg"), "w", encoding="utf-8") as fh:
        fh.write("# toy corpus parameters\n")
        fh.write(f"phoneme_inventory_size = {phoneme_inventory_size}\n")
        fh.write(f"d_o = {d_o}\n")
        fh.write(f"n_speakers = {n_speakers}\n")
        fh.write(f"utterances_per_speaker = {utterances_per_speaker}\n")
        fh.write(f"seed = {seed}\n")
        fh.write(f"jitter_sd = {jitter_sd}\n")
    return manifest


def read_corpus_config(corpus_dir) -> dict:
    """Parse corpus.cfg written next to a toy-corpus manifest."""
    path = os.path.join(corpus_dir, "corpus.cfg")
    out = {}
    if not os.path.exists(path):
        return out
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
