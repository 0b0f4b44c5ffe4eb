"""Speaker encoder: unit norm, batch/solo consistency, masking, gradients."""

import numpy as np
import pytest

from loopfit.autograd import Parameter, Tensor
from loopfit.encoder import EncoderConfig, SpeakerEncoder, SpeakerEmbedding
from loopfit.errors import NumericError
from loopfit.features import VocoderFrameSequence
from loopfit.gradcheck import gradient_check

RNG = np.random.default_rng(55)


def tiny_encoder(seed=0, d_o=5, d_z=4, channels=3, fc_width=6):
    cfg = EncoderConfig(
        d_o=d_o, d_z=d_z, channels=channels, conv_layers=5, fc_width=fc_width,
        fc_layers=2, dtype="float64",
    )
    return SpeakerEncoder(cfg, np.random.default_rng(seed))


def seq(m=10, d=5, seed=None):
    rng = np.random.default_rng(seed) if seed is not None else RNG
    return VocoderFrameSequence(rng.normal(size=(m, d)).astype(np.float32))


def test_full_scale_defaults():
    cfg = EncoderConfig(d_o=63)
    assert cfg.channels == 32
    assert cfg.conv_layers == 5
    assert cfg.fc_width == 256
    assert cfg.fc_layers == 2
    assert cfg.d_z == 256


def test_embedding_is_unit_norm():
    enc = tiny_encoder()
    for m in (1, 4, 30):
        emb = enc.embed(seq(m))
        assert abs(np.linalg.norm(emb.vector) - 1.0) < 1e-6


def test_identical_inputs_identical_embeddings_in_eval_mode():
    enc = tiny_encoder()
    s = seq(12)
    a = enc.embed(s)
    b = enc.embed(s)
    np.testing.assert_array_equal(a.vector, b.vector)


def test_positive_scaling_keeps_unit_norm():
    enc = tiny_encoder()
    s = seq(8)
    for scale in (0.5, 3.0, 100.0):
        scaled = VocoderFrameSequence(s.frames * np.float32(scale))
        emb = enc.embed(scaled)
        assert abs(np.linalg.norm(emb.vector) - 1.0) < 1e-6


def test_batch_of_one_matches_solo():
    enc = tiny_encoder()
    s = seq(9)
    solo = enc.embed(s)
    batch = enc.embed_batch([s])
    np.testing.assert_allclose(batch[0].vector, solo.vector, atol=1e-12)


def test_mixed_length_batch_matches_solo_embeddings():
    enc = tiny_encoder(seed=3)
    a = seq(40, seed=1)
    b = seq(100, seed=2)
    got = enc.embed_batch([a, b])
    np.testing.assert_allclose(got[0].vector, enc.embed(a).vector, atol=1e-6)
    np.testing.assert_allclose(got[1].vector, enc.embed(b).vector, atol=1e-6)


def test_zero_padding_never_changes_result():
    enc = tiny_encoder(seed=4)
    s = seq(7)
    solo = enc.embed(s)
    padded = np.zeros((1, 15, 5))
    padded[0, :7] = s.frames
    import loopfit.autograd as autograd

    with autograd.no_grad():
        z = enc.forward(padded, lengths=np.array([7]), training=False)
    np.testing.assert_allclose(z.data[0], solo.vector, atol=1e-12)


def test_batch_permutation_permutes_outputs():
    enc = tiny_encoder(seed=5)
    seqs = [seq(6, seed=i) for i in range(4)]
    fwd = enc.embed_batch(seqs)
    perm = [2, 0, 3, 1]
    rev = enc.embed_batch([seqs[i] for i in perm])
    for out_pos, in_pos in enumerate(perm):
        np.testing.assert_allclose(rev[out_pos].vector, fwd[in_pos].vector, atol=1e-12)


def test_empty_input_rejected():
    enc = tiny_encoder()
    with pytest.raises(ValueError):
        enc.forward(np.zeros((1, 0, 5)))


def test_collapsed_embedding_raises():
    enc = tiny_encoder()
    enc.head.w.data[:] = 0.0
    enc.head.b.data[:] = 0.0
    with pytest.raises(NumericError):
        enc.embed(seq(5))


def test_speaker_embedding_type_checks_norm():
    with pytest.raises(ValueError):
        SpeakerEmbedding(np.array([0.5, 0.5]))
    SpeakerEmbedding(np.array([1.0, 0.0]))  # valid


def test_encoder_gradient_check_miniature():
    # d_o=5, d_z=4, m=6 miniature per the module contract
    enc = tiny_encoder(seed=8, d_o=5, d_z=4)
    rng = np.random.default_rng(9)
    for _, p in enc.named_parameters():
        p.data += rng.normal(0.0, 0.05, size=p.data.shape)
    frames = rng.normal(size=(2, 6, 5))
    probe = rng.normal(size=(2, 4))

    def closure():
        z = enc.forward(frames, training=True)
        return (z * Tensor(probe)).sum()

    err = gradient_check(closure, enc.named_parameters(), step=1e-5)
    assert err < 1e-4


def test_gradients_flow_into_tensor_inputs():
    enc = tiny_encoder(seed=10)
    x = Parameter(np.random.default_rng(11).normal(size=(1, 6, 5)))

    def closure():
        z = enc.forward(x, training=True)
        return (z ** 2).sum() + (z[:, 0] * 3.0).sum()

    err = gradient_check(closure, [x], step=1e-5)
    assert err < 1e-4


def test_export_embeddings_line_format(tmp_path):
    from loopfit.encoder import export_embeddings
    from loopfit.features import generate_toy_corpus

    man = generate_toy_corpus(
        tmp_path / "corpus", n_speakers=2, utterances_per_speaker=3,
        phoneme_inventory_size=4, seed=1, d_o=5,
    )
    enc = tiny_encoder(seed=6)
    out = tmp_path / "emb.txt"
    export_embeddings(enc, man, out)
    lines = out.read_text().splitlines()
    assert len(lines) == 6
    for line in lines:
        parts = line.split()
        utt, spk = parts[0], parts[1]
        assert utt.startswith(spk)
        vec = np.array([float(v) for v in parts[2:]])
        assert vec.size == enc.config.d_z
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-6


def test_running_stats_update_only_in_training_mode():
    enc = tiny_encoder(seed=12)
    before = enc.bns[0].running_mean.copy()
    enc.embed(seq(9))  # eval mode
    np.testing.assert_array_equal(enc.bns[0].running_mean, before)
    enc.forward(RNG.normal(size=(2, 7, 5)), training=True)
    assert not np.array_equal(enc.bns[0].running_mean, before)
