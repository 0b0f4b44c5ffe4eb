"""Loss terms: exact arithmetic oracles, invariances, kink behavior, gradients."""

import numpy as np
import pytest

from loopfit.autograd import Parameter, Tensor
from loopfit.encoder import EncoderConfig, SpeakerEncoder
from loopfit.errors import ConfigError
from loopfit.features import PhonemeSequence, TripletBatchLayout, VocoderFrameSequence
from loopfit.gradcheck import gradient_check
from loopfit.loop import LoopConfig, LoopModel
from loopfit.losses import (
    LossBreakdown,
    contrastive_batch,
    contrastive_loss,
    cycle_embedding_loss,
    cycle_loss,
    masked_mse_batch,
    mse_loss,
    total_loss,
)

RNG = np.random.default_rng(77)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# -- reconstruction -----------------------------------------------------------------


def test_mse_zero_when_equal():
    y = RNG.normal(size=(6, 4))
    assert float(mse_loss(y.copy(), y).data) == 0.0


def test_mse_single_frame_arithmetic():
    # one frame, one dim: (3 - 1)^2 / 1 = 4
    assert float(mse_loss(np.array([[1.0]]), np.array([[3.0]])).data) == 4.0


def test_mse_matches_elementwise_sum_oracle():
    o = RNG.normal(size=(4, 63))
    y = RNG.normal(size=(4, 63))
    got = float(mse_loss(o, y).data)
    oracle = ((y - o) ** 2).sum() / 63.0
    np.testing.assert_allclose(got, oracle, rtol=1e-12)


def test_mse_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mse_loss(np.zeros((3, 2)), np.zeros((2, 3)))


def test_masked_mse_ignores_padding_and_averages_samples():
    d_o = 3
    a = RNG.normal(size=(2, d_o))
    b = RNG.normal(size=(4, d_o))
    targets = np.zeros((2, 4, d_o))
    targets[0, :2] = a
    targets[1] = b
    outputs = np.zeros((2, 4, d_o))
    outputs[0, 2:] = 99.0  # junk in padded region must not count
    got = float(masked_mse_batch(Tensor(targets * 0.0 + outputs), targets, [2, 4]).data)
    per_a = ((a - outputs[0, :2]) ** 2).sum() / d_o
    per_b = ((b - outputs[1]) ** 2).sum() / d_o
    np.testing.assert_allclose(got, (per_a + per_b) / 2, rtol=1e-12)


# -- contrastive ---------------------------------------------------------------------


def test_contrastive_zero_when_tight_and_separated():
    z1 = unit([1, 0, 0])
    z3 = unit([0, 1, 0])  # distance sqrt(2) > 1
    val = float(contrastive_loss(z1, z1.copy(), z3, margin=1.0).data)
    assert val == 0.0


def test_contrastive_all_equal_gives_half():
    z = unit([0.3, -0.2, 0.9])
    val = float(contrastive_loss(z, z.copy(), z.copy(), margin=1.0).data)
    np.testing.assert_allclose(val, 0.5, rtol=1e-15)


def test_contrastive_matches_formula_oracle():
    for _ in range(10):
        z1, z2, z3 = (unit(RNG.normal(size=6)) for _ in range(3))
        got = float(contrastive_loss(z1, z2, z3, margin=1.0).data)
        oracle = 0.5 * (
            np.sum((z1 - z2) ** 2)
            + max(0.0, 1.0 - np.linalg.norm(z2 - z3)) ** 2
        )
        np.testing.assert_allclose(got, oracle, rtol=1e-12)


def test_contrastive_invariant_under_orthogonal_transform():
    z1, z2, z3 = (unit(RNG.normal(size=5)) for _ in range(3))
    q, _ = np.linalg.qr(RNG.normal(size=(5, 5)))
    base = float(contrastive_loss(z1, z2, z3).data)
    rotated = float(contrastive_loss(q @ z1, q @ z2, q @ z3).data)
    np.testing.assert_allclose(rotated, base, rtol=1e-10)


def test_contrastive_batch_means_over_triples():
    z = Tensor(np.stack([unit(RNG.normal(size=4)) for _ in range(6)]))
    layout = TripletBatchLayout(triples=((0, 1, 2), (2, 3, 4), (4, 5, 0)))
    got = float(contrastive_batch(z, layout).data)
    oracle = np.mean(
        [
            float(contrastive_loss(z.data[a], z.data[b], z.data[c]).data)
            for a, b, c in layout.triples
        ]
    )
    np.testing.assert_allclose(got, oracle, rtol=1e-12)


def test_contrastive_gradient_continuous_at_margin():
    # place the negative pair exactly at the margin: value and gradient of the
    # hinge term are both zero there
    margin = 1.0
    z2 = np.zeros(3)
    z3 = np.array([margin, 0.0, 0.0])  # ||z2 - z3|| == margin
    p2 = Parameter(z2)
    val = contrastive_loss(Tensor(z2), p2, Tensor(z3), margin=margin)
    val.backward()
    assert float(val.data) == 0.0
    assert np.abs(p2.grad).max() < 1e-12

    # one-sided checks at the kink: moving inside the margin turns the term
    # on quadratically, so one-sided slopes from both sides are ~0
    h = 1e-6
    inside = float(
        contrastive_loss(Tensor(z2), Tensor(z2), Tensor(z3 * (1 - h)), margin=margin).data
    )
    outside = float(
        contrastive_loss(Tensor(z2), Tensor(z2), Tensor(z3 * (1 + h)), margin=margin).data
    )
    assert inside / h < 1e-5
    assert outside == 0.0


def test_contrastive_gradients_away_from_kink():
    rng = np.random.default_rng(3)
    z1 = Parameter(unit(rng.normal(size=4)))
    z2 = Parameter(unit(rng.normal(size=4)))
    z3 = Parameter(unit(rng.normal(size=4)))
    dist = np.linalg.norm(z2.data - z3.data)
    assert abs(dist - 1.0) > 1e-3  # generic draw sits away from the margin

    err = gradient_check(
        lambda: contrastive_loss(z1, z2, z3, margin=1.0), [z1, z2, z3], step=1e-5
    )
    assert err < 1e-4


# -- cycle ---------------------------------------------------------------------------


def test_cycle_zero_for_identical_embeddings():
    z = Tensor(np.stack([unit([1, 2, 3]), unit([0, 1, 0])]))
    assert float(cycle_embedding_loss(z, z).data) == 0.0


def test_cycle_symmetric_in_its_arguments():
    za = Tensor(np.stack([unit(RNG.normal(size=4))]))
    zb = Tensor(np.stack([unit(RNG.normal(size=4))]))
    ab = float(cycle_embedding_loss(za, zb).data)
    ba = float(cycle_embedding_loss(zb, za).data)
    np.testing.assert_allclose(ab, ba, rtol=1e-15)


def _mini_pair(seed=0):
    cfg = LoopConfig(
        n_phonemes=4, d_o=5, buffer_slots=3, d_b=6, d_p=4, d_z=4,
        n_components=2, hidden=6, dtype="float64",
    )
    model = LoopModel(cfg, np.random.default_rng(seed))
    enc_cfg = EncoderConfig(
        d_o=5, d_z=4, channels=2, conv_layers=2, fc_width=5, fc_layers=1,
        dtype="float64",
    )
    enc = SpeakerEncoder(enc_cfg, np.random.default_rng(seed + 1))
    return model, enc


def test_cycle_matches_decomposition_oracle():
    model, enc = _mini_pair(seed=11)
    y = VocoderFrameSequence(RNG.normal(size=(6, 5)).astype(np.float32))
    s = PhonemeSequence(np.array([0, 2, 3]), 4)
    got = float(cycle_loss(model, enc, y, s, training=True).data)

    from loopfit.loop import teacher_forced_batch

    frames = y.frames[None, :, :].astype(np.float64)
    z = enc.forward(frames, training=True)
    outputs, _ = teacher_forced_batch(model, [s.ids], frames, z=z)
    z_out = enc.forward(outputs, training=True)
    oracle = float(((z.data - z_out.data) ** 2).sum())
    np.testing.assert_allclose(got, oracle, rtol=1e-12)


# -- total ----------------------------------------------------------------------------


def _scalar(v):
    return Tensor(np.asarray(float(v)))


def test_total_weighted_combination_arithmetic():
    total, br = total_loss(_scalar(1.0), _scalar(0.5), _scalar(0.2), alpha=10, beta=10)
    assert float(total.data) == 8.0
    assert br.total == 8.0
    br.check()


def test_total_default_weights():
    import inspect

    sig = inspect.signature(total_loss)
    assert sig.parameters["alpha"].default == 10.0
    assert sig.parameters["beta"].default == 10.0


def test_total_zero_weights_is_pure_mse():
    total, br = total_loss(_scalar(1.7), _scalar(9.0), _scalar(9.0), alpha=0, beta=0)
    assert float(total.data) == 1.7
    assert br.contrast == 9.0  # still reported, just unweighted
    assert br.cycle == 9.0


def test_total_no_cycle_ablation_config():
    total, br = total_loss(_scalar(1.0), _scalar(0.5), _scalar(0.2), alpha=10, beta=0)
    assert br.beta == 0.0
    assert float(total.data) == 6.0


def test_negative_weights_rejected():
    with pytest.raises(ConfigError):
        total_loss(_scalar(1.0), _scalar(1.0), _scalar(1.0), alpha=-1, beta=0)


def test_breakdown_invariant_catches_mismatch():
    bad = LossBreakdown(mse=1.0, contrast=1.0, cycle=1.0, alpha=10, beta=10, total=5.0)
    with pytest.raises(AssertionError):
        bad.check()


def test_losses_nonnegative_and_total_dominates_mse():
    for _ in range(20):
        o = RNG.normal(size=(3, 4))
        y = RNG.normal(size=(3, 4))
        z1, z2, z3 = (unit(RNG.normal(size=4)) for _ in range(3))
        m = mse_loss(o, y)
        c = contrastive_loss(z1, z2, z3)
        cy = cycle_embedding_loss(
            Tensor(np.stack([z1])), Tensor(np.stack([z2]))
        )
        assert float(m.data) >= 0
        assert float(c.data) >= 0
        assert float(cy.data) >= 0
        total, _ = total_loss(m, c, cy, alpha=10, beta=10)
        assert float(total.data) >= float(m.data)
