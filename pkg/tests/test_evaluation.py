"""Evaluation: DTW enumeration oracles, MCD, AUC rank statistics, stratification."""

import functools
import itertools

import numpy as np
import pytest

from loopfit import evaluation
from loopfit.encoder import EncoderConfig
from loopfit.errors import NumericError
from loopfit.evaluation import (
    MCD_CONSTANT,
    SpeakerClassifier,
    cosine_distance,
    dtw_align,
    load_classifier,
    mcd_dtw,
    quality_stratify,
    rank_auc,
    save_classifier,
    scores_to_roc,
    top1_accuracy,
    train_classifier,
    train_speaker_id,
    verification_auc,
)
from loopfit.features import VocoderFrameSequence, generate_toy_corpus, read_frames

RNG = np.random.default_rng(101)


# -- DTW oracles -----------------------------------------------------------------


def _dist_matrix(fa, fb):
    diff = fa[:, None, :] - fb[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def _recursive_min_cost(dist):
    """Independent top-down oracle for the minimal path cost."""

    @functools.lru_cache(maxsize=None)
    def best(i, j):
        if i == 0 and j == 0:
            return dist[0, 0]
        options = []
        if i > 0 and j > 0:
            options.append(best(i - 1, j - 1))
        if i > 0:
            options.append(best(i - 1, j))
        if j > 0:
            options.append(best(i, j - 1))
        return dist[i, j] + min(options)

    return best(dist.shape[0] - 1, dist.shape[1] - 1)


def _all_paths(la, lb):
    """Exhaustively enumerate every monotone path (for small sizes)."""
    paths = []

    def extend(path):
        i, j = path[-1]
        if (i, j) == (la - 1, lb - 1):
            paths.append(list(path))
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            ni, nj = i + di, j + dj
            if ni < la and nj < lb:
                path.append((ni, nj))
                extend(path)
                path.pop()

    extend([(0, 0)])
    return paths


def test_identical_sequences_align_diagonally_with_zero_cost():
    frames = RNG.normal(size=(6, 3))
    result = dtw_align(frames, frames.copy())
    assert result.cost == 0.0
    assert result.path == [(i, i) for i in range(6)]


def test_single_frame_pair_cost_is_euclidean_distance():
    a = RNG.normal(size=(1, 4))
    b = RNG.normal(size=(1, 4))
    result = dtw_align(a, b)
    np.testing.assert_allclose(result.cost, np.linalg.norm(a[0] - b[0]), rtol=1e-12)
    assert result.path == [(0, 0)]


def test_dtw_matches_recursive_oracle_over_200_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(200):
        la, lb = rng.integers(1, 11, size=2)
        fa = rng.normal(size=(la, 3))
        fb = rng.normal(size=(lb, 3))
        result = dtw_align(fa, fb)
        oracle = _recursive_min_cost(_dist_matrix(fa, fb))
        np.testing.assert_allclose(result.cost, oracle, rtol=1e-12)


def test_dtw_matches_exhaustive_path_enumeration_small():
    rng = np.random.default_rng(6)
    for _ in range(30):
        la, lb = rng.integers(1, 6, size=2)
        fa = rng.normal(size=(la, 2))
        fb = rng.normal(size=(lb, 2))
        dist = _dist_matrix(fa, fb)
        best = min(
            sum(dist[i, j] for i, j in path) for path in _all_paths(la, lb)
        )
        result = dtw_align(fa, fb)
        np.testing.assert_allclose(result.cost, best, rtol=1e-12)


def test_dtw_path_is_valid_and_cost_is_optimal_spot_checks():
    rng = np.random.default_rng(7)
    for _ in range(20):
        la, lb = rng.integers(2, 12, size=2)
        fa = rng.normal(size=(la, 3))
        fb = rng.normal(size=(lb, 3))
        result = dtw_align(fa, fb)
        assert result.path[0] == (0, 0)
        assert result.path[-1] == (la - 1, lb - 1)
        for (i0, j0), (i1, j1) in zip(result.path, result.path[1:]):
            assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}
        # the reported cost equals the path's summed distances
        dist = _dist_matrix(fa, fb)
        np.testing.assert_allclose(
            result.cost, sum(dist[i, j] for i, j in result.path), rtol=1e-12
        )
        # and undercuts arbitrary manual paths
        for path in itertools.islice(_manual_paths(la, lb, rng), 5):
            manual = sum(dist[i, j] for i, j in path)
            assert result.cost <= manual + 1e-12


def _manual_paths(la, lb, rng):
    while True:
        path = [(0, 0)]
        while path[-1] != (la - 1, lb - 1):
            i, j = path[-1]
            moves = [
                (di, dj)
                for di, dj in ((1, 1), (1, 0), (0, 1))
                if i + di < la and j + dj < lb
            ]
            path.append(tuple(np.add(path[-1], moves[rng.integers(len(moves))])))
        yield path


def test_dtw_tie_break_prefers_diagonal():
    # constant distances: every path costs path-length * d, so the shortest
    # (all-diagonal) path wins; among equal-length ties diag is preferred
    frames = np.ones((4, 2))
    result = dtw_align(frames, np.zeros((4, 2)))
    assert result.path == [(i, i) for i in range(4)]


def test_dtw_feature_width_mismatch():
    with pytest.raises(ValueError):
        dtw_align(np.zeros((2, 3)), np.zeros((2, 4)))


# -- MCD ---------------------------------------------------------------------------


def test_mcd_zero_for_identical():
    frames = RNG.normal(size=(5, 4))
    assert mcd_dtw(frames, frames.copy()) == 0.0


def test_mcd_two_frame_hand_case():
    a = np.array([[0.0, 0.0], [1.0, 1.0]])
    b = np.array([[0.0, 0.0]])
    # forced alignment: (0,0) then (1,0); contributions 0 and C*sqrt(2*2)
    expected = (0.0 + MCD_CONSTANT * np.sqrt(2.0 * 2.0)) / 2.0
    np.testing.assert_allclose(mcd_dtw(a, b), expected, rtol=1e-12)


def test_mcd_symmetric_over_random_pairs():
    rng = np.random.default_rng(8)
    for _ in range(15):
        la, lb = rng.integers(1, 12, size=2)
        fa = rng.normal(size=(la, 5))
        fb = rng.normal(size=(lb, 5))
        np.testing.assert_allclose(mcd_dtw(fa, fb), mcd_dtw(fb, fa), rtol=1e-10)


def test_mcd_dims_subset_alignment():
    rng = np.random.default_rng(9)
    fa = rng.normal(size=(6, 4))
    fb = fa.copy()
    fb[:, 2:] += 5.0  # differ only outside the selected dims
    assert mcd_dtw(fa, fb, dims=[0, 1]) == 0.0
    assert mcd_dtw(fa, fb) > 0.0
    with pytest.raises(ValueError):
        mcd_dtw(fa, fb, dims=[])


def test_mcd_nonnegative_zero_iff_identical_restriction():
    rng = np.random.default_rng(10)
    fa = rng.normal(size=(4, 3))
    fb = rng.normal(size=(4, 3))
    assert mcd_dtw(fa, fb) > 0.0


# -- AUC ------------------------------------------------------------------------------


def test_auc_perfectly_separated_is_one():
    assert rank_auc([0.1, 0.2, 0.3], [0.5, 0.6]) == 1.0


def test_auc_identical_distributions_is_half():
    assert rank_auc([0.4, 0.4], [0.4, 0.4]) == 0.5


def test_auc_matches_rank_sum_hand_computation():
    same = [0.1, 0.2]
    notsame = [0.15, 0.3, 0.4]
    # pairwise: 0.1 beats all three; 0.2 beats 0.3, 0.4 -> 5 of 6
    np.testing.assert_allclose(rank_auc(same, notsame), 5.0 / 6.0, rtol=1e-15)
    same = [0.2]
    notsame = [0.2, 0.3]
    # one tie (0.5) + one win (1) over 2 pairs
    np.testing.assert_allclose(rank_auc(same, notsame), 0.75, rtol=1e-15)


def test_auc_invariant_under_strictly_monotone_transform():
    rng = np.random.default_rng(11)
    same = rng.normal(size=20)
    notsame = rng.normal(size=30) + 0.5
    base = rank_auc(same, notsame)
    np.testing.assert_allclose(rank_auc(np.exp(same), np.exp(notsame)), base, rtol=1e-12)
    np.testing.assert_allclose(
        rank_auc(3 * same + 7, 3 * notsame + 7), base, rtol=1e-12
    )


def test_auc_complement_identity_for_tie_free_scores():
    rng = np.random.default_rng(12)
    same = rng.normal(size=15)
    notsame = rng.normal(size=25)
    total = rank_auc(same, notsame) + rank_auc(notsame, same)
    np.testing.assert_allclose(total, 1.0, rtol=1e-12)


def test_roc_curve_endpoints_and_monotonicity():
    rng = np.random.default_rng(13)
    curve, auc = scores_to_roc(rng.normal(size=9), rng.normal(size=14) + 1.0)
    assert curve.false_positive_rates[0] == 0.0
    assert curve.true_positive_rates[0] == 0.0
    assert curve.false_positive_rates[-1] == 1.0
    assert curve.true_positive_rates[-1] == 1.0
    assert (np.diff(curve.false_positive_rates) >= 0).all()
    assert (np.diff(curve.true_positive_rates) >= 0).all()
    assert 0.0 <= auc <= 1.0


def test_verification_auc_scores_by_cosine_distance():
    def embedder(x):
        return x

    same = [(np.array([1.0, 0.0]), np.array([1.0, 0.01]))]
    notsame = [(np.array([1.0, 0.0]), np.array([0.0, 1.0]))]
    _, auc = verification_auc(embedder, same, notsame)
    assert auc == 1.0
    with pytest.raises(NumericError):
        verification_auc(embedder, [(np.zeros(2), np.ones(2))], notsame)
    with pytest.raises(ValueError):
        verification_auc(embedder, [], notsame)


# -- stratification ---------------------------------------------------------------------


def test_stratify_matches_hand_computed_ratios():
    vecs = {
        "a": [np.array([1.0, 0.0]), np.array([0.999, 0.01])],  # tight cluster
        "b": [np.array([0.0, 1.0]), np.array([0.3, 0.7])],  # looser
        "c": [np.array([-1.0, 0.2]), np.array([-0.9, -0.2])],
    }

    def embedder(x):
        return x

    ratios = {}
    for spk, own in vecs.items():
        intra = cosine_distance(own[0], own[1])
        inters = [
            cosine_distance(v, w)
            for v in own
            for other, ws in vecs.items()
            if other != spk
            for w in ws
        ]
        ratios[spk] = np.mean(inters) / intra
    threshold = sorted(ratios.values())[1]  # keep the strict majority
    kept = quality_stratify(vecs, embedder, threshold)
    expected = sorted(s for s, r in ratios.items() if r > threshold)
    assert kept == expected


def test_stratify_threshold_extremes():
    vecs = {
        "a": [np.array([1.0, 0.1]), np.array([0.9, 0.2])],
        "b": [np.array([0.1, 1.0]), np.array([0.2, 0.9])],
    }
    assert quality_stratify(vecs, lambda x: x, 0.0) == ["a", "b"]
    assert quality_stratify(vecs, lambda x: x, 1e12) == []


def test_stratify_excludes_single_sample_speakers_with_warning():
    vecs = {
        "a": [np.array([1.0, 0.0]), np.array([0.9, 0.1])],
        "b": [np.array([0.0, 1.0]), np.array([0.1, 0.9])],
        "lonely": [np.array([1.0, 1.0])],
    }
    with pytest.warns(UserWarning, match="lonely"):
        kept = quality_stratify(vecs, lambda x: x, 0.0)
    assert "lonely" not in kept


# -- speaker identification ----------------------------------------------------------


@pytest.fixture(scope="module")
def id_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("idcorpus")
    manifest = generate_toy_corpus(
        root, n_speakers=3, utterances_per_speaker=14, phoneme_inventory_size=6,
        seed=21, d_o=8,
    )
    train, test = [], []
    for r in manifest.records:
        seq = read_frames(manifest.resolve(r))
        (train if r.split == "train" else test).append((seq, r.speaker))
    return train, test


def _enc_cfg(d_o=8, d_z=6):
    return EncoderConfig(
        d_o=d_o, d_z=d_z, channels=4, conv_layers=2, fc_width=12, fc_layers=1,
        dtype="float32",
    )


def test_classifier_learns_toy_speakers(id_corpus):
    train, test = id_corpus
    clf = train_speaker_id(
        train, ["spk00", "spk01", "spk02"], _enc_cfg(), seed=0, epochs=12,
        max_len=60, noise_sd=0.05,
    )
    acc = top1_accuracy(clf, test)
    assert acc >= 2.0 / 3.0  # tiny encoder, easy corpus
    preds = clf.predict([seq for seq, _ in test])
    counts = {}
    for p in preds:
        counts[p] = counts.get(p, 0) + 1
    assert sum(counts.values()) == len(test)


def test_label_permutation_permutes_predictions(id_corpus):
    train, test = id_corpus
    names = ["spk00", "spk01", "spk02"]
    perm = {"spk00": "spk01", "spk01": "spk02", "spk02": "spk00"}

    rng_a = np.random.default_rng(33)
    clf_a = SpeakerClassifier(_enc_cfg(), names, rng_a)
    rng_b = np.random.default_rng(33)
    clf_b = SpeakerClassifier(_enc_cfg(), names, rng_b)
    # permute the head columns of B exactly as the labels are permuted:
    # column for class c in A becomes the column for perm[c] in B
    for src, dst in perm.items():
        i, j = names.index(src), names.index(dst)
        clf_b.head.w.data[:, j] = clf_a.head.w.data[:, i]
        clf_b.head.b.data[j] = clf_a.head.b.data[i]

    train_b = [(seq, perm[label]) for seq, label in train]
    train_classifier(clf_a, train, seed=1, epochs=2, max_len=40, noise_sd=0.0)
    train_classifier(clf_b, train_b, seed=1, epochs=2, max_len=40, noise_sd=0.0)

    seqs = [seq for seq, _ in test]
    preds_a = clf_a.predict(seqs)
    preds_b = clf_b.predict(seqs)
    assert preds_b == [perm[p] for p in preds_a]


def test_oracle_and_constant_classifier_accuracy(id_corpus):
    _, test = id_corpus

    class Oracle:
        def predict(self, seqs):
            by_id = {id(seq): label for seq, label in test}
            return [by_id[id(s)] for s in seqs]

    assert top1_accuracy(Oracle(), test) == 1.0

    class Constant:
        def predict(self, seqs):
            return ["spk00"] * len(seqs)

    balanced = test[:3]  # one per speaker in generation order? ensure balance:
    balanced = [t for t in test]
    acc = top1_accuracy(Constant(), balanced)
    frac = sum(1 for _, l in balanced if l == "spk00") / len(balanced)
    assert acc == frac
    with pytest.raises(ValueError):
        top1_accuracy(Constant(), [])


def test_smooth_frames_preserves_means_and_reduces_variance():
    rng = np.random.default_rng(17)
    frames = rng.normal(size=(50, 4)).astype(np.float32)
    smoothed = evaluation.smooth_frames(frames, 5)
    assert smoothed.shape == frames.shape
    np.testing.assert_allclose(
        smoothed.mean(axis=0), frames.mean(axis=0), atol=0.2
    )
    assert smoothed.std() < frames.std()
    np.testing.assert_array_equal(evaluation.smooth_frames(frames, 1), frames)


def test_classifier_smoothing_augmentation_runs(id_corpus):
    train, test = id_corpus
    clf = train_speaker_id(
        train, ["spk00", "spk01", "spk02"], _enc_cfg(), seed=2, epochs=2,
        max_len=40, noise_sd=0.1, smooth_prob=0.5, smooth_widths=(2, 6),
    )
    assert len(clf.predict([seq for seq, _ in test[:2]])) == 2


def test_classifier_save_load_round_trip(id_corpus, tmp_path):
    train, test = id_corpus
    clf = train_speaker_id(
        train[:9], ["spk00", "spk01", "spk02"], _enc_cfg(), seed=5, epochs=1,
        max_len=30, noise_sd=0.0,
    )
    path = tmp_path / "clf.ckpt"
    save_classifier(path, clf)
    loaded = load_classifier(path)
    seqs = [seq for seq, _ in test]
    assert loaded.predict(seqs) == clf.predict(seqs)
    np.testing.assert_allclose(
        loaded.penultimate(seqs[0]), clf.penultimate(seqs[0]), atol=1e-7
    )


def test_fitting_verification_pairing_counts_and_orientation():
    gen = {"a": [np.array([1.0, 0.0])], "b": [np.array([0.0, 1.0])]}
    reals = {
        "a": [np.array([1.0, 0.05]), np.array([0.9, 0.0])],
        "b": [np.array([0.1, 1.0])],
    }
    same, notsame = evaluation.fitting_verification_scores(gen, reals, lambda x: x)
    # a's gen pairs with a's 2 reals; b's gen with b's 1 real
    assert len(same) == 3
    # a's gen vs b's 1 real; b's gen vs a's 2 reals
    assert len(notsame) == 3
    assert max(same) < min(notsame)  # aligned identities score closer
    assert evaluation.rank_auc(same, notsame) == 1.0


def test_report_and_roc_csv_writers(tmp_path):
    evaluation.write_report({"a": 1.5, "b": 0.25}, tmp_path / "report.txt")
    text = (tmp_path / "report.txt").read_text()
    assert "a 1.5" in text and "b 0.25" in text
    curve, _ = scores_to_roc([0.1, 0.2], [0.3, 0.4])
    evaluation.write_roc_csv(curve, tmp_path / "roc.csv")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "fpr,tpr,threshold"
    assert len(lines) == len(curve.thresholds) + 1
