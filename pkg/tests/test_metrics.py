import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groupface.metrics import (
    EvalReport,
    Embeddings,
    SimilarityConfig,
    cosine_similarity,
    group_distance,
    group_distance_matrix,
    group_aware_similarity,
    kl_to_uniform,
    label_distribution_stats,
    make_similarity,
    pair_verification_accuracy,
    rank1_identification,
    roc_points,
    tar_at_far,
    write_roc_csv,
)

from helpers import brute_pair_accuracy, brute_tar_at_far


def test_cosine_examples():
    assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(0.70710678, abs=1e-8)
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_group_aware_examples():
    vb_i, vb_j = [1.0, 0.0], [0.8, 0.6]
    h = [0.3, -0.1, 2.0]
    assert group_aware_similarity(vb_i, vb_j, h, h) == pytest.approx(cosine_similarity(vb_i, vb_j), abs=1e-15)
    # unit v_hat at distance 0.008 apart, S = 0.8
    a = np.array([1.0, 0.0])
    ang = 2 * math.asin(0.004)
    b = np.array([math.cos(ang), math.sin(ang)])
    got = group_aware_similarity(vb_i, vb_j, a, b, SimilarityConfig(beta=0.1, gamma=1 / 3))
    assert got == pytest.approx(0.78, abs=1e-12)
    cfg0 = SimilarityConfig(beta=0.0)
    assert group_aware_similarity(vb_i, vb_j, a, [0.0, 1.0], cfg0) == cosine_similarity(vb_i, vb_j)
    with pytest.raises(ValueError):
        group_aware_similarity(vb_i, vb_j, [0.0, 0.0], a)


def test_similarity_config_validation():
    with pytest.raises(ValueError):
        SimilarityConfig(beta=-1)
    with pytest.raises(ValueError):
        SimilarityConfig(gamma=0)
    with pytest.raises(ValueError):
        SimilarityConfig(distance_metric="cosine")


@given(st.integers(0, 2**31 - 1), st.one_of(st.just(0.0), st.floats(1e-6, 2)), st.floats(0.05, 3))
def test_group_aware_never_exceeds_cosine(seed, beta, gamma):
    rng = np.random.default_rng(seed)
    vb, vh = rng.normal(size=(2, 5)), rng.normal(size=(2, 4))
    cfg = SimilarityConfig(beta=beta, gamma=gamma)
    s = cosine_similarity(vb[0], vb[1])
    s_star = group_aware_similarity(vb[0], vb[1], vh[0], vh[1], cfg)
    assert s_star <= s
    assert (s_star == s) == (beta == 0)


def test_matrix_similarity_matches_scalar(rng):
    vb, vh = rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
    e = Embeddings(vb, vh)
    cfg = SimilarityConfig()
    m = make_similarity(True, cfg)(e, e)
    for i in range(4):
        for j in range(4):
            assert m[i, j] == pytest.approx(group_aware_similarity(vb[i], vb[j], vh[i], vh[j], cfg), abs=1e-12)


def test_tar_at_far_worked_example():
    # t = 0.2 is the smallest score leaving 1/4 impostors above it, and every
    # genuine score clears it
    out = tar_at_far([0.9, 0.8, 0.3], [0.7, 0.2, 0.1, 0.05], [0.25])
    assert out[0.25] == 1.0
    assert brute_tar_at_far([0.9, 0.8, 0.3], [0.7, 0.2, 0.1, 0.05], 0.25) == 1.0


def test_tar_at_far_separated():
    out = tar_at_far([0.9, 0.95, 0.8], [0.1, 0.2, 0.3], [1 / 3, 0.5, 1.0])
    assert all(v == 1.0 for v in out.values())


def test_tar_equal_distributions_tracks_far(rng):
    s = rng.normal(size=20000)
    for far, tar in tar_at_far(s, s, [0.01, 0.1, 0.5]).items():
        assert abs(tar - far) < 1e-3


def test_tar_at_far_validation():
    with pytest.raises(ValueError):
        tar_at_far([], [0.1])
    with pytest.raises(ValueError):
        tar_at_far([0.1], [])
    with pytest.raises(ValueError):
        tar_at_far([0.1], [0.2], [0.0])


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=40), st.lists(st.floats(-1, 1), min_size=1, max_size=40))
def test_tar_monotone_in_far(gen, imp):
    levels = [1e-3, 0.01, 0.1, 0.3, 1.0]
    out = tar_at_far(gen, imp, levels)
    values = [out[f] for f in levels]
    assert values == sorted(values)


@given(st.integers(0, 2**31 - 1))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    gen, imp = rng.normal(1, 1, 30).round(1), rng.normal(0, 1, 50).round(1)
    levels = [0.02, 0.1, 0.5]
    assert tar_at_far(gen, imp, levels) == tar_at_far(rng.permutation(gen), rng.permutation(imp), levels)
    pairs = [(s, True) for s in gen] + [(s, False) for s in imp]
    shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
    assert pair_verification_accuracy(pairs) == pair_verification_accuracy(shuffled)


@given(st.integers(0, 2**31 - 1))
def test_tar_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    gen = rng.integers(0, 12, size=rng.integers(1, 25)) / 4.0
    imp = rng.integers(0, 12, size=rng.integers(1, 25)) / 4.0 - 0.5
    for far in (1 / len(imp), 0.1, 0.25, 0.5, 1.0):
        assert tar_at_far(gen, imp, [far])[far] == brute_tar_at_far(gen.tolist(), imp.tolist(), far)


def test_pair_accuracy_examples(rng):
    assert pair_verification_accuracy([(0.9, True), (0.8, True), (0.1, False), (0.2, False)]) == 1.0
    six = [(0.9, True), (0.8, True), (0.3, True), (0.6, False), (0.2, False), (0.1, False)]
    assert pair_verification_accuracy(six) == pytest.approx(5 / 6)
    scores = rng.normal(size=4000)
    same = rng.permutation(np.arange(4000) < 2000)
    acc = pair_verification_accuracy(list(zip(scores, same)))
    assert 0.5 <= acc < 0.55
    with pytest.raises(ValueError):
        pair_verification_accuracy([(0.1, True), (0.2, True)])
    with pytest.raises(ValueError):
        pair_verification_accuracy([])


@given(st.integers(0, 2**31 - 1))
def test_pair_accuracy_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    scores = rng.integers(0, 8, size=n) / 8.0
    same = rng.random(n) < 0.5
    same[0], same[1] = True, False
    pairs = list(zip(scores.tolist(), same.tolist()))
    assert pair_verification_accuracy(pairs) == brute_pair_accuracy(pairs)


def test_rank1_examples():
    g = np.eye(3)
    assert rank1_identification(g, [0, 1, 2], g, [0, 1, 2]) == 1.0
    gallery = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert rank1_identification(np.array([[1.0, 0.0]]), [0], gallery, [0, 9]) == 0.0
    probes = np.array([[1.0, 0.1], [0.1, 1.0], [-1.0, 0.2]])
    gal = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [-0.9, 0.3]])
    assert rank1_identification(probes, [0, 1, 2], gal, [0, 1, 2, 7]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        rank1_identification(probes, [0, 1, 5], gal, [0, 1, 2, 7])


def test_rank1_ties_go_to_lower_index():
    gallery = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert rank1_identification(np.array([[1.0, 0.0]]), [3], gallery, [3, 4]) == 1.0
    assert rank1_identification(np.array([[1.0, 0.0]]), [4], gallery, [3, 4]) == 0.0


def test_label_distribution_examples():
    hist, kl = label_distribution_stats([0, 1, 2, 3], 4)
    assert hist.tolist() == [1, 1, 1, 1] and kl == 0.0
    assert label_distribution_stats([1, 1, 1], 2)[1] == pytest.approx(math.log(2), abs=1e-15)
    assert label_distribution_stats([2, 2], 4)[1] == pytest.approx(math.log(4), abs=1e-15)
    with pytest.raises(ValueError):
        label_distribution_stats([4], 4)
    assert kl_to_uniform([0, 0, 0]) == 0.0


def test_roc_points_and_csv(tmp_path):
    gen, imp = [0.9, 0.4], [0.5, 0.1]
    pts = roc_points(gen, imp)
    assert pts[0, 1] == 1.0 and pts[0, 2] == 1.0
    assert pts[-1, 1] == 0.0 and pts[-1, 2] == 0.0
    assert (np.diff(pts[:, 1]) <= 0).all() and (np.diff(pts[:, 2]) <= 0).all()
    write_roc_csv(tmp_path / "roc.csv", gen, imp)
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,far,tar" and len(lines) == len(pts) + 1


def test_eval_report_json_round_trip():
    rep = EvalReport({1e-4: 0.5, 1e-2: 0.75}, 0.9, 0.95, [3, 1], 0.13)
    d = json.loads(rep.to_json())
    assert set(d) == {"tar_at_far", "rank1", "pair_accuracy", "label_histogram", "kl_to_uniform"}
    assert EvalReport.from_dict(d) == rep


def test_group_distance_exactly_zero_for_identical_rows(rng):
    v = rng.standard_normal((50, 16)) * 1e3
    d = group_distance_matrix(v, v)
    assert (np.diag(d) == 0.0).all()
    sim = make_similarity(True, SimilarityConfig(beta=0.5))
    emb = Embeddings(rng.standard_normal((50, 4)), v)
    np.testing.assert_array_equal(np.diag(sim(emb, emb)), np.diag(make_similarity(False)(emb, emb)))


def test_group_distance_blocks_agree(rng):
    a, b = rng.standard_normal((37, 5)), rng.standard_normal((11, 5))
    np.testing.assert_array_equal(group_distance_matrix(a, b, block_elems=7), group_distance_matrix(a, b))
    expected = [[group_distance(x, y) for y in b] for x in a]
    np.testing.assert_allclose(group_distance_matrix(a, b), expected, atol=1e-14)


def test_similarity_defaults():
    cfg = SimilarityConfig()
    assert cfg.beta == 0.1 and cfg.gamma == 1.0 / 3.0 and cfg.distance_metric == "euclidean"
