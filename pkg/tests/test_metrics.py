import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from attentive_saliency import metrics as M
from oracles import (auc_judd_fraction, auc_pairwise, auc_threshold_fraction, cc_loop,
                     emd_enumerate, emd_linprog, kl_loop, nss_loop)

seeds = st.integers(0, 2 ** 31 - 1)


def random_pair(rng, h=8, w=8):
    pred = rng.random((h, w))
    gt = rng.random((h, w)) ** 3
    fix = rng.random((h, w)) < 0.2
    fix.flat[rng.integers(h * w)] = True
    return pred, gt, fix


# -- NSS / CC / KL ----------------------------------------------------------------

def test_nss_examples():
    assert M.nss([[1, 1], [1, 3]], [[0, 0], [0, 1]]) == pytest.approx(math.sqrt(3), abs=1e-12)
    with pytest.raises(M.DegenerateInputError, match="no fixations"):
        M.nss([[1, 2], [3, 4]], np.zeros((2, 2)))
    with pytest.raises(M.DegenerateInputError):
        M.nss(np.ones((3, 3)), np.eye(3))
    z = M.standardize(np.random.default_rng(0).random((4, 5)))
    fix = np.zeros((4, 5))
    fix[1, 2] = fix[3, 0] = 1
    assert M.nss(z, fix) == pytest.approx((z[1, 2] + z[3, 0]) / 2, abs=1e-14)


def test_cc_examples():
    g = np.random.default_rng(1).random((5, 4))
    assert M.cc(3.0 * g + 7.0, g) == pytest.approx(1.0, abs=1e-12)
    assert M.cc(-g, g) == pytest.approx(-1.0, abs=1e-12)
    assert M.cc([[1, 0], [0, 0]], [[0, 1], [0, 0]]) == pytest.approx(-1 / 3, abs=1e-12)
    with pytest.raises(M.DegenerateInputError):
        M.cc(np.ones((2, 2)), g[:2, :2])


def test_kl_examples():
    p = np.random.default_rng(2).random((6, 6))
    assert abs(M.kl_div(p, p)) <= 1e-5
    assert M.kl_div([[0.5, 0.5]], [[1.0, 0.0]]) == pytest.approx(math.log(2), abs=1e-5)
    assert M.kl_div([[0.0, 1.0]], [[1.0, 0.0]]) == pytest.approx(math.log(1e7), abs=1e-3)
    # unnormalized operands give the same value as their normalized versions
    assert M.kl_div(5 * p, p) == pytest.approx(M.kl_div(p, p), abs=1e-15)


def test_direct_summation_oracles():
    rng = np.random.default_rng(3)
    for _ in range(100):
        pred, gt, fix = random_pair(rng)
        assert abs(M.nss(pred, fix) - nss_loop(pred, fix)) < 1e-10
        assert abs(M.cc(pred, gt) - cc_loop(pred, gt)) < 1e-10
        assert abs(M.kl_div(pred, gt) - kl_loop(pred, gt)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(seeds, st.floats(0.01, 100), st.floats(-100, 100))
def test_affine_invariance(seed, a, b):
    pred, gt, fix = random_pair(np.random.default_rng(seed), 6, 7)
    assert M.nss(a * pred + b, fix) == pytest.approx(M.nss(pred, fix), abs=1e-10)
    assert M.cc(a * pred + b, gt) == pytest.approx(M.cc(pred, gt), abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_cc_symmetric_and_bounded(seed):
    pred, gt, _ = random_pair(np.random.default_rng(seed), 5, 9)
    assert M.cc(pred, gt) == M.cc(gt, pred)
    assert -1.0 <= M.cc(pred, gt) <= 1.0


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(1, 10), st.integers(1, 10))
def test_kl_bounds_small_grids(seed, h, w):
    rng = np.random.default_rng(seed)
    p, q = rng.random((h, w)) ** 4, rng.random((h, w)) ** 4
    assume(p.sum() > 0 and q.sum() > 0)
    assert M.kl_div(p, q) >= -1e-5
    assert M.kl_div(q, q) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 64), st.integers(1, 64))
def test_kl_epsilon_slack_any_size(seed, h, w):
    # the epsilon slack grows with the cell count: KL >= -log(1 + N eps)
    rng = np.random.default_rng(seed)
    p, q = rng.random((h, w)), rng.random((h, w))
    assert M.kl_div(p, q) >= -math.log1p(h * w * M.KL_EPS) - 1e-15
    assert M.kl_div(q, q) <= 1e-5


def test_combined_loss():
    rng = np.random.default_rng(4)
    pred, gt, fix = random_pair(rng)
    n, c, k = M.nss(pred, fix), M.cc(pred, gt), M.kl_div(pred, gt)
    assert M.combined_loss(pred, gt, fix) == pytest.approx(-n - 2 * c + 10 * k, abs=1e-12)
    assert M.combined_loss(pred, gt, fix, M.LossWeights(0, 0, 1)) == k
    assert M.combined_loss(pred, gt, fix, M.LossWeights(0, 0, 0)) == 0.0
    assert -1 * 2 + -2 * 0.8 + 10 * 0.5 == pytest.approx(1.4)
    # zero-weighted terms are not evaluated, so degenerate inputs for them are fine
    assert M.combined_loss(pred, gt, np.zeros_like(fix), M.LossWeights(0, -2, 10)) == pytest.approx(
        -2 * c + 10 * k)


# -- AUC family ------------------------------------------------------------------------

def test_auc_judd_examples():
    pred = np.arange(16.0).reshape(4, 4)
    fix = pred >= 12
    assert M.auc_judd(pred, fix) == 1.0
    assert M.auc_judd(np.ones((4, 4)), fix) == 0.5
    with pytest.raises(M.DegenerateInputError):
        M.auc_judd(pred, np.ones((4, 4)))
    with pytest.raises(M.DegenerateInputError):
        M.auc_judd(pred, np.zeros((4, 4)))


def test_auc_judd_exact_enumeration():
    rng = np.random.default_rng(5)
    for trial in range(20):
        h, w = rng.integers(2, 17, 2)
        # coarse values force plenty of ties
        pred = rng.integers(0, 6, (h, w)) / 5.0 if trial % 2 else rng.random((h, w))
        fix = rng.random((h, w)) < 0.3
        fix.flat[0], fix.flat[-1] = True, False
        assert M.auc_judd(pred, fix) == float(auc_judd_fraction(pred, fix))


@settings(max_examples=60, deadline=None)
@given(seeds)
def test_auc_equals_mann_whitney(seed):
    # when no negative falls strictly between two positive scores, every ROC
    # segment is a pure tie block and the area is the pairwise win rate
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, 5, rng.integers(1, 12))
    below = np.arange(-3, pos.min())
    neg = rng.choice(np.concatenate([pos, below]), rng.integers(1, 12))
    assert M.auc_from_scores(pos, neg) == pytest.approx(auc_pairwise(pos, neg), abs=1e-15)


def test_sauc_examples():
    rng = np.random.default_rng(6)
    pos = rng.random(9)
    assert M.auc_from_scores(pos, pos) == 0.5
    fix = np.zeros((6, 6), bool)
    fix[2:4, 2:4] = True
    other = np.zeros((6, 6), bool)
    other[0, :] = other[5, :] = True
    assert M.sauc(np.ones((6, 6)), fix, [other], seed=1) == 0.5
    pred = np.where(fix, 2.0, 1.0)
    assert M.sauc(pred, fix, [other], seed=1) == 1.0
    with pytest.raises(M.DegenerateInputError):
        M.sauc(pred, fix, [fix], seed=0)


def test_sauc_seeded_oracle():
    rng = np.random.default_rng(7)
    fixes = [rng.random((8, 10)) < 0.15 for _ in range(3)]
    pred = rng.random((8, 10))
    own = fixes[0]
    pool = [(i, j) for i in range(8) for j in range(10) if (fixes[1][i, j] or fixes[2][i, j]) and not own[i, j]]
    flat = sorted(i * 10 + j for i, j in pool)
    picks = np.random.default_rng(42).choice(np.array(flat), size=int(own.sum()), replace=True)
    want = auc_threshold_fraction(pred[own], [pred.flat[k] for k in picks])
    assert M.sauc(pred, own, fixes[1:], seed=42) == float(want)
    assert M.sauc(pred, own, fixes[1:], seed=42) == M.sauc(pred, own, fixes[1:], seed=42)


# -- SIM ----------------------------------------------------------------------------

def test_sim():
    p = np.random.default_rng(8).random((4, 4))
    assert M.sim(p, 3 * p) == pytest.approx(1.0, abs=1e-12)
    assert M.sim([[1, 0]], [[0, 1]]) == 0.0
    assert M.sim([[0.5, 0.5]], [[1.0, 0.0]]) == 0.5
    with pytest.raises(M.DegenerateInputError):
        M.sim(np.zeros((2, 2)), p[:2, :2])


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.05, 1.0))
def test_sim_bounds_and_disjoint_perturbation(seed, t):
    rng = np.random.default_rng(seed)
    p = rng.random((5, 5)) * (rng.random((5, 5)) < 0.5)
    assume(p.sum() > 0 and (p == 0).any())
    assert 0.0 <= M.sim(p, rng.random((5, 5))) <= 1.0 + 1e-12
    # moving mass to cells where p is empty lowers the overlap
    bump = (p == 0).astype(float)
    assert M.sim(p + t * bump * p.sum(), p) < 1.0


# -- EMD ---------------------------------------------------------------------------------

def test_emd_examples():
    p = np.random.default_rng(9).random((5, 6))
    assert M.emd(p, p) == 0.0
    assert M.emd([[1, 0, 0, 0]], [[0, 0, 0, 1]]) == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(M.DegenerateInputError):
        M.emd(np.zeros((2, 2)), p[:2, :2])


def test_emd_vs_linear_program():
    rng = np.random.default_rng(10)
    for _ in range(10):
        p, q = rng.random((4, 4)), rng.random((4, 4))
        assert abs(M.emd(p, q) - emd_linprog(p, q)) < 1e-6


def test_emd_vs_vertex_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(10):
        p, q = np.zeros(16), np.zeros(16)
        cells = rng.permutation(16)
        p[cells[:4]] = rng.random(4)
        q[cells[4:8]] = rng.random(4)
        assert abs(M.emd(p.reshape(4, 4), q.reshape(4, 4)) - emd_enumerate(p.reshape(4, 4), q.reshape(4, 4))) < 1e-6


def test_emd_one_dimensional_cdf():
    # on a line the optimal cost is the L1 distance between the CDFs
    rng = np.random.default_rng(12)
    for n in (2, 5, 13):
        p, q = rng.random(n), rng.random(n)
        want = np.abs(np.cumsum(p / p.sum() - q / q.sum())).sum()
        assert M.emd(p[None], q[None]) == pytest.approx(want, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_emd_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.random((4, 5)) ** 2 for _ in range(3))
    assert M.emd(a, c) <= M.emd(a, b) + M.emd(b, c) + 1e-6
    assert M.emd(a, b) == pytest.approx(M.emd(b, a), abs=1e-9)


def test_emd_downsampling():
    rng = np.random.default_rng(13)
    p, q = rng.random((6, 8)), rng.random((6, 8))
    value, f = M.emd_with_info(p, q, max_cells=12)
    assert f == 2
    assert value == pytest.approx(2 * M.emd(M.block_sum(p, 2), M.block_sum(q, 2)), abs=1e-12)
    assert M.emd_with_info(p, q)[1] == 1
    np.testing.assert_array_equal(M.block_sum(np.ones((3, 3)), 2), [[4, 2], [2, 1]])


# -- reports ----------------------------------------------------------------------------

def test_evaluate_report():
    rng = np.random.default_rng(14)
    items = []
    for k in range(3):
        pred, gt, fix = random_pair(rng, 6, 6)
        items.append((f"im{k}", pred, gt, fix))
    rep = M.evaluate(items, seed=3, workers=3)
    assert rep.image_ids == ["im0", "im1", "im2"]
    assert rep.rows[1]["nss"] == M.nss(items[1][1], items[1][3])
    assert rep.rows[2]["sauc"] == M.sauc(items[2][1], items[2][3], [items[0][3], items[1][3]], 3 + 2)
    assert rep.mean()["cc"] == pytest.approx(np.mean([r["cc"] for r in rep.rows]), abs=1e-15)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "image_id," + ",".join(M.METRIC_NAMES)
    assert lines[-1].startswith("MEAN,") and len(lines) == 5
    doc = json.loads(rep.to_json())
    assert doc["meta"]["kl"].startswith("both maps normalized")
    assert rep.to_csv() == M.evaluate(items, seed=3, workers=1).to_csv()
    with pytest.raises(ValueError):
        M.evaluate(items, metrics=["auc_borji"])
