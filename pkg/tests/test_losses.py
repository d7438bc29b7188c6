import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpituning.autodiff import Tensor
from mpituning.detector import DetectorOutput
from mpituning.errors import ContractError, NumericalError
from mpituning.gradcheck import check_loss
from mpituning.losses import (Box, LossWeights, Target, brute_force_assignment, classification_loss,
                              cxcywh_to_xyxy, giou, giou_loss, hungarian, pairwise_giou,
                              sigmoid_focal_loss, total_loss, xyxy_to_cxcywh)


# -- boxes ------------------------------------------------------------------

def test_box_conversion_round_trip(rng):
    b = np.concatenate([rng.uniform(0.2, 0.8, (5, 2)), rng.uniform(0.05, 0.3, (5, 2))], 1)
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b, atol=1e-15)


def test_box_rejects_negative_extent():
    with pytest.raises(ContractError):
        Box((1.0, 0.0, 0.0, 1.0))
    assert Box((0.5, 0.5, 0.2, 0.4), "cxcywh").area == pytest.approx(0.08)


def test_giou_examples():
    assert giou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert giou([0, 0, 1, 1], [2, 0, 3, 1]) == pytest.approx(-1 / 3)
    assert giou([0, 0, 1, 1], [1, 0, 2, 1]) == 0.0
    assert giou_loss([0, 0, 1, 1], [2, 0, 3, 1]) == pytest.approx(4 / 3)


def test_giou_degenerate_pair_is_zero():
    assert giou([1, 1, 1, 1], [1, 1, 1, 1]) == 0.0


boxes = st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 5), st.floats(0.01, 5)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_giou_range_and_symmetry(a, b):
    g = giou(a, b)
    assert -1.0 < g <= 1.0 + 1e-12
    assert g == pytest.approx(giou(b, a), abs=1e-12)
    np.testing.assert_allclose(pairwise_giou(np.array([a]), np.array([b]))[0, 0], g, atol=1e-12)


def test_giou_equals_iou_when_hull_is_union():
    # nested boxes: hull equals the outer box, which is the union
    assert giou([0, 0, 4, 4], [1, 1, 2, 2]) == pytest.approx(1 / 16)


# -- Hungarian --------------------------------------------------------------

def test_hungarian_two_by_two():
    pairs, cost = hungarian([[1, 2], [3, 0]])
    assert pairs == [(0, 0), (1, 1)] and cost == 1.0


def test_hungarian_zero_matrix_is_identity():
    assert hungarian(np.zeros((4, 4)))[0] == [(i, i) for i in range(4)]


def test_hungarian_tie_break_is_deterministic(rng):
    c = rng.integers(0, 3, (6, 6)).astype(float)
    assert hungarian(c) == hungarian(c.copy())


def test_hungarian_preconditions():
    with pytest.raises(ContractError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(NumericalError):
        hungarian([[0.0, math.inf], [1.0, 1.0]])
    assert hungarian(np.zeros((3, 0))) == ([], 0.0)


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(200):
        K = int(rng.integers(1, 7))
        G = int(rng.integers(1, K + 1))
        c = rng.uniform(-5, 5, (K, G))
        pairs, cost = hungarian(c)
        assert sorted(g for _, g in pairs) == list(range(G))
        assert len({p for p, _ in pairs}) == G
        assert cost == pytest.approx(brute_force_assignment(c), abs=1e-12)
        assert cost == pytest.approx(sum(c[p, g] for p, g in pairs), abs=1e-12)


def test_hungarian_beats_random_permutations():
    rng = np.random.default_rng(8)
    c = rng.uniform(0, 1, (10, 10))
    _, cost = hungarian(c)
    for _ in range(1000):
        perm = rng.permutation(10)
        assert cost <= c[perm, np.arange(10)].sum() + 1e-12


def test_brute_force_oracle_is_exhaustive():
    c = np.array([[4.0, 1, 3], [2, 0, 5], [3, 2, 2]])
    best = min(sum(c[p[g], g] for g in range(3)) for p in itertools.permutations(range(3)))
    assert brute_force_assignment(c) == best == 5.0


# -- classification ---------------------------------------------------------

def test_focal_scalar_oracle():
    alpha, p = 0.25, 0.5
    expected = alpha * (1 - p) ** 2 * math.log(2) + (1 - alpha) * p ** 2 * math.log(2)
    out = classification_loss(Tensor(np.zeros((1, 2))), [(0, 0)], [0])
    assert out.item() == pytest.approx(expected, abs=1e-15)


def test_focal_saturated_logits_vanish():
    logits = np.full((3, 4), -50.0)
    logits[0, 2] = logits[1, 0] = 50.0
    assert classification_loss(Tensor(logits), [(0, 0), (1, 1)], [2, 0]).item() < 1e-12


def test_focal_extra_negatives_are_additive(rng):
    logits = rng.normal(size=(3, 4))
    extra = rng.normal(size=(3, 4))
    base = classification_loss(Tensor(logits), [(1, 0)], [2]).item()
    both = classification_loss(Tensor(np.vstack([logits, extra])), [(1, 0)], [2]).item()
    negatives = sigmoid_focal_loss(Tensor(extra), np.zeros((3, 4))).item()
    assert both == pytest.approx(base + negatives, abs=1e-12)


def test_focal_shape_mismatch():
    with pytest.raises(ContractError):
        sigmoid_focal_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


# -- total loss -------------------------------------------------------------

def output(boxes, logits, aux=()):
    return DetectorOutput(boxes=Tensor(np.asarray(boxes, float), requires_grad=True),
                          logits=Tensor(np.asarray(logits, float), requires_grad=True),
                          aux=list(aux))


def test_perfect_fit_has_zero_loss():
    tgt = Target(np.array([[0.3, 0.4, 0.2, 0.1], [0.7, 0.6, 0.1, 0.3]]), np.array([2, 0]))
    boxes = np.array([[[0.5, 0.5, 0.1, 0.1], [0.7, 0.6, 0.1, 0.3], [0.3, 0.4, 0.2, 0.1]]])
    logits = np.full((1, 3, 3), -60.0)
    logits[0, 1, 0] = logits[0, 2, 2] = 60.0
    loss, info = total_loss(output(boxes, logits), [tgt])
    assert 0.0 <= loss.item() < 1e-6
    assert info["matches"][0] == [[(1, 1), (2, 0)]]


def test_empty_targets_give_negatives_only(rng):
    out = output(rng.uniform(0.2, 0.8, (1, 4, 4)), rng.normal(size=(1, 4, 3)))
    loss, info = total_loss(out, [Target.empty()])
    assert info["main"]["l1"] == info["main"]["giou"] == 0.0
    expected = sigmoid_focal_loss(Tensor(out.logits.data), np.zeros((1, 4, 3))).item()
    assert loss.item() == pytest.approx(expected)


def random_case(rng, B=2, K=6, T=4):
    c = rng.uniform(0.2, 0.8, (B, K, 2))
    boxes = np.concatenate([c, rng.uniform(0.05, 0.3, (B, K, 2))], -1)
    logits = rng.normal(size=(B, K, T))
    targets = []
    for _ in range(B):
        g = int(rng.integers(0, 4))
        tb = np.concatenate([rng.uniform(0.2, 0.8, (g, 2)), rng.uniform(0.05, 0.3, (g, 2))], 1)
        targets.append(Target(tb, rng.integers(0, T, g)))
    return boxes, logits, targets


def test_loss_is_non_negative(rng):
    for _ in range(20):
        boxes, logits, targets = random_case(rng)
        assert total_loss(output(boxes, logits), targets)[0].item() >= 0.0


def test_target_order_does_not_matter(rng):
    boxes, logits, targets = random_case(rng)
    flipped = [Target(t.boxes[::-1].copy(), t.labels[::-1].copy()) for t in targets]
    a = total_loss(output(boxes, logits), targets)[0].item()
    b = total_loss(output(boxes, logits), flipped)[0].item()
    assert a == pytest.approx(b, abs=1e-12)


def test_prediction_permutation_does_not_matter(rng):
    boxes, logits, targets = random_case(rng)
    perm = rng.permutation(boxes.shape[1])
    a = total_loss(output(boxes, logits), targets)[0].item()
    b = total_loss(output(boxes[:, perm], logits[:, perm]), targets)[0].item()
    assert a == pytest.approx(b, abs=1e-12)


def test_aux_terms_add_up(rng):
    boxes, logits, targets = random_case(rng)
    main = total_loss(output(boxes, logits), targets)[0].item()
    aux = output(boxes, logits, aux=[(Tensor(boxes), Tensor(logits))])
    assert total_loss(aux, targets)[0].item() == pytest.approx(2 * main, abs=1e-12)
    off = total_loss(aux, targets, LossWeights(aux=False))[0].item()
    assert off == pytest.approx(main, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_total_loss_gradient_with_frozen_matching(seed):
    assert max(check_loss(seed).values()) < 1e-4


def test_negative_weights_rejected():
    with pytest.raises(ContractError):
        LossWeights(l1=-1.0)


def test_loss_backward_reaches_boxes(rng):
    boxes, logits, targets = random_case(rng)
    out = output(boxes, logits)
    loss, _ = total_loss(out, targets)
    loss.backward()
    assert out.boxes.grad is not None and np.isfinite(out.boxes.grad).all()


def _lexicographic_oracle(cost):
    K, G = cost.shape
    best = min(sum(cost[p[g], g] for g in range(G)) for p in itertools.permutations(range(K), G))
    return min(p for p in itertools.permutations(range(K), G)
               if math.isclose(sum(cost[p[g], g] for g in range(G)), best, abs_tol=1e-12))


def test_hungarian_lexicographic_tie_break():
    rng = np.random.default_rng(11)
    for _ in range(150):
        K = int(rng.integers(1, 6))
        G = int(rng.integers(1, K + 1))
        cost = rng.integers(0, 3, (K, G)).astype(float)
        pairs, _ = hungarian(cost)
        got = tuple(q for q, _ in sorted(pairs, key=lambda t: t[1]))
        assert got == _lexicographic_oracle(cost)
