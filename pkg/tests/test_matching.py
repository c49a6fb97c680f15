"""Hungarian assignment against brute force, loss closed forms, matching
cost against a naive per-pixel oracle, total-loss properties."""

import numpy as np
import pytest

import tubeseg.autodiff as ad
from _oracles import assignment_total, brute_force_assignment_min
from tubeseg.autodiff import Tensor
from tubeseg.matching import (Assignment, LossWeights, classification_loss,
                              downsample_mask_majority, hungarian,
                              matching_cost, total_loss, tube_bce_loss,
                              tube_dice_loss)
from tubeseg.types import TubeAnnotation, TubeMask


class TestHungarian:
    def test_two_by_two_example(self):
        a = hungarian(np.array([[1.0, 2.0], [3.0, 0.0]]))
        assert tuple(a.pairs) == ((0, 0), (1, 1))

    def test_diagonal_preference(self):
        cost = np.full((3, 3), 5.0) - 4.0 * np.eye(3)
        a = hungarian(cost)
        assert tuple(a.pairs) == ((0, 0), (1, 1), (2, 2))

    def test_every_gt_matched_when_queries_outnumber_gts(self, rng):
        for _ in range(20):
            cost = rng.normal(size=(6, 3))
            a = hungarian(cost)
            assert sorted(g for _, g in a.pairs) == [0, 1, 2]
            assert len({q for q, _ in a.pairs}) == 3

    def test_matches_brute_force_on_random_rectangular(self, rng):
        for _ in range(100):
            N = int(rng.integers(1, 8))
            G = int(rng.integers(1, 8))
            cost = rng.normal(size=(N, G)) * 10
            a = hungarian(cost)
            assert assignment_total(cost, a.pairs) == brute_force_assignment_min(cost)

    def test_deterministic(self, rng):
        cost = rng.normal(size=(5, 5))
        assert hungarian(cost).pairs == hungarian(cost.copy()).pairs

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[np.nan, 1.0], [1.0, 2.0]]))

    def test_empty_gt(self):
        a = hungarian(np.zeros((3, 0)))
        assert a.pairs == ()
        assert a.unmatched_queries() == [0, 1, 2]


class TestMajorityPooling:
    def test_full_patch_sets_cell(self):
        m = np.zeros((1, 8, 8)); m[0, :4, :4] = 1
        p = downsample_mask_majority(m, 4)
        assert p[0, 0, 0] and p.sum() == 1

    def test_exact_half_is_not_majority(self):
        m = np.zeros((1, 4, 4)); m[0, :2, :] = 1  # 8 of 16
        assert downsample_mask_majority(m, 4).sum() == 0

    def test_pooled_tubes_of_disjoint_tubes_stay_disjoint(self, rng):
        for _ in range(20):
            owner = rng.integers(0, 3, size=(2, 8, 8))
            pooled = [downsample_mask_majority(owner == k, 4) for k in (1, 2)]
            assert not np.logical_and(pooled[0], pooled[1]).any()

    def test_indivisible_raises(self):
        with pytest.raises(ValueError):
            downsample_mask_majority(np.zeros((1, 6, 6)), 4)


class TestDiceLoss:
    def test_exact_binary_match_is_zero(self):
        gt = np.zeros((1, 2, 2)); gt[0, 0, 0] = 1
        assert tube_dice_loss(Tensor(gt), gt).item() == pytest.approx(0.0, abs=1e-12)

    def test_empty_prediction_on_three_pixels(self):
        gt = np.zeros((1, 2, 2)); gt[0, 0, 0] = gt[0, 0, 1] = gt[0, 1, 0] = 1
        loss = tube_dice_loss(Tensor(np.zeros((1, 2, 2))), gt)
        assert loss.item() == pytest.approx(0.75, abs=1e-12)

    def test_empty_vs_empty_saturates_to_zero(self):
        z = np.zeros((1, 2, 2))
        assert tube_dice_loss(Tensor(z), z).item() == pytest.approx(0.0, abs=1e-12)


class TestBceAndClassification:
    def test_saturated_logits_vanish(self):
        gt = np.zeros((1, 2, 2)); gt[0, 0, 0] = 1
        logits = np.where(gt > 0, 30.0, -30.0)
        assert tube_bce_loss(Tensor(logits), gt).item() < 1e-12

    def test_uniform_logits_give_log_k_plus_one(self):
        K = 3
        logits = Tensor(np.zeros((4, K + 1)))
        a = Assignment(pairs=((0, 0), (1, 1)), num_queries=4)
        loss = classification_loss(logits, a, np.array([0, 1]), K)
        assert loss.item() == pytest.approx(np.log(K + 1), abs=1e-12)

    def test_matches_naive_loop_oracle(self, rng):
        N, K = 4, 3
        logits = rng.normal(size=(N, K + 1))
        a = Assignment(pairs=((1, 0), (3, 1)), num_queries=N)
        gt_classes = np.array([2, 0])
        loss = classification_loss(Tensor(logits), a, gt_classes, K).item()
        targets = {1: 2, 3: 0}
        num = den = 0.0
        for q in range(N):
            e = np.exp(logits[q] - logits[q].max())
            p = e / e.sum()
            if q in targets:
                num += -np.log(p[targets[q]])
                den += 1.0
            else:
                num += -0.1 * np.log(p[K])
                den += 0.1
        assert loss == pytest.approx(num / den, abs=1e-12)


class TestMatchingCost:
    def test_saturated_perfect_prediction(self):
        w = LossWeights(lambda_cls=2.0, lambda_ce=5.0, lambda_dice=5.0)
        gt = np.zeros((1, 8)); gt[0, :4] = 1
        mask_logits = np.where(gt > 0, 20.0, -20.0)
        class_logits = np.array([[30.0, 0.0, 0.0]])  # prob ~1 on class 0
        cost = matching_cost(class_logits, mask_logits, gt, np.array([0]), w)
        assert cost[0, 0] == pytest.approx(-w.lambda_cls, abs=1e-3)

    def test_uniform_class_distribution(self):
        w = LossWeights(lambda_cls=2.0, lambda_ce=0.0, lambda_dice=0.0)
        cost = matching_cost(np.zeros((1, 3)), np.zeros((1, 4)),
                             np.zeros((1, 4)), np.array([0]), w)
        assert cost[0, 0] == pytest.approx(-w.lambda_cls / 3, abs=1e-12)

    def test_matches_naive_loop_oracle(self, rng):
        N, G, S = 3, 2, 12
        w = LossWeights()
        class_logits = rng.normal(size=(N, 3))
        mask_logits = rng.normal(size=(N, S))
        gt_masks = (rng.random((G, S)) < 0.5).astype(float)
        gt_classes = rng.integers(0, 2, size=G)
        cost = matching_cost(class_logits, mask_logits, gt_masks, gt_classes, w)

        def sig(z):
            return 1 / (1 + np.exp(-z))

        for q in range(N):
            e = np.exp(class_logits[q] - class_logits[q].max())
            p = e / e.sum()
            for g in range(G):
                bce = np.mean([-(m * np.log(sig(z)) + (1 - m) * np.log(1 - sig(z)))
                               for z, m in zip(mask_logits[q], gt_masks[g])])
                inter = (sig(mask_logits[q]) * gt_masks[g]).sum()
                dice = 1 - (2 * inter + 1) / (sig(mask_logits[q]).sum() + gt_masks[g].sum() + 1)
                expected = -w.lambda_cls * p[gt_classes[g]] + w.lambda_ce * bce + w.lambda_dice * dice
                assert cost[q, g] == pytest.approx(expected, abs=1e-9)


def _random_stage_preds(rng, N, K, n, hp, wp, stages=2):
    from tubeseg.decoder import StagePrediction
    preds = []
    for _ in range(stages):
        preds.append(StagePrediction(
            class_logits=Tensor(rng.normal(size=(N, K + 1)), requires_grad=True),
            mask_logits=Tensor(rng.normal(size=(N, n, hp, wp)), requires_grad=True),
            queries=Tensor(rng.normal(size=(N, 8)))))
    return preds


def _random_gts(rng, n, hp, wp, window=(0, 2)):
    tubes = []
    for g, (cls, track) in enumerate(((1, 1), (0, 0))):
        bits = rng.random((n, hp, wp)) < 0.4
        tubes.append(TubeAnnotation(mask=TubeMask(bits=bits, window=window),
                                    class_id=cls, track_id=track))
    return tubes


class TestTotalLoss:
    def test_vss_drops_tracking_terms(self, rng):
        preds = _random_stage_preds(rng, 4, 2, 2, 3, 3)
        gts = _random_gts(rng, 2, 3, 3)
        w = LossWeights()
        track, aux = Tensor(0.7), Tensor(0.3)
        full = total_loss([preds], [gts], 2, w, mode="VPS",
                          track_loss=track, aux_loss=aux).item()
        vss = total_loss([preds], [gts], 2, w, mode="VSS",
                         track_loss=track, aux_loss=aux).item()
        expected = full - w.lambda_track * 0.7 - w.lambda_aux * 0.3
        assert vss == pytest.approx(expected, abs=1e-12)

    def test_gt_permutation_invariance(self, rng):
        preds = _random_stage_preds(rng, 5, 2, 2, 3, 3)
        gts = _random_gts(rng, 2, 3, 3)
        w = LossWeights()
        a = total_loss([preds], [gts], 2, w).item()
        b = total_loss([preds], [list(reversed(gts))], 2, w).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_non_negative_for_non_negative_weights(self, rng):
        for _ in range(10):
            preds = _random_stage_preds(rng, 4, 2, 2, 3, 3)
            gts = _random_gts(rng, 2, 3, 3)
            loss = total_loss([preds], [gts], 2, LossWeights()).item()
            assert loss >= 0.0

    def test_unknown_mode_rejected(self, rng):
        preds = _random_stage_preds(rng, 4, 2, 2, 3, 3)
        with pytest.raises(ValueError):
            total_loss([preds], [_random_gts(rng, 2, 3, 3)], 2, LossWeights(), mode="XXX")

    def test_no_gts_still_defined(self, rng):
        preds = _random_stage_preds(rng, 4, 2, 2, 3, 3)
        loss = total_loss([preds], [[]], 2, LossWeights())
        assert np.isfinite(loss.item())
