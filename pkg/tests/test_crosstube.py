"""Cross-tube machinery: pair sampling, linking attention symmetries,
IoU-based target assignment, contrastive and auxiliary loss behavior."""

import numpy as np
import pytest

import tubeseg.autodiff as ad
from tubeseg.autodiff import Tensor, finite_difference_check
from tubeseg.crosstube import (IGNORE, NEGATIVE, AssignConfig, ContrastiveBatch,
                               CrossTubeLinker, EmbeddingHead,
                               assign_contrastive_targets, aux_cosine_loss,
                               mean_contrastive_loss, pair_track_losses,
                               sample_subclip_pair, temporal_contrastive_loss)
from tubeseg.types import TubeAnnotation, TubeMask


class TestSampler:
    def test_two_subclips_always_adjacent(self, rng):
        for _ in range(30):
            assert sample_subclip_pair(2, rng) in ((0, 1), (1, 0))

    def test_radius_one_only_adjacent(self, rng):
        for _ in range(200):
            i, j = sample_subclip_pair(5, rng, radius=1)
            assert i != j and abs(i - j) == 1

    def test_seeded_sequence_reproducible(self):
        a = [sample_subclip_pair(6, np.random.default_rng(9)) for _ in range(1)]
        r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
        s1 = [sample_subclip_pair(6, r1) for _ in range(100)]
        s2 = [sample_subclip_pair(6, r2) for _ in range(100)]
        assert s1 == s2

    def test_single_subclip_raises(self, rng):
        with pytest.raises(ValueError):
            sample_subclip_pair(1, rng)

    def test_uniform_over_valid_pairs(self):
        rng = np.random.default_rng(0)
        counts = {}
        for _ in range(4000):
            p = sample_subclip_pair(3, rng)
            counts[p] = counts.get(p, 0) + 1
        assert set(counts) == {(0, 1), (1, 0), (1, 2), (2, 1)}
        for v in counts.values():
            assert 800 < v < 1200


class TestCrossTubeLinker:
    @pytest.fixture
    def linker(self, rng):
        return CrossTubeLinker(8, num_heads=2, rng=rng)

    def test_invariant_to_earlier_row_order(self, linker, rng):
        q_later = rng.normal(size=(4, 8))
        q_earlier = rng.normal(size=(4, 8))
        perm = np.array([3, 1, 0, 2])
        a = linker.link(Tensor(q_later), Tensor(q_earlier)).data
        b = linker.link(Tensor(q_later), Tensor(q_earlier[perm])).data
        assert np.allclose(a, b, atol=1e-12)

    def test_equivariant_to_later_row_order(self, linker, rng):
        q_later = rng.normal(size=(4, 8))
        q_earlier = rng.normal(size=(4, 8))
        perm = np.array([2, 3, 1, 0])
        a = linker.link(Tensor(q_later), Tensor(q_earlier)).data
        b = linker.link(Tensor(q_later[perm]), Tensor(q_earlier)).data
        assert np.allclose(b, a[perm], atol=1e-12)

    def test_identical_keys_remove_cross_row_interaction(self, linker, rng):
        # all earlier-tube rows equal = a single effective key: attention
        # output per row is constant, so changing one later row leaves the
        # other rows' outputs untouched
        row = rng.normal(size=8)
        q_earlier = np.tile(row, (3, 1))
        q_a = rng.normal(size=(3, 8))
        q_b = q_a.copy()
        q_b[1, 0] += 4.0  # non-uniform bump; a constant shift would vanish in layernorm
        out_a = linker.link(Tensor(q_a), Tensor(q_earlier)).data
        out_b = linker.link(Tensor(q_b), Tensor(q_earlier)).data
        assert np.allclose(out_a[0], out_b[0], atol=1e-12)
        assert np.allclose(out_a[2], out_b[2], atol=1e-12)
        assert not np.allclose(out_a[1], out_b[1], atol=1e-6)

    def test_attention_matches_brute_force_mhsa_oracle(self, linker, rng):
        q_later = rng.normal(size=(4, 8))
        q_earlier = rng.normal(size=(4, 8))
        out = linker.attention(Tensor(q_later), Tensor(q_earlier)).data
        p = {k: v.data for k, v in linker.params.items()}
        q = q_later @ p["query.weight"].T + p["query.bias"]
        k = q_earlier @ p["key.weight"].T + p["key.bias"]
        v = q_earlier @ p["value.weight"].T + p["value.bias"]
        heads = []
        dh = 4
        for h in range(2):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            attn = e / e.sum(axis=1, keepdims=True)
            heads.append(attn @ v[:, sl])
        oracle = np.concatenate(heads, axis=1) @ p["out.weight"].T + p["out.bias"]
        assert np.abs(out - oracle).max() <= 1e-9

    def test_shape_mismatch_rejected(self, linker, rng):
        with pytest.raises(ValueError):
            linker.link(Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(2, 8))))


class TestAssignTargets:
    def _tube(self, bits):
        bits = np.asarray(bits, dtype=bool)
        return TubeMask(bits=bits, window=(0, bits.shape[0]))

    @pytest.fixture
    def gt(self):
        bits = np.zeros((2, 2, 2), dtype=bool)
        bits[:, 0, :] = True
        return [TubeAnnotation(mask=self._tube(bits), class_id=1, track_id=1)]

    def test_identical_tube_is_positive(self, gt):
        labels = assign_contrastive_targets([gt[0].mask], gt, AssignConfig())
        assert labels == [0]

    def test_disjoint_tube_is_negative(self, gt):
        bits = np.zeros((2, 2, 2), dtype=bool)
        bits[:, 1, :] = True
        labels = assign_contrastive_targets([self._tube(bits)], gt, AssignConfig())
        assert labels == [NEGATIVE]

    def test_half_overlap_is_ignored(self, gt):
        bits = np.zeros((2, 2, 2), dtype=bool)
        bits[0, 0, :] = True   # IoU = 2/4 = 0.5, between 0.3 and 0.7
        labels = assign_contrastive_targets([self._tube(bits)], gt, AssignConfig())
        assert labels == [IGNORE]

    def test_equal_thresholds_leave_no_ignore_band(self, rng, gt):
        cfg = AssignConfig(alpha_pos=0.5, alpha_neg=0.5)
        preds = [self._tube(rng.random((2, 2, 2)) < 0.5) for _ in range(40)]
        labels = assign_contrastive_targets(preds, gt, cfg)
        assert IGNORE not in labels

    def test_positive_tie_breaks_to_lowest_gt_index(self):
        bits = np.ones((1, 2, 2), dtype=bool)
        tube = self._tube(bits)
        gts = [TubeAnnotation(mask=tube, class_id=1, track_id=1),
               TubeAnnotation(mask=tube, class_id=1, track_id=2)]
        labels = assign_contrastive_targets([tube], gts, AssignConfig())
        assert labels == [0]

    def test_no_gts_everything_negative(self):
        labels = assign_contrastive_targets([self._tube(np.ones((1, 2, 2)))], [],
                                            AssignConfig())
        assert labels == [NEGATIVE]

    def test_threshold_order_enforced(self):
        with pytest.raises(ValueError):
            AssignConfig(alpha_pos=0.3, alpha_neg=0.7)


class TestContrastiveLoss:
    def test_single_positive_no_negatives_is_zero(self):
        batch = ContrastiveBatch(anchor=Tensor([1.0, 0.0]),
                                 positives=[Tensor([0.0, 1.0])], negatives=[])
        assert temporal_contrastive_loss(batch).item() == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_one_negative_gives_ln2(self):
        batch = ContrastiveBatch(anchor=Tensor([1.0, 0.0]),
                                 positives=[Tensor([0.0, 1.0])],
                                 negatives=[Tensor([0.0, 1.0])])
        assert temporal_contrastive_loss(batch).item() == pytest.approx(np.log(2), abs=1e-12)

    def test_ln_four_thirds_case(self):
        batch = ContrastiveBatch(anchor=Tensor([1.0, 0.0]),
                                 positives=[Tensor([np.log(3.0), 0.0])],
                                 negatives=[Tensor([0.0, 1.0])])
        assert temporal_contrastive_loss(batch).item() == pytest.approx(np.log(4 / 3), abs=1e-12)

    def test_invariant_under_negative_permutation(self, rng):
        anchor = Tensor(rng.normal(size=4))
        pos = [Tensor(rng.normal(size=4))]
        negs = [Tensor(rng.normal(size=4)) for _ in range(5)]
        a = temporal_contrastive_loss(ContrastiveBatch(anchor, pos, negs)).item()
        order = [3, 0, 4, 2, 1]
        b = temporal_contrastive_loss(ContrastiveBatch(anchor, pos,
                                                       [negs[i] for i in order])).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_loss_strictly_decreases_as_positive_dot_grows(self):
        negs = [Tensor([1.0, 0.0])]
        prev = None
        for s in np.linspace(-2, 2, 9):
            batch = ContrastiveBatch(anchor=Tensor([1.0, 0.0]),
                                     positives=[Tensor([s, 0.0])], negatives=negs)
            val = temporal_contrastive_loss(batch).item()
            if prev is not None:
                assert val < prev
            prev = val

    def test_mean_skips_anchors_without_positives(self):
        with_pos = ContrastiveBatch(Tensor([1.0, 0.0]), [Tensor([0.0, 1.0])],
                                    [Tensor([0.0, 1.0])])
        without = ContrastiveBatch(Tensor([1.0, 0.0]), [], [Tensor([1.0, 1.0])])
        val = mean_contrastive_loss([with_pos, without]).item()
        assert val == pytest.approx(np.log(2), abs=1e-12)
        assert mean_contrastive_loss([without]).item() == 0.0


class TestAuxCosine:
    def test_scaled_copy_with_match(self):
        x = Tensor([1.0, 2.0, 3.0])
        assert aux_cosine_loss(x, Tensor([2.0, 4.0, 6.0]), 1).item() <= 1e-12

    def test_orthogonal_with_match(self):
        assert aux_cosine_loss(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]), 1).item() == \
            pytest.approx(1.0, abs=1e-12)

    def test_antiparallel_without_match(self):
        assert aux_cosine_loss(Tensor([1.0, 0.0]), Tensor([-1.0, 0.0]), 0).item() == \
            pytest.approx(1.0, abs=1e-12)

    def test_zero_vector_guard(self):
        assert aux_cosine_loss(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]), 1).item() == \
            pytest.approx(1.0, abs=1e-12)

    def test_bad_indicator_rejected(self):
        with pytest.raises(ValueError):
            aux_cosine_loss(Tensor([1.0]), Tensor([1.0]), 2)


class TestEmbeddingHead:
    def test_zero_input_zero_bias_gives_zero(self, rng):
        head = EmbeddingHead(8, 4, rng=rng)
        out = head.embed(Tensor(np.zeros((3, 8))))
        assert np.array_equal(out.data, np.zeros((3, 4)))

    def test_identical_rows_map_identically(self, rng):
        head = EmbeddingHead(8, 4, rng=rng)
        row = rng.normal(size=8)
        out = head.embed(Tensor(np.stack([row, row])))
        assert np.array_equal(out.data[0], out.data[1])

    def test_gradient_through_embedding_in_contrastive_loss(self, rng):
        head = EmbeddingHead(6, 4, rng=rng)
        queries = rng.normal(size=(3, 6))
        target = rng.normal(size=4)

        def f(x):
            emb = head.embed(x)
            anchor = ad.reshape(ad.take_rows(emb, [0]), (4,))
            pos = ad.reshape(ad.take_rows(emb, [1]), (4,))
            neg = ad.reshape(ad.take_rows(emb, [2]), (4,))
            batch = ContrastiveBatch(anchor, [pos, Tensor(target)], [neg])
            return temporal_contrastive_loss(batch)

        assert finite_difference_check(f, Tensor(queries)) < 1e-4


class TestPairTrackLosses:
    def test_same_track_counts_positive_and_other_tracks_negative(self, rng):
        emb_a = Tensor(rng.normal(size=(3, 4)))
        emb_b = Tensor(rng.normal(size=(2, 4)))
        # anchor rows in emb_a side: tracks 1 and 2
        track_loss, aux_loss = pair_track_losses(
            emb_a, [1, 2, 7],
            emb_b, [0, 1],           # query 0 positive for gt 0, query 1 positive for gt 1
            [1, 2])                  # gt tracks
        assert np.isfinite(track_loss.item()) and np.isfinite(aux_loss.item())
        # anchor track 7 has no positive: mean over the two anchors that do
        single = pair_track_losses(emb_a, [7], emb_b, [0, 1], [1, 2])
        assert single[0].item() == 0.0

    def test_ignored_targets_take_no_part(self, rng):
        emb_a = Tensor(rng.normal(size=(1, 4)))
        targets = rng.normal(size=(2, 4))
        # marking the second target IGNORE must equal dropping it entirely
        with_ignore = pair_track_losses(emb_a, [1], Tensor(targets), [0, IGNORE], [1])
        dropped = pair_track_losses(emb_a, [1], Tensor(targets[:1]), [0], [1])
        assert with_ignore[0].item() == pytest.approx(dropped[0].item(), abs=1e-12)
        assert with_ignore[1].item() == pytest.approx(dropped[1].item(), abs=1e-12)
