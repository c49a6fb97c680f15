"""Estimator facade: sklearn-style params/clone, fit/predict/score, input
validation."""

import numpy as np
import pytest
from sklearn.base import clone

from tubeseg.estimator import TubeSegmenter
from tubeseg.synthetic import SceneConfig, generate_video
from tubeseg.validation import as_label_grids, as_video_clip, infer_label_space


def _data(num_videos=3, T=4, seed=0):
    import dataclasses
    cfg = SceneConfig(frame_count=T, height=16, width=16, num_things=1,
                      size_range=(5, 6), seed=seed)
    X, y = [], []
    for i in range(num_videos):
        clip, gc, gi, _ = generate_video(dataclasses.replace(cfg, seed=seed + i))
        X.append(clip.frames)
        y.append((gc, gi))
    return X, y


@pytest.fixture(scope="module")
def fitted():
    X, y = _data()
    est = TubeSegmenter(iterations=25, batch_size=1, learning_rate=0.1,
                        window=2, seed=0)
    return est.fit(X, y), X, y


class TestSklearnProtocol:
    def test_get_params_round_trips_through_clone(self):
        est = TubeSegmenter(window=3, seed=5)
        dup = clone(est)
        assert dup.get_params() == est.get_params()

    def test_set_params(self):
        est = TubeSegmenter()
        est.set_params(window=2, iterations=10)
        assert est.window == 2 and est.iterations == 10

    def test_unfitted_predict_raises(self):
        X, _ = _data(num_videos=1)
        with pytest.raises(RuntimeError, match="not fitted"):
            TubeSegmenter().predict(X)


class TestFitPredict:
    def test_fit_returns_self_and_sets_state(self, fitted):
        est, _, _ = fitted
        assert hasattr(est, "model_")
        assert est.labels_.num_classes == 3
        assert len(est.history_) == 25

    def test_predict_shapes(self, fitted):
        est, X, _ = fitted
        preds = est.predict(X[:2])
        assert len(preds) == 2
        for class_grid, inst_grid in preds:
            assert class_grid.shape == (4, 16, 16)
            assert inst_grid.shape == (4, 16, 16)

    def test_score_in_unit_interval(self, fitted):
        est, X, y = fitted
        s = est.score(X, y)
        assert 0.0 <= s <= 1.0

    def test_mismatched_lengths_rejected(self):
        X, y = _data()
        with pytest.raises(ValueError):
            TubeSegmenter(iterations=2).fit(X, y[:-1])


class TestVssMode:
    def test_fit_predict_semantic_grids(self):
        X, y = _data(num_videos=2)
        est = TubeSegmenter(mode="VSS", iterations=10, batch_size=1, window=2, seed=0)
        est.fit(X, y)
        preds = est.predict(X[:1])
        assert preds[0].shape == (4, 16, 16)
        assert np.issubdtype(preds[0].dtype, np.integer)


class TestValidationHelpers:
    def test_video_must_be_4d(self):
        with pytest.raises(ValueError):
            as_video_clip(np.zeros((4, 16, 16)))

    def test_grids_must_match_clip(self):
        clip = as_video_clip(np.zeros((2, 8, 8, 3)))
        with pytest.raises(ValueError):
            as_label_grids((np.zeros((3, 8, 8), int), np.zeros((3, 8, 8), int)), clip)
        with pytest.raises(ValueError):
            as_label_grids((np.zeros((2, 8, 8)), np.zeros((2, 8, 8))), clip)  # floats

    def test_label_space_inference(self):
        gc = np.zeros((1, 4, 4), dtype=int)
        gc[0, 2:] = 1
        gi = np.zeros((1, 4, 4), dtype=int)
        gi[0, 2:] = 3
        labels = infer_label_space([(gc, gi)])
        assert labels.thing_classes == {1}
        assert labels.stuff_classes == {0}
