"""scikit-learn style facade over training and inference.

`fit(X, y)` trains the tube segmentation model on annotated videos and
`predict(X)` returns per-frame panoptic grids (or semantic grids in VSS
mode), so the pipeline composes with the wider estimator ecosystem:
`get_params` / `set_params` / `clone` behave as usual and every
hyperparameter mirrors a RunConfig field.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import RunConfig
from .dataio import DatasetBundle, VideoRecord
from .metrics import aggregate_results, evaluate_video
from .tracker import run_inference, run_vss_inference
from .train import train_model
from .validation import (as_label_grids, as_video_clip, check_label_space,
                         infer_label_space)


class TubeSegmenter(BaseEstimator):
    """Near-online video segmenter with subclip tubes and embedding linking.

    Parameters mirror RunConfig; see its docstring for semantics. After
    `fit`, the trained model is available as `model_` and the resolved
    label space as `labels_`.
    """

    def __init__(self, mode="VPS", num_queries=16, channels=64, embed_channels=32,
                 decoder_stages=3, patch_size=4, subclip_size=2, window=6,
                 inference_overlap=0, lambda_cls=2.0, lambda_ce=5.0, lambda_dice=5.0,
                 lambda_track=1.0, lambda_aux=0.5, alpha_pos=0.7, alpha_neg=0.3,
                 neighborhood_radius=1, score_thresh=0.3, overlap_thresh=0.8,
                 match_thresh=0.5, max_age=2, use_linked_queries=True,
                 learning_rate=0.1, momentum=0.9, clip_norm=1.0, iterations=500,
                 batch_size=2, seed=0):
        self.mode = mode
        self.num_queries = num_queries
        self.channels = channels
        self.embed_channels = embed_channels
        self.decoder_stages = decoder_stages
        self.patch_size = patch_size
        self.subclip_size = subclip_size
        self.window = window
        self.inference_overlap = inference_overlap
        self.lambda_cls = lambda_cls
        self.lambda_ce = lambda_ce
        self.lambda_dice = lambda_dice
        self.lambda_track = lambda_track
        self.lambda_aux = lambda_aux
        self.alpha_pos = alpha_pos
        self.alpha_neg = alpha_neg
        self.neighborhood_radius = neighborhood_radius
        self.score_thresh = score_thresh
        self.overlap_thresh = overlap_thresh
        self.match_thresh = match_thresh
        self.max_age = max_age
        self.use_linked_queries = use_linked_queries
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.iterations = iterations
        self.batch_size = batch_size
        self.seed = seed

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.get_params())

    def _bundle(self, X, y, labels=None) -> DatasetBundle:
        if len(X) != len(y):
            raise ValueError(f"got {len(X)} videos but {len(y)} annotations")
        if len(X) == 0:
            raise ValueError("need at least one training video")
        videos = []
        pairs = []
        for idx, (clip_in, gt) in enumerate(zip(X, y)):
            clip = as_video_clip(clip_in)
            class_grid, inst_grid = as_label_grids(gt, clip)
            pairs.append((class_grid, inst_grid))
            videos.append(VideoRecord(video_id=f"video_{idx:03d}", clip=clip,
                                      gt_class=class_grid, gt_inst=inst_grid))
        if labels is None:
            labels = infer_label_space(pairs)
        check_label_space(labels)
        return DatasetBundle(name="in-memory", seed=self.seed, labels=labels,
                             videos=videos)

    def fit(self, X, y, labels=None):
        """Train on videos X with panoptic ground truth y.

        X: sequence of (T, H, W, ch) arrays or VideoClips. y: sequence of
        (class_grid, instance_grid) pairs, each (T, H, W) ints; instance 0
        marks stuff. The label space is inferred from y unless given.
        """
        config = self.run_config()
        bundle = self._bundle(X, y, labels)
        model, history = train_model(config, bundle)
        self.model_ = model
        self.labels_ = bundle.labels
        self.history_ = history
        self.config_ = config
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this TubeSegmenter instance is not fitted yet")

    def predict(self, X):
        """Segment videos: per video, (class_grid, instance_grid) arrays of
        shape (T, H, W) in VPS/VIS mode, or a class grid alone in VSS mode."""
        self._check_fitted()
        cfg = self.config_.inference_config()
        out = []
        for clip_in in X:
            clip = as_video_clip(clip_in)
            if self.mode == "VSS":
                out.append(run_vss_inference(clip, self.model_, cfg))
            else:
                result = run_inference(clip, self.model_, self.labels_, cfg)
                out.append((result.panoptic.class_ids, result.panoptic.instance_ids))
        return out

    def score(self, X, y):
        """Mean VPQ (averaged over window sizes and videos) against y."""
        self._check_fitted()
        preds = self.predict(X)
        results = []
        for pred, gt, clip_in in zip(preds, y, X):
            clip = as_video_clip(clip_in)
            gt_class, gt_inst = as_label_grids(gt, clip)
            if self.mode == "VSS":
                pred_class, pred_inst = pred, np.zeros_like(gt_inst)
            else:
                pred_class, pred_inst = pred
            results.append(evaluate_video(pred_class, pred_inst, gt_class, gt_inst,
                                          self.labels_))
        return aggregate_results(results).vpq_mean
