"""One-object entry point: fit a mask head on labeled videos, then run the
online tracker with propagation filling on new ones.

PropagationSegmenter is a thin facade over the encoder, the affinity
propagator, the trainable head and the tracking loop, shaped like a
scikit-learn estimator so get_params/set_params/clone work.
"""

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .affinity import (
    PIPELINE_AFFINITY_MODE,
    PIPELINE_AFFINITY_TEMPERATURE,
    PIPELINE_ATTENTION_TEMPERATURE,
    AttentionPropagator,
)
from .encoder import FrameEncoder
from .errors import InputError
from .metrics import EvalConfig, evaluate, from_ground_truth, from_instance_tracks
from .tracker import PipelineConfig, run_video
from .training import TrainConfig, train


class PropagationSegmenter(BaseEstimator):
    """Attention-propagation video instance segmenter.

    fit() learns the attended mask head from ground-truth tracks of the
    given videos; predict() runs the online association loop on one video's
    frames and (possibly gappy) detections, filling detector misses by
    propagating each track's last confirmed mask forward.
    """

    def __init__(self, stride=8, position_weight=0.5, normalize=True,
                 hidden_channels=16, steps=2000, lr=0.005, momentum=0.9,
                 decay_factor=10.0, delta_max=5, attention_loss_weight=1.0,
                 attention_loss_mode="standard",
                 affinity_mode=PIPELINE_AFFINITY_MODE,
                 affinity_temperature=PIPELINE_AFFINITY_TEMPERATURE,
                 attention_temperature=PIPELINE_ATTENTION_TEMPERATURE,
                 match_iou=0.5, fill_threshold=0.4, max_misses=5,
                 mask_binarize=0.5, upsample="nearest", fill=True, seed=0):
        self.stride = stride
        self.position_weight = position_weight
        self.normalize = normalize
        self.hidden_channels = hidden_channels
        self.steps = steps
        self.lr = lr
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.delta_max = delta_max
        self.attention_loss_weight = attention_loss_weight
        self.attention_loss_mode = attention_loss_mode
        self.affinity_mode = affinity_mode
        self.affinity_temperature = affinity_temperature
        self.attention_temperature = attention_temperature
        self.match_iou = match_iou
        self.fill_threshold = fill_threshold
        self.max_misses = max_misses
        self.mask_binarize = mask_binarize
        self.upsample = upsample
        self.fill = fill
        self.seed = seed

    def _make_encoder(self):
        return FrameEncoder(
            stride=self.stride,
            position_weight=self.position_weight,
            normalize=self.normalize,
        )

    def _make_propagator(self):
        return AttentionPropagator(
            mode=self.affinity_mode,
            affinity_temperature=self.affinity_temperature,
            attention_temperature=self.attention_temperature,
        )

    def _pipeline_config(self):
        return PipelineConfig(
            match_iou=self.match_iou,
            delta_max=self.delta_max,
            fill_threshold=self.fill_threshold,
            max_misses=self.max_misses,
            mask_binarize=self.mask_binarize,
            upsample=self.upsample,
        )

    def fit(self, X, y=None):
        """Train the head. X is a sequence of videos carrying ground-truth
        tracks (SyntheticVideo or anything with .frames/.tracks/.video_id)."""
        cfg = TrainConfig(
            steps=self.steps,
            lr=self.lr,
            momentum=self.momentum,
            decay_factor=self.decay_factor,
            delta_max=self.delta_max,
            attention_loss_weight=self.attention_loss_weight,
            attention_loss_mode=self.attention_loss_mode,
            seed=self.seed,
        )
        self.encoder_ = self._make_encoder()
        self.propagator_ = self._make_propagator()
        self.train_config_ = cfg
        self.head_params_, self.loss_curve_ = train(
            X, cfg,
            encoder=self.encoder_,
            propagator=self.propagator_,
            hidden_channels=self.hidden_channels,
        )
        return self

    def predict(self, frames, detections):
        """Run the tracker on one video.

        frames: (T, H, W, 3) float array in [0, 1]; detections: length-T
        list of per-frame Detection lists. Returns the finished tracks.
        """
        check_is_fitted(self, "head_params_")
        return run_video(
            frames, detections,
            encoder=self.encoder_,
            head_params=self.head_params_,
            cfg=self._pipeline_config(),
            fill=self.fill,
            propagator=self.propagator_,
        )

    def score(self, X, y=None, eval_config=None):
        """Mean AP (0..1) of tracked predictions against X's own ground
        truth, detections taken from y (list parallel to X) when given."""
        check_is_fitted(self, "head_params_")
        videos = list(X)
        if not videos:
            raise InputError("score requires at least one video")
        if y is not None and len(y) != len(videos):
            raise InputError("y must supply one detection list per video")
        preds, gts = [], []
        for i, video in enumerate(videos):
            if y is None:
                raise InputError(
                    "score needs per-video detections (pass them as y)"
                )
            tracks = self.predict(video.frames, y[i])
            preds.extend(from_instance_tracks(tracks, video.video_id))
            gts.extend(from_ground_truth(video.tracks, video.video_id))
        report = evaluate(preds, gts, eval_config or EvalConfig())
        return report.map / 100.0
