"""Online track building: greedy IoU association of per-frame detections and
propagation-based filling of frames the detector missed.

Processing is strictly causal: handling frame t reads only frames and
detections at indices <= t.
"""

from dataclasses import dataclass, field

import numpy as np

from .affinity import BoundingBox, default_propagator
from .encoder import FrameEncoder
from .errors import InputError, ShapeError, StaleTrackError
from .grids import tight_box, upsample_bilinear, upsample_nearest
from .head import attended_forward
from .validation import check_binary_mask

SOURCE_DETECTOR = "detector"
SOURCE_PROPAGATED = "propagated"


@dataclass
class Detection:
    """One instance observation in one frame, at image resolution."""

    frame: int
    box: BoundingBox
    mask: np.ndarray
    category: int
    score: float
    source: str = SOURCE_DETECTOR

    def __post_init__(self):
        self.mask = check_binary_mask("mask", self.mask)
        if not 0.0 <= self.score <= 1.0:
            raise InputError(f"score must be in [0, 1], got {self.score}")
        if self.source not in (SOURCE_DETECTOR, SOURCE_PROPAGATED):
            raise InputError(f"unknown detection source {self.source!r}")


@dataclass
class InstanceTrack:
    """One object identity: per-frame detections plus liveness bookkeeping.

    last_seen is the newest frame with a detector-sourced entry; propagated
    entries extend coverage but do not refresh liveness or confidence, so a
    track cannot keep itself alive on its own propagations.
    """

    track_id: int
    category: int
    entries: dict = field(default_factory=dict)
    last_seen: int = -1
    misses: int = 0
    confidence: float = 0.0
    detector_hits: int = 0

    def add_detector(self, det):
        if det.frame in self.entries:
            raise InputError(
                f"track {self.track_id} already has an entry at frame {det.frame}"
            )
        self.entries[det.frame] = det
        self.last_seen = det.frame
        self.misses = 0
        self.detector_hits += 1
        # running mean of detector scores
        self.confidence += (det.score - self.confidence) / self.detector_hits

    def add_propagated(self, det):
        if det.frame in self.entries:
            raise InputError(
                f"track {self.track_id} already has an entry at frame {det.frame}"
            )
        self.entries[det.frame] = det

    def latest_mask(self):
        return self.entries[max(self.entries)].mask


@dataclass(frozen=True)
class PipelineConfig:
    match_iou: float = 0.5
    delta_max: int = 5
    fill_threshold: float = 0.4
    max_misses: int = 5
    mask_binarize: float = 0.5
    upsample: str = "nearest"

    def __post_init__(self):
        for name in ("match_iou", "fill_threshold", "mask_binarize"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InputError(f"{name} must be in (0, 1), got {v}")
        if self.delta_max < 1:
            raise InputError(f"delta_max must be >= 1, got {self.delta_max}")
        if self.max_misses < 0:
            raise InputError(f"max_misses must be >= 0, got {self.max_misses}")
        if self.upsample not in ("nearest", "bilinear"):
            raise InputError(f"unknown upsample mode {self.upsample!r}")


def mask_iou(a, b):
    """Intersection over union of two binary masks; 0 when both are empty."""
    am = check_binary_mask("a", a)
    bm = check_binary_mask("b", b)
    if am.shape != bm.shape:
        raise ShapeError(f"mask shapes differ: {am.shape} vs {bm.shape}")
    inter = np.logical_and(am, bm).sum()
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 0.0
    return float(inter) / float(union)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple            # (track_index, detection_index)
    unmatched_tracks: tuple
    unmatched_detections: tuple


def match_detections(tracks, detections, match_iou_threshold):
    """Greedily pair tracks with same-category detections by descending mask
    IoU (threshold inclusive). Ties prefer the higher detection score, then
    the lower track_id, then the lower detection index.
    """
    candidates = []
    for ti, track in enumerate(tracks):
        reference = track.latest_mask()
        for di, det in enumerate(detections):
            if det.category != track.category:
                continue
            iou = mask_iou(reference, det.mask)
            if iou >= match_iou_threshold:
                candidates.append(
                    (-iou, -det.score, track.track_id, di, ti)
                )
    candidates.sort()
    used_tracks, used_dets, pairs = set(), set(), []
    for _, _, _, di, ti in candidates:
        if ti in used_tracks or di in used_dets:
            continue
        used_tracks.add(ti)
        used_dets.add(di)
        pairs.append((ti, di))
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_tracks=tuple(
            ti for ti in range(len(tracks)) if ti not in used_tracks
        ),
        unmatched_detections=tuple(
            di for di in range(len(detections)) if di not in used_dets
        ),
    )


def fill_missing(track, t, frames, encoder, head_params, cfg,
                 propagator=None, feature_cache=None):
    """Segment the track's object at frame t by propagating from the last
    detector-sourced frame.

    Returns a propagated Detection when the head is confident enough (mean
    probability inside the binarized region >= fill_threshold and the region
    is nonempty), otherwise None.
    """
    source_frame = track.last_seen
    if t - source_frame > cfg.delta_max:
        raise StaleTrackError(
            f"track {track.track_id} last seen at frame {source_frame}, "
            f"cannot propagate {t - source_frame} frames (delta_max={cfg.delta_max})"
        )
    if propagator is None:
        propagator = default_propagator()

    def encode(index):
        if feature_cache is None:
            return encoder.encode(frames[index])
        if index not in feature_cache:
            feature_cache[index] = encoder.encode(frames[index])
        return feature_cache[index]

    f_t = encode(t)
    f_prev = encode(source_frame)
    attention = propagator.attention(f_t, f_prev, track.entries[source_frame].box)
    probabilities = attended_forward(head_params, f_t, attention)

    # the grid may cover a padded image; crop back to the true frame size
    image_h, image_w = np.asarray(frames[t]).shape[:2]
    padded = (f_t.height * f_t.stride, f_t.width * f_t.stride)
    if cfg.upsample == "nearest":
        up = upsample_nearest(probabilities, padded)
    else:
        up = upsample_bilinear(probabilities, padded)
    up = up[:image_h, :image_w]

    region = up >= cfg.mask_binarize
    if not region.any():
        return None
    mean_prob = float(up[region].mean())
    if mean_prob < cfg.fill_threshold:
        return None
    mask = region.astype(np.float64)
    x1, y1, x2, y2 = tight_box(mask)
    return Detection(
        frame=t,
        box=BoundingBox(float(x1), float(y1), float(x2), float(y2)),
        mask=mask,
        category=track.category,
        score=track.confidence * mean_prob,
        source=SOURCE_PROPAGATED,
    )


def run_video(frames, detections, encoder, head_params, cfg,
              fill=True, propagator=None):
    """Process a video online and return every track ever started.

    Per frame: match detections to active tracks, open new tracks from
    unmatched detections, try propagation filling for unmatched active
    tracks, then retire tracks whose consecutive misses exceed max_misses.
    """
    n_frames = len(frames)
    if n_frames < 1:
        raise InputError("run_video requires at least one frame")
    if len(detections) != n_frames:
        raise InputError(
            f"{len(detections)} detection lists for {n_frames} frames"
        )
    if encoder is None:
        encoder = FrameEncoder()
    if propagator is None:
        propagator = default_propagator()

    active, retired = [], []
    next_id = 1
    feature_cache = {}

    for t in range(n_frames):
        frame_dets = detections[t]
        for det in frame_dets:
            if det.frame != t:
                raise InputError(
                    f"detection stamped frame {det.frame} delivered at frame {t}"
                )
        result = match_detections(active, frame_dets, cfg.match_iou)
        for ti, di in result.pairs:
            active[ti].add_detector(frame_dets[di])
        for di in result.unmatched_detections:
            det = frame_dets[di]
            track = InstanceTrack(track_id=next_id, category=det.category)
            next_id += 1
            track.add_detector(det)
            active.append(track)

        for ti in result.unmatched_tracks:
            track = active[ti]
            track.misses = t - track.last_seen
            if fill and track.misses <= cfg.delta_max:
                filled = fill_missing(
                    track, t, frames, encoder, head_params, cfg,
                    propagator=propagator, feature_cache=feature_cache,
                )
                if filled is not None:
                    track.add_propagated(filled)

        still_active = []
        for track in active:
            if track.misses > cfg.max_misses:
                retired.append(track)
            else:
                still_active.append(track)
        active = still_active

    return sorted(active + retired, key=lambda tr: tr.track_id)


def sample_delta(rng, delta_max):
    """Uniform integer frame offset in [1, delta_max]."""
    if delta_max < 1:
        raise InputError(f"delta_max must be >= 1, got {delta_max}")
    return int(rng.integers(1, delta_max + 1))
