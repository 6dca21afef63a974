"""Track-level evaluation: interpolated average precision over spatio-temporal
IoU thresholds, average recall at capped prediction budgets, and the
ground-truth substitution harness for attributing error to boxes, categories,
masks, and identities."""

import copy
import csv
import io as _io
import json
from dataclasses import dataclass, field

import numpy as np

from .affinity import box_iou
from .errors import InputError
from .validation import check_binary_mask

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = DEFAULT_THRESHOLDS
    recall_points: int = 101
    ar_ks: tuple = (1, 10)

    def __post_init__(self):
        ts = tuple(float(t) for t in self.iou_thresholds)
        if not ts:
            raise InputError("need at least one IoU threshold")
        if any(not 0.0 < t < 1.0 for t in ts):
            raise InputError(f"thresholds must lie in (0, 1), got {ts}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InputError(f"thresholds must be strictly increasing, got {ts}")
        if self.recall_points < 2:
            raise InputError("recall_points must be >= 2")
        if any(k < 1 for k in self.ar_ks):
            raise InputError("ar_ks must be positive")
        object.__setattr__(self, "iou_thresholds", ts)
        object.__setattr__(self, "ar_ks", tuple(int(k) for k in self.ar_ks))


@dataclass
class EvalTrack:
    """Evaluation view of one track: per-frame binary masks plus a score."""

    video_id: int
    track_id: int
    category: int
    score: float
    masks: dict = field(repr=False)            # frame -> (H, W) binary mask
    boxes: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.masks:
            raise InputError(
                f"track {self.track_id} in video {self.video_id} has no masks"
            )
        self.masks = {
            int(f): check_binary_mask(f"mask@{f}", m)
            for f, m in self.masks.items()
        }


def from_instance_tracks(tracks, video_id):
    """Adapt tracker output to evaluation tracks (score = track confidence)."""
    out = []
    for track in tracks:
        if not track.entries:
            continue
        out.append(
            EvalTrack(
                video_id=video_id,
                track_id=track.track_id,
                category=track.category,
                score=float(track.confidence),
                masks={f: d.mask for f, d in track.entries.items()},
                boxes={f: d.box for f, d in track.entries.items()},
            )
        )
    return out


def from_ground_truth(tracks, video_id):
    """Adapt ground-truth tracks to evaluation tracks (score 1)."""
    return [
        EvalTrack(
            video_id=video_id,
            track_id=track.track_id,
            category=track.category,
            score=1.0,
            masks=dict(track.masks),
            boxes=dict(track.boxes),
        )
        for track in tracks
    ]


def track_iou(a, b):
    """Spatio-temporal IoU: frame-summed intersection over frame-summed union.

    A frame missing from one track counts as an empty mask there; frames
    missing from both contribute nothing. 0 when the union is empty.
    """
    inter = 0
    union = 0
    for f in sorted(set(a.masks) | set(b.masks)):
        am = a.masks.get(f)
        bm = b.masks.get(f)
        if am is None:
            union += int((bm > 0).sum())
        elif bm is None:
            union += int((am > 0).sum())
        else:
            ab = am > 0
            bb = bm > 0
            inter += int((ab & bb).sum())
            union += int((ab | bb).sum())
    if union == 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class EvalReport:
    """All metrics in percent."""

    map: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float
    per_category: dict
    matched_pairs: tuple = field(repr=False, default=())
    n_predictions: int = 0
    n_ground_truth: int = 0

    def __post_init__(self):
        for name in ("map", "ap50", "ap75", "ar1", "ar10"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0 + 1e-9:
                raise InputError(f"{name} must be a percentage, got {v}")
        if self.ar1 is not None and self.ar10 is not None:
            if self.ar10 < self.ar1 - 1e-9:
                raise InputError("recall at 10 cannot be below recall at 1")


class _IouCache:
    def __init__(self, preds, gts):
        self.preds = preds
        self.gts = gts
        self._memo = {}

    def get(self, pi, gi):
        key = (pi, gi)
        if key not in self._memo:
            self._memo[key] = track_iou(self.preds[pi], self.gts[gi])
        return self._memo[key]


def _interpolated_ap(tp_flags, n_gt, recall_points):
    """101-point style interpolated average precision from an ordered
    true-positive sequence."""
    if n_gt == 0:
        return None
    if not tp_flags:
        return 0.0
    flags = np.asarray(tp_flags, dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    grid = np.linspace(0.0, 1.0, recall_points)
    idx = np.searchsorted(recall, grid, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


def _greedy_match(order, pred_lookup, gts_by_video, cache, threshold):
    """Match predictions (already score-ordered) to ground truth greedily.

    Returns (tp flags in order, matches as (pred_index, gt_index, iou)).
    Each prediction takes the unmatched same-video gt with the highest
    track IoU >= threshold; IoU ties go to the lower gt index.
    """
    taken = set()
    flags = []
    matches = []
    for pi in order:
        pred = pred_lookup[pi]
        best_gi = None
        best_iou = 0.0
        for gi in gts_by_video.get(pred.video_id, ()):
            if gi in taken:
                continue
            iou = cache.get(pi, gi)
            if iou >= threshold and iou > best_iou:
                best_iou = iou
                best_gi = gi
        if best_gi is None:
            flags.append(0.0)
        else:
            taken.add(best_gi)
            flags.append(1.0)
            matches.append((pi, best_gi, best_iou))
    return flags, matches


def evaluate(preds, gts, cfg=None):
    """Score predicted tracks against ground-truth tracks.

    Per category and IoU threshold, predictions are sorted by descending
    score (ties by input order) and greedily matched within their video;
    the precision-recall curve is summarized by interpolated AP. The mean
    over categories, then thresholds, is the headline mAP. AR@k restricts
    each video to its top-k predictions per category before matching.
    """
    if cfg is None:
        cfg = EvalConfig()
    preds = list(preds)
    gts = list(gts)
    categories = sorted({g.category for g in gts})
    known = set(categories)
    for p in preds:
        if p.category not in known:
            raise InputError(
                f"prediction track {p.track_id} has category {p.category}, "
                f"not present in ground truth {sorted(known)}"
            )

    cache = _IouCache(preds, gts)
    matched_log = []

    ap = {}      # (category, threshold) -> AP in [0, 1] or None
    recalls = {k: {} for k in cfg.ar_ks}

    for category in categories:
        pred_idx = [i for i, p in enumerate(preds) if p.category == category]
        gt_idx = [i for i, g in enumerate(gts) if g.category == category]
        n_gt = len(gt_idx)
        gts_by_video = {}
        for gi in gt_idx:
            gts_by_video.setdefault(gts[gi].video_id, []).append(gi)
        order = sorted(pred_idx, key=lambda i: (-preds[i].score, i))

        by_video_rank = {}
        for i in order:
            by_video_rank.setdefault(preds[i].video_id, []).append(i)

        for threshold in cfg.iou_thresholds:
            flags, matches = _greedy_match(
                order, preds, gts_by_video, cache, threshold
            )
            ap[(category, threshold)] = _interpolated_ap(
                flags, n_gt, cfg.recall_points
            )
            for pi, gi, iou in matches:
                matched_log.append(
                    (
                        float(threshold),
                        category,
                        preds[pi].video_id,
                        preds[pi].track_id,
                        gts[gi].track_id,
                        float(iou),
                    )
                )
            for k in cfg.ar_ks:
                capped = [i for vid in sorted(by_video_rank)
                          for i in by_video_rank[vid][:k]]
                capped.sort(key=lambda i: (-preds[i].score, i))
                k_flags, _ = _greedy_match(
                    capped, preds, gts_by_video, cache, threshold
                )
                recalls[k][(category, threshold)] = (
                    (sum(k_flags) / n_gt) if n_gt else None
                )

    def _mean_over(cells):
        vals = [v for v in cells if v is not None]
        return 100.0 * sum(vals) / len(vals) if vals else 0.0

    map_value = _mean_over(
        [ap[(c, t)] for t in cfg.iou_thresholds for c in categories]
    )
    ap50 = (
        _mean_over([ap[(c, 0.5)] for c in categories])
        if 0.5 in cfg.iou_thresholds else None
    )
    ap75 = (
        _mean_over([ap[(c, 0.75)] for c in categories])
        if 0.75 in cfg.iou_thresholds else None
    )
    ar = {
        k: _mean_over(
            [recalls[k][(c, t)] for t in cfg.iou_thresholds for c in categories]
        )
        for k in cfg.ar_ks
    }
    per_category = {
        c: _mean_over([ap[(c, t)] for t in cfg.iou_thresholds])
        for c in categories
    }
    return EvalReport(
        map=map_value,
        ap50=ap50,
        ap75=ap75,
        ar1=ar.get(1),
        ar10=ar.get(10),
        per_category=per_category,
        matched_pairs=tuple(matched_log),
        n_predictions=len(preds),
        n_ground_truth=len(gts),
    )


@dataclass(frozen=True)
class OracleFlags:
    """Which prediction components get replaced by their ground-truth match."""

    box: bool = False
    category: bool = False
    mask: bool = False
    track: bool = False

    LADDER_ORDER = ("box", "category", "mask", "track")

    def any(self):
        return self.box or self.category or self.mask or self.track


def _best_gt(pred, vid_gts):
    """Ground-truth track with the highest track IoU; None when all are 0."""
    best = None
    best_iou = 0.0
    for gt in vid_gts:
        iou = track_iou(pred, gt)
        if iou > best_iou:
            best_iou = iou
            best = gt
    return best


def oracle_substitute(preds, gts, flags):
    """Replace prediction components with ground truth, cumulatively.

    box: each per-frame box becomes the gt box with the highest box IoU that
    frame (masks untouched). category: the category of the highest-track-IoU
    gt. mask: the full per-frame mask sequence of the highest-track-IoU gt.
    track: predictions are re-grouped by their best-matching gt identity,
    merging duplicates (highest-score member wins frame conflicts and names
    the merged track). Predictions with no gt overlap are left unmodified.
    """
    gts_by_video = {}
    for gt in gts:
        gts_by_video.setdefault(gt.video_id, []).append(gt)

    out = []
    for pred in preds:
        p = copy.copy(pred)
        p.masks = dict(pred.masks)
        p.boxes = dict(pred.boxes)
        vid_gts = gts_by_video.get(p.video_id, [])
        if flags.box and vid_gts:
            for f in sorted(p.boxes):
                best_box = None
                best_iou = 0.0
                for gt in vid_gts:
                    gt_box = gt.boxes.get(f)
                    if gt_box is None:
                        continue
                    iou = box_iou(p.boxes[f], gt_box)
                    if iou > best_iou:
                        best_iou = iou
                        best_box = gt_box
                if best_box is not None:
                    p.boxes[f] = best_box
        if flags.category and vid_gts:
            match = _best_gt(p, vid_gts)
            if match is not None:
                p.category = match.category
        if flags.mask and vid_gts:
            match = _best_gt(p, vid_gts)
            if match is not None:
                p.masks = dict(match.masks)
        out.append(p)

    if not flags.track:
        return out

    merged = []
    groups = {}
    for index, p in enumerate(out):
        match = _best_gt(p, gts_by_video.get(p.video_id, []))
        if match is None:
            merged.append(p)
            continue
        groups.setdefault((p.video_id, match.track_id), []).append((index, p))
    for key in sorted(groups):
        members = groups[key]
        members_by_score = sorted(members, key=lambda ip: (-ip[1].score, ip[0]))
        base = copy.copy(members_by_score[0][1])
        base.masks = dict(base.masks)
        base.boxes = dict(base.boxes)
        # weaker members only contribute frames the base lacks
        for _, member in members_by_score[1:]:
            for f, m in member.masks.items():
                base.masks.setdefault(f, m)
            for f, b in member.boxes.items():
                base.boxes.setdefault(f, b)
        base.score = max(m.score for _, m in members)
        merged.append(base)
    return merged


def oracle_ladder(preds, gts, flags, cfg=None):
    """Cumulative substitution ladder: a (label, flags, report) row for the
    unmodified predictions plus one row per enabled flag, applied in the
    fixed order box, category, mask, track."""
    labels = {"box": "+box", "category": "+class", "mask": "+mask", "track": "+track"}
    rows = [("none", OracleFlags(), evaluate(preds, gts, cfg))]
    enabled = {}
    for name in OracleFlags.LADDER_ORDER:
        if getattr(flags, name):
            enabled[name] = True
            step = OracleFlags(**enabled)
            rows.append(
                (labels[name], step, evaluate(oracle_substitute(preds, gts, step), gts, cfg))
            )
    return rows


def _fmt(value):
    return "-" if value is None else f"{value:.1f}"


METRIC_COLUMNS = ("mAP", "AP50", "AP75", "AR@1", "AR@10")


def _metric_values(report):
    return (report.map, report.ap50, report.ap75, report.ar1, report.ar10)


def report_emit(report, fmt="text"):
    """Render a report with one-decimal percentages; byte-stable."""
    if fmt == "text":
        lines = []
        header = "  ".join(f"{c:>6}" for c in METRIC_COLUMNS)
        values = "  ".join(f"{_fmt(v):>6}" for v in _metric_values(report))
        lines.append(header)
        lines.append(values)
        for category in sorted(report.per_category):
            lines.append(
                f"category {category}: AP {_fmt(report.per_category[category])}"
            )
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([c.lower() for c in METRIC_COLUMNS])
        writer.writerow([_fmt(v) for v in _metric_values(report)])
        return buf.getvalue()
    if fmt == "json":
        payload = {
            "map": _fmt(report.map),
            "ap50": _fmt(report.ap50),
            "ap75": _fmt(report.ap75),
            "ar1": _fmt(report.ar1),
            "ar10": _fmt(report.ar10),
            "per_category": {
                str(c): _fmt(v) for c, v in sorted(report.per_category.items())
            },
        }
        return json.dumps(payload, sort_keys=True) + "\n"
    raise InputError(f"unknown report format {fmt!r}")


def ladder_emit(rows, fmt="text"):
    """Render an oracle ladder (rows from oracle_ladder)."""
    if fmt == "text":
        lines = [f"{'row':<10}" + "  ".join(f"{c:>6}" for c in METRIC_COLUMNS)]
        for label, _, report in rows:
            values = "  ".join(f"{_fmt(v):>6}" for v in _metric_values(report))
            lines.append(f"{label:<10}" + values)
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["row"] + [c.lower() for c in METRIC_COLUMNS])
        for label, _, report in rows:
            writer.writerow([label] + [_fmt(v) for v in _metric_values(report)])
        return buf.getvalue()
    if fmt == "json":
        payload = [
            {
                "row": label,
                "map": _fmt(report.map),
                "ap50": _fmt(report.ap50),
                "ap75": _fmt(report.ap75),
                "ar1": _fmt(report.ar1),
                "ar10": _fmt(report.ar10),
            }
            for label, _, report in rows
        ]
        return json.dumps(payload, sort_keys=True) + "\n"
    raise InputError(f"unknown report format {fmt!r}")
