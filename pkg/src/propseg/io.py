"""File formats: run-length mask codec, binary head-parameter files, P6 PPM
frames, and the JSON dataset/annotation/detections schemas.

Every writer goes through a temp file and an atomic rename, so a crashed or
failed run never leaves a partial file behind. JSON is UTF-8 with sorted
keys, making emissions byte-stable for fixed inputs.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .affinity import BoundingBox
from .datasets import CATEGORY_NAMES, GroundTruthTrack, SyntheticVideo
from .errors import (
    BadMagicError,
    CodecError,
    InputError,
    ParamShapeError,
    TruncatedFileError,
)
from .head import PARAM_BLOCK_COUNT, HeadParams
from .metrics import EvalTrack
from .tracker import Detection
from .validation import check_binary_mask, check_frame

PARAMS_MAGIC = b"OBJPROP1"
ANNOTATION_VERSION = "1"


# ---------------------------------------------------------------------------
# atomic writes

def atomic_write_bytes(path, data):
    """Write bytes via a temp file + rename so readers never see partials."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# run-length mask codec

@dataclass(frozen=True)
class RleMask:
    """Column-major run lengths, alternating values starting with zeros."""

    height: int
    width: int
    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise CodecError(f"negative run length in {counts[:8]}...")
        if sum(counts) != self.height * self.width:
            raise CodecError(
                f"run lengths sum to {sum(counts)}, expected "
                f"{self.height} * {self.width} = {self.height * self.width}"
            )
        if any(c == 0 for c in counts[1:]):
            raise CodecError("zero-length run after the first position")
        object.__setattr__(self, "counts", counts)


def rle_encode(mask):
    """Encode a binary mask; decode(encode(m)) == m exactly."""
    m = check_binary_mask("mask", mask)
    h, w = m.shape
    flat = m.reshape(-1, order="F").astype(np.uint8)
    changes = np.flatnonzero(np.diff(flat)) + 1
    boundaries = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(boundaries).tolist()
    # first run always describes zeros, so a leading 1 yields a 0-length run
    if flat[0] == 1:
        runs = [0] + runs
    return RleMask(height=h, width=w, counts=tuple(runs))


def rle_decode(rle):
    total = rle.height * rle.width
    values = np.zeros(len(rle.counts), dtype=np.float64)
    values[1::2] = 1.0
    flat = np.repeat(values, rle.counts)
    if flat.size != total:
        raise CodecError(f"runs cover {flat.size} cells of {total}")
    return flat.reshape((rle.height, rle.width), order="F")


# ---------------------------------------------------------------------------
# head parameter files

def save_params(params, path):
    """Serialize head parameters: magic, uint32 shape header, float32 data."""
    blocks = params.named_arrays()
    out = [PARAMS_MAGIC, struct.pack("<I", len(blocks))]
    for _, arr in blocks:
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in blocks:
        out.append(arr.astype("<f4").tobytes(order="C"))
    atomic_write_bytes(path, b"".join(out))


def load_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    offset = 0

    def take(n, what):
        nonlocal offset
        if offset + n > len(data):
            raise TruncatedFileError(
                f"{path} ends inside {what} ({len(data)} bytes total)"
            )
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    magic = bytes(take(len(PARAMS_MAGIC), "magic"))
    if magic != PARAMS_MAGIC:
        raise BadMagicError(
            f"{path} does not look like a parameters file (magic {magic!r})"
        )
    (count,) = struct.unpack("<I", take(4, "block count"))
    if count != PARAM_BLOCK_COUNT:
        raise ParamShapeError(
            f"{path} declares {count} blocks, expected {PARAM_BLOCK_COUNT}"
        )
    shapes = []
    for b in range(count):
        (ndim,) = struct.unpack("<I", take(4, f"block {b} rank"))
        if ndim == 0 or ndim > 8:
            raise ParamShapeError(f"block {b} has implausible rank {ndim}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"block {b} shape"))
        shapes.append(shape)
    arrays = []
    for b, shape in enumerate(shapes):
        n = 1
        for s in shape:
            n *= s
        raw = take(4 * n, f"block {b} data")
        arrays.append(
            np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        )
    if offset != len(data):
        raise CodecError(f"{path} has {len(data) - offset} trailing bytes")
    try:
        return HeadParams.from_arrays(arrays)
    except Exception as exc:
        raise ParamShapeError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# PPM frames

def write_ppm(path, frame):
    f = check_frame("frame", frame)
    h, w = f.shape[:2]
    payload = np.round(f * 255.0).astype(np.uint8).tobytes()
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + payload)


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval, single whitespace, then raster
    fields = []
    offset = 0
    while len(fields) < 4:
        while offset < len(data) and data[offset : offset + 1].isspace():
            offset += 1
        if offset < len(data) and data[offset : offset + 1] == b"#":
            while offset < len(data) and data[offset] != 0x0A:
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            raise CodecError(f"{path}: malformed header")
        fields.append(data[start:offset])
    offset += 1  # single whitespace byte after maxval
    if fields[0] != b"P6":
        raise BadMagicError(f"{path} is not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise CodecError(f"{path}: unsupported maxval {maxval}")
    expected = w * h * 3
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise TruncatedFileError(
            f"{path}: raster has {len(raster)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# JSON schemas

def _box_to_list(box):
    return [box.x1, box.y1, box.x2, box.y2]


def _box_from_list(values):
    if len(values) != 4:
        raise InputError(f"box must have 4 coordinates, got {values}")
    return BoundingBox(*[float(v) for v in values])


def _mask_to_json(mask):
    rle = rle_encode(mask)
    return {"height": rle.height, "width": rle.width,
            "counts": list(rle.counts)}


def _mask_from_json(obj):
    try:
        rle = RleMask(
            height=int(obj["height"]),
            width=int(obj["width"]),
            counts=tuple(obj["counts"]),
        )
    except KeyError as exc:
        raise InputError(f"mask object missing key {exc}") from exc
    return rle_decode(rle)


def _video_headers(videos):
    return [
        {
            "id": v.video_id,
            "width": int(v.frames.shape[2]),
            "height": int(v.frames.shape[1]),
            "frame_count": int(v.frames.shape[0]),
        }
        for v in videos
    ]


def _categories_payload():
    return [{"id": cid, "name": name} for cid, name in sorted(CATEGORY_NAMES.items())]


def annotations_to_json(videos, tracks_per_video, scores=None):
    """Build the annotation payload: videos, categories, and tracks with
    per-frame box/mask/score arrays (null where the track has no entry)."""
    payload = {
        "version": ANNOTATION_VERSION,
        "videos": _video_headers(videos),
        "categories": _categories_payload(),
        "tracks": [],
    }
    for video, tracks in zip(videos, tracks_per_video):
        n_frames = int(video.frames.shape[0])
        for track in tracks:
            frames = []
            for t in range(n_frames):
                if t in track.masks:
                    entry = {
                        "box": _box_to_list(track.boxes[t]),
                        "mask": _mask_to_json(track.masks[t]),
                    }
                else:
                    entry = None
                frames.append(entry)
            payload["tracks"].append(
                {
                    "id": track.track_id,
                    "video_id": video.video_id,
                    "category_id": track.category,
                    "score": float(getattr(track, "score", 1.0)),
                    "frames": frames,
                }
            )
    return payload


def write_annotations(path, payload):
    atomic_write_text(path, json.dumps(payload, sort_keys=True) + "\n")


def load_annotations(path):
    """Read an annotation file into EvalTracks, validating id references."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    for key in ("version", "videos", "categories", "tracks"):
        if key not in payload:
            raise InputError(f"{path}: missing top-level key {key!r}")
    video_frames = {}
    for v in payload["videos"]:
        video_frames[int(v["id"])] = int(v["frame_count"])
    known_categories = {int(c["id"]) for c in payload["categories"]}
    tracks = []
    for raw in payload["tracks"]:
        video_id = int(raw["video_id"])
        if video_id not in video_frames:
            raise InputError(
                f"{path}: track {raw['id']} references unknown video {video_id}"
            )
        category = int(raw["category_id"])
        if category not in known_categories:
            raise InputError(
                f"{path}: track {raw['id']} references unknown category {category}"
            )
        frames = raw["frames"]
        if len(frames) != video_frames[video_id]:
            raise InputError(
                f"{path}: track {raw['id']} has {len(frames)} frame entries, "
                f"video {video_id} has {video_frames[video_id]} frames"
            )
        masks, boxes = {}, {}
        for t, entry in enumerate(frames):
            if entry is None:
                continue
            masks[t] = _mask_from_json(entry["mask"])
            boxes[t] = _box_from_list(entry["box"])
        if not masks:
            continue
        tracks.append(
            EvalTrack(
                video_id=video_id,
                track_id=int(raw["id"]),
                category=category,
                score=float(raw.get("score", 1.0)),
                masks=masks,
                boxes=boxes,
            )
        )
    return tracks


def detections_to_json(videos, detections_per_video):
    payload = {
        "version": ANNOTATION_VERSION,
        "videos": _video_headers(videos),
        "categories": _categories_payload(),
        "detections": [],
    }
    for video, per_frame in zip(videos, detections_per_video):
        for t, dets in enumerate(per_frame):
            for det in dets:
                payload["detections"].append(
                    {
                        "video_id": video.video_id,
                        "frame": t,
                        "category_id": det.category,
                        "box": _box_to_list(det.box),
                        "mask": _mask_to_json(det.mask),
                        "score": det.score,
                    }
                )
    return payload


def write_detections(path, payload):
    atomic_write_text(path, json.dumps(payload, sort_keys=True) + "\n")


def load_detections(path):
    """Read a detections file into {video_id: per-frame Detection lists}."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    for key in ("version", "videos", "detections"):
        if key not in payload:
            raise InputError(f"{path}: missing top-level key {key!r}")
    frame_counts = {int(v["id"]): int(v["frame_count"]) for v in payload["videos"]}
    known_categories = (
        {int(c["id"]) for c in payload["categories"]}
        if "categories" in payload else None
    )
    out = {vid: [[] for _ in range(n)] for vid, n in frame_counts.items()}
    for raw in payload["detections"]:
        video_id = int(raw["video_id"])
        if video_id not in frame_counts:
            raise InputError(f"{path}: detection references unknown video {video_id}")
        if known_categories is not None and int(raw["category_id"]) not in known_categories:
            raise InputError(
                f"{path}: detection references unknown category {raw['category_id']}"
            )
        t = int(raw["frame"])
        if not 0 <= t < frame_counts[video_id]:
            raise InputError(
                f"{path}: detection frame {t} outside video {video_id}"
            )
        out[video_id][t].append(
            Detection(
                frame=t,
                box=_box_from_list(raw["box"]),
                mask=_mask_from_json(raw["mask"]),
                category=int(raw["category_id"]),
                score=float(raw["score"]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# dataset directories

def write_dataset(root, bundle):
    """Lay a benchmark bundle out on disk.

    root/
      manifest.json        seed + video index
      annotations.json     ground-truth tracks
      detections.json      simulated detector output
      video_<id>/frame_<t>.ppm
    """
    os.makedirs(root, exist_ok=True)
    manifest = {
        "version": ANNOTATION_VERSION,
        "seed": bundle.seed,
        "detector": {
            "miss_rate": bundle.detector.miss_rate,
            "box_jitter": bundle.detector.box_jitter,
            "mask_erosion": bundle.detector.mask_erosion,
            "score_noise": bundle.detector.score_noise,
            "seed": bundle.detector.seed,
        },
        "videos": [],
    }
    for video in bundle.videos:
        directory = f"video_{video.video_id:03d}"
        manifest["videos"].append(
            {
                "id": video.video_id,
                "dir": directory,
                "width": int(video.frames.shape[2]),
                "height": int(video.frames.shape[1]),
                "frame_count": int(video.frames.shape[0]),
            }
        )
        for t in range(video.frames.shape[0]):
            write_ppm(
                os.path.join(root, directory, f"frame_{t:04d}.ppm"),
                video.frames[t],
            )
    atomic_write_text(
        os.path.join(root, "manifest.json"),
        json.dumps(manifest, sort_keys=True) + "\n",
    )
    write_annotations(
        os.path.join(root, "annotations.json"),
        annotations_to_json(bundle.videos, [v.tracks for v in bundle.videos]),
    )
    write_detections(
        os.path.join(root, "detections.json"),
        detections_to_json(bundle.videos, bundle.detections),
    )


def load_dataset(root):
    """Load frames plus ground truth written by write_dataset.

    Returns (videos, detections dict) where videos are SyntheticVideos with
    tracks rebuilt from annotations.json.
    """
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise InputError(f"{root} has no manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    gt_tracks = load_annotations(os.path.join(root, "annotations.json"))
    tracks_by_video = {}
    for track in gt_tracks:
        tracks_by_video.setdefault(track.video_id, []).append(track)

    videos = []
    for head in manifest["videos"]:
        vid = int(head["id"])
        n = int(head["frame_count"])
        frames = np.stack(
            [
                read_ppm(
                    os.path.join(root, head["dir"], f"frame_{t:04d}.ppm")
                )
                for t in range(n)
            ]
        )
        tracks = [
            GroundTruthTrack(
                track_id=t.track_id,
                category=t.category,
                masks=t.masks,
                boxes=t.boxes,
            )
            for t in tracks_by_video.get(vid, [])
        ]
        videos.append(
            SyntheticVideo(video_id=vid, frames=frames, tracks=tracks, spec=None)
        )
    detections_path = os.path.join(root, "detections.json")
    detections = load_detections(detections_path) if os.path.exists(detections_path) else {}
    return videos, detections


def loss_curve_to_csv(curve, cfg):
    """Render per-step loss reports as CSV (step, losses, learning rate)."""
    from .training import learning_rate_at

    buf = ["step,mask_loss,attention_loss,total,lr"]
    for step, report in enumerate(curve):
        lr = learning_rate_at(step, cfg)
        buf.append(
            f"{step},{report.mask_loss:.10g},{report.attention_loss:.10g},"
            f"{report.total:.10g},{lr:.10g}"
        )
    return "\n".join(buf) + "\n"
