"""Synthetic moving-shape videos with dense ground truth, plus a corrupted
detector that drops, jitters, and erodes observations.

Generation is purely a function of the SceneSpec (including its seed): shapes
translate with constant velocity and reflect off the image borders, later
instances occlude earlier ones, and frames are quantized to 8-bit levels so
the in-memory pixels survive a file round trip bit-exactly.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .affinity import BoundingBox
from .errors import ConfigError, InputError
from .grids import tight_box
from .tracker import Detection

CATEGORY_IDS = {"disk": 1, "rectangle": 2}
CATEGORY_NAMES = {1: "disk", 2: "rectangle"}

# minimum per-channel color separation between instances
MIN_COLOR_DISTANCE = 0.2


@dataclass(frozen=True)
class InstanceSpec:
    """One moving shape: disks have size = radius, rectangles (width, height)."""

    kind: str
    color: tuple
    start: tuple      # center (x, y) at frame 0, pixels
    size: tuple       # (radius,) or (width, height)
    velocity: tuple   # (vx, vy) pixels per frame

    def __post_init__(self):
        if self.kind not in CATEGORY_IDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        if len(self.color) != 3 or any(not 0 <= c <= 1 for c in self.color):
            raise ConfigError(f"color must be an RGB triple in [0, 1]")
        if any(s <= 0 for s in self.size):
            raise ConfigError(f"sizes must be positive, got {self.size}")

    @property
    def category(self):
        return CATEGORY_IDS[self.kind]

    def half_extents(self):
        """Half width/height of the shape's bounding square/rectangle."""
        if self.kind == "disk":
            return (self.size[0], self.size[0])
        return (self.size[0] / 2.0, self.size[1] / 2.0)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    frame_count: int = 24
    background: str = "flat"
    instances: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError("image dimensions must be positive")
        if self.frame_count < 1:
            raise ConfigError("frame_count must be >= 1")
        if self.background not in ("flat", "gradient"):
            raise ConfigError(f"unknown background {self.background!r}")
        if not 1 <= len(self.instances) <= 6:
            raise ConfigError(
                f"scene needs 1..6 instances, got {len(self.instances)}"
            )
        for a_idx in range(len(self.instances)):
            for b_idx in range(a_idx + 1, len(self.instances)):
                ca = self.instances[a_idx].color
                cb = self.instances[b_idx].color
                if max(abs(x - y) for x, y in zip(ca, cb)) < MIN_COLOR_DISTANCE:
                    raise ConfigError(
                        f"instances {a_idx} and {b_idx} have colors closer "
                        f"than {MIN_COLOR_DISTANCE} per channel"
                    )
        for k, inst in enumerate(self.instances):
            hx, hy = inst.half_extents()
            x, y = inst.start
            if hx * 2 > self.width or hy * 2 > self.height:
                raise ConfigError(f"instance {k} does not fit inside the image")
            if not (hx <= x <= self.width - hx and hy <= y <= self.height - hy):
                raise ConfigError(
                    f"instance {k} is not fully inside the image at frame 0"
                )


@dataclass(frozen=True)
class GroundTruthTrack:
    """Per-frame pixel masks and tight boxes for one object identity.

    Frames where the object is entirely occluded have no entry.
    """

    track_id: int
    category: int
    masks: dict = field(repr=False)
    boxes: dict = field(repr=False)


@dataclass
class SyntheticVideo:
    video_id: int
    frames: np.ndarray      # (T, H, W, 3) float64, 8-bit quantized
    tracks: list
    spec: SceneSpec

    @property
    def frame_count(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class DetectorModel:
    miss_rate: float = 0.0
    box_jitter: float = 0.0
    mask_erosion: int = 0
    score_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ConfigError(f"miss_rate must be in [0, 1], got {self.miss_rate}")
        if self.box_jitter < 0 or self.score_noise < 0:
            raise ConfigError("noise magnitudes must be >= 0")
        if self.mask_erosion < 0:
            raise ConfigError("mask_erosion must be >= 0")


def _advance(position, velocity, low, high):
    """Advance one axis one frame, reflecting off [low, high]."""
    if high <= low:
        # shape fills the axis exactly, nowhere to move
        return low, 0.0
    position = position + velocity
    while position < low or position > high:
        if position < low:
            position = 2.0 * low - position
            velocity = -velocity
        elif position > high:
            position = 2.0 * high - position
            velocity = -velocity
    return position, velocity


def _rasterize(inst, center, px, py):
    cx, cy = center
    if inst.kind == "disk":
        r = inst.size[0]
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    hx, hy = inst.half_extents()
    return (np.abs(px - cx) <= hx) & (np.abs(py - cy) <= hy)


def _background(spec):
    if spec.background == "flat":
        img = np.full((spec.height, spec.width, 3), 0.12)
    else:
        ramp = np.linspace(0.05, 0.3, spec.width)
        img = np.broadcast_to(
            ramp[None, :, None], (spec.height, spec.width, 3)
        ).copy()
    return img


def generate_video(spec, video_id=0):
    """Render a SceneSpec into frames plus exact ground-truth tracks."""
    n = len(spec.instances)
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    px = xs + 0.5
    py = ys + 0.5

    centers = [tuple(map(float, inst.start)) for inst in spec.instances]
    velocities = [tuple(map(float, inst.velocity)) for inst in spec.instances]

    frames = np.empty((spec.frame_count, spec.height, spec.width, 3))
    masks_per_track = [dict() for _ in range(n)]
    boxes_per_track = [dict() for _ in range(n)]

    for t in range(spec.frame_count):
        raw = [
            _rasterize(inst, centers[k], px, py)
            for k, inst in enumerate(spec.instances)
        ]
        image = _background(spec)
        taken = np.zeros((spec.height, spec.width), dtype=bool)
        # later-listed instances occlude earlier ones
        for k in range(n - 1, -1, -1):
            visible = raw[k] & ~taken
            taken |= raw[k]
            if visible.any():
                mask = visible.astype(np.float64)
                masks_per_track[k][t] = mask
                x1, y1, x2, y2 = tight_box(mask)
                boxes_per_track[k][t] = BoundingBox(
                    float(x1), float(y1), float(x2), float(y2)
                )
        for k in range(n):
            image[raw[k]] = spec.instances[k].color
        frames[t] = np.round(image * 255.0) / 255.0

        for k, inst in enumerate(spec.instances):
            hx, hy = inst.half_extents()
            cx, vx = _advance(
                centers[k][0], velocities[k][0], hx, spec.width - hx
            )
            cy, vy = _advance(
                centers[k][1], velocities[k][1], hy, spec.height - hy
            )
            centers[k] = (cx, cy)
            velocities[k] = (vx, vy)

    tracks = [
        GroundTruthTrack(
            track_id=k + 1,
            category=spec.instances[k].category,
            masks=masks_per_track[k],
            boxes=boxes_per_track[k],
        )
        for k in range(n)
    ]
    return SyntheticVideo(
        video_id=video_id, frames=frames, tracks=tracks, spec=spec
    )


def erode_mask(mask, iterations):
    """4-connected binary erosion, `iterations` passes, in pixels."""
    m = np.asarray(mask) > 0
    for _ in range(iterations):
        p = np.pad(m, 1, constant_values=False)
        m = (
            p[1:-1, 1:-1]
            & p[:-2, 1:-1]
            & p[2:, 1:-1]
            & p[1:-1, :-2]
            & p[1:-1, 2:]
        )
    return m.astype(np.float64)


def corrupt_detections(tracks, frame_count, model):
    """Simulate a per-frame detector over ground-truth tracks.

    Every (instance, frame) entry is independently dropped with probability
    miss_rate; survivors get Gaussian box jitter, optional mask erosion
    (entries eroded to nothing are dropped too), and a noisy score. Identities
    are stripped: the output is a bare list of detections per frame.
    """
    rng = np.random.default_rng(model.seed)
    ordered = sorted(tracks, key=lambda tr: tr.track_id)
    per_frame = [[] for _ in range(frame_count)]
    for t in range(frame_count):
        for track in ordered:
            if t not in track.masks:
                continue
            if rng.random() < model.miss_rate:
                continue
            mask = track.masks[t]
            if model.mask_erosion > 0:
                mask = erode_mask(mask, model.mask_erosion)
                if not mask.any():
                    continue
            height, width = mask.shape
            box = track.boxes[t]
            if model.box_jitter > 0:
                jit = rng.normal(0.0, model.box_jitter, size=4)
                x1 = min(max(box.x1 + jit[0], 0.0), width - 1.0)
                y1 = min(max(box.y1 + jit[1], 0.0), height - 1.0)
                x2 = min(max(box.x2 + jit[2], x1 + 1.0), float(width))
                y2 = min(max(box.y2 + jit[3], y1 + 1.0), float(height))
                box = BoundingBox(x1, y1, x2, y2)
            noise = rng.normal(0.0, model.score_noise) if model.score_noise > 0 else 0.0
            score = min(max(1.0 - abs(noise), 0.0), 1.0)
            per_frame[t].append(
                Detection(
                    frame=t,
                    box=box,
                    mask=mask,
                    category=track.category,
                    score=score,
                )
            )
    return per_frame


def random_scene(seed, width=128, height=128, frame_count=24,
                 n_instances=3, background="flat"):
    """Draw a valid SceneSpec: distinct colors, shapes fully inside at frame 0."""
    rng = np.random.default_rng(seed)
    colors = []
    instances = []
    for _ in range(n_instances):
        kind = "disk" if rng.random() < 0.5 else "rectangle"
        for _ in range(1000):
            color = tuple(np.round(rng.uniform(0.25, 1.0, size=3), 3))
            if all(
                max(abs(a - b) for a, b in zip(color, prev)) >= MIN_COLOR_DISTANCE
                for prev in colors
            ):
                break
        else:
            raise InputError("could not draw a sufficiently distinct color")
        colors.append(color)
        if kind == "disk":
            size = (float(rng.uniform(8.0, 15.0)),)
        else:
            size = (float(rng.uniform(14.0, 28.0)), float(rng.uniform(14.0, 28.0)))
        hx = size[0] if kind == "disk" else size[0] / 2.0
        hy = size[0] if kind == "disk" else size[1] / 2.0
        start = (
            float(rng.uniform(hx, width - hx)),
            float(rng.uniform(hy, height - hy)),
        )
        velocity = (
            float(rng.uniform(-2.5, 2.5)),
            float(rng.uniform(-2.5, 2.5)),
        )
        instances.append(
            InstanceSpec(kind=kind, color=color, start=start, size=size,
                         velocity=velocity)
        )
    return SceneSpec(
        width=width,
        height=height,
        frame_count=frame_count,
        background=background,
        instances=tuple(instances),
        seed=int(np.random.default_rng(seed).integers(2**31)),
    )


@dataclass
class BenchmarkBundle:
    """The fixed benchmark: videos, the detector model, and its detections."""

    seed: int
    videos: list
    detector: DetectorModel
    detections: list    # [video][frame] -> list of Detection

    @property
    def total_instances(self):
        return sum(len(v.tracks) for v in self.videos)


SUITE_VIDEOS = 20
SUITE_MIN_INSTANCES = 2
SUITE_MAX_INSTANCES = 4
SUITE_MISS_RATE = 0.3
SUITE_BOX_JITTER = 1.5
SUITE_SCORE_NOISE = 0.1


def build_suite(seed, detector, n_videos=SUITE_VIDEOS, width=128, height=128,
                frame_count=24, min_instances=SUITE_MIN_INSTANCES,
                max_instances=SUITE_MAX_INSTANCES, background="flat"):
    """Generate a bundle of random videos plus detections for one detector.

    Per-video scenes and detector streams use seeds derived from `seed`, so
    equal arguments give identical bundles.
    """
    if n_videos < 1:
        raise ConfigError(f"n_videos must be >= 1, got {n_videos}")
    if not 1 <= min_instances <= max_instances:
        raise ConfigError(
            f"need 1 <= min_instances <= max_instances, got "
            f"{min_instances}..{max_instances}"
        )
    master = np.random.default_rng(seed)
    scene_seeds = master.integers(2**32, size=n_videos)
    detector_seeds = master.integers(2**32, size=n_videos)
    counts = master.integers(min_instances, max_instances + 1, size=n_videos)

    videos, detections = [], []
    for i in range(n_videos):
        spec = random_scene(
            int(scene_seeds[i]),
            width=width,
            height=height,
            frame_count=frame_count,
            n_instances=int(counts[i]),
            background=background,
        )
        video = generate_video(spec, video_id=i + 1)
        videos.append(video)
        per_video_model = dataclasses.replace(
            detector, seed=int(detector_seeds[i])
        )
        detections.append(
            corrupt_detections(video.tracks, video.frame_count, per_video_model)
        )
    return BenchmarkBundle(
        seed=seed, videos=videos, detector=detector, detections=detections
    )


def standard_suite(seed=7, mask_erosion=0):
    """The fixed 20-video benchmark bundle used by the end-to-end checks.

    128x128 frames, 24 frames per video, 2..4 instances each, 30% detector
    miss rate and 1.5 px box jitter. mask_erosion is exposed for the
    substitution-ladder study; everything else is pinned.
    """
    detector = DetectorModel(
        miss_rate=SUITE_MISS_RATE,
        box_jitter=SUITE_BOX_JITTER,
        mask_erosion=mask_erosion,
        score_noise=SUITE_SCORE_NOISE,
        seed=seed,
    )
    return build_suite(seed, detector)
