"""Training loop for the mask head: SGD with momentum and a step-decay
learning-rate schedule, plus the finite-difference gradient audit."""

import math
from dataclasses import dataclass, field

import numpy as np

from .affinity import AttentionMap, default_propagator
from .encoder import FrameEncoder
from .errors import ConfigError, ContractError, InputError
from .grids import FeatureGrid, downsample_binary, elementwise_scale
from .head import (
    PROB_CLAMP,
    SIGMOID_CLAMP,
    _run_head,
    attended_forward,
    attention_loss,
    head_gradients,
    init_head_params,
    mask_loss,
)
from .validation import check_binary_mask, check_positive

_SAMPLE_ATTEMPTS = 200


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 0.005
    momentum: float = 0.9
    decay_factor: float = 10.0
    decay_points: tuple = (8.0 / 12.0, 11.0 / 12.0)
    delta_max: int = 5
    attention_loss_weight: float = 1.0
    attention_loss_mode: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        check_positive("lr", self.lr)
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        check_positive("decay_factor", self.decay_factor)
        if self.delta_max < 1:
            raise ConfigError(f"delta_max must be >= 1, got {self.delta_max}")
        if self.attention_loss_weight < 0:
            raise ConfigError("attention_loss_weight must be >= 0")
        if self.attention_loss_mode not in ("standard", "literal"):
            raise ConfigError(
                f"unknown attention_loss_mode {self.attention_loss_mode!r}"
            )
        pts = tuple(float(p) for p in self.decay_points)
        if any(not 0.0 < p < 1.0 for p in pts):
            raise ConfigError(f"decay_points must lie in (0, 1), got {pts}")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ConfigError(f"decay_points must be increasing, got {pts}")
        object.__setattr__(self, "decay_points", pts)


def learning_rate_at(step, cfg):
    """Right-continuous step schedule: the rate drops by 1/decay_factor the
    moment a decay point is reached (thresholds at int(fraction * steps))."""
    lr = cfg.lr
    for fraction in cfg.decay_points:
        if step >= int(fraction * cfg.steps):
            lr /= cfg.decay_factor
    return lr


def sgd_step(params, grads, lr, momentum, velocity=None):
    """Classic momentum update: v <- momentum*v + g; theta <- theta - lr*v.

    Returns (new params, new velocity); inputs are not mutated.
    """
    if velocity is None:
        velocity = params.zeros_like()
    new_velocity = velocity.map(lambda v, g: momentum * v + g, grads)
    new_params = params.map(lambda p, v: p - lr * v, new_velocity)
    return new_params, new_velocity


def _valid_pairs_exist(videos, delta_max):
    for video in videos:
        n_frames = len(video.frames)
        for track in video.tracks:
            frames = sorted(track.masks)
            have = set(frames)
            for t in frames:
                for delta in range(1, min(delta_max, n_frames - 1) + 1):
                    if t - delta in have:
                        return True
    return False


def _grid_targets(mask, grid_shape):
    """Downsample a pixel mask to attention resolution and to the head's
    doubled output resolution."""
    h, w = mask.shape
    gh, gw = grid_shape
    if h % (2 * gh) != 0 or w % (2 * gw) != 0:
        raise ConfigError(
            f"image size {(h, w)} is not divisible by twice the grid "
            f"{grid_shape}; pick a stride that divides the image evenly twice"
        )
    gt_attention = downsample_binary(mask, (gh, gw))
    gt_head = downsample_binary(mask, (2 * gh, 2 * gw))
    return gt_attention, gt_head


def train(videos, cfg, encoder=None, propagator=None, init_params=None,
          hidden_channels=16, on_step=None):
    """Train the head on ground-truth tracks of synthetic videos.

    Each step samples a video, a frame offset delta in [1, delta_max], a
    frame t >= delta, and an instance visible at both t and t - delta; the
    instance's box at t - delta is propagated into frame t to build the
    attention, and the head is supervised with the instance's mask at t.
    hidden_channels only applies when init_params is None; on_step, when
    given, is called as on_step(step, report) after each update.
    Deterministic given cfg.seed. Returns (params, per-step loss reports).
    """
    videos = list(videos)
    if not videos:
        raise InputError("training requires at least one video")
    if encoder is None:
        encoder = FrameEncoder()
    if propagator is None:
        propagator = default_propagator()
    if not _valid_pairs_exist(videos, cfg.delta_max):
        raise InputError(
            "no video contains an instance visible in two frames within "
            f"delta_max={cfg.delta_max}"
        )

    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(sample_seed)

    feature_cache = {}

    def features_of(video, t):
        key = (video.video_id, t)
        if key not in feature_cache:
            feature_cache[key] = encoder.encode(video.frames[t])
        return feature_cache[key]

    if init_params is None:
        probe = features_of(videos[0], 0)
        init_params = init_head_params(
            in_channels=probe.channels,
            hidden_channels=hidden_channels,
            seed=init_seed,
        )
    params = init_params
    velocity = params.zeros_like()
    curve = []

    for step in range(cfg.steps):
        picked = None
        for _ in range(_SAMPLE_ATTEMPTS):
            video = videos[int(rng.integers(len(videos)))]
            n_frames = len(video.frames)
            if n_frames < 2:
                continue
            delta = int(rng.integers(1, min(cfg.delta_max, n_frames - 1) + 1))
            t = int(rng.integers(delta, n_frames))
            candidates = [
                tr for tr in video.tracks
                if t in tr.masks and (t - delta) in tr.masks
            ]
            if candidates:
                picked = (video, t, delta, candidates[int(rng.integers(len(candidates)))])
                break
        if picked is None:
            raise ContractError(
                f"failed to sample a training pair after {_SAMPLE_ATTEMPTS} tries"
            )
        video, t, delta, track = picked

        f_t = features_of(video, t)
        f_prev = features_of(video, t - delta)
        affinity = propagator.affinity(f_t, f_prev)
        attention = propagator.attention_from_affinity(
            affinity, track.boxes[t - delta], f_prev.stride
        )
        gt_attention, gt_head = _grid_targets(
            track.masks[t], (f_t.height, f_t.width)
        )

        grads, report = head_gradients(
            params,
            f_t,
            attention,
            gt_head,
            gt_attention,
            attention_weight=cfg.attention_loss_weight,
            mode=cfg.attention_loss_mode,
        )
        params, velocity = sgd_step(
            params, grads, learning_rate_at(step, cfg), cfg.momentum, velocity
        )
        curve.append(report)
        if on_step is not None:
            on_step(step, report)

    return params, curve


@dataclass(frozen=True)
class GradientCheckReport:
    fixtures: int
    tolerance: float
    max_relative_error: float
    per_fixture: tuple = field(repr=False, default=())
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self):
        return self.max_relative_error <= self.tolerance


def _total_loss(params, features, attention, gt_head, gt_attention, weight, mode):
    pred = attended_forward(params, features, attention)
    return mask_loss(pred, gt_head) + weight * attention_loss(
        attention, gt_attention, mode
    )


def _probe_terms(params, features, attention, gt_head):
    """Per-pixel cross-entropy terms of the parameter-dependent loss, plus a
    fingerprint of every piecewise-linear branch taken (ReLU signs,
    probability clamps).

    The attention loss is constant in the parameters (the attention map is
    an input), so only the mask term varies under a parameter perturbation;
    probing it alone computes the same difference with less rounding.
    """
    guided = elementwise_scale(features, attention.object_map)
    out, (conv_cache, _, _, s) = _run_head(params, guided.data)
    pattern = b"".join((z > 0.0).tobytes() for _, z in conv_cache)
    pattern += ((out > PROB_CLAMP) & (out < 1.0 - PROB_CLAMP)).tobytes()
    pattern += ((s > SIGMOID_CLAMP) & (s < 1.0 - SIGMOID_CLAMP)).tobytes()
    pc = np.clip(out, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = np.where(gt_head > 0.5, -np.log(pc), -np.log1p(-pc))
    return terms.ravel(), pattern


def finite_difference_errors(
    params, features, attention, gt_head, gt_attention,
    weight=1.0, mode="standard", step_size=1e-4,
):
    """Compare analytic gradients against central differences entry by entry.

    The difference of the two probe losses is accumulated per pixel with
    exact summation; subtracting matched terms before summing keeps the
    rounding noise far below the 1e-8 denominator floor even for gradient
    entries that nearly cancel. Probes whose window straddles a ReLU or
    clamp kink measure a blend of two branch derivatives rather than the
    derivative, so they are excluded. Returns (max relative error, entries
    checked, entries skipped).
    """
    analytic, _ = head_gradients(
        params, features, attention, gt_head, gt_attention, weight, mode
    )
    g = check_binary_mask("gt_head", gt_head)
    _, base_pattern = _probe_terms(params, features, attention, g)
    n = g.size
    worst = 0.0
    checked = 0
    skipped = 0
    names = [name for name, _ in params.named_arrays()]
    for block_index, name in enumerate(names):
        grad_block = analytic.named_arrays()[block_index][1]
        for idx in np.ndindex(grad_block.shape):
            def perturbed(shift, _i=block_index, _idx=idx):
                arrays = [np.copy(a) for _, a in params.named_arrays()]
                arrays[_i][_idx] += shift
                moved = params.from_arrays(arrays)
                return _probe_terms(moved, features, attention, g)

            terms_plus, pattern_plus = perturbed(step_size)
            terms_minus, pattern_minus = perturbed(-step_size)
            if pattern_plus != base_pattern or pattern_minus != base_pattern:
                skipped += 1
                continue
            fd = math.fsum(terms_plus - terms_minus) / n / (2 * step_size)
            a = grad_block[idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, skipped


def gradient_check(
    fixtures=25,
    seed=0,
    grid_shape=(4, 4),
    channels=2,
    hidden_channels=4,
    step_size=1e-4,
    tolerance=1e-4,
):
    """Audit analytic gradients on random small fixtures.

    Every parameter of a freshly initialized head is compared against a
    central finite difference of the total loss; the report carries the
    worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    h, w = grid_shape
    per_fixture = []
    worst = 0.0
    total_checked = 0
    total_skipped = 0
    for k in range(fixtures):
        params = init_head_params(
            in_channels=channels,
            hidden_channels=hidden_channels,
            seed=rng.integers(2**32),
        )
        features = FeatureGrid(rng.random((h, w, channels)), stride=8)
        obj = rng.random((h, w))
        attention = AttentionMap(obj, 1.0 - obj)
        gt_head = (rng.random((2 * h, 2 * w)) < 0.5).astype(float)
        gt_attention = (rng.random((h, w)) < 0.5).astype(float)
        err, checked, skipped = finite_difference_errors(
            params, features, attention, gt_head, gt_attention,
            weight=float(rng.uniform(0.5, 2.0)),
            mode="standard" if k % 2 == 0 else "literal",
            step_size=step_size,
        )
        per_fixture.append(err)
        worst = max(worst, err)
        total_checked += checked
        total_skipped += skipped
    return GradientCheckReport(
        fixtures=fixtures,
        tolerance=tolerance,
        max_relative_error=worst,
        per_fixture=tuple(per_fixture),
        checked=total_checked,
        skipped=total_skipped,
    )
