"""Direct per-object minimisation of the combined weak-supervision loss.

Each object is fitted from several yaw starts (plus, for boxes thinner than
the class ratio prior, two starts completed away from the sensor) with
sign-based first-order descent: every parameter carries its own step size that grows while its
gradient sign is stable and shrinks when it flips. A step is accepted only
if the total loss strictly decreases; otherwise all steps are halved and the
move retried, up to ten times.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AllStartsFailedError, NonPositiveDepthError, PseudoBoxError
from .geometry import Box3D, CameraCalibration, canonical_box
from .losses import PAL_CANONICAL, LossBreakdown, LossProblem, LossWeights
from .preprocessing import INDOOR, INIT_FROM_GT, MIN_BOX_DIM, OUTDOOR, ObjectSample

logger = logging.getLogger(__name__)

# base step per face offset (m) and for yaw (rad)
BASE_STEPS = np.array([0.02, 0.02, 0.02, 0.02, 0.02, 0.02, 0.01])
MAX_HALVINGS = 10
STEP_GROW = 1.2
STEP_SHRINK = 0.5
MAX_STEP_FACTOR = 10.0
HISTORY_WINDOW = 10
GRAD_ZERO = 1e-12
# boundary residual (px) below which an image side counts as matched
KINK_TOL = 1e-3

DEFAULT_RATIO_PRIORS = {"Car": 2.4}


@dataclass(frozen=True)
class FitConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1.0
    max_iterations: int = 200
    yaw_starts: int = 4
    ratio_priors: dict = field(default_factory=lambda: dict(DEFAULT_RATIO_PRIORS))
    mode: str = OUTDOOR
    border_margin: float = 2.0
    convergence_epsilon: float = 1e-4
    seed: int = 0
    pal_mode: str = PAL_CANONICAL

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.yaw_starts < 1:
            raise ValueError("yaw_starts must be >= 1")
        if self.mode not in (OUTDOOR, INDOOR):
            raise ValueError(f"unknown mode {self.mode!r}")
        for cls, r in self.ratio_priors.items():
            if not r >= 1:
                raise ValueError(f"ratio prior for {cls!r} must be >= 1, got {r}")

    @classmethod
    def kitti(cls, **kw) -> "FitConfig":
        return cls(weights=LossWeights(0.3, 0.1, 0.1), mode=OUTDOOR, **kw)

    @classmethod
    def sunrgbd(cls, **kw) -> "FitConfig":
        return cls(weights=LossWeights(2e-3, 2e-3, 1e-4), mode=INDOOR, **kw)


@dataclass
class StartResult:
    box: Box3D
    initial_losses: LossBreakdown
    final_losses: LossBreakdown
    iterations_used: int
    converged: bool
    trajectory: list[float] = field(default_factory=list)


@dataclass
class FitResult:
    box: Box3D
    final_losses: LossBreakdown
    initial_losses: LossBreakdown
    iterations_used: int
    start_index: int
    converged: bool
    starts: list[StartResult] = field(default_factory=list, repr=False)


@dataclass
class FitFailure:
    index: int
    reason: str


def _enclosing_at(box: Box3D, offset: float) -> Box3D:
    """Smallest box at yaw ``box.yaw + offset`` containing ``box``'s BEV rectangle."""
    c, s = abs(math.cos(offset)), abs(math.sin(offset))
    # quarter turns are exact swaps
    if abs(offset - math.pi / 2.0) < 1e-12:
        l, w = box.w, box.l
    else:
        l = box.l * c + box.w * s
        w = box.l * s + box.w * c
    return Box3D.from_yaw(box.cx, box.cy, box.cz, l, w, box.h, box.yaw + offset)


def yaw_candidates(initial_box: Box3D, k: int) -> list[Box3D]:
    """``k`` starts with yaw offsets ``j * pi / k`` enclosing the initial box."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [initial_box if j == 0 else _enclosing_at(initial_box, j * math.pi / k) for j in range(k)]


def completion_candidates(initial_box: Box3D, prior: float, sensor_xy) -> list[Box3D]:
    """Starts that extend a shallow initial box away from the sensor.

    A cloud covering one face gives a box with little depth: a sliver for a
    side view, roughly the car's width for a rear view. Descent rarely grows
    such a box because the points on its edges keep the tightness term low,
    so the depth is set here instead. Each BEV axis in turn is taken as the
    visible face of extent ``F``; the other axis grows away from the sensor
    to ``F / prior`` (face is the long side) or ``F * prior`` (face is the
    short side). Only hypotheses that enlarge the box are returned.
    """
    b = initial_box
    center = np.array([b.cx, b.cy])
    ax_l = np.array([b.yaw_cos, b.yaw_sin])
    ax_w = np.array([-b.yaw_sin, b.yaw_cos])
    sensor = np.asarray(sensor_xy, dtype=float)
    out = []
    # (face extent, current depth, depth axis, depth is the box's w)
    for face, cur, axis, along_w in ((b.l, b.w, ax_w, True), (b.w, b.l, ax_l, False)):
        away = axis if axis @ (center - sensor) >= 0 else -axis
        for depth in (face / prior, face * prior):
            if not depth > cur:
                continue
            cx, cy = center + away * (depth - cur) / 2.0
            if along_w:
                out.append(Box3D.from_yaw(cx, cy, b.cz, b.l, depth, b.h, b.yaw))
            else:
                out.append(Box3D.from_yaw(cx, cy, b.cz, depth, b.w, b.h, b.yaw))
    return out


def side_mask(rect, image_size, margin: float) -> np.ndarray:
    """1 for constraint sides to keep, 0 for sides within ``margin`` of the border."""
    W, H = image_size
    return np.array(
        [
            rect.x_min > margin,
            rect.y_min > margin,
            rect.x_max < W - margin,
            rect.y_max < H - margin,
        ],
        dtype=float,
    )


def _chart_grad(g: np.ndarray, yaw: float) -> np.ndarray:
    """Gradient in face-offset coordinates from the gradient in ``(x, y, z, l, w, h, yaw)``."""
    c, s = math.cos(yaw), math.sin(yaw)
    gu = g[0] * c + g[1] * s
    gv = -g[0] * s + g[1] * c
    return np.array(
        [g[3] + gu / 2, g[3] - gu / 2, g[4] + gv / 2, g[4] - gv / 2, g[5] + g[2] / 2, g[5] - g[2] / 2, g[6]]
    )


def _chart_step(theta: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Apply face offsets ``dq`` (front, back, left, right, top, bottom, yaw) to ``theta``."""
    c, s = math.cos(theta[6]), math.sin(theta[6])
    du = (dq[0] - dq[1]) / 2
    dv = (dq[2] - dq[3]) / 2
    out = theta.copy()
    out[0] += c * du - s * dv
    out[1] += s * du + c * dv
    out[2] += (dq[4] - dq[5]) / 2
    out[3] += dq[0] + dq[1]
    out[4] += dq[2] + dq[3]
    out[5] += dq[4] + dq[5]
    out[6] += dq[6]
    return out


def _chart_matrix(yaw: float) -> np.ndarray:
    """Linear map from face offsets to a parameter change at ``yaw``."""
    return np.column_stack([_chart_step(np.array([0, 0, 0, 0, 0, 0, yaw], dtype=float), e) - [0, 0, 0, 0, 0, 0, yaw]
                            for e in np.eye(7)])


def _kink_step(problem: LossProblem, theta, f, g, scale, frozen):
    """One backtracking step along the manifold of image sides that already match.

    Sign steps stall where several boundary residuals sit at their L1 kinks at
    once. Here the smooth part of the gradient is projected onto the null space
    of the matched sides' Jacobian so the move keeps them matched to first
    order. Returns the accepted ``(theta, f)`` or None.
    """
    wts = problem.weights
    C = _chart_matrix(theta[6]) * scale
    for j in frozen:
        C[:, j] = 0.0
    gz = C.T @ g
    if problem.use_bpl:
        res, jac = problem.side_residuals(theta)
        active = (np.abs(res) < KINK_TOL) & (problem.mask > 0)
        if np.any(active):
            # drop the (arbitrary) subgradient of the matched sides
            gz = gz - wts.lambda_bpl * (np.sign(res[active]) @ jac[active]) @ C
            A = jac[active] @ C
            gz = gz - np.linalg.pinv(A) @ (A @ gz)
    peak = np.max(np.abs(gz))
    if not peak > GRAD_ZERO:
        return None
    dz = -gz / peak
    t = MAX_STEP_FACTOR
    for _ in range(MAX_HALVINGS + 1):
        cand = theta + C @ (t * dz)
        cand[3:6] = np.maximum(cand[3:6], MIN_BOX_DIM)
        try:
            fc = problem.total(cand)
        except NonPositiveDepthError:
            fc = math.inf
        if fc < f:
            return cand, fc
        t *= 0.5
    return None


def _descend(problem: LossProblem, theta0: np.ndarray, config: FitConfig, frozen=()):
    theta = np.array(theta0, dtype=float)
    f = problem.total(theta)
    f_init = f
    hist = [f]
    base = BASE_STEPS * config.learning_rate
    steps = base.copy()
    max_steps = base * MAX_STEP_FACTOR
    prev_sign = np.zeros(7)
    window_start = 0
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        _, g = problem.value_and_grad(theta)
        gq = _chart_grad(g, theta[6])
        d = np.where(np.abs(gq) > GRAD_ZERO, np.sign(gq), 0.0)
        for j in frozen:
            d[j] = 0.0
        if not np.any(d):
            converged = True
            it -= 1
            break
        flips = d * prev_sign < 0
        steps = np.where(flips, steps * STEP_SHRINK, steps)
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = _chart_step(theta, -steps * d)
            cand[3:6] = np.maximum(cand[3:6], MIN_BOX_DIM)
            try:
                fc = problem.total(cand)
            except NonPositiveDepthError:
                fc = math.inf
            if fc < f:
                accepted = True
                break
            steps = steps * 0.5
        stalled = not accepted or (
            len(hist) - window_start >= HISTORY_WINDOW
            and hist[-HISTORY_WINDOW] - fc < config.convergence_epsilon
        )
        if stalled:
            escape = _kink_step(problem, theta, f, g, base, frozen)
            if escape is not None and f - escape[1] >= config.convergence_epsilon:
                cand, fc = escape
                d = np.zeros(7)
                steps = base.copy()
                window_start = len(hist)
            elif accepted:
                theta, f = cand, fc
                hist.append(f)
                converged = True
                break
            else:
                converged = True
                it -= 1
                break
        assert fc < f, "accepted step must decrease the loss"
        theta, f = cand, fc
        hist.append(f)
        steps = np.where(d * prev_sign > 0, np.minimum(steps * STEP_GROW, max_steps), steps)
        prev_sign = d
    assert f <= f_init
    return theta, it, converged, hist


def fit_object(sample: ObjectSample, calib: CameraCalibration, config: FitConfig | None = None) -> FitResult:
    """Fit one object from every start and keep the lowest final loss.

    Starts are the ``config.yaw_starts`` yaw candidates followed by any
    completion candidates (only with an active ratio prior, and not for a
    sample flagged ``INIT_FROM_GT``).
    """
    config = config or FitConfig()
    prior = config.ratio_priors.get(sample.class_label)
    weights = config.weights
    if prior is None and weights.lambda_srl > 0:
        logger.info("no ratio prior for class %r; ratio term disabled", sample.class_label)
        weights = replace(weights, lambda_srl=0.0)
    mask = side_mask(sample.constraint_rect, sample.image_size, config.border_margin)
    problem = LossProblem(
        sample.in_box_points, sample.constraint_rect, calib, weights, prior, mask, config.pal_mode
    )
    # z and h are observed only through the vertical image sides; with no
    # signal there they stay anchored to the points' z-range from the initial box
    frozen = ()
    if config.mode == OUTDOOR and (weights.lambda_bpl == 0 or (mask[1] == 0 and mask[3] == 0)):
        frozen = (4, 5)

    starts: list[StartResult] = []
    errors = []
    candidates = yaw_candidates(sample.initial_box, config.yaw_starts)
    # completion repairs the shallow box derived from a one-face cloud; a
    # supplied initial box is taken as is
    if prior is not None and weights.lambda_srl > 0 and INIT_FROM_GT not in sample.flags:
        sensor = calib.camera_to_cloud(np.zeros(3))[0, :2]
        candidates += completion_candidates(sample.initial_box, prior, sensor)
    for cand in candidates:
        theta0 = cand.to_vector()
        try:
            init = problem.breakdown(theta0)
            theta, iters, converged, hist = _descend(problem, theta0, config, frozen)
        except PseudoBoxError as exc:
            errors.append(exc)
            starts.append(None)
            continue
        box = Box3D.from_vector(theta)
        starts.append(StartResult(box, init, problem.breakdown(theta), iters, converged, hist))

    valid = [(s.final_losses.total, j) for j, s in enumerate(starts) if s is not None]
    if not valid:
        raise AllStartsFailedError(f"every start failed for object {sample.index}: {errors[0]}")
    _, best = min(valid)
    chosen = starts[best]
    initial = starts[0].initial_losses if starts[0] is not None else chosen.initial_losses
    return FitResult(
        box=canonical_box(chosen.box),
        final_losses=chosen.final_losses,
        initial_losses=initial,
        iterations_used=chosen.iterations_used,
        start_index=best,
        converged=chosen.converged,
        starts=starts,
    )


def _fit_one(args):
    sample, calib, config = args
    try:
        return fit_object(sample, calib, config)
    except PseudoBoxError as exc:
        return FitFailure(sample.index, f"{type(exc).__name__}: {exc}")


def fit_many(jobs, config: FitConfig | None = None, workers: int = 1):
    """Fit ``(sample, calib)`` pairs, keeping input order whatever ``workers`` is."""
    config = config or FitConfig()
    args = [(sample, calib, config) for sample, calib in jobs]
    if workers <= 1 or len(args) <= 1:
        return [_fit_one(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fit_one, args, chunksize=max(1, len(args) // (4 * workers))))


def fit_scene(samples, calib: CameraCalibration, config: FitConfig | None = None, workers: int = 1):
    """Fit every sample; failures come back as :class:`FitFailure` in place.

    Results are ordered like ``samples`` regardless of ``workers``.
    """
    return fit_many([(s, calib) for s in samples], config, workers)
