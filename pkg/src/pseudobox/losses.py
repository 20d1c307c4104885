"""Weak-supervision losses over 7-DoF box parameters and their gradients.

The parameter vector used throughout is ``theta = (x, y, z, l, w, h, yaw)``.
Three terms are combined:

* boundary projection loss (pixels): L1 distance between the min bounding
  rectangle of the projected box corners and the constraint rectangle;
* semantic ratio loss: ``|max(l, w) / min(l, w) - r|`` for a class prior
  ``r >= 1``;
* point-to-box alignment (metres): a coverage term that penalises points
  outside the BEV rectangle and a tightness term pulling every point to its
  nearest BEV edge.

``LossProblem`` precomputes the per-object arrays so the optimizer can
evaluate values, analytic gradients and kink signatures cheaply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepthError
from .geometry import MIN_DEPTH, Box3D, CameraCalibration, Rect2D, _CORNER_SIGNS

PAL_CANONICAL = "canonical"
PAL_LITERAL = "literal"

# central-difference steps: positions/dimensions in metres, yaw in radians
NUMERIC_STEPS = np.array([1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-5])
STENCIL_MIN_DIM = 0.05

PARAM_NAMES = ("x", "y", "z", "l", "w", "h", "yaw")


@dataclass(frozen=True)
class LossWeights:
    lambda_bpl: float = 0.3
    lambda_srl: float = 0.1
    lambda_pal: float = 0.1

    def __post_init__(self):
        for name in ("lambda_bpl", "lambda_srl", "lambda_pal"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.lambda_bpl * c, self.lambda_srl * c, self.lambda_pal * c)


@dataclass(frozen=True)
class LossBreakdown:
    bpl: float
    srl: float
    pal_coverage: float
    pal_tightness: float
    total: float

    def as_dict(self) -> dict:
        return {
            "bpl": self.bpl,
            "srl": self.srl,
            "pal_coverage": self.pal_coverage,
            "pal_tightness": self.pal_tightness,
            "total": self.total,
        }


@dataclass(frozen=True)
class GradientResult:
    """Gradient over ``(x, y, z, l, w, h, yaw)`` plus per-coordinate kink flags."""

    grad: np.ndarray
    flagged: np.ndarray

    @property
    def non_differentiable(self) -> bool:
        return bool(np.any(self.flagged))


def yaw_grad_to_sincos(g_yaw: float, box: Box3D) -> tuple[float, float]:
    """Chain rule from yaw to the (sin, cos) pair, yaw = atan2(sin, cos)."""
    return g_yaw * box.yaw_cos, -g_yaw * box.yaw_sin


def _sign(x):
    return np.sign(x)


class LossProblem:
    """Loss terms for one object, evaluated at raw parameter vectors.

    ``side_mask`` selects which of ``(x_min, y_min, x_max, y_max)`` enter the
    boundary projection loss. A ``prior_ratio`` of None disables the ratio term.
    """

    def __init__(
        self,
        points,
        constraint_rect: Rect2D,
        calib: CameraCalibration,
        weights: LossWeights,
        prior_ratio=None,
        side_mask=None,
        pal_mode: str = PAL_CANONICAL,
    ):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if pal_mode not in (PAL_CANONICAL, PAL_LITERAL):
            raise ValueError(f"unknown pal_mode {pal_mode!r}")
        if prior_ratio is not None and prior_ratio < 1:
            raise ValueError(f"prior_ratio must be >= 1, got {prior_ratio}")
        self.px = pts[:, 0].copy()
        self.py = pts[:, 1].copy()
        self.target = constraint_rect.as_array()
        self.M = calib.matrix
        self.depth_scale = float(np.linalg.norm(self.M[2, :3]))
        self.weights = weights
        self.prior = None if prior_ratio is None else float(prior_ratio)
        self.mask = np.ones(4) if side_mask is None else np.asarray(side_mask, dtype=float).reshape(4)
        self.pal_mode = pal_mode
        self.use_bpl = weights.lambda_bpl > 0 and np.any(self.mask > 0)
        self.use_srl = weights.lambda_srl > 0 and self.prior is not None
        self.use_pal = weights.lambda_pal > 0 and len(pts) > 0

    # -- individual terms -------------------------------------------------

    def _corners(self, theta):
        x, y, z, l, w, h, a = theta
        c, s = math.cos(a), math.sin(a)
        ox = _CORNER_SIGNS[:, 0] * l
        oy = _CORNER_SIGNS[:, 1] * w
        X = x + c * ox - s * oy
        Y = y + s * ox + c * oy
        Z = z + _CORNER_SIGNS[:, 2] * h
        M = self.M
        q0 = M[0, 0] * X + M[0, 1] * Y + M[0, 2] * Z + M[0, 3]
        q1 = M[1, 0] * X + M[1, 1] * Y + M[1, 2] * Z + M[1, 3]
        q2 = M[2, 0] * X + M[2, 1] * Y + M[2, 2] * Z + M[2, 3]
        if np.any(q2 <= MIN_DEPTH * self.depth_scale):
            raise NonPositiveDepthError(f"box corner at depth {q2.min() / self.depth_scale:.6g} m")
        return c, s, ox, oy, q2, q0 / q2, q1 / q2

    def _sides(self, theta, want_jac):
        c, s, ox, oy, q2, u, v = self._corners(theta)
        idx = np.array([np.argmin(u), np.argmin(v), np.argmax(u), np.argmax(v)])
        ext = np.array([u[idx[0]], v[idx[1]], u[idx[2]], v[idx[3]]])
        jac = None
        if want_jac:
            M = self.M
            jac = np.zeros((4, 7))
            for k in range(4):
                j = idx[k]
                row = 0 if k in (0, 2) else 1
                coord = u[j] if row == 0 else v[j]
                dp = (M[row, :3] - coord * M[2, :3]) / q2[j]
                sx, sy, sz = _CORNER_SIGNS[j]
                dx_da = -s * ox[j] - c * oy[j]
                dy_da = c * ox[j] - s * oy[j]
                jac[k] = (
                    dp[0],
                    dp[1],
                    dp[2],
                    dp[0] * c * sx + dp[1] * s * sx,
                    -dp[0] * s * sy + dp[1] * c * sy,
                    dp[2] * sz,
                    dp[0] * dx_da + dp[1] * dy_da,
                )
        return ext, idx, jac

    def side_residuals(self, theta):
        """Signed ``projected - target`` per rect side and its Jacobian (4 x 7).

        Masked sides come back as zero rows.
        """
        ext, _, jac = self._sides(np.asarray(theta, dtype=float), True)
        keep = self.mask > 0
        return np.where(keep, ext - self.target, 0.0), jac * keep[:, None]

    def _bpl(self, theta, want_grad):
        ext, idx, jac = self._sides(theta, want_grad)
        diff = ext - self.target
        value = float(np.sum(self.mask * np.abs(diff)))
        sgn = _sign(diff) * self.mask
        grad = sgn @ jac if want_grad else None
        return value, grad, (idx, sgn)

    def _srl(self, theta, want_grad):
        l, w = theta[3], theta[4]
        if l >= w:
            q = l / w
            dq = np.array([1.0 / w, -l / (w * w)])
        else:
            q = w / l
            dq = np.array([-w / (l * l), 1.0 / l])
        diff = q - self.prior
        value = abs(diff)
        grad = None
        tie = l == w
        if want_grad:
            grad = np.zeros(7)
            if not tie:
                grad[3:5] = _sign(diff) * dq
        return value, grad, (int(np.sign(l - w)), int(np.sign(diff)))

    def _pal_value(self, theta):
        x, y, _, l, w, _, a = theta
        c, s = math.cos(a), math.sin(a)
        dx = self.px - x
        dy = self.py - y
        au = np.abs(c * dx + s * dy)
        av = np.abs(-s * dx + c * dy)
        hl, hw = 0.5 * l, 0.5 * w
        # min over the four edge distances, split by axis
        tight = float(np.sum(np.minimum(np.abs(au - hl), np.abs(av - hw))))
        if self.pal_mode == PAL_CANONICAL:
            cov = float(np.sum(np.maximum(au - hl, 0.0)) + np.sum(np.maximum(av - hw, 0.0)))
        else:
            # the pair of edge terms is symmetric in the sign of u, and the
            # farther edge always contributes |u| (resp. |v|)
            cov = float(
                np.sum(np.maximum(np.abs(au - hl) - hl, 0.0) + au)
                + np.sum(np.maximum(np.abs(av - hw) - hw, 0.0) + av)
            )
        return cov, tight

    def _pal_fast(self, theta):
        """Values and gradient without the kink signature (same subgradient choice)."""
        x, y, _, l, w, _, a = theta
        c, s = math.cos(a), math.sin(a)
        dx = self.px - x
        dy = self.py - y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        hl, hw = 0.5 * l, 0.5 * w
        su = np.where(u >= 0, 1.0, -1.0)
        sv = np.where(v >= 0, 1.0, -1.0)
        tu = np.abs(u) - hl
        tv = np.abs(v) - hw
        du, dv = np.abs(tu), np.abs(tv)
        pick_u = du <= dv
        tight = float(np.sum(np.where(pick_u, du, dv)))
        gu, gv = np.sign(tu), np.sign(tv)
        Cu = np.where(pick_u, gu * su, 0.0)
        Cl = np.where(pick_u, -0.5 * gu, 0.0)
        Cv = np.where(pick_u, 0.0, gv * sv)
        Cw = np.where(pick_u, 0.0, -0.5 * gv)
        if self.pal_mode == PAL_CANONICAL:
            act_u, act_v = tu > 0, tv > 0
            cov = float(np.sum(tu[act_u]) + np.sum(tv[act_v]))
            Cu = Cu + np.where(act_u, su, 0.0)
            Cl = Cl - 0.5 * act_u
            Cv = Cv + np.where(act_v, sv, 0.0)
            Cw = Cw - 0.5 * act_v
        else:
            act_u, act_v = du > hl, dv > hw
            cov = float(np.sum((du - hl)[act_u]) + np.sum((dv - hw)[act_v]) + np.sum(np.abs(u)) + np.sum(np.abs(v)))
            Cu = Cu + np.where(act_u, gu * su, 0.0) + np.sign(u)
            Cl = Cl + np.where(act_u, -0.5 * gu - 0.5, 0.0)
            Cv = Cv + np.where(act_v, gv * sv, 0.0) + np.sign(v)
            Cw = Cw + np.where(act_v, -0.5 * gv - 0.5, 0.0)
        return cov, tight, self._pal_grad((Cu, Cv, Cl, Cw), u, v, c, s)

    def _pal(self, theta, want_grad):
        x, y, _, l, w, _, a = theta
        c, s = math.cos(a), math.sin(a)
        dx = self.px - x
        dy = self.py - y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        hl, hw = 0.5 * l, 0.5 * w
        a1, a2, a3, a4 = u - hl, u + hl, v - hw, v + hw
        D = np.stack([np.abs(a1), np.abs(a2), np.abs(a3), np.abs(a4)], axis=1)
        kmin = np.argmin(D, axis=1)
        tight = float(np.sum(D[np.arange(len(kmin)), kmin]))
        signs = np.stack([_sign(a1), _sign(a2), _sign(a3), _sign(a4)], axis=1)

        if self.pal_mode == PAL_CANONICAL:
            eu = np.abs(u) - hl
            ev = np.abs(v) - hw
            cov = float(np.sum(np.maximum(eu, 0.0)) + np.sum(np.maximum(ev, 0.0)))
            act = (eu > 0, ev > 0)
        else:
            e = np.stack([D[:, 0] - hl, D[:, 1] - hl, D[:, 2] - hw, D[:, 3] - hw], axis=1)
            cov = float(np.sum(np.maximum(e, 0.0)))
            act = e > 0

        grad = None
        if want_grad:
            # per-point coefficients on du, dv, dl, dw
            cu = np.zeros_like(u)
            cv = np.zeros_like(u)
            cl = np.zeros_like(u)
            cw = np.zeros_like(u)
            # tightness
            s1, s2, s3, s4 = signs.T
            m = kmin == 0
            cu += np.where(m, s1, 0.0)
            cl += np.where(m, -0.5 * s1, 0.0)
            m = kmin == 1
            cu += np.where(m, s2, 0.0)
            cl += np.where(m, 0.5 * s2, 0.0)
            m = kmin == 2
            cv += np.where(m, s3, 0.0)
            cw += np.where(m, -0.5 * s3, 0.0)
            m = kmin == 3
            cv += np.where(m, s4, 0.0)
            cw += np.where(m, 0.5 * s4, 0.0)
            tight_coef = (cu.copy(), cv.copy(), cl.copy(), cw.copy())
            # coverage
            qu = np.zeros_like(u)
            qv = np.zeros_like(u)
            ql = np.zeros_like(u)
            qw = np.zeros_like(u)
            if self.pal_mode == PAL_CANONICAL:
                au, av = act
                qu += np.where(au, np.sign(u), 0.0)
                ql += np.where(au, -0.5, 0.0)
                qv += np.where(av, np.sign(v), 0.0)
                qw += np.where(av, -0.5, 0.0)
            else:
                qu += np.where(act[:, 0], s1, 0.0) + np.where(act[:, 1], s2, 0.0)
                ql += np.where(act[:, 0], -0.5 * s1 - 0.5, 0.0) + np.where(act[:, 1], 0.5 * s2 - 0.5, 0.0)
                qv += np.where(act[:, 2], s3, 0.0) + np.where(act[:, 3], s4, 0.0)
                qw += np.where(act[:, 2], -0.5 * s3 - 0.5, 0.0) + np.where(act[:, 3], 0.5 * s4 - 0.5, 0.0)
            grad = (self._pal_grad(tight_coef, u, v, c, s), self._pal_grad((qu, qv, ql, qw), u, v, c, s))
        sig = (signs.astype(np.int8), kmin.astype(np.int8))
        return cov, tight, grad, sig

    @staticmethod
    def _pal_grad(coef, u, v, c, s):
        cu, cv, cl, cw = coef
        g = np.zeros(7)
        su, sv = float(np.sum(cu)), float(np.sum(cv))
        g[0] = -c * su + s * sv
        g[1] = -s * su - c * sv
        g[3] = float(np.sum(cl))
        g[4] = float(np.sum(cw))
        g[6] = float(np.dot(cu, v) - np.dot(cv, u))
        return g

    # -- combined ---------------------------------------------------------

    def evaluate(self, theta, want_grad=False, want_sig=False):
        """Return ``(LossBreakdown, grad or None, signature or None)``."""
        theta = np.asarray(theta, dtype=float)
        wts = self.weights
        bpl = srl = cov = tight = 0.0
        grad = np.zeros(7) if want_grad else None
        sig = []
        if self.use_bpl:
            bpl, g, s = self._bpl(theta, want_grad)
            if want_grad:
                grad += wts.lambda_bpl * g
            sig.append(s)
        if self.use_srl:
            srl, g, s = self._srl(theta, want_grad)
            if want_grad:
                grad += wts.lambda_srl * g
            sig.append(s)
        if self.use_pal and not (want_grad or want_sig):
            cov, tight = self._pal_value(theta)
        elif self.use_pal and not want_sig:
            cov, tight, g = self._pal_fast(theta)
            grad += wts.lambda_pal * g
        elif self.use_pal:
            cov, tight, g, s = self._pal(theta, want_grad)
            if want_grad:
                grad += wts.lambda_pal * (g[0] + g[1])
            sig.append(s)
        total = wts.lambda_bpl * bpl + wts.lambda_srl * srl + wts.lambda_pal * (cov + tight)
        return LossBreakdown(bpl, srl, cov, tight, total), grad, (sig if want_sig else None)

    def total(self, theta) -> float:
        return self.evaluate(theta)[0].total

    def breakdown(self, theta) -> LossBreakdown:
        return self.evaluate(theta)[0]

    def value_and_grad(self, theta):
        b, g, _ = self.evaluate(theta, want_grad=True)
        return b.total, g

    def _stencil(self, theta, j, sign):
        p = np.array(theta, dtype=float)
        p[j] += sign * NUMERIC_STEPS[j]
        p[3] = max(p[3], STENCIL_MIN_DIM)
        p[4] = max(p[4], STENCIL_MIN_DIM)
        return p

    def numeric_gradient(self, theta, want_flags=True) -> GradientResult:
        theta = np.asarray(theta, dtype=float)
        _, _, sig0 = self.evaluate(theta, want_sig=want_flags)
        grad = np.zeros(7)
        flagged = np.zeros(7, dtype=bool)
        for j in range(7):
            bp, _, sp = self.evaluate(self._stencil(theta, j, +1), want_sig=want_flags)
            bm, _, sm = self.evaluate(self._stencil(theta, j, -1), want_sig=want_flags)
            grad[j] = (bp.total - bm.total) / (2.0 * NUMERIC_STEPS[j])
            if want_flags:
                flagged[j] = not (_sig_equal(sig0, sp) and _sig_equal(sig0, sm))
        return GradientResult(grad, flagged)

    def analytic_gradient(self, theta, want_flags=True) -> GradientResult:
        theta = np.asarray(theta, dtype=float)
        _, grad, sig0 = self.evaluate(theta, want_grad=True, want_sig=want_flags)
        flagged = np.zeros(7, dtype=bool)
        if want_flags:
            for j in range(7):
                sp = self.evaluate(self._stencil(theta, j, +1), want_sig=True)[2]
                sm = self.evaluate(self._stencil(theta, j, -1), want_sig=True)[2]
                flagged[j] = not (_sig_equal(sig0, sp) and _sig_equal(sig0, sm))
            # exact ties at the evaluation point are kinks too
            flagged |= self._tie_flags(theta)
        return GradientResult(grad, flagged)

    def _tie_flags(self, theta):
        flags = np.zeros(7, dtype=bool)
        if self.use_srl and theta[3] == theta[4]:
            flags[3:5] = True
        return flags


def _sig_equal(a, b) -> bool:
    if len(a) != len(b):
        return False
    for ta, tb in zip(a, b):
        for xa, xb in zip(ta, tb):
            if not np.array_equal(np.asarray(xa), np.asarray(xb)):
                return False
    return True


def _problem(sample, calib, weights, prior_ratio, side_mask=None, pal_mode=PAL_CANONICAL) -> LossProblem:
    return LossProblem(
        sample.in_box_points, sample.constraint_rect, calib, weights, prior_ratio, side_mask, pal_mode
    )


def boundary_projection_loss(box: Box3D, constraint_rect: Rect2D, calib: CameraCalibration, side_mask=None) -> float:
    """Sum of the four absolute boundary differences, in pixels."""
    prob = LossProblem(np.zeros((0, 3)), constraint_rect, calib, LossWeights(1.0, 0.0, 0.0), None, side_mask)
    return prob._bpl(box.to_vector(), False)[0]


def semantic_ratio_loss(box: Box3D, prior_ratio: float) -> float:
    if prior_ratio < 1:
        raise ValueError(f"prior_ratio must be >= 1, got {prior_ratio}")
    return abs(max(box.l, box.w) / min(box.l, box.w) - prior_ratio)


def pal_coverage_loss(points, box: Box3D, pal_mode: str = PAL_CANONICAL) -> float:
    """Summed distance by which points stick out of the BEV rectangle."""
    dummy = Rect2D(0, 0, 0, 0)
    calib = CameraCalibration.from_matrix(np.eye(3, 4))
    prob = LossProblem(points, dummy, calib, LossWeights(0.0, 0.0, 1.0), None, None, pal_mode)
    return prob._pal(box.to_vector(), False)[0]


def pal_tightness_loss(points, box: Box3D) -> float:
    """Summed distance from each point to its nearest BEV edge line."""
    dummy = Rect2D(0, 0, 0, 0)
    calib = CameraCalibration.from_matrix(np.eye(3, 4))
    prob = LossProblem(points, dummy, calib, LossWeights(0.0, 0.0, 1.0))
    return prob._pal(box.to_vector(), False)[1]


def total_loss(
    sample,
    box: Box3D,
    calib: CameraCalibration,
    weights: LossWeights,
    prior_ratio=None,
    side_mask=None,
    pal_mode: str = PAL_CANONICAL,
) -> LossBreakdown:
    """Weighted combination against ``sample.constraint_rect`` and ``sample.in_box_points``."""
    return _problem(sample, calib, weights, prior_ratio, side_mask, pal_mode).breakdown(box.to_vector())


def loss_gradient(
    sample,
    box: Box3D,
    calib: CameraCalibration,
    weights: LossWeights,
    prior_ratio=None,
    mode: str = "numeric",
    side_mask=None,
    pal_mode: str = PAL_CANONICAL,
) -> GradientResult:
    """Gradient of the total loss over ``(x, y, z, l, w, h, yaw)``.

    ``mode="numeric"`` uses central differences; ``mode="analytic"`` uses the
    closed-form subgradient (zero at exact ties). Coordinates whose stencil
    crosses a kink are flagged in both modes.
    """
    prob = _problem(sample, calib, weights, prior_ratio, side_mask, pal_mode)
    theta = box.to_vector()
    if mode == "numeric":
        return prob.numeric_gradient(theta)
    if mode == "analytic":
        return prob.analytic_gradient(theta)
    raise ValueError(f"unknown gradient mode {mode!r}")
