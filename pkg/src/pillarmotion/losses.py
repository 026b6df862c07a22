"""Self-supervised objectives over a pillar motion field.

Every term is a scalar function of the field returning (value, gradient),
with the gradient laid out as an (H, W, 2) array over the grid:

* structural consistency: symmetric chamfer distance (Euclidean, both
  directions) between the motion-displaced earlier sweep and the later
  sweep, optionally weighted per point by the motion mask;
* cross-sensor regularization: L1 distance, per projected point and camera,
  between the image-plane displacement induced by the pillar motion and the
  object flow measured in that camera;
* smoothness: L1 norm of forward differences of both motion components
  along both grid axes.

Chamfer gradients treat the nearest-neighbor matches as constants at the
current field (majorize-minimize style): the matched pairs computed at the
evaluation point define a locally valid descent direction even though the
matching itself changes with the field. At zero distance, and at zero
forward difference in the smoothness term, the subgradient 0 is used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import (
    CameraModel,
    FlowImage,
    ObjectFlowSamples,
    RigidTransform,
    factorize_object_flow,
)
from .nn_index import NeighborIndex
from .pillar_grid import GridSpec, PillarMotionField, Pillarization, pillarize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    """Weights and constants of the total objective.

    Defaults: unit weights on consistency and smoothness, 0.01 on the
    cross-sensor term, masking constants alpha = 0.1 and tau = 5 px, and
    probability 0.5 for pillars with no camera coverage.
    """

    lambda_consist: float = 1.0
    lambda_regular: float = 0.01
    lambda_smooth: float = 1.0
    alpha: float = 0.1
    tau: float = 5.0
    p_default: float = 0.5
    use_mask: bool = True
    squared_chamfer: bool = False
    normalize_regular: bool = False
    flow_sampling: str = "nearest"

    def __post_init__(self):
        if min(self.lambda_consist, self.lambda_regular, self.lambda_smooth) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if not 0.0 <= self.p_default <= 1.0:
            raise ValueError("p_default must lie in [0, 1]")
        if self.flow_sampling not in ("nearest", "bilinear"):
            raise ValueError("flow_sampling must be 'nearest' or 'bilinear'")


@dataclass(eq=False)
class SceneInputs:
    """Everything one sweep-pair optimization consumes.

    Both clouds live in the earlier sweep's frame (the later sweep already
    ego-compensated into it). ``ego_motion`` maps static-content coordinates
    from the earlier frame to the later frame; it is required whenever
    cameras are present.
    """

    cloud_t: np.ndarray
    cloud_t1: np.ndarray
    grid: GridSpec
    horizon: float = 0.5
    cameras: Sequence[CameraModel] = ()
    flows: Sequence[FlowImage] = ()
    ego_motion: RigidTransform | None = None

    def __post_init__(self):
        self.cloud_t = np.asarray(self.cloud_t, dtype=float).reshape(-1, 3)
        self.cloud_t1 = np.asarray(self.cloud_t1, dtype=float).reshape(-1, 3)
        if len(self.cameras) != len(self.flows):
            raise ValueError("need exactly one flow image per camera")
        if self.cameras and self.ego_motion is None:
            raise ValueError("ego_motion is required when cameras are present")


@dataclass(eq=False)
class MaskWeights:
    """Per-point static probabilities and the loss weights derived from them.

    ``point_static`` is NaN for points without camera coverage. The weight of
    a point is one minus the mean static probability of its pillar, so points
    in pillars that look static contribute little to the chamfer term.
    """

    point_static: np.ndarray    # (N,)
    pillar_static: np.ndarray   # (H, W)
    point_weight: np.ndarray    # (N,)


class ChamferMatches(NamedTuple):
    forward: np.ndarray    # per displaced point: index of its nearest later-sweep point
    backward: np.ndarray   # per later-sweep point: index of its nearest displaced point


def displaced_points(field: PillarMotionField, cloud_t, pill: Pillarization):
    """In-range points moved by their pillar's motion.

    Returns (moved (K, 3), rows (K,), cols (K,), sel (K,)) where ``sel`` holds
    the original point indices.
    """
    sel = np.nonzero(pill.in_range)[0]
    rows = pill.rows[sel]
    cols = pill.cols[sel]
    moved = np.asarray(cloud_t, dtype=float)[sel].copy()
    moved[:, :2] += field.motion[rows, cols]
    return moved, rows, cols, sel


def find_matches(field: PillarMotionField, cloud_t, cloud_t1,
                 pill: Pillarization) -> ChamferMatches:
    """Nearest-neighbor correspondences of the symmetric chamfer at ``field``."""
    moved, _, _, _ = displaced_points(field, cloud_t, pill)
    cloud_t1 = np.asarray(cloud_t1, dtype=float).reshape(-1, 3)
    if len(moved) == 0 or len(cloud_t1) == 0:
        raise ValueError("chamfer requires non-empty point sets on both sides")
    fwd, _ = NeighborIndex(cloud_t1).query(moved)
    bwd, _ = NeighborIndex(moved).query(cloud_t1)
    return ChamferMatches(fwd, bwd)


def chamfer_consistency(field: PillarMotionField, cloud_t, cloud_t1,
                        pill: Pillarization, weights: MaskWeights | None = None,
                        matches: ChamferMatches | None = None,
                        squared: bool = False):
    """Symmetric chamfer distance between the displaced sweep and the real one.

    Forward terms weigh each displaced point by its own pillar weight;
    backward terms weigh each real point by the weight of the displaced point
    it matched. Passing ``matches`` freezes the correspondences, which is how
    the gradient is defined; by default they are computed at ``field``.
    """
    moved, rows, cols, sel = displaced_points(field, cloud_t, pill)
    cloud_t1 = np.asarray(cloud_t1, dtype=float).reshape(-1, 3)
    if len(moved) == 0 or len(cloud_t1) == 0:
        raise ValueError("chamfer requires non-empty point sets on both sides")
    if matches is None:
        matches = find_matches(field, cloud_t, cloud_t1, pill)
    w = weights.point_weight[sel] if weights is not None else np.ones(len(moved))

    diff_f = moved - cloud_t1[matches.forward]            # displaced -> real
    diff_b = moved[matches.backward] - cloud_t1           # real -> displaced
    dist_f = np.sqrt(np.einsum("ij,ij->i", diff_f, diff_f))
    dist_b = np.sqrt(np.einsum("ij,ij->i", diff_b, diff_b))
    w_b = w[matches.backward]

    grad = np.zeros((field.grid.height, field.grid.width, 2))
    if squared:
        value = float(np.sum(w * dist_f**2) + np.sum(w_b * dist_b**2))
        g_f = 2.0 * w[:, None] * diff_f[:, :2]
        g_b = 2.0 * w_b[:, None] * diff_b[:, :2]
    else:
        value = float(np.sum(w * dist_f) + np.sum(w_b * dist_b))
        with np.errstate(invalid="ignore", divide="ignore"):
            unit_f = np.where(dist_f[:, None] > 0, diff_f / dist_f[:, None], 0.0)
            unit_b = np.where(dist_b[:, None] > 0, diff_b / dist_b[:, None], 0.0)
        g_f = w[:, None] * unit_f[:, :2]
        g_b = w_b[:, None] * unit_b[:, :2]
    np.add.at(grad, (rows, cols), g_f)
    np.add.at(grad, (rows[matches.backward], cols[matches.backward]), g_b)
    return value, grad


def static_probability(object_flow, cfg: LossConfig) -> np.ndarray:
    """Probability of being static from the object-flow magnitude.

    exp(-alpha * max(||flow|| - tau, 0)): exactly 1 up to the stationary
    tolerance tau, decaying exponentially beyond it.
    """
    flow = np.asarray(object_flow, dtype=float)
    norm = np.sqrt(np.einsum("...i,...i->...", flow, flow))
    return np.exp(-cfg.alpha * np.maximum(norm - cfg.tau, 0.0))


def build_mask(cloud_t, pill: Pillarization, samples: Sequence[ObjectFlowSamples],
               cfg: LossConfig) -> MaskWeights:
    """Aggregate per-point static probabilities into per-pillar loss weights.

    A point covered by several cameras takes the mean of its probabilities;
    a pillar takes the mean over its covered member points; pillars with no
    covered point fall back to ``p_default``.
    """
    n = len(np.asarray(cloud_t).reshape(-1, 3))
    s_sum = np.zeros(n)
    s_cnt = np.zeros(n)
    for smp in samples:
        s = static_probability(smp.object_flow, cfg)
        np.add.at(s_sum, smp.point_index, s)
        np.add.at(s_cnt, smp.point_index, 1.0)
    covered = s_cnt > 0
    point_static = np.full(n, np.nan)
    point_static[covered] = s_sum[covered] / s_cnt[covered]

    h, w = pill.grid.height, pill.grid.width
    pick = covered & pill.in_range
    flat = pill.rows[pick] * w + pill.cols[pick]
    cell_sum = np.bincount(flat, weights=point_static[pick], minlength=h * w)
    cell_cnt = np.bincount(flat, minlength=h * w)
    pillar_static = np.full(h * w, cfg.p_default)
    has = cell_cnt > 0
    pillar_static[has] = cell_sum[has] / cell_cnt[has]
    pillar_static = pillar_static.reshape(h, w)

    point_weight = np.zeros(n)
    sel = pill.in_range
    point_weight[sel] = 1.0 - pillar_static[pill.rows[sel], pill.cols[sel]]
    return MaskWeights(point_static, pillar_static, point_weight)


def compute_flow_samples(scene: SceneInputs, cfg: LossConfig) -> list[ObjectFlowSamples]:
    """Object-flow samples for every camera; independent of the field."""
    samples = [
        factorize_object_flow(flow, scene.cloud_t, cam, scene.ego_motion,
                              sampling=cfg.flow_sampling)
        for cam, flow in zip(scene.cameras, scene.flows)
    ]
    for i, smp in enumerate(samples):
        log.debug(
            "camera %d: %d/%d points sampled (%d out of view, %d invalid flow)",
            i, len(smp.point_index), smp.n_points, smp.n_out_of_view, smp.n_invalid_flow,
        )
    return samples


def regularization(field: PillarMotionField, cloud_t, pill: Pillarization,
                   cameras: Sequence[CameraModel], flows: Sequence[FlowImage],
                   ego_motion: RigidTransform, cfg: LossConfig,
                   samples: Sequence[ObjectFlowSamples] | None = None,
                   depth_min: float = 0.1):
    """L1 mismatch between projected pillar motion and measured object flow.

    For each sampled point, the pillar motion is applied in 3D and projected;
    the difference of the two pixel positions must match the object flow at
    the point's original pixel. The gradient chains the L1 sign through the
    projection Jacobian of the displaced point.
    """
    if len(cameras) != len(flows):
        raise ValueError("need exactly one flow image per camera")
    cloud_t = np.asarray(cloud_t, dtype=float).reshape(-1, 3)
    if samples is None:
        samples = [
            factorize_object_flow(flow, cloud_t, cam, ego_motion,
                                  sampling=cfg.flow_sampling)
            for cam, flow in zip(cameras, flows)
        ]
    value = 0.0
    count = 0
    grad = np.zeros((field.grid.height, field.grid.width, 2))
    for cam, flow, smp in zip(cameras, flows, samples):
        if (flow.width, flow.height) != (cam.width, cam.height):
            raise ValueError("flow image dimensions do not match the camera")
        keep = pill.in_range[smp.point_index]
        if not keep.any():
            continue
        idx = smp.point_index[keep]
        rows = pill.rows[idx]
        cols = pill.cols[idx]
        pts = cloud_t[idx]
        motion = field.motion[rows, cols]
        moved = pts.copy()
        moved[:, :2] += motion

        k = cam.intrinsics
        r = cam.extrinsic.rotation
        cam_pts = cam.extrinsic.apply(moved)
        z = cam_pts[:, 2]
        ok = z > depth_min
        if not ok.any():
            continue
        z = z[ok]
        cam_pts = cam_pts[ok]
        uv1 = (cam_pts @ k.T)[:, :2] / z[:, None]
        resid = (uv1 - smp.uv[keep][ok]) - smp.object_flow[keep][ok]
        value += float(np.abs(resid).sum())
        count += int(ok.sum())

        sgn = np.sign(resid)
        # d(u, v)/d(camera point), rows stacked as (K, 2, 3)
        du = np.stack([
            np.full_like(z, k[0, 0]) / z,
            np.full_like(z, k[0, 1]) / z,
            -(k[0, 0] * cam_pts[:, 0] + k[0, 1] * cam_pts[:, 1]) / z**2,
        ], axis=1)
        dv = np.stack([
            np.zeros_like(z),
            np.full_like(z, k[1, 1]) / z,
            -(k[1, 1] * cam_pts[:, 1]) / z**2,
        ], axis=1)
        # chain through d(camera point)/d(mx, my) = first two extrinsic columns
        jac = np.stack([du @ r[:, :2], dv @ r[:, :2]], axis=1)  # (K, 2, 2)
        g = np.einsum("ki,kij->kj", sgn, jac)
        np.add.at(grad, (rows[ok], cols[ok]), g)
    if cfg.normalize_regular and count > 0:
        value /= count
        grad /= count
    return value, grad


def smoothness(field: PillarMotionField):
    """Total variation of the motion field under forward differences.

    Boundary cells have no forward neighbor and contribute no difference in
    that direction.
    """
    m = field.motion
    grad = np.zeros_like(m)
    d_col = m[:, 1:, :] - m[:, :-1, :]
    d_row = m[1:, :, :] - m[:-1, :, :]
    value = float(np.abs(d_col).sum() + np.abs(d_row).sum())
    s_col = np.sign(d_col)
    s_row = np.sign(d_row)
    grad[:, 1:, :] += s_col
    grad[:, :-1, :] -= s_col
    grad[1:, :, :] += s_row
    grad[:-1, :, :] -= s_row
    return value, grad


@dataclass(eq=False)
class LossTerms:
    """Values and field gradients of every objective term at one field.

    Terms whose weight is zero are not evaluated and read as zero here.
    """

    consist: float
    regular: float
    smooth: float
    total: float
    grad_consist: np.ndarray
    grad_regular: np.ndarray
    grad_smooth: np.ndarray
    grad_total: np.ndarray


def total_loss(field: PillarMotionField, scene: SceneInputs, cfg: LossConfig,
               pill: Pillarization | None = None,
               mask: MaskWeights | None = None,
               samples: Sequence[ObjectFlowSamples] | None = None,
               matches: ChamferMatches | None = None) -> LossTerms:
    """Weighted sum of consistency, regularization, and smoothness.

    ``pill``, ``mask``, and ``samples`` are recomputed when omitted; an
    optimizer should precompute the field-independent pieces (``pill``,
    ``samples``, ``mask``) once per scene and pass them in.
    """
    if pill is None:
        pill = pillarize(scene.cloud_t, scene.grid)
    shape = (scene.grid.height, scene.grid.width, 2)
    zero = np.zeros(shape)

    need_samples = scene.cameras and (cfg.lambda_regular > 0 or cfg.use_mask)
    if samples is None and need_samples:
        samples = compute_flow_samples(scene, cfg)
    if mask is None and cfg.use_mask:
        mask = build_mask(scene.cloud_t, pill, samples or [], cfg)

    consist, g_consist = 0.0, zero
    if cfg.lambda_consist > 0:
        consist, g_consist = chamfer_consistency(
            field, scene.cloud_t, scene.cloud_t1, pill,
            weights=mask if cfg.use_mask else None,
            matches=matches, squared=cfg.squared_chamfer,
        )
    regular, g_regular = 0.0, zero
    if cfg.lambda_regular > 0 and scene.cameras:
        regular, g_regular = regularization(
            field, scene.cloud_t, pill, scene.cameras, scene.flows,
            scene.ego_motion, cfg, samples=samples,
        )
    smooth, g_smooth = 0.0, zero
    if cfg.lambda_smooth > 0:
        smooth, g_smooth = smoothness(field)

    total = cfg.lambda_consist * consist + cfg.lambda_regular * regular \
        + cfg.lambda_smooth * smooth
    grad_total = cfg.lambda_consist * g_consist + cfg.lambda_regular * g_regular \
        + cfg.lambda_smooth * g_smooth
    return LossTerms(consist, regular, smooth, total,
                     g_consist, g_regular, g_smooth, grad_total)


def variant_config(cfg: LossConfig, variant: str) -> LossConfig:
    """Loss configuration for the standard ablation variants.

    a: consistency only; b: regularization only; c: both; d: consistency
    plus masking; e: the full model. Smoothness stays on throughout.
    """
    table = {
        "a": dict(lambda_regular=0.0, use_mask=False),
        "b": dict(lambda_consist=0.0, use_mask=False),
        "c": dict(use_mask=False),
        "d": dict(lambda_regular=0.0, use_mask=True),
        "e": dict(),
    }
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}; expected one of a..e")
    return replace(cfg, **table[variant])
