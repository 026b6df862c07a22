"""Synthetic driving scenes with exact ground truth.

A scene is a flat square ground patch plus rigid axis-aligned boxes moving
at constant velocity, scanned by a ring-pattern LiDAR at two timestamps and
observed by pinhole cameras. Everything downstream of the scene description
is closed form: sweeps come from ray casting (each sweep sampled
independently, so consecutive sweeps share no exact point correspondences),
camera flow images are rendered analytically per pixel, and the true pillar
motion field follows directly from the box velocities.

All outputs live in the frame of the earlier sweep; the later sweep is
ego-compensated into it. ``SceneSpec.ego_pose_change`` is the vehicle pose
at the later time expressed in the earlier frame; the ``ego_motion`` handed
to the geometry module is its inverse (the coordinate map for static
content).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import (
    CameraModel,
    DEPTH_MIN,
    FlowImage,
    RigidTransform,
    project_points,
    rot_x,
    rot_z,
)
from .pillar_grid import GridSpec, PillarMotionField, pillarize


class GenerationError(ValueError):
    """The scene produced no usable samples."""


@dataclass(frozen=True)
class LidarModel:
    """Ring-pattern scanner: ``rings`` elevation angles times azimuth steps."""

    rings: int = 16
    azimuth_steps: int = 360
    elevation_min_deg: float = -22.0
    elevation_max_deg: float = 2.0
    range_noise: float = 0.01
    max_range: float = 60.0
    height: float = 1.6

    def __post_init__(self):
        if self.rings < 1 or self.azimuth_steps < 1:
            raise ValueError("rings and azimuth_steps must be positive")
        if self.range_noise < 0:
            raise ValueError("range_noise must be non-negative")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned rigid box with a constant ground-plane velocity."""

    size: tuple          # (sx, sy, sz) meters
    center: tuple        # (cx, cy, cz) at the earlier sweep
    velocity: tuple      # (vx, vy) m/s
    tag: str = "object"

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError("box size must be three positive extents")
        if len(self.center) != 3 or len(self.velocity) != 2:
            raise ValueError("center must be 3D and velocity 2D")

    def bounds(self, dt: float = 0.0):
        """(lo, hi) corners after moving for ``dt`` seconds."""
        c = np.array(self.center) + dt * np.array([*self.velocity, 0.0])
        half = 0.5 * np.array(self.size)
        return c - half, c + half

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Full description of one synthetic sweep pair."""

    seed: int
    grid: GridSpec
    interval: float = 0.5
    ego_pose_change: RigidTransform = dc_field(default_factory=RigidTransform.identity)
    objects: tuple = ()
    ground_extent: float = 20.0
    ground_density: float = 3.0
    lidar: LidarModel = dc_field(default_factory=LidarModel)
    cameras: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        if self.ground_extent <= 0:
            raise ValueError("ground_extent must be positive")
        if self.ground_density <= 0:
            raise ValueError("ground_density must be positive")


@dataclass(eq=False)
class SceneTruth:
    """Exact per-pillar motion, speeds, and group labels.

    The field zeroes empty pillars per its invariant; ``speed`` and the
    label grids stay dense (empty cells labeled from box footprints) so
    plots and diagnostics can use them. Speed groups partition pillars:
    static (speed 0), slow (up to 5 m/s), fast (beyond). ``moving`` is
    foreground with speed above 0.05 m/s.
    """

    field: PillarMotionField
    speed: np.ndarray        # (H, W) m/s
    static: np.ndarray       # (H, W) bool
    slow: np.ndarray
    fast: np.ndarray
    foreground: np.ndarray
    moving: np.ndarray


@dataclass(eq=False)
class SceneBundle:
    """Everything ``generate`` produces for one scene."""

    spec: SceneSpec
    cloud_t: np.ndarray
    cloud_t1: np.ndarray
    surface_t: np.ndarray    # per point: -1 ground, else object index
    surface_t1: np.ndarray
    cameras: tuple
    flows: list
    ego_flows: list
    hit_points: list         # per camera: (K, 3) surface point behind each valid flow pixel
    hit_pixels: list         # per camera: (K, 2) int (row, col)
    hit_surfaces: list       # per camera: (K,) surface ids
    ego_motion: RigidTransform
    truth: SceneTruth

    def scene_inputs(self):
        from .losses import SceneInputs
        return SceneInputs(
            self.cloud_t, self.cloud_t1, self.spec.grid, self.spec.interval,
            self.cameras, self.flows, self.ego_motion,
        )


def _ray_boxes(origin, dirs, lo, hi):
    """Slab-test entry parameter of rays against one AABB; inf where missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    near_ax = np.minimum(t1, t2)
    far_ax = np.maximum(t1, t2)
    zero = dirs == 0.0
    if zero.any():
        inside = (origin >= lo) & (origin <= hi)
        near_ax = np.where(zero, np.where(inside, -np.inf, np.inf), near_ax)
        far_ax = np.where(zero, np.where(inside, np.inf, -np.inf), far_ax)
    near = near_ax.max(axis=1)
    far = far_ax.min(axis=1)
    hit = (near <= far) & (far > 1e-9) & (near > 1e-9)
    return np.where(hit, near, np.inf)


def _ray_ground(origin, dirs, extent):
    """Entry parameter of rays against the bounded ground square at z = 0."""
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    x = origin[0] + t * dirs[:, 0]
    y = origin[1] + t * dirs[:, 1]
    ok = (dz < -1e-12) & (t > 1e-9) & (np.abs(x) <= extent) & (np.abs(y) <= extent)
    return np.where(ok, t, np.inf)


def _first_hit(origin, dirs, boxes, extent):
    """First surface along each ray: (parameter (R,), surface id (R,)).

    Boxes come before ground in the candidate order, so a box wins an exact
    tie; ids are the box index or -1 for ground, with inf parameter on miss.
    """
    columns = [_ray_boxes(origin, dirs, lo, hi) for lo, hi in boxes]
    columns.append(_ray_ground(origin, dirs, extent))
    t_all = np.stack(columns, axis=1)
    best = np.argmin(t_all, axis=1)
    t = t_all[np.arange(len(dirs)), best]
    sid = np.where(best < len(boxes), best, -1)
    return t, sid


def _lidar_directions(model: LidarModel) -> np.ndarray:
    elev = np.deg2rad(np.linspace(model.elevation_min_deg, model.elevation_max_deg,
                                  model.rings))
    azim = 2.0 * np.pi * np.arange(model.azimuth_steps) / model.azimuth_steps
    az, el = np.meshgrid(azim, elev)
    return np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1
    ).reshape(-1, 3)


def _scan(pose: RigidTransform, spec: SceneSpec, boxes, rng) -> tuple:
    """One LiDAR sweep from ``pose``, returned in the anchor frame."""
    model = spec.lidar
    origin = pose.apply(np.array([0.0, 0.0, model.height]))
    dirs = _lidar_directions(model) @ pose.rotation.T
    t, sid = _first_hit(origin, dirs, boxes, spec.ground_extent)
    keep = np.isfinite(t) & (t <= model.max_range)
    t, dirs, sid = t[keep], dirs[keep], sid[keep]
    if model.range_noise > 0 and len(t):
        t = t + rng.normal(0.0, model.range_noise, len(t))
    points = origin + t[:, None] * dirs

    ground = np.nonzero(sid == -1)[0]
    cap = int(spec.ground_density * (2.0 * spec.ground_extent) ** 2)
    if len(ground) > cap:
        drop = np.setdiff1d(ground, np.sort(rng.choice(ground, cap, replace=False)))
        keep_mask = np.ones(len(points), bool)
        keep_mask[drop] = False
        points, sid = points[keep_mask], sid[keep_mask]
    return points, sid


def _render_camera(cam: CameraModel, spec: SceneSpec, boxes_t,
                   ego_motion: RigidTransform):
    """Analytic flow and ego-flow images for one camera at the earlier sweep."""
    us = np.arange(cam.width) + 0.5
    vs = np.arange(cam.height) + 0.5
    uu, vv = np.meshgrid(us, vs)
    centers = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    hom = np.concatenate([centers, np.ones((len(centers), 1))], axis=1)
    cam_to_lidar = cam.extrinsic.inverse()
    dirs = (hom @ np.linalg.inv(cam.intrinsics).T) @ cam_to_lidar.rotation.T
    origin = cam_to_lidar.translation

    t, sid = _first_hit(origin, dirs, boxes_t, spec.ground_extent)
    hit = np.isfinite(t)
    pts = origin + np.where(hit, t, 1.0)[:, None] * dirs

    disp = np.zeros((len(pts), 3))
    for k, obj in enumerate(spec.objects):
        disp[sid == k, :2] = np.array(obj.velocity) * spec.interval

    uv_moved, depth_moved, _ = project_points(ego_motion.apply(pts + disp), cam)
    uv_static, depth_static, _ = project_points(ego_motion.apply(pts), cam)

    shape = (cam.height, cam.width)
    ok_flow = hit & (depth_moved > DEPTH_MIN)
    ok_ego = hit & (depth_static > DEPTH_MIN)
    flow = FlowImage(
        np.where(ok_flow[:, None], uv_moved - centers, 0.0).reshape(shape + (2,)),
        ok_flow.reshape(shape),
    )
    ego = FlowImage(
        np.where(ok_ego[:, None], uv_static - centers, 0.0).reshape(shape + (2,)),
        ok_ego.reshape(shape),
    )
    idx = np.nonzero(ok_flow)[0]
    pixels = np.stack([idx // cam.width, idx % cam.width], axis=1)
    return flow, ego, pts[idx], pixels, sid[idx]


def _build_truth(spec: SceneSpec, cloud_t, surface_t) -> SceneTruth:
    grid = spec.grid
    h, w = grid.height, grid.width
    pill = pillarize(cloud_t, grid)
    nobj = len(spec.objects)

    owner = np.full(h * w, -1, dtype=int)
    foreground = np.zeros(h * w, bool)

    # nonempty pillars: majority surface among member points, objects first so
    # they win exact ties over ground
    sel = pill.in_range
    if sel.any():
        flat = pill.rows[sel] * w + pill.cols[sel]
        slot = np.where(surface_t[sel] < 0, nobj, surface_t[sel])
        counts = np.bincount(flat * (nobj + 1) + slot,
                             minlength=h * w * (nobj + 1)).reshape(h * w, nobj + 1)
        occupied = counts.sum(axis=1) > 0
        majority = np.argmax(counts, axis=1)
        owner[occupied] = np.where(majority[occupied] == nobj, -1, majority[occupied])
        foreground[occupied] = counts[occupied, :nobj].sum(axis=1) > 0

    # empty pillars: box footprints at cell centers, first box wins
    centers = grid.cell_centers().reshape(-1, 2)
    empty = ~pill.nonempty.reshape(-1)
    for k, obj in enumerate(spec.objects):
        lo, hi = obj.bounds(0.0)
        inside = (
            empty & (owner == -1)
            & (centers[:, 0] >= lo[0]) & (centers[:, 0] <= hi[0])
            & (centers[:, 1] >= lo[1]) & (centers[:, 1] <= hi[1])
        )
        owner[inside] = k
        foreground[inside] = True

    vel = np.zeros((nobj + 1, 2))
    for k, obj in enumerate(spec.objects):
        vel[k] = obj.velocity
    per_cell_vel = vel[owner]                      # owner -1 picks the zero row
    speed = np.hypot(per_cell_vel[:, 0], per_cell_vel[:, 1]).reshape(h, w)
    motion = (per_cell_vel * spec.interval).reshape(h, w, 2)
    motion[~pill.nonempty] = 0.0

    foreground = foreground.reshape(h, w)
    return SceneTruth(
        field=PillarMotionField(grid, motion, pill.nonempty, spec.interval),
        speed=speed,
        static=speed == 0.0,
        slow=(speed > 0.0) & (speed <= 5.0),
        fast=speed > 5.0,
        foreground=foreground,
        moving=foreground & (speed > 0.05),
    )


def generate(spec: SceneSpec) -> SceneBundle:
    """Render one scene: two sweeps, per-camera flow, and exact truth."""
    rng = np.random.default_rng(spec.seed)
    boxes_t = [obj.bounds(0.0) for obj in spec.objects]
    boxes_t1 = [obj.bounds(spec.interval) for obj in spec.objects]
    ego_motion = spec.ego_pose_change.inverse()

    cloud_t, surface_t = _scan(RigidTransform.identity(), spec, boxes_t, rng)
    cloud_t1, surface_t1 = _scan(spec.ego_pose_change, spec, boxes_t1, rng)
    if len(cloud_t) == 0 or len(cloud_t1) == 0:
        raise GenerationError("no surface is visible to the scanner")

    flows, ego_flows, hit_points, hit_pixels, hit_surfaces = [], [], [], [], []
    for cam in spec.cameras:
        flow, ego, pts, pixels, sids = _render_camera(cam, spec, boxes_t, ego_motion)
        flows.append(flow)
        ego_flows.append(ego)
        hit_points.append(pts)
        hit_pixels.append(pixels)
        hit_surfaces.append(sids)

    return SceneBundle(
        spec=spec,
        cloud_t=cloud_t,
        cloud_t1=cloud_t1,
        surface_t=surface_t,
        surface_t1=surface_t1,
        cameras=spec.cameras,
        flows=flows,
        ego_flows=ego_flows,
        hit_points=hit_points,
        hit_pixels=hit_pixels,
        hit_surfaces=hit_surfaces,
        ego_motion=ego_motion,
        truth=_build_truth(spec, cloud_t, surface_t),
    )


def occlusion_mask(points, objects, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """True for points whose line of sight from ``origin`` is blocked by a box.

    A point sitting on a box surface does not occlude itself; only strictly
    nearer surfaces along the ray count.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    origin = np.asarray(origin, dtype=float)
    dirs = pts - origin        # the point itself sits at parameter 1
    blocked = np.zeros(len(pts), bool)
    for obj in objects:
        lo, hi = obj.bounds(0.0)
        t = _ray_boxes(origin, dirs, lo, hi)
        blocked |= np.isfinite(t) & (t < 1.0 - 1e-6)
    return blocked


def occlusion_cull(points, objects, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Drop points hidden behind a box as seen from ``origin``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts[~occlusion_mask(pts, objects, origin)]


def camera_ring(count: int = 4, width: int = 320, height: int = 192,
                focal: float = 160.0, pitch_deg: float = 8.0,
                mount_radius: float = 0.2, mount_height: float = 1.4) -> tuple:
    """Evenly yawed pinhole cameras looking slightly down, mounted on the roof.

    The vehicle frame has its origin on the ground beneath the sensor, so
    ``mount_height`` is the camera height above ground.
    """
    k = np.array([[focal, 0.0, width / 2.0],
                  [0.0, focal, height / 2.0],
                  [0.0, 0.0, 1.0]])
    cams = []
    for i in range(count):
        yaw = 2.0 * np.pi * i / count
        c, s = np.cos(yaw), np.sin(yaw)
        beta = np.deg2rad(pitch_deg)
        cb, sb = np.cos(beta), np.sin(beta)
        # camera axes in the vehicle frame: x right, y down, z optical
        r_cam_to_lidar = np.array([
            [s, -sb * c, cb * c],
            [-c, -sb * s, cb * s],
            [0.0, -cb, -sb],
        ])
        mount = np.array([mount_radius * c, mount_radius * s, mount_height])
        extrinsic = RigidTransform(r_cam_to_lidar.T, -r_cam_to_lidar.T @ mount)
        cams.append(CameraModel(k, extrinsic, width, height))
    return tuple(cams)


def benchmark_suite(n_scenes: int = 20) -> list:
    """The pinned synthetic suite used by the evaluation harnesses.

    Each scene mixes a slow and a fast mover with static clutter under
    nonzero ego motion; fast movers head roughly along the line of sight so
    camera-only supervision exhibits its depth ambiguity. Layout randomness
    is seeded separately from scan noise, and everything is pinned by the
    scene index.
    """
    grid = GridSpec(-16.0, 16.0, -16.0, 16.0, 0.5)
    lidar = LidarModel(rings=16, azimuth_steps=360, range_noise=0.01,
                       max_range=45.0)
    cameras = camera_ring(4)
    specs = []
    for i in range(n_scenes):
        rng = np.random.default_rng(9000 + i)
        forward = rng.uniform(0.6, 1.8)
        lateral = rng.uniform(-0.15, 0.15)
        yaw = np.deg2rad(rng.uniform(-1.5, 1.5))
        ego = RigidTransform(rot_z(yaw), np.array([forward, lateral, 0.0]))

        objects = []

        def place(speed, size, radial_bias, tag):
            for _ in range(64):
                radius = rng.uniform(4.0, 13.0)
                angle = rng.uniform(0.0, 2.0 * np.pi)
                cx, cy = radius * np.cos(angle), radius * np.sin(angle)
                if radial_bias:
                    heading = angle + (0.0 if rng.random() < 0.5 else np.pi)
                    heading += rng.uniform(-0.5, 0.5)
                else:
                    heading = rng.uniform(0.0, 2.0 * np.pi)
                vx, vy = speed * np.cos(heading), speed * np.sin(heading)
                x1, y1 = cx + vx * 0.5, cy + vy * 0.5
                if max(abs(cx), abs(cy), abs(x1), abs(y1)) <= 14.0:
                    objects.append(BoxSpec(size, (cx, cy, size[2] / 2.0), (vx, vy), tag))
                    return

        place(rng.uniform(1.0, 4.0), (4.2, 1.8, 1.5), False, "slow_car")
        place(rng.uniform(5.5, 9.0), (4.2, 1.8, 1.5), True, "fast_car")
        place(0.0, (2.4, 2.4, 2.2), False, "parked")
        place(0.0, (0.5, 6.0, 2.0), False, "wall")

        specs.append(SceneSpec(
            seed=1000 + i,
            grid=grid,
            interval=0.5,
            ego_pose_change=ego,
            objects=tuple(objects),
            ground_extent=18.0,
            ground_density=2.0,
            lidar=lidar,
            cameras=cameras,
        ))
    return specs
