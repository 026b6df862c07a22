"""Readers and writers for the on-disk formats.

All binary formats are little-endian with a 4-byte magic tag. Declared
sizes must match the payload exactly; readers refuse payloads beyond a
configurable cap before allocating. Writers reject non-finite data.

* point cloud ``PCB1``: uint32 count, then count (x, y, z) float32 triples
* flow image ``FLB1``: uint32 width, height, then H*W (u, v) float32 pairs
  row-major, then H*W validity bytes
* motion field ``PMF1``: uint32 H, W, float32 cell_size, x_min, y_min,
  horizon, then H*W (mx, my) float32 pairs row-major, then H*W nonempty bytes
* truth labels: raw H*W bytes of bitflags (bit 0 static, 1 slow, 2 fast,
  3 foreground, 4 moving), dimensions implied by the matching field file
* calibration: JSON with per-camera intrinsics/extrinsics plus the
  sweep-pair ego transform (static-content coordinates, earlier frame to
  later frame)
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .geometry import CameraModel, FlowImage, RigidTransform
from .losses import SceneInputs
from .pillar_grid import GridSpec, PillarMotionField
from .simulator import BoxSpec, LidarModel, SceneSpec, SceneTruth

MAX_PAYLOAD_BYTES = 1 << 30

_LABEL_BITS = ("static", "slow", "fast", "foreground", "moving")


class FormatError(ValueError):
    """A file failed structural validation."""


def _check_finite(arr, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")


def _check_cap(nbytes: int, path: str) -> None:
    if nbytes > MAX_PAYLOAD_BYTES:
        raise FormatError(f"{path}: declared payload of {nbytes} bytes exceeds "
                          f"the {MAX_PAYLOAD_BYTES} byte cap")


def _read_exact(fh, n: int, path: str, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        offset = fh.tell() - len(data)
        raise FormatError(f"{path}: truncated {what} at byte {offset}: "
                          f"expected {n} bytes, got {len(data)}")
    return data


def _read_magic(fh, magic: bytes, path: str) -> None:
    tag = fh.read(4)
    if tag != magic:
        raise FormatError(f"{path}: bad magic at byte 0: expected {magic!r}, got {tag!r}")


def write_cloud(path, cloud) -> None:
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    _check_finite(pts, "point cloud")
    with open(path, "wb") as fh:
        fh.write(b"PCB1")
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.astype("<f4").tobytes())


def read_cloud(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _read_magic(fh, b"PCB1", str(path))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, str(path), "header"))
        _check_cap(count * 12, str(path))
        payload = _read_exact(fh, count * 12, str(path), "points")
        trailing = fh.read(1)
    if trailing:
        raise FormatError(f"{path}: trailing bytes after {count} points")
    pts = np.frombuffer(payload, dtype="<f4").reshape(count, 3).astype(np.float64)
    if not np.isfinite(pts).all():
        raise FormatError(f"{path}: non-finite point coordinates")
    return pts


def write_flow(path, flow: FlowImage) -> None:
    _check_finite(flow.flow, "flow image")
    with open(path, "wb") as fh:
        fh.write(b"FLB1")
        fh.write(struct.pack("<II", flow.width, flow.height))
        fh.write(flow.flow.astype("<f4").tobytes())
        fh.write(flow.valid.astype(np.uint8).tobytes())


def read_flow(path) -> FlowImage:
    with open(path, "rb") as fh:
        _read_magic(fh, b"FLB1", str(path))
        w, h = struct.unpack("<II", _read_exact(fh, 8, str(path), "header"))
        _check_cap(h * w * 9, str(path))
        payload = _read_exact(fh, h * w * 8, str(path), "flow values")
        validity = _read_exact(fh, h * w, str(path), "validity bytes")
        trailing = fh.read(1)
    if trailing:
        raise FormatError(f"{path}: trailing bytes after {w}x{h} flow image")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: non-finite flow values")
    valid = np.frombuffer(validity, dtype=np.uint8).reshape(h, w) != 0
    return FlowImage(values, valid)


def write_field(path, field: PillarMotionField) -> None:
    _check_finite(field.motion, "motion field")
    grid = field.grid
    with open(path, "wb") as fh:
        fh.write(b"PMF1")
        fh.write(struct.pack("<II", grid.height, grid.width))
        fh.write(struct.pack("<ffff", grid.cell_size, grid.x_min, grid.y_min,
                             field.horizon))
        fh.write(field.motion.astype("<f4").tobytes())
        fh.write(field.nonempty.astype(np.uint8).tobytes())


def read_field(path) -> PillarMotionField:
    with open(path, "rb") as fh:
        _read_magic(fh, b"PMF1", str(path))
        h, w = struct.unpack("<II", _read_exact(fh, 8, str(path), "header"))
        cell, x_min, y_min, horizon = struct.unpack(
            "<ffff", _read_exact(fh, 16, str(path), "header"))
        _check_cap(h * w * 9, str(path))
        payload = _read_exact(fh, h * w * 8, str(path), "motion values")
        flags = _read_exact(fh, h * w, str(path), "nonempty flags")
        trailing = fh.read(1)
    if trailing:
        raise FormatError(f"{path}: trailing bytes after {h}x{w} field")
    cell = float(cell)
    x_min = float(x_min)
    y_min = float(y_min)
    grid = GridSpec(x_min, x_min + w * cell, y_min, y_min + h * cell, cell)
    motion = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    if not np.isfinite(motion).all():
        raise FormatError(f"{path}: non-finite motion values")
    nonempty = np.frombuffer(flags, dtype=np.uint8).reshape(h, w) != 0
    return PillarMotionField(grid, motion, nonempty, float(horizon))


def write_labels(path, truth: SceneTruth) -> None:
    flags = np.zeros(truth.field.nonempty.shape, dtype=np.uint8)
    for bit, name in enumerate(_LABEL_BITS):
        flags |= getattr(truth, name).astype(np.uint8) << bit
    with open(path, "wb") as fh:
        fh.write(flags.tobytes())


def read_labels(path, height: int, width: int) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) != height * width:
        raise FormatError(f"{path}: expected {height * width} label bytes, "
                          f"got {len(data)}")
    flags = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    return {name: (flags >> bit) & 1 != 0 for bit, name in enumerate(_LABEL_BITS)}


def read_truth(field_path, labels_path) -> SceneTruth:
    """Reassemble SceneTruth from its field and label files.

    Speeds are recovered from the stored displacements, so they are exact on
    nonempty pillars and zero elsewhere.
    """
    field = read_field(field_path)
    labels = read_labels(labels_path, field.grid.height, field.grid.width)
    speed = np.linalg.norm(field.motion, axis=-1) / field.horizon
    return SceneTruth(field=field, speed=speed, **labels)


def _camera_dict(cam: CameraModel) -> dict:
    return {
        "intrinsics": [float(v) for v in cam.intrinsics.reshape(-1)],
        "extrinsic_rotation": [float(v) for v in cam.extrinsic.rotation.reshape(-1)],
        "extrinsic_translation": [float(v) for v in cam.extrinsic.translation],
        "width": int(cam.width),
        "height": int(cam.height),
    }


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise FormatError(f"{where}: missing key '{key}'")
    return mapping[key]


def _reject_unknown(mapping: dict, known, where: str) -> None:
    unknown = set(mapping) - set(known)
    if unknown:
        raise FormatError(f"{where}: unknown keys {sorted(unknown)}")


def _camera_from_dict(entry: dict, where: str) -> CameraModel:
    keys = ("intrinsics", "extrinsic_rotation", "extrinsic_translation",
            "width", "height")
    _reject_unknown(entry, keys, where)
    k = np.array(_require(entry, "intrinsics", where), dtype=float).reshape(3, 3)
    rot = np.array(_require(entry, "extrinsic_rotation", where), dtype=float).reshape(3, 3)
    trans = np.array(_require(entry, "extrinsic_translation", where), dtype=float)
    return CameraModel(k, RigidTransform(rot, trans),
                       int(_require(entry, "width", where)),
                       int(_require(entry, "height", where)))


def write_calib(path, cameras, ego_motion: RigidTransform) -> None:
    payload = {
        "cameras": [_camera_dict(cam) for cam in cameras],
        "ego_rotation": [float(v) for v in ego_motion.rotation.reshape(-1)],
        "ego_translation": [float(v) for v in ego_motion.translation],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_calib(path):
    """Returns (cameras, ego_motion)."""
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    _reject_unknown(payload, ("cameras", "ego_rotation", "ego_translation"), str(path))
    cameras = tuple(
        _camera_from_dict(entry, f"{path}: cameras[{i}]")
        for i, entry in enumerate(_require(payload, "cameras", str(path)))
    )
    rot = np.array(_require(payload, "ego_rotation", str(path)), dtype=float).reshape(3, 3)
    trans = np.array(_require(payload, "ego_translation", str(path)), dtype=float)
    return cameras, RigidTransform(rot, trans)


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "seed": int(spec.seed),
        "interval": float(spec.interval),
        "grid": {
            "x_min": spec.grid.x_min, "x_max": spec.grid.x_max,
            "y_min": spec.grid.y_min, "y_max": spec.grid.y_max,
            "cell_size": spec.grid.cell_size,
        },
        "ego_pose_change": {
            "rotation": [float(v) for v in spec.ego_pose_change.rotation.reshape(-1)],
            "translation": [float(v) for v in spec.ego_pose_change.translation],
        },
        "objects": [
            {"size": list(o.size), "center": list(o.center),
             "velocity": list(o.velocity), "tag": o.tag}
            for o in spec.objects
        ],
        "ground": {"extent": spec.ground_extent, "density": spec.ground_density},
        "lidar": {
            "rings": spec.lidar.rings,
            "azimuth_steps": spec.lidar.azimuth_steps,
            "elevation_min_deg": spec.lidar.elevation_min_deg,
            "elevation_max_deg": spec.lidar.elevation_max_deg,
            "range_noise": spec.lidar.range_noise,
            "max_range": spec.lidar.max_range,
            "height": spec.lidar.height,
        },
        "cameras": [_camera_dict(cam) for cam in spec.cameras],
    }


def scene_spec_from_dict(payload: dict, where: str = "scene spec") -> SceneSpec:
    keys = ("seed", "interval", "grid", "ego_pose_change", "objects", "ground",
            "lidar", "cameras")
    _reject_unknown(payload, keys, where)
    grid_d = _require(payload, "grid", where)
    _reject_unknown(grid_d, ("x_min", "x_max", "y_min", "y_max", "cell_size"),
                    f"{where}: grid")
    grid = GridSpec(**{k: float(v) for k, v in grid_d.items()})
    ego_d = _require(payload, "ego_pose_change", where)
    _reject_unknown(ego_d, ("rotation", "translation"), f"{where}: ego_pose_change")
    ego = RigidTransform(
        np.array(ego_d["rotation"], dtype=float).reshape(3, 3),
        np.array(ego_d["translation"], dtype=float),
    )
    objects = []
    for i, entry in enumerate(_require(payload, "objects", where)):
        _reject_unknown(entry, ("size", "center", "velocity", "tag"),
                        f"{where}: objects[{i}]")
        objects.append(BoxSpec(
            tuple(_require(entry, "size", f"{where}: objects[{i}]")),
            tuple(_require(entry, "center", f"{where}: objects[{i}]")),
            tuple(_require(entry, "velocity", f"{where}: objects[{i}]")),
            str(entry.get("tag", "object")),
        ))
    ground = _require(payload, "ground", where)
    _reject_unknown(ground, ("extent", "density"), f"{where}: ground")
    lidar_d = _require(payload, "lidar", where)
    _reject_unknown(lidar_d, ("rings", "azimuth_steps", "elevation_min_deg",
                              "elevation_max_deg", "range_noise", "max_range",
                              "height"), f"{where}: lidar")
    cameras = tuple(
        _camera_from_dict(entry, f"{where}: cameras[{i}]")
        for i, entry in enumerate(_require(payload, "cameras", where))
    )
    return SceneSpec(
        seed=int(_require(payload, "seed", where)),
        grid=grid,
        interval=float(_require(payload, "interval", where)),
        ego_pose_change=ego,
        objects=tuple(objects),
        ground_extent=float(_require(ground, "extent", f"{where}: ground")),
        ground_density=float(_require(ground, "density", f"{where}: ground")),
        lidar=LidarModel(**lidar_d),
        cameras=cameras,
    )


def write_scene_spec(path, spec: SceneSpec) -> None:
    with open(path, "w") as fh:
        json.dump(scene_spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_scene_spec(path) -> SceneSpec:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return scene_spec_from_dict(payload, str(path))


def write_bundle(dirpath, bundle) -> None:
    """Write a scene bundle directory (clouds, calib, flows, truth, spec)."""
    os.makedirs(dirpath, exist_ok=True)
    join = lambda name: os.path.join(dirpath, name)
    write_cloud(join("cloud_t.bin"), bundle.cloud_t)
    write_cloud(join("cloud_t1.bin"), bundle.cloud_t1)
    write_calib(join("calib.json"), bundle.cameras, bundle.ego_motion)
    for i, (flow, ego) in enumerate(zip(bundle.flows, bundle.ego_flows)):
        write_flow(join(f"flow_cam{i}.bin"), flow)
        write_flow(join(f"ego_flow_cam{i}.bin"), ego)
    write_field(join("truth.pmf"), bundle.truth.field)
    write_labels(join("truth_labels.bin"), bundle.truth)
    write_scene_spec(join("spec.json"), bundle.spec)


def read_bundle(dirpath):
    """Load a scene bundle directory.

    Returns (SceneInputs, SceneTruth, SceneSpec). Flow files are optional:
    when absent, the scene carries no camera data and only the point-cloud
    terms of the objective are available.
    """
    join = lambda name: os.path.join(dirpath, name)
    spec = read_scene_spec(join("spec.json"))
    cloud_t = read_cloud(join("cloud_t.bin"))
    cloud_t1 = read_cloud(join("cloud_t1.bin"))
    cameras, ego_motion = read_calib(join("calib.json"))
    flows = []
    have_all = True
    for i in range(len(cameras)):
        flow_path = join(f"flow_cam{i}.bin")
        if not os.path.exists(flow_path):
            have_all = False
            break
        flows.append(read_flow(flow_path))
    if not have_all or not cameras:
        cameras, flows = (), []
    scene = SceneInputs(cloud_t, cloud_t1, spec.grid, spec.interval,
                        cameras, flows, ego_motion)
    truth = read_truth(join("truth.pmf"), join("truth_labels.bin"))
    return scene, truth, spec


def write_trace(path, result) -> None:
    """Per-iteration loss terms and diagnostics of one estimation run."""
    payload = {
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "diagnostics": result.diagnostics,
        "trace": result.trace,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
