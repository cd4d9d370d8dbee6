"""Synthetic planar driving scenes: moving boxes, ego motion, rasterized
observations, and the on-disk dataset format.

A scene is a short trajectory of ego poses plus per-frame ground-truth box
sets, each expressed in that frame's own ego coordinates. Observations are
soft-rasterized occupancy/attribute grids that stand in for camera-derived
BEV inputs; a per-frame dropout noise simulates occlusion so temporal fusion
has something to recover.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import geometry
from .bevnet import BEVGridSpec
from .errors import ConfigError, FormatError
from .geometry import Transform2D, pose_relative, transform_boxes, wrap_angle
from .serialization import read_container, sha256_file, verify_checksum, write_container

DATASET_MAGIC = b"HOPDSEQ1"
MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


@dataclass
class Box3D:
    """One object: planar center, height center, size, yaw, planar velocity."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float
    vy: float
    cls: int
    track_id: int

    def __post_init__(self):
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValueError(f"box sizes must be positive, got w={self.w}, l={self.l}, h={self.h}")
        self.yaw = float(wrap_angle(self.yaw))

    def center(self):
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass
class EgoPose:
    px: float
    py: float
    heading: float
    frame_index: int

    def __post_init__(self):
        self.heading = float(wrap_angle(self.heading))


@dataclass
class SceneSequence:
    """Ego trajectory plus per-frame GT box sets in per-frame ego coords."""

    poses: list
    gt: list
    dt: float
    seed: int

    def __post_init__(self):
        if len(self.poses) != len(self.gt):
            raise ValueError(f"{len(self.poses)} poses vs {len(self.gt)} gt frames")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        indices = [p.frame_index for p in self.poses]
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise ValueError(f"frame indices must be strictly increasing, got {indices}")

    @property
    def n_frames(self):
        return len(self.poses)


@dataclass
class ObservationGrid:
    values: np.ndarray  # (H, W, C_obs) float32
    frame_index: int
    reference_pose: EgoPose


@dataclass
class WorldConfig:
    """Generator knobs. ``extent`` mirrors the BEV grid extent so frame-0
    boxes always start inside the observed area."""

    n_frames: int = 6
    dt: float = 0.5
    extent: float = 32.0
    n_objects: tuple = (2, 6)
    object_speed: tuple = (0.0, 3.0)
    ego_speed: tuple = (0.0, 3.0)
    ego_turn_rate: tuple = (-0.3, 0.3)
    n_classes: int = 3
    box_wl: tuple = (1.2, 4.0)
    box_h: tuple = (1.0, 2.5)
    z_range: tuple = (0.2, 1.6)
    z_norm: float = 3.0
    process_noise: float = 0.0
    dropout: float = 0.15
    n_sequences: int = 232

    def validate(self):
        if self.n_frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.n_frames}")
        if self.extent <= 0:
            raise ConfigError(f"extent must be positive, got {self.extent}")
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.n_objects[0] < 0 or self.n_objects[1] < self.n_objects[0]:
            raise ConfigError(f"bad object count range {self.n_objects}")
        if self.n_classes < 1:
            raise ConfigError("need at least one class")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError(f"dropout must be in [0, 1], got {self.dropout}")
        return self

    def to_dict(self):
        d = {}
        for name, value in self.__dict__.items():
            d[name] = list(value) if isinstance(value, tuple) else value
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        for name, value in d.items():
            if name not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown world config key {name!r}")
            kwargs[name] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs).validate()


@dataclass
class NoiseConfig:
    dropout: float = 0.0
    seed: int = 0


def obs_channels(n_classes: int) -> int:
    """occupancy + class one-hot + (z, w, l, sin yaw, cos yaw)."""
    return 1 + n_classes + 5


def _q(x: float) -> float:
    # Sequences are persisted as float32; quantizing at generation time makes
    # the write/read round trip element-wise exact.
    return float(np.float32(x))


def _q_angle(a: float) -> float:
    # Quantize then re-wrap until stable: values within a float32 ulp of pi
    # can round outside (-pi, pi] and need a second pass.
    a = _q(wrap_angle(a))
    for _ in range(4):
        w = float(wrap_angle(a))
        if w == a:
            return a
        a = _q(w)
    return a


def generate_scene(seed: int, cfg: WorldConfig) -> SceneSequence:
    """Deterministically generate one scene from (seed, cfg).

    The ego starts at the world origin with heading 0 and drives with a
    per-sequence constant speed and turn rate. Tracks move with constant
    world-frame velocity directed along their yaw; z and height stay fixed.
    Per-frame GT is expressed in that frame's ego coordinates.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)

    ego_speed = rng.uniform(*cfg.ego_speed)
    turn_rate = rng.uniform(*cfg.ego_turn_rate)
    poses = []
    px, py, heading = 0.0, 0.0, 0.0
    for j in range(cfg.n_frames):
        poses.append(EgoPose(px=_q(px), py=_q(py), heading=_q_angle(heading), frame_index=j))
        px += ego_speed * cfg.dt * math.cos(heading)
        py += ego_speed * cfg.dt * math.sin(heading)
        heading = float(wrap_angle(heading + turn_rate * cfg.dt))

    n_obj = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    half = cfg.extent / 2.0
    tracks = []
    for t in range(n_obj):
        yaw = float(wrap_angle(rng.uniform(-math.pi, math.pi)))
        speed = rng.uniform(*cfg.object_speed)
        tracks.append(
            {
                "pos": rng.uniform(-half, half, size=2),  # frame-0 ego == world
                "yaw": yaw,
                "vel": speed * np.array([math.cos(yaw), math.sin(yaw)]),
                "w": rng.uniform(*cfg.box_wl),
                "l": rng.uniform(*cfg.box_wl),
                "h": rng.uniform(*cfg.box_h),
                "z": rng.uniform(*cfg.z_range),
                "cls": int(rng.integers(cfg.n_classes)),
            }
        )

    gt = []
    positions = [np.array(t["pos"], dtype=np.float64) for t in tracks]
    for j in range(cfg.n_frames):
        pose = poses[j]
        world_to_ego = geometry.invert(Transform2D(pose.heading, pose.px, pose.py))
        frame = []
        for tid, (track, pos) in enumerate(zip(tracks, positions)):
            ex, ey = world_to_ego.apply(pos)
            evx, evy = world_to_ego.apply_vectors(track["vel"])
            frame.append(
                Box3D(
                    x=_q(ex),
                    y=_q(ey),
                    z=_q(track["z"]),
                    w=_q(track["w"]),
                    l=_q(track["l"]),
                    h=_q(track["h"]),
                    yaw=_q_angle(track["yaw"] - pose.heading),
                    vx=_q(evx),
                    vy=_q(evy),
                    cls=track["cls"],
                    track_id=tid,
                )
            )
        gt.append(frame)
        # Advance tracks in world coordinates.
        for i, track in enumerate(tracks):
            step = track["vel"] * cfg.dt
            if cfg.process_noise > 0:
                step = step + rng.normal(0.0, cfg.process_noise, size=2)
            positions[i] = positions[i] + step

    return SceneSequence(poses=poses, gt=gt, dt=cfg.dt, seed=seed)


def splat_boxes(boxes, grid: BEVGridSpec, n_classes: int, z_norm: float = 3.0) -> np.ndarray:
    """Soft-rasterize boxes into an (H, W, C_obs) float32 grid.

    Box centers splat bilinearly into their four neighboring cells: the
    occupancy channel accumulates the bilinear weights (clipped to 1), the
    attribute channels (z / z_norm, w, l, sin yaw, cos yaw) accumulate
    weight * value. Class channels get a truncated Gaussian stamp (sigma one
    cell, radius 3) combined by elementwise max. Boxes outside the grid
    contribute nothing.
    """
    H, W = grid.H, grid.W
    C = obs_channels(n_classes)
    out = np.zeros((H, W, C), dtype=np.float64)
    occ = out[:, :, 0]
    cls_maps = out[:, :, 1 : 1 + n_classes]
    attrs = out[:, :, 1 + n_classes :]

    for b in boxes:
        gr, gc = grid.world_to_grid(b.x, b.y)
        r0, c0 = math.floor(gr), math.floor(gc)
        fr, fc = gr - r0, gc - c0
        vec = np.array([b.z / z_norm, b.w, b.l, math.sin(b.yaw), math.cos(b.yaw)])
        for dr, dc, wgt in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            r, c = r0 + dr, c0 + dc
            if 0 <= r < H and 0 <= c < W and wgt > 0:
                occ[r, c] += wgt
                attrs[r, c] += wgt * vec
        # Gaussian class stamp.
        radius = 3
        sigma = 1.0
        for r in range(max(0, int(math.ceil(gr - radius))), min(H, int(math.floor(gr + radius)) + 1)):
            for c in range(max(0, int(math.ceil(gc - radius))), min(W, int(math.floor(gc + radius)) + 1)):
                g = math.exp(-((r - gr) ** 2 + (c - gc) ** 2) / (2 * sigma**2))
                cls_maps[r, c, b.cls] = max(cls_maps[r, c, b.cls], g)

    np.clip(occ, 0.0, 1.0, out=occ)
    return out.astype(np.float32)


def rasterize_in_frame(
    seq: SceneSequence,
    source_frame: int,
    reference_frame: int,
    grid: BEVGridSpec,
    n_classes: int,
    noise: NoiseConfig | None = None,
    z_norm: float = 3.0,
) -> ObservationGrid:
    """Rasterize source-frame boxes into a grid expressed in the reference
    frame's ego coordinates. Deterministic given (seq.seed, frames, noise).
    """
    n = seq.n_frames
    if not (0 <= source_frame < n) or not (0 <= reference_frame < n):
        raise IndexError(f"frames ({source_frame}, {reference_frame}) out of range for {n}")
    t = pose_relative(seq.poses[reference_frame], seq.poses[source_frame])
    boxes = transform_boxes(seq.gt[source_frame], t)
    values = splat_boxes(boxes, grid, n_classes, z_norm=z_norm)
    if noise is not None and noise.dropout > 0:
        rng = np.random.default_rng([noise.seed & 0x7FFFFFFF, seq.seed & 0x7FFFFFFF, source_frame])
        drop = rng.random((grid.H, grid.W)) < noise.dropout
        occupied = values[:, :, 0] > 0
        values[drop & occupied] = 0.0
    return ObservationGrid(values=values, frame_index=source_frame, reference_pose=seq.poses[reference_frame])


def _sequence_arrays(seq: SceneSequence):
    poses = np.array([[p.px, p.py, p.heading] for p in seq.poses], dtype=np.float32)
    frame_index = np.array([p.frame_index for p in seq.poses], dtype=np.int32)
    offsets = np.zeros(len(seq.gt) + 1, dtype=np.int32)
    rows = []
    ints = []
    for j, frame in enumerate(seq.gt):
        offsets[j + 1] = offsets[j] + len(frame)
        for b in frame:
            rows.append([b.x, b.y, b.z, b.w, b.l, b.h, b.yaw, b.vx, b.vy])
            ints.append([b.cls, b.track_id])
    boxes = np.array(rows, dtype=np.float32).reshape(-1, 9)
    box_ints = np.array(ints, dtype=np.int32).reshape(-1, 2)
    return [
        ("poses", poses),
        ("frame_index", frame_index),
        ("box_offsets", offsets),
        ("boxes", boxes),
        ("box_ints", box_ints),
    ]


def _sequence_from_arrays(meta, arrays) -> SceneSequence:
    try:
        poses_arr = arrays["poses"]
        frame_index = arrays["frame_index"]
        offsets = arrays["box_offsets"]
        boxes = arrays["boxes"]
        box_ints = arrays["box_ints"]
    except KeyError as e:
        raise FormatError(f"sequence file missing array {e}") from e
    poses = [
        EgoPose(px=float(p[0]), py=float(p[1]), heading=float(p[2]), frame_index=int(fi))
        for p, fi in zip(poses_arr, frame_index)
    ]
    gt = []
    for j in range(len(poses)):
        frame = []
        for i in range(int(offsets[j]), int(offsets[j + 1])):
            r = boxes[i]
            frame.append(
                Box3D(
                    x=float(r[0]), y=float(r[1]), z=float(r[2]),
                    w=float(r[3]), l=float(r[4]), h=float(r[5]),
                    yaw=float(r[6]), vx=float(r[7]), vy=float(r[8]),
                    cls=int(box_ints[i, 0]), track_id=int(box_ints[i, 1]),
                )
            )
        gt.append(frame)
    return SceneSequence(poses=poses, gt=gt, dt=float(meta["dt"]), seed=int(meta["seed"]))


def write_dataset(seqs, path, world: WorldConfig, grid: BEVGridSpec) -> dict:
    """Write sequences plus a manifest into a dataset directory."""
    os.makedirs(path, exist_ok=True)
    entries = []
    total_frames = 0
    total_boxes = 0
    for i, seq in enumerate(seqs):
        fname = f"seq_{i:05d}.bin"
        fpath = os.path.join(path, fname)
        n_boxes = sum(len(f) for f in seq.gt)
        write_container(
            fpath,
            DATASET_MAGIC,
            {"seed": seq.seed, "dt": seq.dt, "n_frames": seq.n_frames, "n_boxes": n_boxes},
            _sequence_arrays(seq),
            allowed_dtypes=("<f4", "<i4"),
        )
        entries.append(
            {
                "file": fname,
                "sha256": sha256_file(fpath),
                "n_frames": seq.n_frames,
                "n_boxes": n_boxes,
                "seed": seq.seed,
            }
        )
        total_frames += seq.n_frames
        total_boxes += n_boxes
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n_sequences": len(entries),
        "counts": {"frames": total_frames, "boxes": total_boxes},
        "world": world.to_dict(),
        "grid": grid.to_dict(),
        "sequences": entries,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def read_manifest(path) -> dict:
    mpath = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(mpath):
        raise FormatError(f"{path}: no {MANIFEST_NAME}")
    with open(mpath, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{mpath}: invalid JSON: {e}") from e
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(f"{mpath}: schema version {version}, expected {SCHEMA_VERSION}")
    return manifest


def read_dataset(path, verify=True):
    """Read a dataset directory back into (manifest, list of SceneSequence)."""
    manifest = read_manifest(path)
    seqs = []
    for entry in manifest["sequences"]:
        fpath = os.path.join(path, entry["file"])
        if verify:
            verify_checksum(fpath, entry["sha256"])
        meta, arrays = read_container(fpath, DATASET_MAGIC)
        seqs.append(_sequence_from_arrays(meta, arrays))
    return manifest, seqs


def generate_dataset(base_seed: int, world: WorldConfig, grid: BEVGridSpec, path) -> dict:
    """Generate ``world.n_sequences`` scenes and persist them."""
    world.validate()
    seqs = []
    for i in range(world.n_sequences):
        child = int(np.random.SeedSequence([base_seed & 0x7FFFFFFF, i]).generate_state(1)[0])
        seqs.append(generate_scene(child, world))
    return write_dataset(seqs, path, world, grid)


def boxes_in_extent(boxes, grid: BEVGridSpec):
    """Split a frame's boxes into (inside, outside) the grid extent."""
    inside, outside = [], []
    for b in boxes:
        (inside if grid.contains(b.x, b.y) else outside).append(b)
    return inside, outside
