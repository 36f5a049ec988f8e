"""Synthetic grayscale scenes of flat shapes with grasp annotations.

Each scene is a 64x64 (configurable) silhouette image plus, per object,
oriented grasp rectangles (cx, cy, h, w, theta): ``theta`` is the
direction the gripper closes along, ``h`` the opening extent along that
axis, ``w`` the jaw width across it. Theta lives in [-pi/2, pi/2)
because a parallel-jaw grasp at theta and theta + pi are the same grasp.

Five shape kinds exist; Ring is reserved for generalization tests and
must be requested explicitly, so ordinary training configs never emit
it. The exact geometry (polygon outlines, template grasp placements) is
defined here and nowhere else; see _SHAPES below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorruptFileError, PlacementError

SHAPE_KINDS = ("Cylinder", "LShape", "Star", "TShape", "Ring")
TRAINED_KINDS = ("Cylinder", "LShape", "Star", "TShape")


def wrap_half_pi(theta: float) -> float:
    """Fold an angle into [-pi/2, pi/2), identifying theta with theta+pi."""
    return (theta + np.pi / 2) % np.pi - np.pi / 2


@dataclass(frozen=True)
class ObjectPose:
    kind: str
    cx: float
    cy: float
    rotation: float      # radians in [0, 2*pi)
    scale: float         # pixels per unit of local shape coordinates


@dataclass(frozen=True)
class GraspLabel:
    cx: float
    cy: float
    h: float
    w: float
    theta: float         # radians in [-pi/2, pi/2)
    object_index: int
    shape: str


@dataclass
class LabeledScene:
    image: np.ndarray    # (1, S, S) float64 in [0, 1]
    poses: list
    grasps: list
    scene_id: int = 0
    seed: int = 0


# ---------------------------------------------------------------------------
# shape geometry, in local coordinates at unit scale
# ---------------------------------------------------------------------------

def _star_vertices():
    verts = []
    for k in range(10):
        r = 1.0 if k % 2 == 0 else 0.45
        a = np.pi / 2 + k * np.pi / 5
        verts.append((r * np.cos(a), r * np.sin(a)))
    return tuple(verts)


# Each entry: polygon vertices (None for radial shapes), radii for
# disk/annulus kinds, template grasps as (cx, cy, theta, h, w), and the
# circumradius of the silhouette (for bounds checks).
_L_VERTS = ((-1, -1), (-0.4, -1), (-0.4, 0.4), (1, 0.4), (1, 1), (-1, 1))
_T_VERTS = ((-0.3, -1), (0.3, -1), (0.3, 0.4), (1, 0.4), (1, 1),
            (-1, 1), (-1, 0.4), (-0.3, 0.4))

_SHAPES = {
    "Cylinder": {
        "poly": None, "radii": (0.0, 1.0),
        "grasps": ((0.0, 0.0, 0.0, 2.4, 0.9),
                   (0.0, 0.0, np.pi / 2, 2.4, 0.9)),
        "circumradius": 1.0,
    },
    "LShape": {
        "poly": _L_VERTS, "radii": None,
        "grasps": ((-0.7, -0.3, 0.0, 1.1, 0.8),
                   (0.3, 0.7, np.pi / 2, 1.1, 0.8)),
        "circumradius": float(np.sqrt(2.0)),
    },
    "Star": {
        "poly": _star_vertices(), "radii": None,
        "grasps": ((0.0, 0.0, 0.0, 2.2, 0.7),
                   (0.0, 0.0, np.pi / 2, 2.2, 0.7)),
        "circumradius": 1.0,
    },
    "TShape": {
        "poly": _T_VERTS, "radii": None,
        "grasps": ((0.0, -0.3, 0.0, 1.1, 0.8),
                   (0.6, 0.7, np.pi / 2, 1.1, 0.8)),
        "circumradius": float(np.sqrt(2.0)),
    },
    "Ring": {
        "poly": None, "radii": (0.55, 1.0),
        "grasps": ((0.775, 0.0, 0.0, 0.8, 0.8),
                   (0.0, 0.775, np.pi / 2, 0.8, 0.8)),
        "circumradius": 1.0,
    },
}


def _check_kind(kind):
    if kind not in _SHAPES:
        raise ConfigurationError(
            f"unknown shape kind {kind!r}, expected one of {SHAPE_KINDS}")


def silhouette_half_extents(pose: ObjectPose):
    """Half-width and half-height of the silhouette's axis-aligned box."""
    _check_kind(pose.kind)
    geom = _SHAPES[pose.kind]
    if geom["poly"] is None:
        r = geom["radii"][1] * pose.scale
        return r, r
    verts = np.asarray(geom["poly"], dtype=np.float64) * pose.scale
    c, s = np.cos(pose.rotation), np.sin(pose.rotation)
    x = verts[:, 0] * c - verts[:, 1] * s
    y = verts[:, 0] * s + verts[:, 1] * c
    return float(np.abs(x).max()), float(np.abs(y).max())


def silhouette_aabb(pose: ObjectPose):
    hx, hy = silhouette_half_extents(pose)
    return pose.cx - hx, pose.cy - hy, pose.cx + hx, pose.cy + hy


def _points_in_polygon(px, py, verts):
    """Even-odd crossing test, vectorized over pixel grids."""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = verts[-1]
    for x1, y1 in verts:
        straddles = (y0 > py) != (y1 > py)
        if y1 != y0:
            with np.errstate(divide="ignore", invalid="ignore"):
                x_cross = (x1 - x0) * (py - y0) / (y1 - y0) + x0
            inside ^= straddles & (px < x_cross)
        x0, y0 = x1, y1
    return inside


def shape_mask(pose: ObjectPose, image_size: int):
    """Boolean (S, S) silhouette of one posed object, pixel-center sampled."""
    _check_kind(pose.kind)
    geom = _SHAPES[pose.kind]
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    px = xs + 0.5 - pose.cx
    py = ys + 0.5 - pose.cy
    if geom["poly"] is None:
        r2 = px * px + py * py
        inner, outer = geom["radii"]
        s2 = pose.scale * pose.scale
        return (r2 <= outer * outer * s2) & (r2 >= inner * inner * s2)
    # rotate into local frame and undo scale
    c, s = np.cos(-pose.rotation), np.sin(-pose.rotation)
    lx = (px * c - py * s) / pose.scale
    ly = (px * s + py * c) / pose.scale
    return _points_in_polygon(lx, ly, geom["poly"])


def render_scene(poses, image_size: int, noise_sigma: float = 0.0, rng=None):
    """Rasterize silhouettes: interiors 1.0, background 0.0.

    The image passes through float32 once so that saving to disk as f32
    and loading back is bit-exact. Out-of-bounds poses are rejected by
    index before any drawing happens.
    """
    for idx, pose in enumerate(poses):
        x0, y0, x1, y1 = silhouette_aabb(pose)
        if x0 < 0 or y0 < 0 or x1 > image_size or y1 > image_size:
            raise ConfigurationError(
                f"pose {idx} ({pose.kind}) extends outside the "
                f"{image_size}x{image_size} image")
    img = np.zeros((image_size, image_size), dtype=np.float64)
    for pose in poses:
        img[shape_mask(pose, image_size)] = 1.0
    if noise_sigma > 0:
        if rng is None:
            raise ConfigurationError("noise_sigma > 0 requires an rng")
        img = np.clip(img + rng.normal(0.0, noise_sigma, img.shape), 0.0, 1.0)
    return img.astype(np.float32).astype(np.float64)[None]


def grasp_labels_for(pose: ObjectPose, object_index: int = 0):
    """Template grasps of the pose's kind, mapped through its transform."""
    _check_kind(pose.kind)
    c, s = np.cos(pose.rotation), np.sin(pose.rotation)
    out = []
    for gx, gy, gtheta, gh, gw in _SHAPES[pose.kind]["grasps"]:
        wx = pose.cx + pose.scale * (gx * c - gy * s)
        wy = pose.cy + pose.scale * (gx * s + gy * c)
        out.append(GraspLabel(
            cx=float(wx), cy=float(wy),
            h=float(gh * pose.scale), w=float(gw * pose.scale),
            theta=float(wrap_half_pi(gtheta + pose.rotation)),
            object_index=object_index, shape=pose.kind))
    return out


def grasp_aabb(label: GraspLabel):
    """Axis-aligned box of an oriented grasp rectangle, (x0, y0, x1, y1)."""
    ct, st = abs(np.cos(label.theta)), abs(np.sin(label.theta))
    hx = 0.5 * (label.h * ct + label.w * st)
    hy = 0.5 * (label.h * st + label.w * ct)
    return label.cx - hx, label.cy - hy, label.cx + hx, label.cy + hy


# ---------------------------------------------------------------------------
# dataset sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    num_scenes: int
    objects_per_scene: int = 1
    allowed_kinds: tuple = TRAINED_KINDS
    mixed: bool = False
    required_kinds: tuple = ()    # kinds forced to appear exactly once
    image_size: int = 64
    scale_range: tuple = (8.0, 12.0)
    noise_sigma: float = 0.0
    seed: int = 0
    margin: float = 1.0           # blank border kept around silhouettes
    gap: float = 1.0              # min spacing between silhouette boxes


def _choose_kinds(rng, config: SceneConfig):
    pool = list(config.allowed_kinds)
    required = list(config.required_kinds)
    n_extra = config.objects_per_scene - len(required)
    if n_extra < 0:
        raise ConfigurationError(
            f"{len(required)} required kinds exceed "
            f"{config.objects_per_scene} objects per scene")
    if config.mixed:
        extras = []
        while len(extras) < n_extra:
            extras.extend(pool[i] for i in rng.permutation(len(pool)))
        kinds = required + extras[:n_extra]
        rng.shuffle(kinds)
    else:
        if required:
            raise ConfigurationError("required_kinds needs mixed=true")
        kinds = [pool[rng.integers(len(pool))]] * config.objects_per_scene
    return kinds


def _place_objects(rng, kinds, config: SceneConfig):
    """Rejection-sample non-overlapping poses; silhouette boxes (padded by
    ``gap``) must stay disjoint and inside the margins."""
    size = config.image_size
    for _restart in range(4):
        placed_boxes = []
        poses = []
        failed = False
        for kind in kinds:
            for _attempt in range(250):
                scale = rng.uniform(*config.scale_range)
                rotation = rng.uniform(0.0, 2 * np.pi)
                probe = ObjectPose(kind, 0.0, 0.0, rotation, scale)
                hx, hy = silhouette_half_extents(probe)
                lo_x, hi_x = config.margin + hx, size - config.margin - hx
                lo_y, hi_y = config.margin + hy, size - config.margin - hy
                if lo_x >= hi_x or lo_y >= hi_y:
                    continue
                cx = rng.uniform(lo_x, hi_x)
                cy = rng.uniform(lo_y, hi_y)
                g = config.gap
                box = (cx - hx - g, cy - hy - g, cx + hx + g, cy + hy + g)
                if all(box[2] <= b[0] or b[2] <= box[0]
                       or box[3] <= b[1] or b[3] <= box[1]
                       for b in placed_boxes):
                    placed_boxes.append(box)
                    poses.append(ObjectPose(kind, float(cx), float(cy),
                                            float(rotation), float(scale)))
                    break
            else:
                failed = True
                break
        if not failed:
            return poses
    raise PlacementError(
        f"could not place {len(kinds)} objects at scales "
        f"{config.scale_range} on a {size}x{size} image after 1000 "
        f"attempts; use fewer or smaller objects")


def generate_scene(scene_seed: int, config: SceneConfig,
                   scene_id: int = 0) -> LabeledScene:
    rng = np.random.default_rng(scene_seed)
    kinds = _choose_kinds(rng, config)
    poses = _place_objects(rng, kinds, config)
    image = render_scene(poses, config.image_size, config.noise_sigma, rng)
    grasps = []
    for idx, pose in enumerate(poses):
        grasps.extend(grasp_labels_for(pose, object_index=idx))
    return LabeledScene(image=image, poses=poses, grasps=grasps,
                        scene_id=scene_id, seed=scene_seed)


def sample_dataset(config: SceneConfig):
    """Deterministic list of scenes; each scene gets its own child seed so
    generation could be parallelized per scene without changing results."""
    if config.num_scenes < 1 or config.objects_per_scene < 1:
        raise ConfigurationError("num_scenes and objects_per_scene must be >= 1")
    if not config.allowed_kinds and not config.required_kinds:
        raise ConfigurationError("allowed_kinds must be non-empty")
    for kind in tuple(config.allowed_kinds) + tuple(config.required_kinds):
        _check_kind(kind)
    seeds = np.random.SeedSequence(config.seed).generate_state(
        config.num_scenes, dtype=np.uint64)
    return [generate_scene(int(seeds[i]), config, scene_id=i)
            for i in range(config.num_scenes)]


# ---------------------------------------------------------------------------
# on-disk dataset directory
# ---------------------------------------------------------------------------

_MANIFEST_NAME = "manifest.json"


def save_dataset(scenes, out_dir):
    """Write a manifest plus one raw little-endian float32 image per scene."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for scene in scenes:
        name = f"scene_{scene.scene_id:05d}.f32"
        payload = scene.image.astype("<f4").tobytes()
        (out / "images" / name).write_bytes(payload)
        records.append({
            "id": scene.scene_id,
            "seed": scene.seed,
            "image_file": f"images/{name}",
            "image_shape": list(scene.image.shape),
            "poses": [[p.kind, p.cx, p.cy, p.rotation, p.scale]
                      for p in scene.poses],
            "grasps": [[g.cx, g.cy, g.h, g.w, g.theta, g.object_index, g.shape]
                       for g in scene.grasps],
        })
    manifest = {"format": "graspshot-dataset", "version": 1,
                "scenes": records}
    (out / _MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=1))


def load_dataset(in_dir):
    root = Path(in_dir)
    try:
        manifest = json.loads((root / _MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable dataset manifest in {root}: {exc}")
    if manifest.get("format") != "graspshot-dataset":
        raise CorruptFileError(f"{root} is not a dataset directory")
    scenes = []
    for rec in manifest["scenes"]:
        shape = tuple(rec["image_shape"])
        raw = (root / rec["image_file"]).read_bytes()
        expected = int(np.prod(shape)) * 4
        if len(raw) != expected:
            raise CorruptFileError(
                f"{rec['image_file']}: expected {expected} bytes, "
                f"got {len(raw)}")
        image = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        poses = [ObjectPose(k, cx, cy, rot, sc)
                 for k, cx, cy, rot, sc in rec["poses"]]
        grasps = [GraspLabel(cx, cy, h, w, th, int(oi), sh)
                  for cx, cy, h, w, th, oi, sh in rec["grasps"]]
        scenes.append(LabeledScene(image=image, poses=poses, grasps=grasps,
                                   scene_id=int(rec["id"]),
                                   seed=int(rec["seed"])))
    return scenes
