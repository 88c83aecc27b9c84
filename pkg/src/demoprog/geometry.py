"""Simulated block world: cube poses, pinhole projection, occlusion, and scene generation.

World frame: table plane is z = 0, z points up.  Camera frame follows the usual
vision convention (x right, y down, z forward), with ``X_cam = R @ X_world + t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import MultiPoint, Point, Polygon

from .errors import BehindCamera, ConfigError, DegenerateHull, FormatError, InvalidScene

EDGE = 0.05
PALETTE = ("red", "green", "blue", "yellow", "orange", "purple", "cyan", "magenta")
IMAGE_SIZE = (400, 400)

ABOVE, LEFT, NONE = 0, 1, 2
REL_NAMES = ("Above", "Left", "None")

# contact tolerances, as fractions of the cube edge
VERTICAL_GAP_TOL = 0.1
FACE_OVERLAP_MIN = 0.25
LATERAL_GAP_TOL = 0.5

SCENE_FILE_VERSION = 1

# corner index = 4*bx + 2*by + bz, bit set means + side of that axis
CORNER_SIGNS = np.array(
    [[1 if (i >> s) & 1 else -1 for s in (2, 1, 0)] for i in range(8)], dtype=float
)


def _rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CuboidPose:
    center: tuple
    yaw: float = 0.0
    edge: float = EDGE
    color_id: int = 0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        if len(center) != 3:
            raise InvalidScene("center must be a 3-vector")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "yaw", float(self.yaw))
        if not self.edge > 0:
            raise InvalidScene(f"edge must be positive, got {self.edge}")
        if center[2] < self.edge / 2 - 1e-9:
            raise InvalidScene(f"cube at z={center[2]:.4f} penetrates the table")

    @property
    def rotation(self) -> np.ndarray:
        return _rot_z(self.yaw)

    def corners(self) -> np.ndarray:
        """World coordinates of the 8 corners in canonical order, shape (8, 3)."""
        local = CORNER_SIGNS * (self.edge / 2)
        return local @ self.rotation.T + np.asarray(self.center)

    def footprint(self) -> np.ndarray:
        """The 4 table-plane corners of the cube, counter-clockwise."""
        h = self.edge / 2
        local = np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
        return local @ self.rotation[:2, :2].T + np.asarray(self.center[:2])

    @property
    def bottom(self) -> float:
        return self.center[2] - self.edge / 2

    @property
    def top(self) -> float:
        return self.center[2] + self.edge / 2


@dataclass(frozen=True)
class Scene:
    cuboids: tuple
    edge: float = EDGE
    palette: tuple = PALETTE

    def __post_init__(self):
        object.__setattr__(self, "cuboids", tuple(self.cuboids))
        ids = [c.color_id for c in self.cuboids]
        if len(set(ids)) != len(ids):
            raise InvalidScene("color ids must be distinct within a scene")
        if any(not 0 <= i < len(self.palette) for i in ids):
            raise InvalidScene("color id outside the palette")
        for i, j in interpenetrating_pairs(self.cuboids):
            raise InvalidScene(f"cuboids {i} and {j} interpenetrate")

    @property
    def n(self) -> int:
        return len(self.cuboids)

    def color_names(self) -> list[str]:
        return [self.palette[c.color_id] for c in self.cuboids]

    def with_pose(self, index: int, pose: CuboidPose) -> "Scene":
        cubes = list(self.cuboids)
        cubes[index] = pose
        return Scene(tuple(cubes), self.edge, self.palette)


CONTACT_TOL = 1e-6


def interpenetrating_pairs(cuboids, tol=CONTACT_TOL):
    out = []
    polys = [Polygon(c.footprint()) for c in cuboids]
    for i in range(len(cuboids)):
        for j in range(i + 1, len(cuboids)):
            a, b = cuboids[i], cuboids[j]
            z_overlap = min(a.top, b.top) - max(a.bottom, b.bottom)
            if z_overlap <= tol:
                continue
            if polys[i].intersection(polys[j]).area > tol * max(a.edge, b.edge):
                out.append((i, j))
    return out


@dataclass(frozen=True, eq=False)
class CameraModel:
    rotation: np.ndarray
    translation: np.ndarray
    focal: tuple = (400.0, 400.0)
    principal: tuple = (200.0, 200.0)
    image_size: tuple = IMAGE_SIZE

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise ConfigError("camera rotation is not orthonormal")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "focal", tuple(float(f) for f in self.focal))
        object.__setattr__(self, "principal", tuple(float(c) for c in self.principal))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **kw) -> "CameraModel":
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            raise ConfigError("viewing direction parallel to the up vector")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye, **kw)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def K(self) -> np.ndarray:
        fx, fy = self.focal
        cx, cy = self.principal
        return np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def project(self, points) -> np.ndarray:
        pc = self.to_camera(np.atleast_2d(points))
        if np.any(pc[:, 2] <= 0):
            raise BehindCamera("point at or behind the camera plane")
        fx, fy = self.focal
        cx, cy = self.principal
        return np.stack([fx * pc[:, 0] / pc[:, 2] + cx, fy * pc[:, 1] / pc[:, 2] + cy], axis=1)


@dataclass(frozen=True, eq=False)
class ProjectedCuboid:
    vertices: np.ndarray  # (8, 2), canonical corner order
    hidden_index: int
    occluded_by_other: np.ndarray  # (8,) bool
    hull_area: float
    depths: np.ndarray = field(repr=False, default=None)
    occluder: tuple = field(repr=False, default=())  # per vertex: index of nearest occluding cube or -1

    def visible_order(self) -> np.ndarray:
        """Indices of the 7 non-hidden corners, labelled relative to the hidden one.

        Slot j (0..6) holds corner ``hidden ^ (j + 1)``, so slot 6 is always the
        corner nearest the viewer and odd/even slots keep the same face roles
        whatever the cube's yaw.
        """
        return np.array([self.hidden_index ^ j for j in range(1, 8)])

    def visible_vertices(self) -> np.ndarray:
        return self.vertices[self.visible_order()]

    def visible_occluded(self) -> np.ndarray:
        return self.occluded_by_other[self.visible_order()]


def _ray_box_entry(origin, target, cube: CuboidPose):
    """Ray origin->target against a cube; returns (s_enter, s_exit) or None, s in units of the segment."""
    R = cube.rotation
    o = R.T @ (origin - np.asarray(cube.center))
    d = R.T @ (target - origin)
    h = cube.edge / 2
    s0, s1 = -np.inf, np.inf
    for k in range(3):
        if abs(d[k]) < 1e-15:
            if abs(o[k]) > h:
                return None
            continue
        a, b = (-h - o[k]) / d[k], (h - o[k]) / d[k]
        if a > b:
            a, b = b, a
        s0, s1 = max(s0, a), min(s1, b)
        if s0 > s1:
            return None
    return s0, s1


def hidden_candidates(cube: CuboidPose, camera: CameraModel) -> list[int]:
    """Corners whose three incident faces all face away from the camera."""
    R = cube.rotation
    c = np.asarray(cube.center)
    eye = camera.center
    back = {}
    for axis in range(3):
        for sign in (-1, 1):
            normal = sign * R[:, axis]
            face_pt = c + normal * cube.edge / 2
            back[(axis, sign)] = float(np.dot(face_pt - eye, normal)) >= 0.0
    return [
        i
        for i in range(8)
        if all(back[(axis, int(CORNER_SIGNS[i, axis]))] for axis in range(3))
    ]


def project_cuboid(scene: Scene, camera: CameraModel, index: int) -> ProjectedCuboid:
    cube = scene.cuboids[index]
    corners = cube.corners()
    pc = camera.to_camera(corners)
    if camera.to_camera(np.asarray(cube.center)[None])[0, 2] <= 0 or np.any(pc[:, 2] <= 0):
        raise BehindCamera(f"cuboid {index} is behind the camera")
    uv = camera.project(corners)

    cands = hidden_candidates(cube, camera)
    hidden = max(cands, key=lambda i: (pc[i, 2], -i))

    eye = camera.center
    occluded = np.zeros(8, dtype=bool)
    occluder = [-1] * 8
    others = [k for k in range(scene.n) if k != index]
    hulls = {k: convex_hull(camera.project(scene.cuboids[k].corners())) for k in others}
    for i in range(8):
        best = np.inf
        for k in others:
            if not hulls[k].buffer(1e-6).contains(Point(uv[i])):
                continue
            hit = _ray_box_entry(eye, corners[i], scene.cuboids[k])
            if hit is None:
                continue
            s0, s1 = hit
            if s0 < 1 - 1e-6 and s1 - s0 > 1e-9 and s1 > 0 and s0 < best:
                best = s0
                occluder[i] = k
        occluded[i] = occluder[i] >= 0
    return ProjectedCuboid(
        vertices=uv,
        hidden_index=int(hidden),
        occluded_by_other=occluded,
        hull_area=convex_hull_area(uv),
        depths=pc[:, 2],
        occluder=tuple(occluder),
    )


def project_scene(scene: Scene, camera: CameraModel) -> list[ProjectedCuboid]:
    return [project_cuboid(scene, camera, i) for i in range(scene.n)]


def convex_hull(points) -> Polygon:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise DegenerateHull("need at least 3 points")
    hull = MultiPoint([tuple(p) for p in pts]).convex_hull
    if not isinstance(hull, Polygon) or hull.area <= 1e-12:
        raise DegenerateHull("points are collinear or coincident")
    return hull


def convex_hull_area(points) -> float:
    return float(convex_hull(points).area)


def ground_truth_relations(scene: Scene) -> np.ndarray:
    """Binary (n, n, 3) tensor over (Above, Left, None); diagonal is all zero."""
    n = scene.n
    out = np.zeros((n, n, 3), dtype=np.uint8)
    polys = [Polygon(c.footprint()) for c in scene.cuboids]
    for i, a in enumerate(scene.cuboids):
        for j, b in enumerate(scene.cuboids):
            if i == j:
                continue
            e = min(a.edge, b.edge)
            if abs(a.bottom - b.top) <= VERTICAL_GAP_TOL * e:
                if polys[i].intersection(polys[j]).area >= FACE_OVERLAP_MIN * e * e:
                    out[i, j, ABOVE] = 1
            if abs(a.center[2] - b.center[2]) <= VERTICAL_GAP_TOL * e and a.center[0] < b.center[0]:
                fa, fb = a.footprint(), b.footprint()
                gap = fb[:, 0].min() - fa[:, 0].max()
                y_overlap = min(fa[:, 1].max(), fb[:, 1].max()) - max(fa[:, 1].min(), fb[:, 1].min())
                if -VERTICAL_GAP_TOL * e <= gap <= LATERAL_GAP_TOL * e and y_overlap >= FACE_OVERLAP_MIN * e:
                    out[i, j, LEFT] = 1
            if not out[i, j, ABOVE] and not out[i, j, LEFT]:
                out[i, j, NONE] = 1
    return out


# ---------------------------------------------------------------------------
# scene generation


@dataclass
class SceneGenConfig:
    n_min: int = 2
    n_max: int = 5
    # scene layouts: flat (all singletons), stack, pyramid, row (all n cubes in one
    # structure) or mixed (random partition into structures)
    mix: dict = field(default_factory=lambda: {"mixed": 1.0})
    table_half_extent: float = 0.15
    structure_gap: float = EDGE
    camera_distance: tuple = (0.6, 0.9)
    elevation_deg: tuple = (25.0, 60.0)
    azimuth_deg: tuple = (-30.0, 30.0)
    target_jitter: float = 0.03
    stack_yaw_jitter_deg: float = 15.0
    frame_margin: float = 8.0
    max_tries: int = 200
    palette: tuple = PALETTE

    def validate(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"bad n range ({self.n_min}, {self.n_max})")
        if self.n_max > len(self.palette):
            raise ConfigError(f"n_max={self.n_max} exceeds palette size {len(self.palette)}")
        unknown = set(self.mix) - {"flat", "stack", "pyramid", "row", "mixed"}
        if unknown or not self.mix or sum(self.mix.values()) <= 0:
            raise ConfigError(f"bad structure mix {self.mix}")
        if "pyramid" in self.mix and self.mix["pyramid"] > 0 and self.n_max < 3:
            raise ConfigError("pyramid layout needs n >= 3")


def _structure_offsets(kind, size, rng, cfg):
    """Local (dx, dy, level, yaw) per cube of one structure, bottom-up."""
    e = EDGE
    jitter = math.radians(cfg.stack_yaw_jitter_deg)
    if kind == "single":
        return [(0.0, 0.0, 0, rng.uniform(-math.pi / 4, math.pi / 4))]
    if kind == "stack":
        return [(0.0, 0.0, lvl, rng.uniform(-jitter, jitter)) for lvl in range(size)]
    if kind == "row":
        return [((k - (size - 1) / 2) * e, 0.0, 0, 0.0) for k in range(size)]
    if kind == "pyramid":
        cubes = [(-e / 2, 0.0, 0, 0.0), (e / 2, 0.0, 0, 0.0), (0.0, 0.0, 1, 0.0)]
        cubes += [(0.0, 0.0, lvl, rng.uniform(-jitter, jitter)) for lvl in range(2, size - 1)]
        return cubes
    raise ConfigError(f"unknown structure {kind}")


def _footprint_radius(kind, size):
    e = EDGE
    width = size if kind == "row" else 2 if kind == "pyramid" else 1
    return math.hypot(width * e / 2, e / 2)


def _partition(layout, n, rng):
    if layout == "flat":
        return [("single", 1)] * n
    if layout in ("stack", "row", "pyramid"):
        if layout == "pyramid" and n < 3:
            raise ConfigError("pyramid layout needs n >= 3")
        if layout == "row" and n < 2:
            raise ConfigError("row layout needs n >= 2")
        return [(layout if n > 1 else "single", n)]
    parts = []
    left = n
    while left:
        options = [("single", 1)]
        if left >= 2:
            options += [("stack", int(rng.integers(2, min(left, 4) + 1))), ("row", 2)]
        if left >= 3:
            options.append(("pyramid", int(rng.integers(3, min(left, 5) + 1))))
        kind, size = options[int(rng.integers(len(options)))]
        parts.append((kind, size))
        left -= size
    return parts


def _layout_fits(layout, n, cfg):
    if layout == "pyramid" and n < 3 or layout == "row" and n < 2:
        return False
    if layout in ("row", "pyramid", "stack"):
        return _footprint_radius(layout, n) <= cfg.table_half_extent
    return True


def randomize_scene(rng: np.random.Generator, config: SceneGenConfig | None = None):
    """Sample a scene and a camera that sees every cube; deterministic given ``rng``'s state."""
    cfg = config or SceneGenConfig()
    cfg.validate()
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    layouts = sorted(k for k in cfg.mix if _layout_fits(k, n, cfg))
    if not layouts:
        raise ConfigError(f"no layout in {sorted(cfg.mix)} can hold {n} cubes")
    weights = np.array([cfg.mix[k] for k in layouts], dtype=float)
    if weights.sum() <= 0:
        raise ConfigError(f"no layout with positive weight can hold {n} cubes")
    layout = layouts[int(rng.choice(len(layouts), p=weights / weights.sum()))]
    parts = _partition(layout, n, rng)
    colors = rng.permutation(len(cfg.palette))[:n]

    for _ in range(cfg.max_tries):
        anchors = []
        ok = True
        for kind, size in parts:
            r = _footprint_radius(kind, size)
            lim = cfg.table_half_extent - r
            if lim < 0:
                raise ConfigError(f"a {kind} of {size} cubes does not fit on the table")
            for _ in range(cfg.max_tries):
                p = rng.uniform(-lim, lim, size=2)
                if all(np.hypot(*(p - q)) >= r + rq + cfg.structure_gap for q, rq in anchors):
                    anchors.append((p, r))
                    break
            else:
                ok = False
                break
        if ok:
            break
    else:
        raise ConfigError("could not place structures on the table; enlarge the table or reduce n")

    cubes = []
    k = 0
    for (kind, size), (anchor, _) in zip(parts, anchors):
        for dx, dy, lvl, yaw in _structure_offsets(kind, size, rng, cfg):
            center = (anchor[0] + dx, anchor[1] + dy, EDGE / 2 + lvl * EDGE)
            cubes.append(CuboidPose(center, yaw, EDGE, int(colors[k])))
            k += 1
    scene = Scene(tuple(cubes), EDGE, tuple(cfg.palette))
    camera = sample_camera(rng, scene, cfg)
    return scene, camera


def sample_camera(rng, scene: Scene, cfg: SceneGenConfig) -> CameraModel:
    all_corners = np.concatenate([c.corners() for c in scene.cuboids])
    w, h = IMAGE_SIZE
    m = cfg.frame_margin
    for _ in range(cfg.max_tries):
        d = rng.uniform(*cfg.camera_distance)
        el = math.radians(rng.uniform(*cfg.elevation_deg))
        az = math.radians(rng.uniform(*cfg.azimuth_deg))
        target = np.array([*rng.uniform(-cfg.target_jitter, cfg.target_jitter, 2), EDGE])
        eye = target + d * np.array([math.cos(el) * math.sin(az), -math.cos(el) * math.cos(az), math.sin(el)])
        cam = CameraModel.look_at(eye, target)
        try:
            uv = cam.project(all_corners)
        except BehindCamera:
            continue
        if uv[:, 0].min() >= m and uv[:, 1].min() >= m and uv[:, 0].max() <= w - m and uv[:, 1].max() <= h - m:
            return cam
    raise ConfigError("no camera pose keeps the scene in frame")


# ---------------------------------------------------------------------------
# scene files


def scene_to_dict(scene: Scene, camera: CameraModel | None = None) -> dict:
    out = {
        "version": SCENE_FILE_VERSION,
        "edgeMeters": scene.edge,
        "palette": list(scene.palette),
        "leftConvention": "table-x",
        "cuboids": [
            {"colorId": c.color_id, "center": list(c.center), "yaw": c.yaw} for c in scene.cuboids
        ],
    }
    if camera is not None:
        out["camera"] = {
            "focal": list(camera.focal),
            "principal": list(camera.principal),
            "rotation": [float(x) for x in camera.rotation.reshape(-1)],
            "translation": [float(x) for x in camera.translation],
            "imageSize": list(camera.image_size),
        }
    return out


def scene_from_dict(d: dict):
    try:
        if d["version"] != SCENE_FILE_VERSION:
            raise FormatError(f"scene file version {d['version']} != {SCENE_FILE_VERSION}")
        edge = float(d["edgeMeters"])
        cubes = tuple(
            CuboidPose(tuple(c["center"]), float(c.get("yaw", 0.0)), edge, int(c["colorId"]))
            for c in d["cuboids"]
        )
        scene = Scene(cubes, edge, tuple(d.get("palette", PALETTE)))
        camera = None
        if "camera" in d:
            c = d["camera"]
            camera = CameraModel(
                np.array(c["rotation"], dtype=float).reshape(3, 3),
                np.array(c["translation"], dtype=float),
                tuple(c["focal"]),
                tuple(c["principal"]),
                tuple(c["imageSize"]),
            )
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed scene file: {exc!r}") from exc
    return scene, camera


def save_scene(path, scene: Scene, camera: CameraModel | None = None):
    Path(path).write_text(json.dumps(scene_to_dict(scene, camera), indent=2, sort_keys=True) + "\n")


def load_scene(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not JSON ({exc})") from exc
    return scene_from_dict(data)
