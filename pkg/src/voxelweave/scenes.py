"""Scene synthesis: placement, shading, voxelization, dataset IO.

Scenes are stored camera-relative: during generation a yaw/pitch viewpoint is
sampled in a gravity frame (+y down, ground plane y = 0) and baked into every
object pose, so the stored camera always has identity extrinsic and the
reconstruction volume is a fixed axis-aligned box in camera space.

Rendering is deliberately plain: z-buffered rasterization, flat per-face
Lambertian shading under one directional light plus ambient, per-class
albedo, uniform background. The ground plane is rendered but never
voxelized and never counts toward occlusion.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .camera import PinholeCamera, RigidTransform, look_at, rotation_about
from .errors import ContractError, PlacementFailure, SceneIntegrityError
from .meshes import TriMesh, points_in_mesh, transform_mesh, _axis_crossings
from .rng import substream
from .shapes import build_shape, sample_params
from .volume import GridSpec

GROUND_EXTENT = 6.0
_NEAR_PLANE = 0.05

# Per-class flat albedo; index 0 doubles as the ground tint.
ALBEDO = np.array([
    [0.72, 0.72, 0.70],
    [0.85, 0.30, 0.24], [0.25, 0.55, 0.85], [0.32, 0.74, 0.38],
    [0.90, 0.72, 0.21], [0.60, 0.38, 0.80], [0.88, 0.47, 0.65],
    [0.45, 0.72, 0.74], [0.80, 0.56, 0.38],
], dtype=np.float64)
BACKGROUND = np.array([0.84, 0.86, 0.89])
_LIGHT = np.array([0.30, 0.72, 0.62]) / np.linalg.norm([0.30, 0.72, 0.62])
_AMBIENT = 0.35


@dataclass
class SceneConfig:
    image_size: int = 64
    focal: float = 64.0
    volume_origin: tuple[float, float, float] = (-0.5, -0.5, 1.2)
    volume_size: float = 1.0
    ground: bool = True
    pitch_range: tuple[float, float] = (0.25, 0.70)   # radians, looking down
    placement_extent: float = 0.32                    # ground-plane |x|,|z| bound
    volume_margin: float = 0.01
    separation_margin: float = 0.015
    max_attempts: int = 1000

    @property
    def camera_distance(self) -> float:
        # Eye-to-target distance putting the volume's center on the optical axis.
        return self.volume_origin[2] + self.volume_size / 2

    def make_camera(self) -> PinholeCamera:
        s = self.image_size
        return PinholeCamera(fx=self.focal, fy=self.focal,
                             cx=(s - 1) / 2, cy=(s - 1) / 2,
                             width=s, height=s)

    def volume_box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.volume_origin, dtype=np.float64)
        return lo, lo + self.volume_size


@dataclass
class SceneObject:
    family: str
    params: dict
    transform: RigidTransform   # camera-space pose (viewpoint already baked in)
    scale: float
    class_id: int

    def posed_mesh(self) -> TriMesh:
        mesh = build_shape(self.family, self.params)
        return transform_mesh(mesh, self.transform, self.scale).with_class(self.class_id)

    def to_json(self) -> dict:
        return {"family": self.family, "params": self.params,
                "transform": self.transform.to_json(),
                "scale": self.scale, "class_id": self.class_id}

    @staticmethod
    def from_json(obj: dict) -> "SceneObject":
        return SceneObject(obj["family"], dict(obj["params"]),
                           RigidTransform.from_json(obj["transform"]),
                           float(obj["scale"]), int(obj["class_id"]))


@dataclass
class Scene:
    seed: int
    camera: PinholeCamera
    objects: list[SceneObject]
    ground: RigidTransform | None = None
    _posed: list[TriMesh] | None = field(default=None, repr=False, compare=False)

    def posed_meshes(self) -> list[TriMesh]:
        if self._posed is None:
            self._posed = [o.posed_mesh() for o in self.objects]
        return self._posed

    def ground_mesh(self) -> TriMesh | None:
        if self.ground is None:
            return None
        g = GROUND_EXTENT
        quad = TriMesh(np.array([[-g, 0, -g], [g, 0, -g], [g, 0, g], [-g, 0, g]],
                                dtype=np.float64),
                       np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32), class_id=0)
        return transform_mesh(quad, self.ground)

    def to_json(self) -> dict:
        return {"seed": self.seed,
                "camera": self.camera.to_json(),
                "objects": [o.to_json() for o in self.objects],
                "ground": self.ground.to_json() if self.ground else None}

    @staticmethod
    def from_json(obj: dict) -> "Scene":
        return Scene(seed=int(obj["seed"]),
                     camera=PinholeCamera.from_json(obj["camera"]),
                     objects=[SceneObject.from_json(o) for o in obj["objects"]],
                     ground=(RigidTransform.from_json(obj["ground"])
                             if obj.get("ground") else None))


# -- generation ----------------------------------------------------------------------


def generate_scene(rng: np.random.Generator, classes: list[tuple[int, str]],
                   config: SceneConfig, seed: int = 0) -> Scene:
    """Place one object per (class_id, family) entry; all classes distinct.

    Objects rest on the ground plane, are pairwise separated (axis-aligned
    gap with margin, a conservative guarantee of non-intersection), and lie
    inside the camera-space reconstruction volume.
    """
    ids = [c for c, _ in classes]
    if len(set(ids)) != len(ids):
        raise ContractError("scene classes must be distinct")
    target = np.array([0.0, -0.18, 0.0])
    yaw = rng.uniform(0, 2 * np.pi)
    pitch = rng.uniform(*config.pitch_range)
    d = config.camera_distance
    eye = target + d * np.array([np.cos(pitch) * np.sin(yaw),
                                 -np.sin(pitch),
                                 np.cos(pitch) * np.cos(yaw)])
    extrinsic = look_at(eye, target)

    lo, hi = config.volume_box()
    lo = lo + config.volume_margin
    hi = hi - config.volume_margin
    placed: list[SceneObject] = []
    boxes: list[tuple[np.ndarray, np.ndarray]] = []
    for class_id, family in classes:
        for attempt in range(config.max_attempts):
            params = sample_params(family, rng)
            scale = rng.uniform(0.85, 1.2)
            spin = rotation_about("y", rng.uniform(0, 2 * np.pi))
            canonical = build_shape(family, params)
            spun = transform_mesh(canonical, spin, scale)
            base_y = spun.vertices[:, 1].max()
            tx, tz = rng.uniform(-config.placement_extent,
                                 config.placement_extent, 2)
            world = RigidTransform(spin.rotation, np.array([tx, -base_y, tz]))
            pose = extrinsic.compose(world)
            verts = transform_mesh(canonical, pose, scale).vertices
            blo, bhi = verts.min(axis=0), verts.max(axis=0)
            if np.any(blo < lo) or np.any(bhi > hi):
                continue
            gap = config.separation_margin
            if any(not (np.any(bhi + gap < plo) or np.any(blo - gap > phi))
                   for plo, phi in boxes):
                continue
            placed.append(SceneObject(family, params, pose, scale, class_id))
            boxes.append((blo, bhi))
            break
        else:
            raise PlacementFailure(
                f"could not place {family!r} after {config.max_attempts} attempts")
    return Scene(seed=seed, camera=config.make_camera(), objects=placed,
                 ground=extrinsic if config.ground else None)


# -- rendering -----------------------------------------------------------------------


@dataclass
class RenderBuffers:
    image: np.ndarray    # (3, H, W) float32 in [0, 1]
    depth: np.ndarray    # (H, W) float64, +inf where empty
    objid: np.ndarray    # (H, W) int32, -1 empty, -2 ground


def _clip_near(tri: np.ndarray, near: float) -> list[np.ndarray]:
    """Clip one camera-space triangle against z >= near; 0..2 triangles out."""
    out = []
    for i in range(3):
        cur, nxt = tri[i], tri[(i + 1) % 3]
        if cur[2] >= near:
            out.append(cur)
        if (cur[2] - near) * (nxt[2] - near) < 0:
            t = (near - cur[2]) / (nxt[2] - cur[2])
            out.append(cur + t * (nxt - cur))
    return [np.stack([out[0], out[i], out[i + 1]])
            for i in range(1, len(out) - 1)] if len(out) >= 3 else []


def render_buffers(scene: Scene, camera: PinholeCamera | None = None,
                   resolution: int | None = None, include_ground: bool = True,
                   only_objects: list[int] | None = None) -> RenderBuffers:
    cam = camera or scene.camera
    if resolution is not None and resolution != cam.width:
        s = resolution / cam.width
        sy = resolution / cam.height
        cam = PinholeCamera(fx=cam.fx * s, fy=cam.fy * sy,
                            cx=(cam.cx + 0.5) * s - 0.5, cy=(cam.cy + 0.5) * sy - 0.5,
                            width=resolution, height=resolution,
                            extrinsic=cam.extrinsic)
    h, w = cam.height, cam.width
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = BACKGROUND
    depth = np.full((h, w), np.inf)
    objid = np.full((h, w), -1, dtype=np.int32)

    draw: list[tuple[int, TriMesh]] = []
    indices = (range(len(scene.objects)) if only_objects is None else only_objects)
    for i in indices:
        draw.append((i, scene.posed_meshes()[i]))
    gm = scene.ground_mesh() if include_ground else None
    if gm is not None:
        draw.append((-2, gm))

    for oid, mesh in draw:
        albedo = ALBEDO[mesh.class_id % len(ALBEDO)]
        cam_verts = cam.to_camera(mesh.vertices)
        for face in mesh.faces:
            tri = cam_verts[face]
            if tri[:, 2].min() >= _NEAR_PLANE:
                pieces = [tri]
            elif tri[:, 2].max() < _NEAR_PLANE:
                continue
            else:
                pieces = _clip_near(tri, _NEAR_PLANE)
            for piece in pieces:
                _raster_triangle(piece, cam, albedo, oid, image, depth, objid)
    return RenderBuffers(np.ascontiguousarray(image.transpose(2, 0, 1),
                                              dtype=np.float32),
                         depth, objid)


def _raster_triangle(tri: np.ndarray, cam: PinholeCamera, albedo: np.ndarray,
                     oid: int, image: np.ndarray, depth: np.ndarray,
                     objid: np.ndarray) -> None:
    z = tri[:, 2]
    u = cam.fx * tri[:, 0] / z + cam.cx
    v = cam.fy * tri[:, 1] / z + cam.cy
    x0 = max(int(np.ceil(u.min())), 0)
    x1 = min(int(np.floor(u.max())), cam.width - 1)
    y0 = max(int(np.ceil(v.min())), 0)
    y1 = min(int(np.floor(v.max())), cam.height - 1)
    if x0 > x1 or y0 > y1:
        return
    det = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
    if abs(det) < 1e-12:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    px, py = np.meshgrid(xs, ys)
    dx = px - u[0]
    dy = py - v[0]
    l1 = (dx * (v[2] - v[0]) - dy * (u[2] - u[0])) / det
    l2 = (dy * (u[1] - u[0]) - dx * (v[1] - v[0])) / det
    l0 = 1.0 - l1 - l2
    inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
    if not inside.any():
        return
    inv_z = l0 / z[0] + l1 / z[1] + l2 / z[2]
    with np.errstate(divide="ignore"):
        z_px = 1.0 / inv_z
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    nn = np.linalg.norm(n)
    if nn == 0:
        return
    shade = albedo * (_AMBIENT + (1 - _AMBIENT) * abs(float(n @ _LIGHT)) / nn)
    sub_d = depth[y0:y1 + 1, x0:x1 + 1]
    win = inside & (z_px < sub_d)
    if not win.any():
        return
    sub_d[win] = z_px[win]
    image[y0:y1 + 1, x0:x1 + 1][win] = shade
    objid[y0:y1 + 1, x0:x1 + 1][win] = oid


def render(scene: Scene, resolution: int | None = None) -> np.ndarray:
    """Shaded image (3, H, W) float32."""
    return render_buffers(scene, resolution=resolution).image


def occlusion_fraction(scene: Scene, camera: PinholeCamera, index: int,
                       resolution: int = 128) -> float:
    """Fraction of an object's solo-visible pixels hidden by other objects."""
    if not 0 <= index < len(scene.objects):
        raise ContractError(f"object index {index} out of range")
    solo = render_buffers(scene, camera, resolution, include_ground=False,
                          only_objects=[index])
    full = render_buffers(scene, camera, resolution, include_ground=False)
    s = int((solo.objid == index).sum())
    if s == 0:
        return 0.0
    f = int((full.objid == index).sum())
    return float(np.clip(1.0 - f / s, 0.0, 1.0))


# -- voxelization --------------------------------------------------------------------

_ROW_BLOCK = 512


def _mesh_cell_mask(mesh: TriMesh, spec: GridSpec) -> np.ndarray:
    """(W, H, D) bool: which grid points lie inside the mesh.

    One +x ray per (j, k) row; crossings ahead of each point decide parity.
    Rows with grazing events fall back to per-point containment.
    """
    w, h, d = spec.shape
    xs = spec.axis_coords(0)
    ys = spec.axis_coords(1)
    zs = spec.axis_coords(2)
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    yz = np.stack([yy.ravel(), zz.ravel()], axis=1)     # row r = j * D + k
    tris = mesh.triangles()
    tlo = tris[:, :, 1:].min(axis=1)
    thi = tris[:, :, 1:].max(axis=1)

    mask_rows = np.zeros((h * d, w), dtype=bool)
    bad_rows: list[np.ndarray] = []
    from .meshes import EPS_SURFACE

    for start in range(0, h * d, _ROW_BLOCK):
        block = slice(start, min(start + _ROW_BLOCK, h * d))
        yzb = yz[block]
        blo = yzb.min(axis=0) - 1e-9
        bhi = yzb.max(axis=0) + 1e-9
        cand = ((thi[:, 0] >= blo[0]) & (tlo[:, 0] <= bhi[0])
                & (thi[:, 1] >= blo[1]) & (tlo[:, 1] <= bhi[1]))
        if not cand.any():
            continue
        rows, hit_xs, grows, _ = _axis_crossings(tris[cand], yzb)
        n_blk = block.stop - block.start
        hist = np.zeros((n_blk, w + 1), dtype=np.int32)
        idx = np.searchsorted(xs, hit_xs + EPS_SURFACE, side="left")
        np.add.at(hist, (rows, idx), 1)
        suffix = np.cumsum(hist[:, ::-1], axis=1)[:, ::-1]
        mask_rows[block] = (suffix[:, 1:] % 2) == 1
        if len(grows):
            bad_rows.append(np.unique(grows) + start)

    if bad_rows:
        bad = np.concatenate(bad_rows)
        pts = np.empty((len(bad), w, 3))
        pts[:, :, 0] = xs[None, :]
        pts[:, :, 1] = yz[bad, 0, None]
        pts[:, :, 2] = yz[bad, 1, None]
        mask_rows[bad] = points_in_mesh(pts.reshape(-1, 3), mesh).reshape(len(bad), w)

    # rows are (j, k); cells are (i, j, k)
    return mask_rows.reshape(h, d, w).transpose(2, 0, 1)


def voxelize(scene: Scene, spec: GridSpec) -> np.ndarray:
    """(W, H, D) int32 class ids, 0 = void. Ground plane is never voxelized.

    Raises SceneIntegrityError if any cell falls inside two objects.
    """
    w, h, d = spec.shape
    labels = np.zeros((w, h, d), dtype=np.int32)
    count = np.zeros((w, h, d), dtype=np.int8)
    for mesh in scene.posed_meshes():
        mask = _mesh_cell_mask(mesh, spec)
        count += mask
        labels[mask] = mesh.class_id
    if (count > 1).any():
        cell = np.argwhere(count > 1)[0]
        raise SceneIntegrityError(
            f"cell {tuple(cell)} lies inside {int(count[tuple(cell)])} objects")
    return labels


# -- image IO ------------------------------------------------------------------------


def save_ppm(path, image: np.ndarray) -> None:
    """Binary P6, maxval 255. Expects (3, H, W) floats in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    quantized = np.floor(np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ContractError("not a binary PPM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ContractError(f"unsupported PPM maxval {maxval}")
    pixels = np.frombuffer(parts[4][:w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ContractError("truncated PPM payload")
    img = pixels.reshape(h, w, 3).transpose(2, 0, 1)
    return (img.astype(np.float32) / 255.0)


# -- datasets ------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    num_scenes: int = 40
    objects_per_scene: int = 2
    families: tuple[str, ...] = ("box", "sphere", "cylinder")
    grid_shape: tuple[int, int, int] = (32, 32, 32)
    test_every: int = 5            # every k-th scene goes to the test split
    scene: SceneConfig = field(default_factory=SceneConfig)

    @property
    def num_classes(self) -> int:
        return len(self.families) + 1

    def class_table(self) -> list[tuple[int, str]]:
        return [(i + 1, fam) for i, fam in enumerate(self.families)]

    def base_grid(self) -> GridSpec:
        spacing = self.scene.volume_size / self.grid_shape[0]
        return GridSpec(self.grid_shape, spacing,
                        np.full(3, spacing / 2), np.asarray(self.scene.volume_origin))

    def to_json(self) -> dict:
        out = asdict(self)
        return out

    @staticmethod
    def from_json(obj: dict) -> "DatasetConfig":
        scene = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in obj["scene"].items()})
        rest = {k: v for k, v in obj.items() if k != "scene"}
        for key in ("families", "grid_shape"):
            if key in rest:
                rest[key] = tuple(rest[key])
        return DatasetConfig(scene=scene, **rest)


@dataclass
class SceneRecord:
    index: int
    scene: Scene
    image: np.ndarray          # (3, H, W) float32
    path: Path | None = None


def make_dataset(out_dir, config: DatasetConfig, seed: int) -> dict:
    """Generate scenes + images + reference label grids under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    combos = list(itertools.combinations(config.class_table(),
                                         config.objects_per_scene))
    table = {str(cid): fam for cid, fam in config.class_table()}
    scene_dirs = []
    for i in range(config.num_scenes):
        rng = substream(seed, "dataset", f"scene{i}")
        classes = list(combos[i % len(combos)])
        scene = generate_scene(rng, classes, config.scene, seed=seed * 100003 + i)
        image = render(scene)
        sdir = out / f"scene_{i:04d}"
        sdir.mkdir(exist_ok=True)
        save_scene(sdir, scene, image, config)
        scene_dirs.append(sdir.name)
    manifest = {
        "seed": seed,
        "config": config.to_json(),
        "classes": table,
        "scenes": scene_dirs,
        "train": [i for i in range(config.num_scenes)
                  if (i + 1) % config.test_every != 0],
        "test": [i for i in range(config.num_scenes)
                 if (i + 1) % config.test_every == 0],
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def save_scene(scene_dir, scene: Scene, image: np.ndarray,
               config: DatasetConfig | None = None) -> None:
    sdir = Path(scene_dir)
    with open(sdir / "scene.json", "w") as fh:
        json.dump(scene.to_json(), fh, indent=2)
    save_ppm(sdir / "image.ppm", image)
    if config is not None:
        from .tensor import save_tensor

        grid = config.base_grid()
        labels = voxelize(scene, grid)
        save_tensor(sdir / "labels.vwt1", labels.astype(np.float32))
        with open(sdir / "labels.json", "w") as fh:
            json.dump({"grid": grid.to_json(),
                       "num_classes": config.num_classes,
                       "encoding": "class ids, 0 = void"}, fh, indent=2)


def load_scene_dir(scene_dir) -> tuple[Scene, np.ndarray]:
    sdir = Path(scene_dir)
    with open(sdir / "scene.json") as fh:
        scene = Scene.from_json(json.load(fh))
    image = load_ppm(sdir / "image.ppm")
    return scene, image


def load_dataset(path) -> tuple[dict, DatasetConfig, list[SceneRecord]]:
    root = Path(path)
    with open(root / "dataset.json") as fh:
        manifest = json.load(fh)
    config = DatasetConfig.from_json(manifest["config"])
    records = []
    for i, name in enumerate(manifest["scenes"]):
        scene, image = load_scene_dir(root / name)
        records.append(SceneRecord(index=i, scene=scene, image=image,
                                   path=root / name))
    return manifest, config, records
