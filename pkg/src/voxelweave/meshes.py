"""Triangle meshes: transforms, integrity checks, containment, sampling, IO.

Parity (point-in-mesh) tests cast +x axis rays and count crossings with a
closed-set convention: a point exactly on the surface counts as inside.
Grazing hits (near-parallel triangles, rays through edges/vertices) are
detected and resolved by deterministically rotating the whole configuration
a tiny amount and re-casting, which preserves containment exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import RigidTransform
from .errors import ContractError, MeshIntegrityError, SceneIntegrityError

# Barycentric slack under which a hit is "grazing" and triggers a re-cast.
EPS_BARY = 1e-7
# sin(angle to ray) under which a triangle counts as parallel to the ray.
EPS_PARALLEL = 1e-7
# World-units slack: crossings within this distance behind a point still count.
EPS_SURFACE = 1e-9
MAX_RECAST = 8
_TRI_CHUNK = 1 << 19  # max row*triangle pairs held at once


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray   # (V, 3) float64
    faces: np.ndarray      # (F, 3) int32, outward orientation
    class_id: int = 1

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshIntegrityError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                             | (f[:, 0] == f[:, 2])):
            raise MeshIntegrityError("face repeats a vertex index")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            z = np.zeros(3)
            return z, z
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def with_class(self, class_id: int) -> "TriMesh":
        return replace(self, class_id=class_id)


def transform_mesh(mesh: TriMesh, transform: RigidTransform,
                   scale: float = 1.0) -> TriMesh:
    """Scale about the origin, then apply the rigid transform."""
    if scale <= 0:
        raise ContractError(f"scale must be positive, got {scale}")
    return replace(mesh, vertices=transform.apply(mesh.vertices * scale))


def merge_meshes(meshes, class_id: int = 0) -> TriMesh:
    meshes = [m for m in meshes if m.num_faces]
    if not meshes:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32), class_id)
    verts = []
    faces = []
    base = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + base)
        base += m.num_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces), class_id)


# -- differential quantities ------------------------------------------------------

def face_normals(mesh: TriMesh, normalized: bool = True) -> np.ndarray:
    t = mesh.triangles()
    n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    if normalized:
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(norm == 0, 1.0, norm)
    return n


def face_areas(mesh: TriMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, normalized=False), axis=1)


def surface_area(mesh: TriMesh) -> float:
    return float(face_areas(mesh).sum())


def signed_volume(mesh: TriMesh) -> float:
    """Positive for a closed, outward-oriented surface."""
    t = mesh.triangles()
    return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def is_watertight(mesh: TriMesh) -> bool:
    """Every directed edge appears exactly once and has its reverse present.

    This is closedness + consistent orientation; it holds for disjoint unions
    of closed components (composite shapes).
    """
    if not mesh.num_faces:
        return False
    f = mesh.faces.astype(np.int64)
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    keys = directed[:, 0] * mesh.num_vertices + directed[:, 1]
    if len(np.unique(keys)) != len(keys):
        return False
    rev = directed[:, 1] * mesh.num_vertices + directed[:, 0]
    return bool(np.isin(keys, rev).all())


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points uniform by area over the surface."""
    if not mesh.num_faces:
        raise ContractError("cannot sample an empty mesh")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise ContractError("mesh has zero surface area")
    idx = rng.choice(mesh.num_faces, size=n, p=areas / total)
    t = mesh.triangles()[idx]
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    return (t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0])
            + v[:, None] * (t[:, 2] - t[:, 0]))


# -- axis-ray crossings -------------------------------------------------------------

def _axis_crossings(tris: np.ndarray, yz: np.ndarray):
    """Crossing x's of +x rays through (y, z) anchors against triangles.

    Returns (rows, xs, graze_rows, graze_xs). The first pair is clean interior
    crossings. The second pair records grazing events: hits within EPS_BARY of
    a triangle edge or vertex (with their x), and near-parallel triangles
    whose thin projected footprint contains the anchor (x = NaN, no unique
    crossing).
    """
    n_rows = len(yz)
    if not len(tris):
        z = np.zeros(0, dtype=np.int64), np.zeros(0)
        return (*z, *z)

    a = tris[:, 0]
    e1 = tris[:, 1] - a
    e2 = tris[:, 2] - a
    det = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    scale2 = np.maximum(e1[:, 1] ** 2 + e1[:, 2] ** 2,
                        e2[:, 1] ** 2 + e2[:, 2] ** 2)
    parallel = np.abs(det) <= EPS_PARALLEL * np.maximum(scale2, 1e-300)
    # A parallel triangle's yz footprint is a thin band around its longest
    # projected edge (half-width |det| / edge length). Only anchors inside
    # that band are ambiguous; a bounding-box test would also trap anchors
    # near degenerate slivers that no recast rotation can ever resolve.
    pv = tris[:, :, 1:]
    elen2 = np.stack([((pv[:, (k + 1) % 3] - pv[:, k]) ** 2).sum(axis=1)
                      for k in range(3)], axis=1)
    kmax = elen2.argmax(axis=1)
    tid = np.arange(len(tris))
    p_seg = pv[tid, kmax]
    seg = pv[tid, (kmax + 1) % 3] - p_seg
    seg_len = np.sqrt(np.maximum(elen2[tid, kmax], 1e-300))
    band = 1e-9 + np.abs(det) / seg_len

    rows_out: list = []
    xs_out: list = []
    grows_out: list = []
    gxs_out: list = []
    chunk = max(1, _TRI_CHUNK // max(n_rows, 1))
    for start in range(0, len(tris), chunk):
        sl = slice(start, start + chunk)
        det_c = det[sl]
        with np.errstate(divide="ignore", invalid="ignore"):
            by = yz[:, None, 0] - a[None, sl, 1]
            bz = yz[:, None, 1] - a[None, sl, 2]
            u = (by * e2[None, sl, 2] - bz * e2[None, sl, 1]) / det_c
            w = (e1[None, sl, 1] * bz - e1[None, sl, 2] * by) / det_c
            uw = u + w
        rel_y = yz[:, None, 0] - p_seg[None, sl, 0]
        rel_z = yz[:, None, 1] - p_seg[None, sl, 1]
        s = (rel_y * seg[None, sl, 0] + rel_z * seg[None, sl, 1]) \
            / seg_len[None, sl] ** 2
        dist = np.abs(rel_y * seg[None, sl, 1] - rel_z * seg[None, sl, 0]) \
            / seg_len[None, sl]
        s_pad = band[sl] / seg_len[sl]
        covered = (parallel[None, sl] & (dist <= band[None, sl])
                   & (s >= -s_pad[None, :]) & (s <= 1 + s_pad[None, :]))
        r_par = np.nonzero(covered.any(axis=1))[0]
        if len(r_par):
            grows_out.append(r_par)
            gxs_out.append(np.full(len(r_par), np.nan))
        hit = (~parallel[None, sl]) & (u >= -EPS_BARY) & (w >= -EPS_BARY) \
            & (uw <= 1 + EPS_BARY)
        edge = hit & ((u <= EPS_BARY) | (w <= EPS_BARY) | (uw >= 1 - EPS_BARY))
        for mask, acc_r, acc_x in ((hit & ~edge, rows_out, xs_out),
                                   (edge, grows_out, gxs_out)):
            r_idx, t_idx = np.nonzero(mask)
            if len(r_idx):
                t_glob = t_idx + start
                x = (a[t_glob, 0] + u[r_idx, t_idx] * e1[t_glob, 0]
                     + w[r_idx, t_idx] * e2[t_glob, 0])
                acc_r.append(r_idx)
                acc_x.append(x)

    def cat(parts, dtype):
        return np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)

    return (cat(rows_out, np.int64), cat(xs_out, np.float64),
            cat(grows_out, np.int64), cat(gxs_out, np.float64))


def _recast_rotation(attempt: int) -> RigidTransform:
    from .camera import rotation_about

    angle = 1e-6 * (attempt + 1) ** 2
    return rotation_about("y", angle).compose(rotation_about("z", angle * 1.37))


def points_in_mesh(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Parity containment per point; surface points count as inside.

    Points whose ray grazes the mesh *at the point itself* are on the surface
    and resolve to inside directly; grazing events farther along the ray are
    broken by re-casting with a small global rotation (which cannot disturb
    the on-surface coincidence, so the two rules together always terminate in
    practice).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles()
    inside = np.zeros(len(pts), dtype=bool)
    todo = np.arange(len(pts))
    if not len(todo) or not mesh.num_faces:
        return inside
    for attempt in range(MAX_RECAST + 1):
        if attempt == 0:
            t_rot, p_rot = tris, pts[todo]
        else:
            rot = _recast_rotation(attempt - 1)
            t_rot = rot.apply(tris.reshape(-1, 3)).reshape(-1, 3, 3)
            p_rot = rot.apply(pts[todo])
        rows, xs, grows, gxs = _axis_crossings(t_rot, p_rot[:, 1:3])

        px = p_rot[:, 0]
        on_surface = np.zeros(len(todo), dtype=bool)
        at_point = np.abs(xs - px[rows]) <= EPS_SURFACE
        on_surface[rows[at_point]] = True
        g_at_point = np.abs(gxs - px[grows]) <= EPS_SURFACE  # NaN compares False
        on_surface[grows[g_at_point]] = True

        # A grazing event strictly ahead of the point (or a parallel cover,
        # x = NaN) leaves parity ambiguous; such points go to the next cast.
        with np.errstate(invalid="ignore"):
            g_ahead = gxs > px[grows] + EPS_SURFACE
        unresolved = np.zeros(len(todo), dtype=bool)
        unresolved[grows[g_ahead | np.isnan(gxs)]] = True
        unresolved &= ~on_surface

        ahead = xs > px[rows] - EPS_SURFACE
        counts = np.bincount(rows[ahead], minlength=len(todo))
        settle = ~unresolved
        inside[todo[settle]] = on_surface[settle] | ((counts[settle] % 2) == 1)
        todo = todo[unresolved]
        if not len(todo):
            return inside
    raise SceneIntegrityError(
        f"parity test failed to converge for {len(todo)} points after recasts")


# -- mesh/mesh intersection -----------------------------------------------------------

def _segments_hit_triangles(p0: np.ndarray, p1: np.ndarray, tris: np.ndarray) -> bool:
    """True if any segment [p0_i, p1_i] properly crosses any triangle."""
    if not len(tris) or not len(p0):
        return False
    d = p1 - p0
    a = tris[:, 0]
    e1 = tris[:, 1] - a
    e2 = tris[:, 2] - a
    eps = 1e-12
    chunk = max(1, _TRI_CHUNK // max(len(p0), 1))
    for start in range(0, len(tris), chunk):
        sl = slice(start, start + chunk)
        h = np.cross(d[:, None, :], e2[None, sl, :])
        det = np.einsum("stk,tk->st", h, e1[sl])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s_vec = p0[:, None, :] - a[None, sl, :]
            u = np.einsum("stk,stk->st", s_vec, h) * inv
            q = np.cross(s_vec, e1[None, sl, :])
            w = np.einsum("sk,stk->st", d, q) * inv
            t_par = np.einsum("tk,stk->st", e2[sl], q) * inv
            hit = (np.abs(det) > eps) & (u >= -eps) & (w >= -eps) \
                & (u + w <= 1 + eps) & (t_par >= -eps) & (t_par <= 1 + eps)
        if hit.any():
            return True
    return False


def _mesh_edges(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    f = mesh.faces
    seg = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    key = np.sort(seg, axis=1)
    uniq = np.unique(key, axis=0)
    return mesh.vertices[uniq[:, 0]], mesh.vertices[uniq[:, 1]]


def mesh_intersects(a: TriMesh, b: TriMesh) -> bool:
    """Surface crossing or full containment between two closed meshes."""
    lo_a, hi_a = a.bounds()
    lo_b, hi_b = b.bounds()
    if np.any(hi_a < lo_b) or np.any(hi_b < lo_a):
        return False
    # Filter each side's triangles to the bbox overlap region before the
    # segment/triangle sweep.
    lo = np.maximum(lo_a, lo_b) - 1e-9
    hi = np.minimum(hi_a, hi_b) + 1e-9

    def clip(mesh):
        t = mesh.triangles()
        inside = (t.max(axis=1) >= lo).all(axis=1) & (t.min(axis=1) <= hi).all(axis=1)
        return t[inside]

    ta, tb = clip(a), clip(b)
    if len(ta) and len(tb):
        for edges_of, against in ((a, tb), (b, ta)):
            p0, p1 = _mesh_edges(edges_of)
            keep = ((np.maximum(p0, p1) >= lo) & (np.minimum(p0, p1) <= hi)).all(axis=1)
            if _segments_hit_triangles(p0[keep], p1[keep], against):
                return True
    # No surface crossing: containment is still possible.
    if points_in_mesh(a.vertices[:1], b)[0]:
        return True
    if points_in_mesh(b.vertices[:1], a)[0]:
        return True
    return False


# -- IO ------------------------------------------------------------------------------

def save_obj(meshes, path) -> None:
    """ASCII OBJ, one object group per class, Y-up.

    Scene coordinates use +y down; vertices are written rotated pi about x
    (y -> -y, z -> -z, a proper rotation) so viewers with y-up show the scene
    upright.
    """
    meshes = list(meshes)
    lines = ["# voxelweave mesh export"]
    base = 1
    for m in meshes:
        lines.append(f"o class_{m.class_id}")
        for v in m.vertices:
            lines.append(f"v {v[0]:.17g} {-v[1]:.17g} {-v[2]:.17g}")
        for f in m.faces:
            lines.append(f"f {f[0] + base} {f[1] + base} {f[2] + base}")
        base += m.num_vertices
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY, float64 positions (lossless round-trip)."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"comment class_id {mesh.class_id}\n"
        f"element vertex {mesh.num_vertices}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {mesh.num_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        if mesh.num_faces:
            rec = np.empty(mesh.num_faces,
                           dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = mesh.faces
            fh.write(rec.tobytes())


def load_ply(path) -> TriMesh:
    with open(path, "rb") as fh:
        header = b""
        while not header.endswith(b"end_header\n"):
            line = fh.readline()
            if not line:
                raise ContractError("truncated PLY header")
            header += line
        text = header.decode("ascii")
        n_vert = n_face = 0
        class_id = 1
        for line in text.splitlines():
            if line.startswith("element vertex"):
                n_vert = int(line.split()[-1])
            elif line.startswith("element face"):
                n_face = int(line.split()[-1])
            elif line.startswith("comment class_id"):
                class_id = int(line.split()[-1])
        verts = np.frombuffer(fh.read(n_vert * 24), dtype="<f8").reshape(n_vert, 3)
        rec = np.frombuffer(fh.read(n_face * 13),
                            dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        return TriMesh(verts.copy(), rec["idx"].copy(), class_id)
