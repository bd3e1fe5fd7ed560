"""Procedural watertight shape families.

All builders return a closed, outward-oriented TriMesh centered at the
origin, built with "up" along -y (gravity is +y in this codebase, matching
image rows). Composite shapes (table, chair, bracket) are disjoint unions of
touching, non-overlapping closed boxes, which keeps every component edge-
manifold and makes ray-parity containment well defined.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .meshes import TriMesh, merge_meshes, signed_volume

# Box face quads over vertex indices 0..7 = corners of
# (x0/x1, y0/y1, z0/z1) in binary order (x*4 + y*2 + z), outward CCW.
_BOX_QUADS = (
    (0, 1, 3, 2),   # -x
    (4, 6, 7, 5),   # +x
    (0, 4, 5, 1),   # -y
    (2, 3, 7, 6),   # +y
    (0, 2, 6, 4),   # -z
    (1, 5, 7, 3),   # +z
)


def _box_at(lo, hi) -> TriMesh:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ContractError(f"degenerate box [{lo}, {hi}]")
    corners = np.array([[lo[0] if not (i & 4) else hi[0],
                         lo[1] if not (i & 2) else hi[1],
                         lo[2] if not (i & 1) else hi[2]] for i in range(8)])
    faces = []
    for a, b, c, d in _BOX_QUADS:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriMesh(corners, np.array(faces, dtype=np.int32))


def box(size_x: float, size_y: float, size_z: float) -> TriMesh:
    h = np.array([size_x, size_y, size_z]) / 2.0
    return _box_at(-h, h)


def icosphere(radius: float, subdivisions: int = 4) -> TriMesh:
    """Subdivided icosahedron, scaled so the enclosed volume matches the ball.

    Pure vertex projection leaves the polyhedron strictly inside the sphere;
    volume matching splits the radial error evenly, which is what a
    voxelization comparison against the analytic ball wants.
    """
    if radius <= 0:
        raise ContractError("radius must be positive")
    phi = (1 + np.sqrt(5)) / 2
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        vlist = list(verts)

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = vlist[i] + vlist[j]
                m = m / np.linalg.norm(m)
                cache[key] = len(vlist)
                vlist.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)

    mesh = TriMesh(verts, faces.astype(np.int32))
    vol = signed_volume(mesh)
    compensate = (4.0 * np.pi / 3.0 / vol) ** (1.0 / 3.0)
    return TriMesh(verts * (radius * compensate), mesh.faces)


def cylinder(radius: float, height: float, segments: int = 32) -> TriMesh:
    """Axis along y, caps fanned from center vertices."""
    if segments < 3:
        raise ContractError("cylinder needs >= 3 segments")
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments),
                     radius * np.sin(ang)], axis=1)
    top = ring + [0, -height / 2, 0]
    bot = ring + [0, height / 2, 0]
    verts = np.concatenate([top, bot,
                            [[0, -height / 2, 0]], [[0, height / 2, 0]]])
    ic_top, ic_bot = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [(i, segments + i, segments + j), (i, segments + j, j)]  # side
        faces += [(ic_top, i, j)]                        # top cap, outward -y
        faces += [(ic_bot, segments + j, segments + i)]  # bottom cap, outward +y
    return TriMesh(verts, np.array(faces, dtype=np.int32))


def torus(major_radius: float, minor_radius: float,
          major_segments: int = 28, minor_segments: int = 14) -> TriMesh:
    """Ring lying flat (axis along y)."""
    if minor_radius >= major_radius:
        raise ContractError("torus needs minor_radius < major_radius")
    um = 2 * np.pi * np.arange(major_segments) / major_segments
    vm = 2 * np.pi * np.arange(minor_segments) / minor_segments
    uu, vv = np.meshgrid(um, vm, indexing="ij")
    r = major_radius + minor_radius * np.cos(vv)
    verts = np.stack([r * np.cos(uu),
                      minor_radius * np.sin(vv),
                      r * np.sin(uu)], axis=2).reshape(-1, 3)
    faces = []
    for i in range(major_segments):
        i2 = (i + 1) % major_segments
        for j in range(minor_segments):
            j2 = (j + 1) % minor_segments
            a = i * minor_segments + j
            b = i2 * minor_segments + j
            c = i2 * minor_segments + j2
            d = i * minor_segments + j2
            faces += [(a, b, c), (a, c, d)]
    mesh = TriMesh(verts, np.array(faces, dtype=np.int32))
    if signed_volume(mesh) < 0:
        mesh = TriMesh(verts, mesh.faces[:, ::-1].copy())
    return mesh


def l_bracket(width: float, height: float, depth: float, thickness: float) -> TriMesh:
    """L cross-section extruded along z: a horizontal foot plus a vertical wall."""
    if thickness >= min(width, height):
        raise ContractError("bracket thickness must be below width and height")
    # Up is -y: foot on the ground side (+y), wall rising toward -y.
    foot = _box_at([0, -thickness, 0], [width, 0, depth])
    wall = _box_at([0, -height, 0], [thickness, -thickness, depth])
    mesh = merge_meshes([foot, wall], class_id=1)
    center = (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0)) / 2
    return TriMesh(mesh.vertices - center, mesh.faces)


def table(width: float, depth: float, height: float,
          top_thickness: float, leg_thickness: float) -> TriMesh:
    """Slab on four corner legs; legs touch the slab's underside exactly."""
    if top_thickness + leg_thickness >= height:
        raise ContractError("table height too small for its parts")
    if 2 * leg_thickness >= min(width, depth):
        raise ContractError("legs too thick for the top")
    y_top = -height / 2            # up is -y
    y_under = y_top + top_thickness
    y_floor = height / 2
    slab = _box_at([-width / 2, y_top, -depth / 2], [width / 2, y_under, depth / 2])
    legs = []
    for sx in (-1, 1):
        for sz in (-1, 1):
            x0 = -width / 2 if sx < 0 else width / 2 - leg_thickness
            z0 = -depth / 2 if sz < 0 else depth / 2 - leg_thickness
            legs.append(_box_at([x0, y_under, z0],
                                [x0 + leg_thickness, y_floor, z0 + leg_thickness]))
    return merge_meshes([slab] + legs, class_id=1)


def chair(seat_size: float, seat_height: float, back_height: float,
          thickness: float) -> TriMesh:
    """Seat slab on four legs with a back rising on the -z side."""
    if thickness * 2 >= seat_size or thickness >= seat_height:
        raise ContractError("chair thickness out of proportion")
    total_h = seat_height + back_height
    y_floor = total_h / 2
    y_seat_top = y_floor - seat_height
    y_back_top = -total_h / 2
    s = seat_size / 2
    seat = _box_at([-s, y_seat_top, -s], [s, y_seat_top + thickness, s])
    legs = []
    for sx in (-1, 1):
        for sz in (-1, 1):
            x0 = -s if sx < 0 else s - thickness
            z0 = -s if sz < 0 else s - thickness
            legs.append(_box_at([x0, y_seat_top + thickness, z0],
                                [x0 + thickness, y_floor, z0 + thickness]))
    back = _box_at([-s, y_back_top, -s], [s, y_seat_top, -s + thickness])
    return merge_meshes([seat, back] + legs, class_id=1)


# -- family registry -----------------------------------------------------------------

def _build_box(p):
    return box(p["size_x"], p["size_y"], p["size_z"])


def _build_sphere(p):
    return icosphere(p["radius"], subdivisions=int(p.get("subdivisions", 4)))


def _build_cylinder(p):
    return cylinder(p["radius"], p["height"], segments=int(p.get("segments", 32)))


def _build_torus(p):
    return torus(p["major_radius"], p["minor_radius"])


def _build_l_bracket(p):
    return l_bracket(p["width"], p["height"], p["depth"], p["thickness"])


def _build_table(p):
    return table(p["width"], p["depth"], p["height"],
                 p["top_thickness"], p["leg_thickness"])


def _build_chair(p):
    return chair(p["seat_size"], p["seat_height"], p["back_height"], p["thickness"])


def _sample_box(rng):
    return {"size_x": rng.uniform(0.18, 0.36), "size_y": rng.uniform(0.14, 0.32),
            "size_z": rng.uniform(0.18, 0.36)}


def _sample_sphere(rng):
    return {"radius": rng.uniform(0.10, 0.18)}


def _sample_cylinder(rng):
    return {"radius": rng.uniform(0.08, 0.14), "height": rng.uniform(0.2, 0.38)}


def _sample_torus(rng):
    return {"major_radius": rng.uniform(0.11, 0.16),
            "minor_radius": rng.uniform(0.04, 0.065)}


def _sample_l_bracket(rng):
    return {"width": rng.uniform(0.22, 0.34), "height": rng.uniform(0.22, 0.34),
            "depth": rng.uniform(0.16, 0.3), "thickness": rng.uniform(0.06, 0.11)}


def _sample_table(rng):
    return {"width": rng.uniform(0.26, 0.4), "depth": rng.uniform(0.24, 0.38),
            "height": rng.uniform(0.22, 0.34), "top_thickness": rng.uniform(0.04, 0.06),
            "leg_thickness": rng.uniform(0.04, 0.06)}


def _sample_chair(rng):
    return {"seat_size": rng.uniform(0.18, 0.26), "seat_height": rng.uniform(0.14, 0.2),
            "back_height": rng.uniform(0.12, 0.2), "thickness": rng.uniform(0.035, 0.05)}


FAMILIES = {
    "box": (_build_box, _sample_box),
    "sphere": (_build_sphere, _sample_sphere),
    "cylinder": (_build_cylinder, _sample_cylinder),
    "torus": (_build_torus, _sample_torus),
    "l_bracket": (_build_l_bracket, _sample_l_bracket),
    "table": (_build_table, _sample_table),
    "chair": (_build_chair, _sample_chair),
}


def build_shape(family: str, params: dict) -> TriMesh:
    if family not in FAMILIES:
        raise ContractError(f"unknown shape family {family!r}")
    return FAMILIES[family][0](params)


def sample_params(family: str, rng: np.random.Generator) -> dict:
    if family not in FAMILIES:
        raise ContractError(f"unknown shape family {family!r}")
    return FAMILIES[family][1](rng)
