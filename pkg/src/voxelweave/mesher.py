"""Isosurface extraction from scalar/probability volumes.

Surfaces are extracted per tetrahedron on a fixed six-tet split of every
lattice cell (all cells split the same way, so faces of neighboring cells
agree and the output is watertight). Field values are interpolated linearly
along tet edges, which makes the triangulated surface the *exact* level set
of the piecewise-linear interpolant — vertices and triangle interiors both
lie on it, there is no sub-cell approximation error.

That exactness is what guarantees space exclusion for probability volumes:
interpolation is linear in the field values, so class fields that sum to 1
at lattice points sum to 1 everywhere, and at most one class can exceed a
level >= 0.5 at any point in space. Extracted class interiors are therefore
pairwise disjoint as point sets, not merely at lattice points.

This module also owns the contract around extraction: grid-value semantics
(values live at lattice points of a GridSpec), tie nudging, empty-field
handling, world-space vertex placement, outward orientation, and the
one-voxel zero shell that closes blobs crossing the volume boundary.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .meshes import TriMesh
from .volume import GridSpec, VolumeGrid

ISO_LEVEL = 0.5
_TIE_NUDGE = 1e-9

# Six tetrahedra per cell: the monotone corner paths 000 -> 111, one per
# permutation of the axes. Every tet contains the cell's main diagonal, and
# the diagonal chosen on each cell face is the same from both sides.
_TET_CORNERS = np.array([
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]],
    [[0, 0, 0], [1, 0, 0], [1, 0, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 1, 1]],
    [[0, 0, 0], [0, 1, 0], [0, 1, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 0, 1], [0, 1, 1], [1, 1, 1]],
], dtype=np.int64)

# Per tet type, the inverse of the corner-difference matrix; maps corner
# value deltas to the (unscaled) field gradient used to orient triangles.
_INV_EDGE = np.stack([
    np.linalg.inv((c[1:] - c[0]).astype(np.float64)) for c in _TET_CORNERS])

# Inside-pair -> quad corner cycle for the two-above/two-below case. Each
# consecutive pair of crossing edges shares a tet face, so the cycle is a
# proper (planar, up to roundoff) quad on the level set.
_PAIR_CYCLES = {
    (0, 1): ((0, 2), (0, 3), (1, 3), (1, 2)),
    (0, 2): ((0, 1), (0, 3), (2, 3), (2, 1)),
    (0, 3): ((0, 1), (0, 2), (3, 2), (3, 1)),
    (1, 2): ((1, 0), (1, 3), (2, 3), (2, 0)),
    (1, 3): ((1, 0), (1, 2), (3, 2), (3, 0)),
    (2, 3): ((2, 0), (2, 1), (3, 1), (3, 0)),
}


def _cell_tet_ids(shape: tuple[int, ...], straddle: np.ndarray) -> np.ndarray:
    """Global lattice ids of the 4 corners of every tet in straddling cells.

    Returns (n_tets, 4) int64. `straddle` flags cells (shape each -1) whose
    corners are not all on one side of the level.
    """
    _, h, d = shape
    ci, cj, ck = np.nonzero(straddle)
    base = (ci * h + cj) * d + ck
    offs = (_TET_CORNERS[..., 0] * h + _TET_CORNERS[..., 1]) * d \
        + _TET_CORNERS[..., 2]                      # (6, 4)
    return (base[:, None, None] + offs[None]).reshape(-1, 4)


def marching_cubes(values: np.ndarray, spec: GridSpec,
                   level: float = ISO_LEVEL) -> TriMesh:
    """Extract the `level` isosurface of a scalar field sampled on spec.

    Vertices come back in world coordinates. Faces are oriented so enclosed
    regions (field > level) have positive signed volume. Values exactly at
    the level are nudged just below it, so lattice points on the surface
    count as outside the open region {field > level} — e.g. two adjacent
    class fields that both hit 0.5 at a shared boundary stay disjoint.

    A field that never crosses the level yields an empty mesh.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != tuple(spec.shape):
        raise ContractError(
            f"field shape {values.shape} does not match grid {tuple(spec.shape)}")
    if not np.isfinite(values).all():
        raise ContractError("field contains non-finite values")
    adj = np.where(values == level, level - _TIE_NUDGE, values)
    if adj.min() >= level or adj.max() < level:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32))

    above = adj > level
    w, h, d = adj.shape
    all_above = np.ones((w - 1, h - 1, d - 1), dtype=bool)
    any_above = np.zeros_like(all_above)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = above[dx:w - 1 + dx, dy:h - 1 + dy, dz:d - 1 + dz]
                all_above &= corner
                any_above |= corner
    gids = _cell_tet_ids(adj.shape, any_above & ~all_above)

    flat = adj.ravel()
    tet_vals = flat[gids]                          # (n, 4)
    tet_above = tet_vals > level
    count = tet_above.sum(axis=1)
    keep = (count > 0) & (count < 4)
    # Tet type cycles fastest in _cell_tet_ids' layout (cell-major, 6 per cell).
    types = np.tile(np.arange(6), len(keep) // 6)[keep]
    gids, tet_vals, tet_above = gids[keep], tet_vals[keep], tet_above[keep]
    count = count[keep]

    tri_edges = []                                 # (m, 3, 2) corner pairs
    tri_grads = []                                 # (m, 3) PL field gradients
    grads = np.einsum("tij,tj->ti", _INV_EDGE[types],
                      tet_vals[:, 1:] - tet_vals[:, :1])

    def emit(mask: np.ndarray, pairs) -> None:
        if not mask.any():
            return
        g = gids[mask]
        tri_edges.append(np.stack(
            [np.stack([g[:, a], g[:, b]], axis=1) for a, b in pairs], axis=1))
        tri_grads.append(grads[mask])

    for lone in range(4):
        others = [c for c in range(4) if c != lone]
        single = tet_above[:, lone] & (count == 1)
        triple = ~tet_above[:, lone] & (count == 3)
        emit(single | triple, [(lone, o) for o in others])
    for pair, cycle in _PAIR_CYCLES.items():
        a, b = pair
        mask = (count == 2) & tet_above[:, a] & tet_above[:, b]
        emit(mask, [cycle[0], cycle[1], cycle[2]])
        emit(mask, [cycle[0], cycle[2], cycle[3]])

    edges = np.concatenate([np.sort(t, axis=2) for t in tri_edges], axis=0)
    grad = np.concatenate(tri_grads, axis=0)
    uniq, inverse = np.unique(edges.reshape(-1, 2), axis=0, return_inverse=True)
    positions = spec.positions().reshape(-1, 3)
    va = flat[uniq[:, 0]]
    vb = flat[uniq[:, 1]]
    t = ((level - va) / (vb - va))[:, None]
    verts = positions[uniq[:, 0]] + t * (positions[uniq[:, 1]]
                                         - positions[uniq[:, 0]])
    faces = inverse.reshape(-1, 3).astype(np.int32)

    # Outward orientation: the triangle normal must point down the gradient,
    # away from the enclosed {field > level} side.
    tri = verts[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normals, grad) > 0
    faces[flip] = faces[flip][:, ::-1]
    return TriMesh(np.ascontiguousarray(verts, dtype=np.float64), faces)


def marching_cubes_padded(values: np.ndarray, spec: GridSpec,
                          level: float = ISO_LEVEL) -> TriMesh:
    """Like marching_cubes, but with a one-lattice-point zero shell around the
    field so regions touching the volume boundary still close up.

    The shell only adds surface where the field exceeds the level on the
    boundary; interior crossings are untouched, so fields that never reach
    the boundary extract identically to the unpadded call.
    """
    padded = np.pad(np.asarray(values, dtype=np.float64), 1)
    pspec = GridSpec(tuple(s + 2 for s in spec.shape), spec.spacing,
                     spec.offset, spec.origin - spec.spacing)
    return marching_cubes(padded, pspec, level)


def extract_scene_meshes(grid: VolumeGrid, level: float = ISO_LEVEL) -> dict[int, TriMesh]:
    """Per-class isosurfaces of a probability volume, keyed by class id.

    Class fields of a distribution sum to 1 at every lattice point, so the
    extracted interiors are pairwise disjoint. Classes whose field never
    crosses the level map to empty meshes. Void (class 0) is skipped.
    """
    out: dict[int, TriMesh] = {}
    for c in range(1, grid.num_classes):
        mesh = marching_cubes_padded(grid.values[..., c], grid.spec, level)
        out[c] = TriMesh(mesh.vertices, mesh.faces, class_id=c)
    return out


def extract_label_meshes(labels: np.ndarray, spec: GridSpec,
                         num_classes: int) -> dict[int, TriMesh]:
    """Isosurfaces of hard labels: per class, the indicator field {0, 1}."""
    labels = np.asarray(labels)
    if labels.shape != tuple(spec.shape):
        raise ContractError(
            f"label shape {labels.shape} does not match grid {tuple(spec.shape)}")
    out: dict[int, TriMesh] = {}
    for c in range(1, num_classes):
        field = (labels == c).astype(np.float64)
        mesh = marching_cubes_padded(field, spec)
        out[c] = TriMesh(mesh.vertices, mesh.faces, class_id=c)
    return out
