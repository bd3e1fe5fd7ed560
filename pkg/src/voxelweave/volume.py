"""Offset-grid volumes.

A grid has a fixed integer shape (W, H, D), a spacing v, a world origin, and
a sub-cell offset in [0, v)^3. Point (i, j, k) sits at
``origin + offset + v * (i, j, k)`` — a single canonical formula used
everywhere so that equal specs give bit-equal positions.

Varying the offset slides the sample lattice inside the cells. Running the
same predictor at the n^3 canonical offsets ((m + 0.5)/n * v per axis) and
interleaving the results yields an n-times finer grid whose points coincide
exactly with a direct fine-grid evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True, eq=False)
class GridSpec:
    shape: tuple[int, int, int]
    spacing: float
    offset: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ContractError(f"grid shape must be 3 positive ints, got {self.shape}")
        if not (self.spacing > 0):
            raise ContractError(f"spacing must be positive, got {self.spacing}")
        off = np.asarray(self.offset, dtype=np.float64).reshape(3)
        if np.any(off < 0) or np.any(off >= self.spacing):
            raise ContractError(f"offset {off} outside [0, spacing={self.spacing})")
        org = np.asarray(self.origin, dtype=np.float64).reshape(3)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "origin", org)

    @property
    def num_points(self) -> int:
        w, h, d = self.shape
        return w * h * d

    def positions(self) -> np.ndarray:
        """(W, H, D, 3) float64 world positions of every grid point."""
        w, h, d = self.shape
        base = self.origin + self.offset
        idx = np.empty((w, h, d, 3), dtype=np.float64)
        idx[..., 0] = np.arange(w, dtype=np.float64)[:, None, None]
        idx[..., 1] = np.arange(h, dtype=np.float64)[None, :, None]
        idx[..., 2] = np.arange(d, dtype=np.float64)[None, None, :]
        return base + self.spacing * idx

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates of grid points along one axis (1-D array)."""
        n = self.shape[axis]
        base = self.origin[axis] + self.offset[axis]
        return base + self.spacing * np.arange(n, dtype=np.float64)

    def with_offset(self, offset) -> "GridSpec":
        return replace(self, offset=np.asarray(offset, dtype=np.float64))

    def with_origin(self, origin) -> "GridSpec":
        return replace(self, origin=np.asarray(origin, dtype=np.float64))

    def fine(self, n: int) -> "GridSpec":
        """The n-times finer grid that the n^3 canonical offsets interleave to."""
        if n < 1:
            raise ContractError(f"refinement factor must be >= 1, got {n}")
        w, h, d = self.shape
        spacing = self.spacing / n
        return GridSpec((w * n, h * n, d * n), spacing,
                        np.full(3, axis_offsets(n, self.spacing)[0]), self.origin)

    def coarse(self, k: int) -> "GridSpec":
        """Every k-th point starting at index 0: the k-times coarser sub-lattice."""
        w, h, d = self.shape
        if w % k or h % k or d % k:
            raise ContractError(f"shape {self.shape} not divisible by {k}")
        return GridSpec((w // k, h // k, d // k), self.spacing * k,
                        self.offset * 1.0, self.origin)

    def domain_size(self) -> np.ndarray:
        return self.spacing * np.asarray(self.shape, dtype=np.float64)

    def domain_diagonal(self) -> float:
        return float(np.linalg.norm(self.domain_size()))

    def same_lattice_family(self, other: "GridSpec") -> bool:
        return (self.shape == other.shape and self.spacing == other.spacing
                and np.array_equal(self.origin, other.origin))

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "spacing": self.spacing,
                "offset": self.offset.tolist(), "origin": self.origin.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "GridSpec":
        return GridSpec(tuple(obj["shape"]), float(obj["spacing"]),
                        np.array(obj["offset"]), np.array(obj["origin"]))


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """Values attached to a grid, shape (W, H, D, C), class axis last."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 4:
            raise DimensionError(f"values must be (W,H,D,C), got {vals.shape}")
        if tuple(vals.shape[:3]) != self.spec.shape:
            raise DimensionError(
                f"values {vals.shape[:3]} do not match grid {self.spec.shape}")
        object.__setattr__(self, "values", vals)

    @property
    def num_classes(self) -> int:
        return self.values.shape[3]

    def assert_distribution(self, tol: float = 1e-5) -> None:
        sums = self.values.sum(axis=3)
        worst = float(np.abs(sums - 1).max())
        if worst > tol:
            raise ContractError(f"class sums deviate from 1 by {worst:.2e} (> {tol})")

    def class_slice(self, c: int) -> np.ndarray:
        return self.values[..., c]


@dataclass(frozen=True, eq=False)
class DecoderGrid:
    """A k-times coarser view of a target grid, as seen by a decoder stage.

    Spacing scales by k and so does the offset, which keeps the normalized
    sub-cell position offset/spacing identical at every stage — the decoder
    reads the same three offset channels no matter its resolution.
    """

    parent: GridSpec
    factor: int

    def __post_init__(self):
        if self.factor < 1:
            raise ContractError(f"factor must be >= 1, got {self.factor}")
        w, h, d = self.parent.shape
        if w % self.factor or h % self.factor or d % self.factor:
            raise ContractError(
                f"grid {self.parent.shape} not divisible by stage factor {self.factor}")

    @property
    def spec(self) -> GridSpec:
        k = self.factor
        w, h, d = self.parent.shape
        return GridSpec((w // k, h // k, d // k), self.parent.spacing * k,
                        self.parent.offset * k, self.parent.origin)


# -- offsets ---------------------------------------------------------------------

def sample_training_offset(rng: np.random.Generator, spacing: float) -> np.ndarray:
    """Uniform offset in [0, spacing)^3."""
    return rng.uniform(0.0, spacing, 3)


def axis_offsets(n: int, spacing: float) -> np.ndarray:
    """The n canonical per-axis offsets (m + 0.5)/n * spacing, m = 0..n-1."""
    if n < 1:
        raise ContractError(f"need n >= 1, got {n}")
    return (np.arange(n, dtype=np.float64) + 0.5) / n * spacing


def superres_offsets(n: int, spacing: float) -> list[np.ndarray]:
    """All n^3 offsets in lexicographic (mx, my, mz) order."""
    per_axis = axis_offsets(n, spacing)
    out = []
    for mx in range(n):
        for my in range(n):
            for mz in range(n):
                out.append(np.array([per_axis[mx], per_axis[my], per_axis[mz]]))
    return out


def interleave(grids: Sequence[VolumeGrid], n: int) -> VolumeGrid:
    """Merge n^3 offset predictions (lexicographic offset order) into one fine grid.

    Fine point (n*i + mx, n*j + my, n*k + mz) takes the value of coarse point
    (i, j, k) from the grid run at offset index (mx, my, mz).
    """
    grids = list(grids)
    if len(grids) != n ** 3:
        raise ContractError(f"interleave needs n^3={n ** 3} grids, got {len(grids)}")
    ref = grids[0].spec
    expected = superres_offsets(n, ref.spacing)
    c = grids[0].num_classes
    for g, off in zip(grids, expected):
        if not g.spec.same_lattice_family(ref):
            raise ContractError("interleave: grids disagree on shape/spacing/origin")
        if g.num_classes != c:
            raise ContractError("interleave: grids disagree on class count")
        if not np.array_equal(g.spec.offset, off):
            raise ContractError(
                f"interleave: offset {g.spec.offset} != expected {off}")
    w, h, d = ref.shape
    stack = np.stack([g.values for g in grids])          # (n^3, W, H, D, C)
    stack = stack.reshape(n, n, n, w, h, d, c)
    fine = stack.transpose(3, 0, 4, 1, 5, 2, 6).reshape(n * w, n * h, n * d, c)
    return VolumeGrid(ref.fine(n), np.ascontiguousarray(fine))


def multi_offset_predict(predict: Callable[[GridSpec], VolumeGrid],
                         base: GridSpec, n: int) -> VolumeGrid:
    """Run a per-offset predictor n^3 times and interleave to the fine grid."""
    outs = [predict(base.with_offset(off)) for off in superres_offsets(n, base.spacing)]
    return interleave(outs, n)


def rasterize_labels(scene, spec: GridSpec, num_classes: int) -> VolumeGrid:
    """One-hot class-id grid for a scene at the given lattice."""
    from . import scenes as _scenes

    labels = _scenes.voxelize(scene, spec)
    if labels.max(initial=0) >= num_classes:
        raise ContractError(
            f"scene contains class {labels.max()} >= num_classes {num_classes}")
    onehot = np.eye(num_classes, dtype=np.float32)[labels]
    return VolumeGrid(spec, onehot)
