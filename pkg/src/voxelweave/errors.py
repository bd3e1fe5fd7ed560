"""Exception types shared across the package."""


class VoxelWeaveError(Exception):
    """Base class for all package errors."""


class ContractError(VoxelWeaveError):
    """An argument violated a documented precondition (shape, dtype, range)."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(VoxelWeaveError):
    """A computation produced NaN/Inf or otherwise left the valid numeric domain."""


class DegenerateProjection(VoxelWeaveError):
    """A point on the camera plane (pz == 0) cannot be projected."""


class SceneIntegrityError(VoxelWeaveError):
    """A generated scene violates its guarantees (overlap, double containment)."""


class PlacementFailure(SceneIntegrityError):
    """Rejection sampling could not place an object within the attempt budget."""


class MeshIntegrityError(VoxelWeaveError):
    """A mesh violates a structural guarantee (unreferenced/out-of-range indices)."""
