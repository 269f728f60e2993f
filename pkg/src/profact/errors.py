"""Exception types shared across the package."""


class ProfactError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(ProfactError):
    """Array shapes are inconsistent with the operation's contract."""


class ValueOutOfRange(ProfactError):
    """Array values violate the declared range (corrupt or mis-scaled input)."""


class EmptyMask(ProfactError):
    """An operation requiring a nonempty mask received an all-zero one."""


class ParamOutOfRange(ProfactError):
    """Manipulation or perturbation parameter outside its allowed range."""


class PlacementFailed(ProfactError):
    """No valid paste position found within the retry/rescale budget."""


class CropInfeasible(ProfactError):
    """No crop satisfying the forged-area constraint exists, even after fallback."""


class UnknownKind(ProfactError):
    """Unrecognised perturbation kind."""


class DataUnavailable(ProfactError):
    """Dataset index or referenced files are missing."""


class NonFiniteLoss(ProfactError):
    """Training loss became NaN/Inf; aborted with diagnostics."""


class CheckpointError(ProfactError):
    """Checkpoint file is malformed or incompatible."""
