class KerndiffError(Exception):
    """Base class for all library errors."""

    code = "INTERNAL"


class ShapeError(KerndiffError, ValueError):
    """Tensor shapes incompatible with the requested operation."""

    code = "SHAPE"


class ConfigError(KerndiffError, ValueError):
    """Invalid or inconsistent configuration."""

    code = "CONFIG"


class CheckpointError(KerndiffError, RuntimeError):
    """Checkpoint missing, corrupted, or incompatible with the config."""

    code = "CHECKPOINT"


class DataError(KerndiffError, RuntimeError):
    """Dataset files missing or inconsistent with their manifest."""

    code = "DATA"
