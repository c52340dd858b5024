"""Exception types raised across the package."""


class DeformFlowError(Exception):
    pass


class EmptyPointSet(DeformFlowError):
    pass


class EmptyIsosurface(DeformFlowError):
    pass


class InvalidRotation(DeformFlowError, ValueError):
    pass


class InvalidMesh(DeformFlowError, ValueError):
    pass


class InvalidGrid(DeformFlowError, ValueError):
    pass


class TargetTooLarge(DeformFlowError, ValueError):
    pass


class EmptyAnchorSet(DeformFlowError):
    pass


class NonFiniteLoss(DeformFlowError):
    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class InvalidDepth(DeformFlowError, ValueError):
    pass


class DegenerateDirection(DeformFlowError):
    """No usable direction could be derived along a ray."""


class EmptySet(DeformFlowError, ValueError):
    pass


class InvalidParams(DeformFlowError, ValueError):
    pass


class ConfigError(DeformFlowError, ValueError):
    pass


class FormatError(DeformFlowError, ValueError):
    """Malformed input file; carries the path and, for text formats, the 1-based line."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class NonWatertightWarning(UserWarning):
    pass


class DegenerateDirectionWarning(UserWarning):
    pass
