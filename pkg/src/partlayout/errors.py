"""Exception types raised across the toolkit."""


class PartLayoutError(Exception):
    """Base class for all errors raised by partlayout."""


class MeshFormatError(PartLayoutError):
    """A mesh file could not be parsed. ``offset`` is the byte offset of the fault."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")


class UnsupportedGeometryError(PartLayoutError):
    def __init__(self, message, node=None):
        self.node = node
        super().__init__(f"{message} (node {node!r})" if node is not None else message)


class DegenerateShapeError(PartLayoutError):
    pass


class EmptyInputError(PartLayoutError):
    pass


class AlignmentError(PartLayoutError):
    """Parts and layout boxes do not line up one-to-one."""


class IncompatibleGridsError(PartLayoutError):
    pass


class NoGeometryError(PartLayoutError):
    pass


class ShapeMismatchError(PartLayoutError):
    pass


class MissingReferenceError(PartLayoutError):
    pass


class CaptionUnavailableError(PartLayoutError):
    pass


class ConfigError(PartLayoutError):
    """Schema or config validation failure. ``path`` points at the offending JSON location."""

    def __init__(self, message, path="$"):
        self.path = path
        super().__init__(f"{path}: {message}")


class StageError(PartLayoutError):
    """A pipeline stage failed; wraps the original exception."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class SamplerStepError(PartLayoutError):
    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"sampler step {step}: {cause}")
