"""Exception hierarchy shared by every modelbreak module."""


class ModelBreakError(Exception):
    """Base class; anything raised deliberately by this package derives from it."""


class MalformedBufferError(ModelBreakError):
    """A byte buffer violates the wire format it claims to follow."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"malformed buffer at byte {position}: {message}"
        else:
            message = f"malformed buffer: {message}"
        super().__init__(message)


class ModelImportError(ModelBreakError):
    """The container parsed, but does not describe a model we can lift."""


class GraphError(ModelBreakError):
    """Structural problem in a ModelGraph (ordering, arity, shapes)."""


class ShapeError(GraphError):
    pass


class NumericError(ModelBreakError):
    """Non-finite activation produced during inference."""

    def __init__(self, node_index, kind):
        self.node_index = node_index
        self.kind = kind
        super().__init__(f"non-finite value produced by node {node_index} ({kind})")


class NotExecutableError(ModelBreakError):
    pass


class QuantizationError(ModelBreakError):
    pass


class AttackConfigError(ModelBreakError):
    pass


class ImageFormatError(ModelBreakError):
    pass


class ScanError(ModelBreakError):
    pass
