"""Exception hierarchy shared by every module of the package."""


class TriQuadError(Exception):
    """Base class for all errors raised by triquad."""


class InvalidConfig(TriQuadError, ValueError):
    pass


class OutOfExtent(TriQuadError, ValueError):
    pass


class DimensionMismatch(TriQuadError, ValueError):
    pass


class UnknownVertex(TriQuadError, KeyError):
    pass


class DegenerateRay(TriQuadError, ValueError):
    pass


class NonFiniteLoss(TriQuadError, RuntimeError):
    pass


class FormatError(TriQuadError, ValueError):
    """Malformed or unsupported input file.

    ``offset`` names the byte offset or 1-based line number where parsing
    failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class TruncatedFile(FormatError):
    pass


class CorruptMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class MalformedHeader(FormatError):
    pass


class UnsupportedElement(FormatError):
    pass


class SizeNotMultipleOf16(FormatError):
    pass


class ParseError(FormatError):
    pass


class NonRigid(FormatError):
    pass


class InvalidSpec(TriQuadError, ValueError):
    pass


class EmptyMesh(TriQuadError, ValueError):
    pass


class EmptyCloud(TriQuadError, ValueError):
    pass


class EmptyReference(EmptyCloud):
    pass
