"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes: plain ``ValueError`` (and
``ShapeError`` / ``ResourceError``) mean a bad argument or bad input
combination (exit 1), ``ParseError`` means a file could not be decoded
(exit 2), and ``TransportError`` / ``ProtocolError`` mean the inference
endpoint failed (exit 3).
"""


class CtxBiasError(Exception):
    """Base class for toolkit errors."""


class ShapeError(CtxBiasError, ValueError):
    """Matrix or tensor dimensions do not line up."""


class ResourceError(CtxBiasError, ValueError):
    """A sampling pool or similar resource is too small for the request."""


class ParseError(CtxBiasError):
    """A manifest, matrix file, or response body could not be parsed."""


class TransportError(CtxBiasError):
    """The inference endpoint was unreachable or timed out after retries."""


class ProtocolError(CtxBiasError):
    """The inference endpoint answered with an undecodable body."""

    def __init__(self, message: str, body: str = ""):
        super().__init__(message)
        self.body = body
