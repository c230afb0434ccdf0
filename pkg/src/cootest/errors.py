"""Exception hierarchy for the harness.

Everything raised on purpose derives from CootestError so the CLI can map
failures to exit code 2 with a single machine-parseable stderr line.
"""

from __future__ import annotations


class CootestError(Exception):
    """Base class for all harness errors."""


class SceneFormatError(CootestError):
    """A scene directory or file violates the on-disk format."""


class SceneValidationError(CootestError):
    """A scene value violates a model invariant."""


class TransformError(CootestError):
    """A transformation operator precondition failed."""


class DetectorError(CootestError):
    """Base class for external detector failures."""


class HandshakeError(DetectorError):
    """The detector did not complete the protocol handshake."""


class MalformedResponseError(DetectorError):
    """The detector emitted a response line that does not parse."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DetectorTimeout(DetectorError):
    """The detector did not answer within the configured timeout."""


class DetectorExited(DetectorError):
    """The detector process exited with a nonzero status."""
