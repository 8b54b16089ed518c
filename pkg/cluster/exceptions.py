"""
Domain errors shared by every app.

Each error names the invariant it guards in its message so the management
commands can surface it verbatim.
"""


class ReplicationError(Exception):
    """Base class for all simulator errors"""


class InvalidSpec(ReplicationError):
    """A ClusterSpec violates one of its invariants"""


class InvalidPlacement(ReplicationError):
    """A slot assignment does not form a valid ExpertPlacement"""


class InvalidInput(ReplicationError):
    """Scheduler input cannot be placed (e.g. more classes than slots)"""


class ShapeMismatch(ReplicationError):
    """Two inputs disagree on E, s·N or vector length"""


class InvalidK(ReplicationError):
    """k-partition grouping is not well formed"""


class MissingPopularity(ReplicationError):
    """A policy needed the previous iteration's popularity and got none"""


class InvalidConfig(ReplicationError):
    """A generator or policy configuration is out of range"""


class ParseError(ReplicationError):
    """A trace file row could not be parsed"""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ReplicationError):
    """A trace file header does not match the expected schema"""


class InvariantViolation(ReplicationError):
    """An internal consistency check failed; indicates a bug, not bad input"""
