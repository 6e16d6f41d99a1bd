"""Exception hierarchy shared across the toolkit.

Each CLI-visible failure class maps to a fixed exit code; see cli.EXIT_CODES.
"""


class PrunekitError(Exception):
    """Base class for all toolkit errors."""


class StructureError(PrunekitError):
    """A model, layer, or plan violates a structural invariant."""


class ShapeError(StructureError):
    """Activation shape mismatch at a specific graph node."""

    def __init__(self, node_index: int, message: str):
        super().__init__(f"node {node_index}: {message}")
        self.node_index = node_index


class FormatError(PrunekitError):
    """A serialized artifact is malformed; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CollapseError(PrunekitError):
    """A prune plan would remove every channel of a layer."""

    def __init__(self, node_index: int, message: str | None = None):
        super().__init__(message or f"layer collapse: node {node_index} would lose all channels")
        self.node_index = node_index


class DivergenceError(PrunekitError):
    """Training loss became non-finite; carries the epoch it happened in."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch


class UsageError(PrunekitError):
    """Bad command-line arguments or missing input artifacts."""
