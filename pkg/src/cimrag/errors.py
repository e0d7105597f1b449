"""Exception classes shared across the simulator.

Each class corresponds to one documented error category so the CLI can map
them to stable exit codes.
"""


class FormatError(Exception):
    """A binary or text artifact does not conform to its documented format."""


class CapacityError(Exception):
    """A database does not fit in the simulated NVM capacity."""


class DataMismatchError(Exception):
    """Inputs that are individually valid but mutually inconsistent
    (dimension mismatch, unknown query ids, stale sidecar)."""
