"""Error taxonomy shared by the library and the command line tool.

Each category maps to a stable process exit code so scripted callers can
dispatch on failures without parsing messages.
"""


class VemrbError(Exception):
    """Base class; carries the exit code used by the CLI."""

    exit_code = 1


class InvalidArgument(VemrbError):
    """Bad value passed to a library function (wrong shape, orientation, range)."""

    exit_code = 2


class MissingFile(VemrbError):
    exit_code = 3


class ParseError(VemrbError):
    """Malformed input file; message carries the offending line number."""

    exit_code = 4


class DatabaseError(VemrbError):
    """Database directory missing, checksum mismatch, or no entry for a cell size."""

    exit_code = 5


class SolverFailure(VemrbError):
    """A linear solve missed its residual tolerance or hit an iteration cap."""

    exit_code = 6


class ResourceLimit(VemrbError):
    """A requested discretization would exceed the hard size caps."""

    exit_code = 7


class GenerationFailure(VemrbError):
    """Random generation exhausted its retry budget."""

    exit_code = 8


class DegenerateGeometry(VemrbError):
    """Degenerate fan triangle or polygon below tolerance."""

    exit_code = 9


class OutOfDomain(VemrbError):
    """Requested evaluation point lies outside every mesh cell."""

    exit_code = 10
