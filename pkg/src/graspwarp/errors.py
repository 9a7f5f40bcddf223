"""Exception hierarchy, mapped to CLI exit codes in :mod:`graspwarp.cli`."""


class GraspwarpError(Exception):
    """Base class for all errors raised by this library."""


class FormatError(GraspwarpError):
    """A file is malformed or uses an unsupported encoding."""


class ValidationError(GraspwarpError):
    """Inputs violate a documented precondition."""


class NumericalError(GraspwarpError):
    """A numerical routine left its supported regime (NaN energy, singular system)."""


class DegenerateDeformationError(NumericalError):
    """A deformation collapsed: zero responsibilities, collapsing axes, or
    vanishing kernel mass around a query point."""
