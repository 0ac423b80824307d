"""Exception hierarchy shared by every stage of the pipeline."""


class CalibrationError(Exception):
    """Base class for all estimation failures."""


class InputError(CalibrationError):
    """Malformed or inconsistent input files."""


# models
class DomainError(CalibrationError):
    pass


class NoRootInRange(CalibrationError):
    """The ray lies outside the field of view covered by the profile."""


class MultipleRoots(CalibrationError):
    """More than one retinal radius maps to the same ray."""


# geometry
class DegenerateConfiguration(CalibrationError):
    pass


class NoRealSolution(CalibrationError):
    pass


class CenterAtInfinity(CalibrationError):
    pass


class NonConvergence(CalibrationError):
    pass


class NoValidRotation(CalibrationError):
    pass


class NegativeFocal(CalibrationError):
    pass


class IllConditioned(CalibrationError):
    pass


class DegenerateTriple(CalibrationError):
    pass


class NoPose(CalibrationError):
    pass


# regress
class RegressionDiverged(CalibrationError):
    pass


class InvalidParams(CalibrationError):
    pass


# calib / synth
class ProposalFailed(CalibrationError):
    pass


class CalibrationFailed(CalibrationError):
    pass


class UnreachablePose(CalibrationError):
    pass
