"""Exception hierarchy shared by every module."""


class SaemvsError(Exception):
    """Base class for all expected (non-bug) failures."""


class ConstantColumn(SaemvsError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"covariate column {index} has (near-)zero variance")


class ShapeMismatch(SaemvsError):
    pass


class NonFiniteOutput(SaemvsError):
    pass


class SingularSystem(SaemvsError):
    pass


class Diverged(SaemvsError):
    pass


class DegenerateEstimate(SaemvsError):
    pass


class AllPointsFailed(SaemvsError):
    pass


class InvalidCorrelation(SaemvsError):
    pass


class EmptyTruth(SaemvsError):
    pass


class NotConverged(SaemvsError):
    pass


class TooFewConverged(SaemvsError):
    pass


class ConfigError(SaemvsError):
    pass


class IoError(SaemvsError):
    pass


class MissingArtifacts(SaemvsError):
    pass
