"""Exception hierarchy shared by every module."""


class SpecDecError(Exception):
    """Base class for all errors raised by adaspec."""


class ZeroMass(SpecDecError, ValueError):
    """A vector with zero total mass was asked to be normalized."""


class DomainError(SpecDecError, ValueError):
    """An argument is outside the domain of the operation."""


class EmptyCorpus(SpecDecError, ValueError):
    pass


class EmptyDataset(SpecDecError, ValueError):
    pass


class EmptyGeneration(SpecDecError, ValueError):
    pass


class RankDeficient(SpecDecError, ValueError):
    pass


class MisuseError(SpecDecError, RuntimeError):
    """A component was used outside the mode it was built for."""


class StateSpaceTooLarge(SpecDecError, RuntimeError):
    pass
