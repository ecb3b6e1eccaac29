"""Exception hierarchy shared by every module."""


class SFTMixError(Exception):
    """Base class for all errors raised by the package."""


class InvalidInputError(SFTMixError, ValueError):
    pass


class ShapeError(SFTMixError, ValueError):
    pass


class ConfigError(SFTMixError, ValueError):
    pass


class ContractError(SFTMixError, ValueError):
    """A documented precondition of an operation was violated."""


class LengthError(SFTMixError, ValueError):
    pass


class DataError(SFTMixError, ValueError):
    """Inputs that disagree with each other (ids, hashes, configs)."""


class FormatError(SFTMixError, ValueError):
    pass


class IntegrityError(SFTMixError, ValueError):
    pass
