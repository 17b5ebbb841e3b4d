"""Exception hierarchy shared by every subpackage."""


class FedOrgpError(Exception):
    """Base class for all library errors."""


class ConfigError(FedOrgpError, ValueError):
    pass


class ShapeError(FedOrgpError, ValueError):
    pass


class ZeroNormError(FedOrgpError, ArithmeticError):
    pass


class LabelError(FedOrgpError, ValueError):
    pass


class CacheError(FedOrgpError, RuntimeError):
    pass


class NumericsError(FedOrgpError, ArithmeticError):
    pass


class MissingClassError(FedOrgpError, KeyError):
    pass


class DegeneratePrototypeError(FedOrgpError, ArithmeticError):
    """A bank output has zero norm and cannot be published."""


class EmptyServerDataError(FedOrgpError, ValueError):
    pass


class EmptyTestSetError(FedOrgpError, ValueError):
    pass


class DatasetError(FedOrgpError, ValueError):
    pass


class FormatError(DatasetError):
    """Malformed IDX container."""


class IdxIOError(FedOrgpError, OSError):
    """IDX file ended before the declared payload."""


class EmptyTraceError(FedOrgpError, ValueError):
    pass


class MissingTraceError(FedOrgpError, KeyError):
    pass
