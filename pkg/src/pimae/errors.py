"""Exception taxonomy.

Three families matter to the CLI: configuration problems (exit 2), data
problems (exit 3) and numeric failures (exit 4). Everything derives from
PimaeError so library callers can catch broadly.
"""


class PimaeError(Exception):
    pass


# --- configuration (exit code 2) ---

class ConfigError(PimaeError):
    pass


class UnknownKey(ConfigError):
    pass


class ConfigTypeError(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


# --- data (exit code 3) ---

class DataError(PimaeError):
    pass


class ParseError(DataError):
    """Malformed on-disk scene file. Carries path and byte offset."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class DimensionMismatch(DataError):
    pass


class BadMagic(DataError):
    pass


class Truncated(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class TooFewPoints(DataError):
    pass


class EmptySet(DataError):
    pass


class OutOfBounds(DataError):
    pass


class DepthNonPositive(DataError):
    pass


class UnknownToken(DataError):
    pass


class IoError(DataError):
    pass


# --- numerics (exit code 4) ---

class NumericError(PimaeError):
    pass


class NonFinite(NumericError):
    pass
