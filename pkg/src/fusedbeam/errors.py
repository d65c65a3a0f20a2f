"""Exception types shared across the package."""


class FusedBeamError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(FusedBeamError):
    """Malformed data in an input file (dictionary, SCP/ARK, ARPA, trie, trace)."""


class ConfigError(FusedBeamError):
    """Invalid configuration: bad parameter values or unusable flag combinations."""
