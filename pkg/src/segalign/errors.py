"""Exception types. Each carries the CLI exit code it maps to."""


class SegalignError(Exception):
    exit_code = 1


class ConfigError(SegalignError):
    exit_code = 2


class DataError(SegalignError):
    exit_code = 3


class IngestError(DataError):
    pass


class DivergenceError(SegalignError):
    exit_code = 4


class VerificationError(SegalignError):
    exit_code = 5
