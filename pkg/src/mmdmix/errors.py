"""Exception types and the CLI exit codes they map to."""


class MMDMixError(Exception):
    exit_code = 1


class ConfigError(MMDMixError, ValueError):
    """Bad configuration: unknown key, wrong type, violated bound, or shape mismatch."""

    exit_code = 2


class ContractViolation(MMDMixError, RuntimeError):
    """A runtime precondition was broken (unavailable action, non-finite loss, ...)."""

    exit_code = 3


class SelfTestFailure(MMDMixError):
    exit_code = 4
