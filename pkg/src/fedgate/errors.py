"""Exception hierarchy shared by every fedgate component."""


class FedgateError(Exception):
    """Base class for all fedgate errors."""


class InvalidURI(FedgateError, ValueError):
    pass


class InvalidNamespace(FedgateError, ValueError):
    pass


class BadArgument(FedgateError, ValueError):
    pass


class InvalidDatetime(BadArgument):
    pass


class ParseError(FedgateError):
    pass


class SchemaError(FedgateError):
    """A document is well-formed but violates the surrogate schema.

    ``path`` locates the first violation; ``violations`` holds all of them.
    """

    def __init__(self, path, message, violations=None):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message
        self.violations = list(violations or [])


class NotFound(FedgateError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ReadOnlyViolation(FedgateError):
    pass


class DuplicateRecord(FedgateError):
    pass


class SealError(FedgateError):
    pass


class NoRecordsMatch(FedgateError):
    """Empty harvest result; the OAI-PMH-style signal, not a failure."""


class IdDoesNotExist(FedgateError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NoSuchInterface(FedgateError):
    pass


class StaleDatetime(FedgateError):
    """A revised Surrogate kept its datetime although the change requires a bump."""


class ConflictError(FedgateError):
    pass


class UnsupportedVersion(FedgateError):
    pass


class ProtocolError(FedgateError):
    """An upstream answered with a protocol-level error code."""

    def __init__(self, code, message="", endpoint=None):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message
        self.endpoint = endpoint


class Unreachable(FedgateError):
    """Transport failure talking to ``endpoint`` (refused, timeout, HTTP 5xx)."""

    def __init__(self, endpoint, reason=""):
        super().__init__(f"{endpoint} unreachable: {reason}" if reason else f"{endpoint} unreachable")
        self.endpoint = endpoint
        self.reason = reason


class UpstreamUnavailable(FedgateError):
    def __init__(self, repositories, detail=""):
        self.repositories = list(repositories)
        msg = "upstream unavailable: " + ", ".join(self.repositories)
        super().__init__(f"{msg} ({detail})" if detail else msg)


class HarvestFailure(FedgateError):
    """A dynamic federated harvest aborted because a repository failed."""

    def __init__(self, repository_uri, reason=""):
        super().__init__(f"harvest failed at {repository_uri}: {reason}")
        self.repository_uri = repository_uri
        self.reason = reason


class IntegrityViolation(FedgateError):
    pass


class SingleOwnerViolation(IntegrityViolation):
    def __init__(self, ds_uri, repositories):
        self.ds_uri = ds_uri
        self.repositories = sorted(repositories)
        super().__init__(
            f"{ds_uri} claimed by multiple datastream repositories: " + ", ".join(self.repositories)
        )


class EmptyBatch(FedgateError):
    pass


class NoSuchConstituent(FedgateError):
    pass


class OracleUnavailable(FedgateError):
    pass


class ScenarioError(FedgateError):
    def __init__(self, component, reason=""):
        super().__init__(f"{component}: {reason}")
        self.component = component


class ConfigError(FedgateError):
    pass
