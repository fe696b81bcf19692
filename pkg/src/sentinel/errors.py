"""Exception hierarchy shared by all simulator components."""


class SentinelError(Exception):
    """Base class for simulator errors."""


class ConfigurationError(SentinelError):
    """A world, table or scenario is configured inconsistently."""


class ConfigRejected(SentinelError):
    """A configuration request came from someone other than the owner."""


class CapacityExceeded(SentinelError):
    """A bounded table is full."""


class ValidationError(SentinelError):
    """Input data failed validation."""


class ChannelDisabled(SentinelError):
    """An event arrived on an interrupt channel that is disabled."""


class DecodeError(SentinelError, ValueError):
    """A bit pattern does not decode to a legal value."""


class PhaseError(SentinelError):
    """A transaction attempted an illegal phase transition."""


class ExecutionFault(SentinelError):
    """A response action could not be executed."""
