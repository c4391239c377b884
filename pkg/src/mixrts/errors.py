"""Exception types shared across the package."""


class MixrtsError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MixrtsError):
    """Invalid configuration, dimension mismatch, or unknown option."""


class NumericError(MixrtsError):
    """Non-finite value where a finite one is required."""


class UsageError(MixrtsError):
    """API misuse, e.g. a backward pass without a cached forward pass."""


class EnvContractError(MixrtsError):
    """Environment interaction violated the Dec-POMDP contract."""


class EpisodeError(MixrtsError):
    """Malformed episode handed to the replay buffer."""


class CheckpointError(MixrtsError):
    """Unreadable or incompatible checkpoint file."""
