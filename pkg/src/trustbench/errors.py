class ConfigurationError(ValueError):
    """Invalid model, source or experiment parameters."""


class ProtocolError(RuntimeError):
    """An operation was attempted in a state that does not allow it."""


class PoolTooSmallError(ValueError):
    """Not enough eligible peers to form an endorser set."""


class ChainNotVerifiedError(RuntimeError):
    """Audit queries require a chain that verified ok at its current head."""
