class RestorationError(Exception):
    """Base class for model failures."""


class ModelConfigError(RestorationError, ValueError):
    pass


class NumericalError(RestorationError, RuntimeError):
    """Non-finite activations; raised instead of propagating NaN/Inf."""


class CheckpointError(RestorationError, OSError):
    pass
