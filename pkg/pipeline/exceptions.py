class RunConfigError(ValueError):
    """A --config file or flag combination failed validation."""
