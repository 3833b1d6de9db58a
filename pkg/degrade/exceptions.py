class DegradationError(Exception):
    """Base class for synthesis failures."""


class DegradationParameterError(DegradationError, ValueError):
    pass


class ScheduleError(DegradationError, ValueError):
    pass


class EncoderUnavailableError(DegradationError, OSError):
    """The external video encoder is missing and the JPEG proxy is disabled."""


class SourceError(DegradationError, OSError):
    pass


class ProtocolError(DegradationError, ValueError):
    pass
