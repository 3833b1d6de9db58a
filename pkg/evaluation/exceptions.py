class EvaluationError(Exception):
    pass


class MetricShapeError(EvaluationError, ValueError):
    pass


class MissingGroundTruthError(EvaluationError, FileNotFoundError):
    pass
