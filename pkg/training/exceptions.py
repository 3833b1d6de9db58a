class TrainingError(Exception):
    """Base class for training failures."""


class LossShapeError(TrainingError, ValueError):
    pass


class StoreCoverageError(TrainingError, KeyError):
    def __init__(self, missing):
        self.missing = list(missing)
        video_id, frame_index = self.missing[0]
        super().__init__(
            f'{len(self.missing)} training frames have no grounded record, first {video_id}:{frame_index}.'
        )

    def __str__(self):
        return self.args[0]


class NonFiniteLossError(TrainingError, FloatingPointError):
    def __init__(self, step, detail=''):
        self.step = step
        super().__init__(f'Non-finite loss at step {step}. {detail}'.strip())
