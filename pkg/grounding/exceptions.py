class GroundingError(Exception):
    """Base class for grounding and embedding-store failures."""


class TransportError(GroundingError, ConnectionError):
    """The MLLM or text-encoder endpoint could not be reached. Retriable."""


class EmptyDescriptionError(GroundingError, ValueError):
    pass


class AnswerParseError(GroundingError, ValueError):
    """A yes/no or intensity answer fell outside its fixed vocabulary."""


class ClientConfigError(GroundingError, ValueError):
    pass


class MissingEmbeddingError(GroundingError, KeyError):
    def __init__(self, video_id, frame_index):
        self.video_id = video_id
        self.frame_index = frame_index
        super().__init__(f'No grounded record for {video_id}:{frame_index}.')

    def __str__(self):
        return self.args[0]


class StoreFormatError(GroundingError, OSError):
    pass
