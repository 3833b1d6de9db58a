"""Fine-grained degradation querying of one frame.

The base description comes from a free-form quality prompt; every candidate
degradation then gets a presence question and, when present, an intensity
question. Confirmed degradations are appended as fixed sentences in
candidate-list order.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import AnswerParseError, EmptyDescriptionError, GroundingError

logger = logging.getLogger(__name__)

QUALITY_PROMPT = 'Rate the quality of the image. Think step by step.'
PRESENCE_PROMPT = 'Is there {name} degradation present in the image? Answer Yes or No.'
INTENSITY_PROMPT = 'Rate the intensity of degradation {name}? Choose either severe or moderate.'
DEGRADATION_SENTENCE = 'There is {name} in the image, and the intensity of {name} is {intensity}.'

YES, NO = 'yes', 'no'
INTENSITIES = ('moderate', 'severe')


@dataclass(frozen=True)
class FrameRef:
    video_id: str
    frame_index: int
    path: str

    @property
    def key(self):
        return (self.video_id, self.frame_index)


@dataclass(frozen=True, eq=False)
class GroundedFrameRecord:
    frame: FrameRef
    description: str
    detected: tuple = ()
    embedding: np.ndarray = None
    encoder_id: str = ''
    labels: tuple = ()
    parse_errors: int = 0
    content_hash: str = ''

    @property
    def key(self):
        return self.frame.key

    def with_embedding(self, embedding, encoder_id):
        return replace(self, embedding=embedding, encoder_id=encoder_id)


def normalize_answer(text):
    return (text or '').strip().rstrip('.!').strip().lower()


def query_quality(frame, client):
    text = (client.ask(frame.path, QUALITY_PROMPT) or '').strip()
    if not text:
        raise EmptyDescriptionError(f'Empty quality description for {frame.video_id}:{frame.frame_index}.')
    return text


def _ask_choice(client, frame, prompt, choices):
    answer = normalize_answer(client.ask(frame.path, prompt))
    if answer not in choices:
        raise AnswerParseError(f'Expected one of {choices}, got {answer!r} for {prompt!r}.')
    return answer


def ground_frame(frame, client, candidates):
    """Describe ``frame``; the returned record carries no embedding yet."""
    if not candidates:
        raise GroundingError('At least one candidate degradation is required.')
    base = query_quality(frame, client)

    detected, sentences, parse_errors = [], [], 0
    for name in candidates:
        try:
            present = _ask_choice(client, frame, PRESENCE_PROMPT.format(name=name), (YES, NO))
            if present == NO:
                continue
            intensity = _ask_choice(
                client, frame, INTENSITY_PROMPT.format(name=name), INTENSITIES
            )
        except AnswerParseError as exc:
            parse_errors += 1
            logger.warning('Skipping %s for %s:%d: %s', name, frame.video_id, frame.frame_index, exc)
            continue
        detected.append((name, intensity))
        sentences.append(DEGRADATION_SENTENCE.format(name=name, intensity=intensity))

    description = ' '.join([base, *sentences])
    return GroundedFrameRecord(
        frame=frame,
        description=description,
        detected=tuple(detected),
        parse_errors=parse_errors,
    )


def embed_description(text, encoder):
    if not text or not text.strip():
        raise EmptyDescriptionError('Cannot embed an empty description.')
    vector = np.asarray(encoder.embed(text), dtype=np.float32)
    if vector.shape != (encoder.dim,):
        raise GroundingError(
            f'Encoder {encoder.encoder_id} returned shape {vector.shape}, expected ({encoder.dim},).'
        )
    if not np.all(np.isfinite(vector)):
        raise GroundingError(f'Encoder {encoder.encoder_id} returned non-finite values.')
    return vector
