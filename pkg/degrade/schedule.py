import math
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError
from django.db import models

from .clips import ClipRole
from .exceptions import ScheduleError
from .ops import (
    JPEG_QUALITIES, VIDEO_CODECS, WEATHER_INTENSITIES,
    add_gaussian_noise, add_poisson_noise, add_speckle_noise, apply_blur,
    compress, jpeg_roundtrip, overlay_rain, overlay_snow, resolve_video_backend,
)


class DegradationKind(models.TextChoices):
    GAUSSIAN_NOISE = 'gaussian_noise', 'Gaussian noise'
    SPECKLE_NOISE = 'speckle_noise', 'Speckle noise'
    POISSON_NOISE = 'poisson_noise', 'Poisson noise'
    GAUSSIAN_BLUR = 'gaussian_blur', 'Gaussian blur'
    RESIZE_BLUR = 'resize_blur', 'Resize blur'
    SNOW = 'snow', 'Snow'
    RAIN = 'rain', 'Rain'
    JPEG_COMPRESSION = 'jpeg_compression', 'JPEG compression'
    VIDEO_COMPRESSION = 'video_compression', 'Video compression'


# noise -> blur -> snow -> rain -> compression
CANONICAL_ORDER = tuple(DegradationKind.values)
# one field per segment, advected by the frame offset
WEATHER_KINDS = ('snow', 'rain')

DEFAULT_RANGES = {
    'gaussian_noise': {'sigma': {'uniform': [10, 15]}},
    'speckle_noise': {'sigma': {'uniform': [10, 15]}},
    'poisson_noise': {'alpha': {'uniform': [2, 4]}},
    'gaussian_blur': {'sigma': {'uniform': [1, 2]}},
    'resize_blur': {'factor': {'choice': [2, 3]}},
    'snow': {'intensity': {'choice': list(WEATHER_INTENSITIES)}},
    'rain': {'intensity': {'choice': list(WEATHER_INTENSITIES)}},
    'jpeg_compression': {'quality': {'choice': list(JPEG_QUALITIES)}},
    'video_compression': {'codec': {'choice': list(VIDEO_CODECS)}},
}

REQUIRED_PARAMS = {
    'gaussian_noise': 'sigma',
    'speckle_noise': 'sigma',
    'poisson_noise': 'alpha',
    'gaussian_blur': 'sigma',
    'resize_blur': 'factor',
    'snow': 'intensity',
    'rain': 'intensity',
    'jpeg_compression': 'quality',
    'video_compression': 'codec',
}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def clean(self):
        if self.kind not in DegradationKind.values:
            raise ValidationError(f'Unknown degradation kind {self.kind!r}.')
        name = REQUIRED_PARAMS[self.kind]
        if name not in self.params:
            raise ValidationError(f'{self.kind} requires parameter {name!r}.')
        value = self.params[name]
        if self.kind in ('gaussian_noise', 'speckle_noise') and value < 0:
            raise ValidationError('Noise sigma must be >= 0.')
        if self.kind == 'poisson_noise' and not (math.isfinite(value) and value > 0):
            raise ValidationError('Poisson alpha must be > 0.')
        if self.kind == 'gaussian_blur' and value <= 0:
            raise ValidationError('Blur sigma must be > 0.')
        if self.kind == 'resize_blur' and value <= 1:
            raise ValidationError('Resize factor must be > 1.')
        if self.kind in ('snow', 'rain') and value not in WEATHER_INTENSITIES:
            raise ValidationError(f'{self.kind.capitalize()} intensity must be moderate or severe.')
        if self.kind == 'jpeg_compression' and not 1 <= value <= 95:
            raise ValidationError('JPEG quality must be within 1..95.')
        if self.kind == 'video_compression' and value not in VIDEO_CODECS:
            raise ValidationError(f'Codec must be one of {VIDEO_CODECS}.')

    @property
    def value(self):
        return self.params[REQUIRED_PARAMS[self.kind]]

    def to_dict(self):
        return {'kind': self.kind, 'params': dict(sorted(self.params.items()))}

    @classmethod
    def from_dict(cls, payload):
        spec = cls(kind=payload['kind'], params=dict(payload.get('params', {})))
        spec.clean()
        return spec


@dataclass(frozen=True)
class Segment:
    index: int
    specs: tuple = ()


@dataclass(frozen=True)
class DegradationSchedule:
    interval_t: int
    segments: tuple
    seed: int

    def segment_of(self, frame_index):
        return frame_index // self.interval_t

    def segments_needed(self, num_frames):
        return math.ceil(num_frames / self.interval_t)

    def to_dict(self):
        return {
            'interval_t': self.interval_t,
            'seed': self.seed,
            'segments': [
                {'index': seg.index, 'specs': [spec.to_dict() for spec in seg.specs]}
                for seg in self.segments
            ],
        }


def _draw(rng, rule):
    if 'uniform' in rule:
        low, high = rule['uniform']
        return float(rng.uniform(low, high))
    options = rule['choice']
    choice = options[int(rng.integers(len(options)))]
    return choice.item() if isinstance(choice, np.generic) else choice


def _canonical(specs):
    return tuple(sorted(specs, key=lambda spec: CANONICAL_ORDER.index(spec.kind)))


def sample_schedule(rng, interval_t, candidates, p, num_segments=1, ranges=None):
    """Include each candidate per segment independently with probability ``p``."""
    if not candidates:
        raise ScheduleError('At least one candidate degradation is required.')
    if not 0 < p <= 1:
        raise ScheduleError(f'Inclusion probability must be in (0, 1], got {p}.')
    if interval_t < 1:
        raise ScheduleError(f'Interval t must be >= 1, got {interval_t}.')
    ranges = ranges or DEFAULT_RANGES
    unknown = [kind for kind in candidates if kind not in ranges]
    if unknown:
        raise ScheduleError(f'No parameter ranges for {unknown}.')

    seed = int(rng.integers(0, 2 ** 63 - 1))
    segments = []
    for index in range(num_segments):
        specs = []
        for kind in candidates:
            if rng.random() < p:
                params = {name: _draw(rng, rule) for name, rule in sorted(ranges[kind].items())}
                specs.append(DegradationSpec(kind=kind, params=params))
        segments.append(Segment(index=index, specs=_canonical(specs)))
    return DegradationSchedule(interval_t=interval_t, segments=tuple(segments), seed=seed)


def stream(seed, *key):
    """Independent generator for one (segment, frame, kind) position."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def apply_spec(frame, spec, rng, phase=0):
    kind, value = spec.kind, spec.value
    if kind == 'gaussian_noise':
        return add_gaussian_noise(frame, value, rng)
    if kind == 'speckle_noise':
        return add_speckle_noise(frame, value, rng)
    if kind == 'poisson_noise':
        return add_poisson_noise(frame, value, rng)
    if kind in ('gaussian_blur', 'resize_blur'):
        return apply_blur(frame, kind, value)
    if kind == 'snow':
        return overlay_snow(frame, value, rng, phase=phase)
    if kind == 'rain':
        return overlay_rain(frame, value, rng, phase=phase)
    if kind == 'jpeg_compression':
        return jpeg_roundtrip(frame, value)
    raise ScheduleError(f'{kind} is applied per segment, not per frame.')


def apply_schedule(clip, schedule, video_backend=None):
    """Degrade ``clip`` segment by segment.

    Returns the LQ clip and one metadata dict per frame recording the specs
    applied to it and the seed path of its random streams.
    """
    num_frames = len(clip)
    needed = schedule.segments_needed(num_frames)
    if len(schedule.segments) < needed:
        raise ScheduleError(
            f'Schedule has {len(schedule.segments)} segments, clip needs {needed}.'
        )
    t = schedule.interval_t
    out = np.empty_like(clip.frames)
    metadata = []
    for segment in schedule.segments[:needed]:
        start, stop = segment.index * t, min((segment.index + 1) * t, num_frames)
        frame_specs = [spec for spec in segment.specs if spec.kind != 'video_compression']
        video_specs = [spec for spec in segment.specs if spec.kind == 'video_compression']
        frames = []
        for offset, frame in enumerate(clip.frames[start:stop]):
            for spec in frame_specs:
                kind_index = CANONICAL_ORDER.index(spec.kind)
                if spec.kind in WEATHER_KINDS:
                    rng = stream(schedule.seed, segment.index, kind_index)
                else:
                    rng = stream(schedule.seed, segment.index, offset, kind_index)
                frame = apply_spec(frame, spec, rng, phase=offset)
            frames.append(frame)
        frames = np.stack(frames)
        backend = None
        for spec in video_specs:
            backend = video_backend
            if backend != 'jpeg_proxy':
                backend = resolve_video_backend(codec=spec.value)
            frames = compress(frames, spec.kind, spec.value, backend=backend, fps=clip.fps)
        out[start:stop] = np.clip(frames, 0.0, 1.0)

        applied = [spec.to_dict() for spec in segment.specs]
        for offset in range(stop - start):
            metadata.append({
                'frame_index': start + offset,
                'segment_index': segment.index,
                'specs': applied,
                'seed_path': [schedule.seed, segment.index, offset],
                'video_backend': backend,
            })
    return clip.with_frames(out, ClipRole.LQ), metadata
