import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from django.db import models
from PIL import Image

from .exceptions import SourceError

FRAME_PATTERN = 'frame_{:06d}.png'
IMAGE_SUFFIXES = {'.png', '.jpg', '.jpeg', '.bmp'}


class ClipRole(models.TextChoices):
    LQ = 'lq', 'Low quality'
    GT = 'gt', 'Ground truth'
    RESTORED = 'restored', 'Restored'


@dataclass
class VideoClip:
    """T x H x W x C float32 frames in [0, 1]."""

    frames: np.ndarray
    role: str = ClipRole.GT
    fps: float = 24.0
    video_id: str = ''
    paths: list = field(default_factory=list)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise ValueError(f'Expected T x H x W x C frames, got shape {frames.shape}.')
        if self.role not in ClipRole.values:
            raise ValueError(f'Unknown clip role {self.role!r}.')
        if self.fps <= 0:
            raise ValueError('fps must be positive.')
        self.frames = frames

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape

    def with_frames(self, frames, role):
        return VideoClip(frames=frames, role=role, fps=self.fps, video_id=self.video_id)


def read_frame(path):
    try:
        with Image.open(path) as image:
            array = np.asarray(image.convert('RGB'), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise SourceError(f'Cannot decode frame {path}: {exc}') from exc
    return array / 255.0


def to_uint8(frame):
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_frame(path, frame):
    Image.fromarray(to_uint8(frame)).save(path, format='PNG')


def list_frames(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise SourceError(f'{directory} is not a directory.')
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise SourceError(f'No frames found in {directory}.')
    return paths


def load_clip(directory, role=ClipRole.GT, video_id='', fps=24.0):
    paths = list_frames(directory)
    frames = np.stack([read_frame(p) for p in paths])
    return VideoClip(frames=frames, role=role, fps=fps, video_id=video_id, paths=paths)


def write_clip(clip, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, frame in enumerate(clip.frames):
        path = directory / FRAME_PATTERN.format(index)
        write_frame(path, frame)
        paths.append(path)
    return paths


def atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))
