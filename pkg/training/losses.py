from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from django.core.exceptions import ValidationError

from degrade.clips import VideoClip

from .exceptions import LossShapeError


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.01

    def clean(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError('Loss weights must be >= 0.')

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        from .serializers import LossConfigSerializer

        serializer = LossConfigSerializer(data=payload)
        if not serializer.is_valid():
            raise ValidationError(f'Invalid loss config: {serializer.errors}')
        config = cls(**serializer.validated_data)
        config.clean()
        return config


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    restoration: torch.Tensor
    prompt: torch.Tensor


def _tensor(value):
    if isinstance(value, VideoClip):
        value = value.frames
    if isinstance(value, np.ndarray):
        value = torch.from_numpy(value)
    return value


def restoration_loss(pred, gt):
    pred, gt = _tensor(pred), _tensor(gt)
    if pred.shape != gt.shape:
        raise LossShapeError(f'Prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ.')
    return F.l1_loss(pred, gt)


def prompt_loss(prompt, target):
    prompt, target = _tensor(prompt), _tensor(target)
    if prompt.shape != target.shape:
        raise LossShapeError(f'Prompt {tuple(prompt.shape)} and embedding {tuple(target.shape)} differ.')
    return F.l1_loss(prompt, target.to(prompt.dtype))


def total_loss(pred, gt, prompt, target, config=None):
    """lambda1 * L1(pred, gt) + lambda2 * L1(prompt, target).

    A missing prompt or target contributes nothing; with lambda2 == 0 the
    prompt term is reported but kept out of the graph.
    """
    config = config or LossConfig()
    restoration = restoration_loss(pred, gt)
    if prompt is None or target is None:
        approx = torch.zeros((), dtype=restoration.dtype)
    else:
        approx = prompt_loss(prompt, target)
    total = config.lambda1 * restoration
    if config.lambda2:
        total = total + config.lambda2 * approx
    else:
        approx = approx.detach()
    return LossBreakdown(total, restoration, approx)
