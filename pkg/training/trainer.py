"""Seeded training loop for the restoration network.

Each step draws clip windows, applies one flip/rotation per window, runs the
frames in order with history carried inside the window only, and takes one
Adam step on lambda1 * restoration + lambda2 * prompt approximation. The LR
follows cosine annealing from lr0 to lr_min, after an optional linear warmup.
Determinism holds for a single process on CPU.
"""
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from django.conf import settings
from django.core.exceptions import ValidationError
from torch.nn.utils import clip_grad_norm_
from torch.optim import Adam
from torch.optim.lr_scheduler import LambdaLR

from degrade.clips import atomic_write_text
from restoration.checkpoint import save_checkpoint
from restoration.exceptions import NumericalError
from restoration.network import RestorationNetwork

from .augment import TRANSFORM_NAMES, augment
from .exceptions import NonFiniteLossError, TrainingError
from .losses import LossConfig, total_loss
from .sampler import WindowSampler, check_store_coverage

logger = logging.getLogger(__name__)

CURVE_FIELDS = ('step', 'lr', 'restoration_loss', 'prompt_loss', 'total')


@dataclass
class TrainConfig:
    total_iters: int = 500
    batch_size: int = 2
    crop: int = 64
    window: int = 4
    lr0: float = 4e-4
    lr_min: float = 1e-7
    warmup_iters: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = None
    augment: bool = True
    clip_grad: float = None
    checkpoint_every: int = None
    log_every: int = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.seed is None:
            self.seed = settings.RONIN['SEED']
        if self.checkpoint_every is None:
            self.checkpoint_every = settings.RONIN['CHECKPOINT_EVERY']
        if self.log_every is None:
            self.log_every = settings.RONIN['LOG_EVERY']

    def clean(self):
        if not self.lr0 > self.lr_min > 0:
            raise ValidationError(f'Learning rates must satisfy lr0 > lr_min > 0, got {self.lr0} and {self.lr_min}.')
        if self.total_iters < 0:
            raise ValidationError('total_iters must be >= 0.')
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValidationError('warmup_iters must lie between 0 and total_iters.')
        if min(self.batch_size, self.crop, self.window, self.checkpoint_every, self.log_every) < 1:
            raise ValidationError('Batch size, crop, window and cadences must be >= 1.')
        if self.clip_grad is not None and self.clip_grad <= 0:
            raise ValidationError('clip_grad must be positive when set.')

    def to_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, payload):
        from .serializers import TrainConfigSerializer

        serializer = TrainConfigSerializer(data=payload)
        if not serializer.is_valid():
            raise ValidationError(f'Invalid train config: {serializer.errors}')
        config = cls(**serializer.validated_data)
        config.clean()
        return config


@dataclass
class TrainResult:
    checkpoint: Path
    model: RestorationNetwork
    curves: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def cosine_lr(step, total, lr0, lr_min, warmup=0):
    """Linear ramp to lr0 over the first ``warmup`` steps, then cosine decay to lr_min."""
    step = min(max(step, 0), total)
    if step < warmup:
        return lr0 * (step + 1) / warmup
    if total <= warmup:
        return lr0
    progress = (step - warmup) / (total - warmup)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * progress))


def write_curves(path, curves):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CURVE_FIELDS, lineterminator='\n')
    writer.writeheader()
    for row in curves:
        writer.writerow({key: repr(value) if isinstance(value, float) else value for key, value in row.items()})
    atomic_write_text(path, buffer.getvalue())


def read_curves(path):
    with open(path, newline='', encoding='utf-8') as handle:
        return [
            {key: int(value) if key == 'step' else float(value) for key, value in row.items()}
            for row in csv.DictReader(handle)
        ]


def forward_window(model, lq):
    preds, prompts = [], []
    history = ()
    for t in range(lq.shape[1]):
        out, history, prompt = model.forward_frame(lq[:, t], history)
        preds.append(out)
        prompts.append(prompt)
    prompt = None if prompts[0] is None else torch.stack(prompts, dim=1)
    return torch.stack(preds, dim=1), prompt


def train(dataset, store, model_config, train_config=None, loss_config=None, out_dir='runs/train'):
    """Train a fresh model and return a TrainResult.

    With a prompt-free model lambda2 is forced to 0 and the store is optional.
    A store must cover every LQ frame of the dataset.
    """
    train_config = train_config or TrainConfig()
    loss_config = loss_config or LossConfig()
    try:
        model_config.clean()
        train_config.clean()
        loss_config.clean()
    except ValidationError as exc:
        raise TrainingError('; '.join(exc.messages)) from exc
    if not model_config.use_prompt:
        loss_config = replace(loss_config, lambda2=0.0)
    if store is None and loss_config.lambda2 > 0:
        raise TrainingError('The prompt approximation loss needs an embedding store.')
    if store is not None:
        if store.d != model_config.d:
            raise TrainingError(f'Store embeddings have d={store.d}, the model expects d={model_config.d}.')
        frames = check_store_coverage(dataset, store)
        logger.info('Store %s covers all %d training frames', store.encoder_id, frames)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    model = RestorationNetwork(model_config)
    sampler = WindowSampler(
        dataset, train_config.window, train_config.crop, model_config.size_multiple, rng,
        store=store if model_config.use_prompt else None,
    )
    snapshot = {
        'dataset': str(dataset.root),
        'store': None if store is None else store.encoder_id,
        'model': model_config.to_dict(),
        'train': train_config.to_dict(),
        'loss': loss_config.to_dict(),
        'effective_window': sampler.window,
        'effective_crop': sampler.crop,
    }
    atomic_write_text(out_dir / 'run_config.json', json.dumps(snapshot, indent=2, sort_keys=True) + '\n')

    total = train_config.total_iters
    optimizer = Adam(model.parameters(), lr=train_config.lr0, betas=train_config.betas, eps=train_config.eps)
    scheduler = LambdaLR(
        optimizer, lambda step: cosine_lr(
            step, total, train_config.lr0, train_config.lr_min, train_config.warmup_iters
        ) / train_config.lr0
    )
    logger.info('Training for %d steps: batch %d, window %d, crop %d, seed %d',
                total, train_config.batch_size, sampler.window, sampler.crop, train_config.seed)

    curves, checkpoints = [], []
    model.train()
    for step in range(total):
        batch = sampler.sample(train_config.batch_size)
        lq, gt = batch.lq, batch.gt
        if train_config.augment:
            pairs, transforms = [], []
            for lq_item, gt_item in zip(lq, gt):
                lq_item, gt_item, transform_id = augment(lq_item, gt_item, rng)
                pairs.append((lq_item, gt_item))
                transforms.append(transform_id)
            lq = torch.stack([pair[0] for pair in pairs])
            gt = torch.stack([pair[1] for pair in pairs])
            logger.debug('Step %d transforms %s', step, [TRANSFORM_NAMES[t] for t in transforms])

        try:
            pred, prompt = forward_window(model, lq)
        except NumericalError as exc:
            raise NonFiniteLossError(step, str(exc)) from exc
        losses = total_loss(pred, gt, prompt, batch.targets, loss_config)
        if not all(torch.isfinite(value).item() for value in losses):
            raise NonFiniteLossError(
                step, f'restoration={losses.restoration.item()} prompt={losses.prompt.item()}'
            )

        lr = optimizer.param_groups[0]['lr']
        optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        if train_config.clip_grad is not None:
            clip_grad_norm_(model.parameters(), train_config.clip_grad)
        optimizer.step()
        scheduler.step()

        curves.append({
            'step': step,
            'lr': lr,
            'restoration_loss': losses.restoration.item(),
            'prompt_loss': losses.prompt.item(),
            'total': losses.total.item(),
        })
        done = step + 1
        if done % train_config.log_every == 0 or done == total:
            logger.info('step %d/%d lr %.3e restoration %.5f prompt %.5f',
                        done, total, lr, curves[-1]['restoration_loss'], curves[-1]['prompt_loss'])
        if done % train_config.checkpoint_every == 0:
            checkpoints.append(save_checkpoint(model, out_dir / f'checkpoint_{done:06d}.pt', done))
            write_curves(out_dir / 'curves.csv', curves)

    model.eval()
    final = save_checkpoint(
        model, out_dir / 'checkpoint_final.pt', total,
        extra={'train': train_config.to_dict(), 'loss': loss_config.to_dict()},
    )
    checkpoints.append(final)
    write_curves(out_dir / 'curves.csv', curves)
    logger.info('Finished training; final checkpoint %s', final)
    return TrainResult(checkpoint=final, model=model, curves=curves, checkpoints=checkpoints)
