"""Streaming frame-recurrent U-Net with prompt generation and injection.

Encoder level ``i`` runs at 1/2**i resolution with ``stage_channels[i]``
features. Decoder ``j`` runs at level ``L-1-j``: decoder 0 sits at the latent
resolution, the last decoder at full resolution. The history state holds the
fused per-level encoder features of the previous frame.
"""
import logging

import numpy as np
import torch
from django.core.exceptions import ValidationError
from torch import nn

from degrade.clips import ClipRole

from .config import ModelConfig
from .exceptions import ModelConfigError, NumericalError
from .layers import (
    CrossMix, Downsample, GatedHistoryFusion, PromptGenerator, PromptInjection, Upsample,
    cross_mix, generate_prompt, inject_prompt, stage,
)

logger = logging.getLogger(__name__)


class RestorationNetwork(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        try:
            config.clean()
        except ValidationError as exc:
            raise ModelConfigError('; '.join(exc.messages)) from exc
        self.config = config
        channels = config.stage_channels
        levels = len(channels)

        self.intro = nn.Conv2d(config.in_channels, channels[0], 3, padding=1)
        self.encoders = nn.ModuleList([stage(c, config.blocks_per_stage) for c in channels])
        self.downs = nn.ModuleList([Downsample(channels[i], channels[i + 1]) for i in range(levels - 1)])
        self.fusions = None
        if config.history_mode == 'gated_prev_frame':
            self.fusions = nn.ModuleList([GatedHistoryFusion(c) for c in channels])
        self.mixer = None
        if config.cross_attention:
            self.mixer = CrossMix(channels[-1], channels[0], config.attention_heads, config.pool_size)
        self.prompt_head = PromptGenerator(channels[-1], config.d) if config.use_prompt else None

        self.ups = nn.ModuleList()
        self.reduces = nn.ModuleList()
        for j in range(1, levels):
            level = levels - 1 - j
            self.ups.append(Upsample(channels[level + 1], channels[level]))
            self.reduces.append(nn.Conv2d(channels[level] * 2, channels[level], 1))
        self.injections = nn.ModuleDict({
            str(j): PromptInjection(config.d, channels[levels - 1 - j]) for j in config.injection_sites
        })
        self.decoders = nn.ModuleList(
            [stage(channels[levels - 1 - j], config.blocks_per_stage) for j in range(levels)]
        )
        self.output = nn.Conv2d(channels[0], config.in_channels, 3, padding=1)

    def _check_frame(self, frame):
        if frame.dim() == 3:
            frame = frame[None]
        if frame.dim() != 4 or frame.shape[1] != self.config.in_channels:
            raise ModelConfigError(f'Expected b x {self.config.in_channels} x H x W, got {tuple(frame.shape)}.')
        multiple = self.config.size_multiple
        if frame.shape[-2] % multiple or frame.shape[-1] % multiple:
            raise ModelConfigError(
                f'Frame size {tuple(frame.shape[-2:])} must be divisible by {multiple}.'
            )
        return frame

    def _prompt_input(self, prompt, embedding, like):
        if embedding is None:
            return prompt
        if prompt is None:
            raise ModelConfigError('This model has no prompt injection; an embedding cannot be used.')
        embedding = torch.as_tensor(embedding, dtype=like.dtype, device=like.device)
        if embedding.dim() == 1:
            embedding = embedding[None].expand(prompt.shape[0], -1)
        if embedding.shape != prompt.shape:
            raise ModelConfigError(f'Embedding shape {tuple(embedding.shape)} != prompt {tuple(prompt.shape)}.')
        return embedding

    def forward_frame(self, frame, history=(), embedding=None, prompt_transform=None):
        """Restore one frame.

        ``embedding`` replaces the generated prompt at the injection sites and
        ``prompt_transform`` is applied to whatever is injected. The returned
        prompt is always the generated one.
        """
        frame = self._check_frame(frame)
        if history and self.fusions is not None and len(history) != len(self.fusions):
            raise ModelConfigError(f'History has {len(history)} levels, model has {len(self.fusions)}.')

        x = self.intro(frame)
        skips, new_history = [], []
        for level, encoder in enumerate(self.encoders):
            if level:
                x = self.downs[level - 1](x)
            x = encoder(x)
            if self.fusions is not None:
                x = self.fusions[level](x, history[level] if history else None)
                new_history.append(x)
            skips.append(x)

        latent = x
        if self.mixer is not None:
            latent = cross_mix(latent, skips[0], self.mixer)
        prompt = generate_prompt(latent, self.prompt_head) if self.prompt_head is not None else None
        injected = self._prompt_input(prompt, embedding, frame)
        if prompt_transform is not None and injected is not None:
            injected = prompt_transform(injected)

        y = latent
        levels = len(self.decoders)
        for j, decoder in enumerate(self.decoders):
            if j:
                y = self.ups[j - 1](y)
                y = self.reduces[j - 1](torch.cat([y, skips[levels - 1 - j]], dim=1))
            if str(j) in self.injections:
                y = inject_prompt(y, injected, self.injections[str(j)])
            y = decoder(y)
        out = frame + self.output(y)

        if not torch.isfinite(out).all() or (prompt is not None and not torch.isfinite(prompt).all()):
            raise NumericalError('Non-finite activations in forward_frame.')
        return out, tuple(new_history), prompt

    def forward(self, frame, history=(), embedding=None):
        return self.forward_frame(frame, history, embedding)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def zero_parameters(model):
    with torch.no_grad():
        for parameter in model.parameters():
            parameter.zero_()
    return model


def identity_model(config=None):
    """A zero-parameter network: the global residual makes it the identity."""
    return zero_parameters(RestorationNetwork(config))


def restore_clip(model, clip, embeddings=None, prompt_transform=None):
    """Restore frames strictly in order, carrying history from frame to frame."""
    model.eval()
    dtype = next(model.parameters()).dtype
    restored, prompts = [], []
    history = ()
    with torch.no_grad():
        for index, frame in enumerate(clip.frames):
            x = torch.from_numpy(np.ascontiguousarray(frame.transpose(2, 0, 1)))[None].to(dtype)
            embedding = None if embeddings is None else embeddings[index]
            y, history, prompt = model.forward_frame(x, history, embedding, prompt_transform)
            frame_out = y[0].clamp(0.0, 1.0).permute(1, 2, 0).to(torch.float32)
            restored.append(np.ascontiguousarray(frame_out.numpy()))
            prompts.append(None if prompt is None else prompt[0].to(torch.float32).numpy().copy())
    return clip.with_frames(np.stack(restored), ClipRole.RESTORED), prompts
