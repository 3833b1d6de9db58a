import math

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .exceptions import ModelConfigError


def gap(features):
    """Global average pooling: b x C x h x w -> b x C."""
    return features.mean(dim=(-2, -1))


def _trunc_normal(module, std=0.02):
    nn.init.trunc_normal_(module.weight, std=std)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


def stage(channels, blocks):
    return nn.Sequential(*[ResBlock(channels) for _ in range(blocks)])


class Downsample(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.body = nn.Sequential(nn.PixelUnshuffle(2), nn.Conv2d(in_channels * 4, out_channels, 1))

    def forward(self, x):
        return self.body(x)


class Upsample(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(in_channels, out_channels * 4, 1), nn.PixelShuffle(2))

    def forward(self, x):
        return self.body(x)


class GatedHistoryFusion(nn.Module):
    """out = cur + sigmoid(gate([cur, prev])) * proj(prev); no history leaves cur untouched."""

    def __init__(self, channels):
        super().__init__()
        self.gate = nn.Conv2d(channels * 2, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, current, previous=None):
        if previous is None:
            return current
        if previous.shape != current.shape:
            raise ModelConfigError(
                f'History shape {tuple(previous.shape)} does not match features {tuple(current.shape)}.'
            )
        gate = torch.sigmoid(self.gate(torch.cat([current, previous], dim=1)))
        return current + gate * self.proj(previous)


class CrossMix(nn.Module):
    """Cross-attention from latent queries to pooled first-stage keys/values, added residually."""

    def __init__(self, channels, enc_channels, heads=1, pool_size=8):
        super().__init__()
        self.heads = heads
        self.pool_size = pool_size
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(enc_channels, channels, bias=False)
        self.to_v = nn.Linear(enc_channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels)
        for layer in (self.to_q, self.to_k, self.to_v):
            _trunc_normal(layer)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def attend(self, latent, enc1):
        if latent.shape[0] != enc1.shape[0]:
            raise ModelConfigError('Latent and first-stage features have different batch sizes.')
        if latent.shape[1] != self.to_q.in_features or enc1.shape[1] != self.to_k.in_features:
            raise ModelConfigError(
                f'Cross-attention expects {self.to_q.in_features}/{self.to_k.in_features} channels, '
                f'got {latent.shape[1]}/{enc1.shape[1]}.'
            )
        grid = (min(self.pool_size, enc1.shape[-2]), min(self.pool_size, enc1.shape[-1]))
        pooled = F.adaptive_avg_pool2d(enc1, grid)
        queries = rearrange(latent, 'b c h w -> b (h w) c')
        context = rearrange(pooled, 'b c h w -> b (h w) c')
        q = rearrange(self.to_q(queries), 'b n (heads d) -> b heads n d', heads=self.heads)
        k = rearrange(self.to_k(context), 'b m (heads d) -> b heads m d', heads=self.heads)
        v = rearrange(self.to_v(context), 'b m (heads d) -> b heads m d', heads=self.heads)
        scores = torch.einsum('bhnd,bhmd->bhnm', q, k) / math.sqrt(q.shape[-1])
        weights = scores.softmax(dim=-1)
        mixed = torch.einsum('bhnm,bhmd->bhnd', weights, v)
        return rearrange(mixed, 'b heads n d -> b n (heads d)'), weights

    def forward(self, latent, enc1):
        mixed, _ = self.attend(latent, enc1)
        height, width = latent.shape[-2:]
        return latent + rearrange(self.proj(mixed), 'b (h w) c -> b c h w', h=height, w=width)


class PromptGenerator(nn.Module):
    """P = FC2(GELU(FC1(GAP(latent)))), FC1: C -> d, FC2: d -> d."""

    def __init__(self, channels, d):
        super().__init__()
        self.fc1 = nn.Linear(channels, d)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(d, d)
        _trunc_normal(self.fc1)
        _trunc_normal(self.fc2)

    def forward(self, latent):
        if latent.shape[1] != self.fc1.in_features:
            raise ModelConfigError(
                f'Prompt head expects {self.fc1.in_features} channels, got {latent.shape[1]}.'
            )
        return self.fc2(self.act(self.fc1(gap(latent))))


class PromptInjection(nn.Module):
    """Per-channel sigmoid soft-mask from the prompt, then a residual 1x1 MLP."""

    def __init__(self, d, channels, expansion=2):
        super().__init__()
        self.fc = nn.Linear(d, channels)
        nn.init.zeros_(self.fc.bias)
        hidden = channels * expansion
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, channels, 1),
        )
        _trunc_normal(self.mlp[0])
        _trunc_normal(self.mlp[2])

    def mask(self, prompt):
        if prompt is None or prompt.shape[-1] != self.fc.in_features:
            raise ModelConfigError(f'Prompt must have dimension {self.fc.in_features}.')
        return torch.sigmoid(self.fc(prompt))

    def modulate(self, features, prompt):
        if features.shape[1] != self.fc.out_features:
            raise ModelConfigError(
                f'Injection expects {self.fc.out_features} channels, got {features.shape[1]}.'
            )
        return features * self.mask(prompt)[:, :, None, None]

    def forward(self, features, prompt):
        masked = self.modulate(features, prompt)
        return masked + self.mlp(masked)


def generate_prompt(latent, head):
    return head(latent)


def cross_mix(latent, enc1, mixer):
    return mixer(latent, enc1)


def inject_prompt(features, prompt, injection):
    return injection(features, prompt)
