"""Procedural source clips: drifting gratings and moving disks.

They stand in for external video datasets so synthesis, grounding and
training run with no downloads.
"""
from pathlib import Path

import numpy as np

from .clips import ClipRole, VideoClip, write_clip


def procedural_clip(rng, num_frames=12, height=64, width=64):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= height
    xx /= width

    gratings = []
    for _ in range(3):
        gratings.append({
            'freq': rng.uniform(1.5, 6.0),
            'angle': rng.uniform(0.0, np.pi),
            'phase': rng.uniform(0.0, 2 * np.pi),
            'speed': rng.uniform(-0.05, 0.05),
            'color': rng.uniform(0.2, 1.0, size=3),
        })
    disks = []
    for _ in range(4):
        disks.append({
            'center': rng.uniform(0.15, 0.85, size=2),
            'velocity': rng.uniform(-0.02, 0.02, size=2),
            'radius': rng.uniform(0.06, 0.18),
            'color': rng.uniform(0.0, 1.0, size=3),
        })

    frames = []
    for t in range(num_frames):
        frame = np.full((height, width, 3), 0.15)
        for g in gratings:
            coord = xx * np.cos(g['angle']) + yy * np.sin(g['angle'])
            wave = 0.5 + 0.5 * np.sin(2 * np.pi * (g['freq'] * coord + g['speed'] * t) + g['phase'])
            frame += 0.25 * wave[..., None] * g['color']
        for disk in disks:
            cy, cx = disk['center'] + disk['velocity'] * t
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            mask = 1.0 / (1.0 + np.exp((dist - disk['radius']) / 0.01))
            frame = frame * (1.0 - mask[..., None]) + mask[..., None] * disk['color']
        frames.append(np.clip(frame, 0.0, 1.0))
    return np.stack(frames).astype(np.float32)


def write_procedural_sources(directory, count, seed, num_frames=12, height=64, width=64):
    directory = Path(directory)
    for index in range(count):
        rng = np.random.default_rng([seed, index, 7])
        frames = procedural_clip(rng, num_frames=num_frames, height=height, width=width)
        video_id = f'video_{index:03d}'
        write_clip(VideoClip(frames=frames, role=ClipRole.GT, video_id=video_id), directory / video_id)
    return directory
