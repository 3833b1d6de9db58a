from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import StoreCoverageError, TrainingError


def check_store_coverage(dataset, store):
    """Every LQ frame of ``dataset`` must have a record; nothing is improvised."""
    keys = []
    for video in dataset:
        keys.extend((video.video_id, index) for index in range(len(dataset.frame_paths(video.video_id))))
    missing = store.missing(keys)
    if missing:
        raise StoreCoverageError(missing)
    return len(keys)


@dataclass
class WindowBatch:
    lq: torch.Tensor        # B x T x C x h x w
    gt: torch.Tensor
    targets: torch.Tensor   # B x T x d, or None
    origins: list           # (video_id, first frame index, top, left)


class WindowSampler:
    """Uniformly drawn clip windows with aligned random crops."""

    def __init__(self, dataset, window, crop, multiple, rng, store=None):
        self.rng = rng
        self.store = store
        self.clips = {}
        for video in dataset:
            lq, gt = dataset.load_pair(video.video_id)
            self.clips[video.video_id] = (lq.frames, gt.frames)
        self.video_ids = sorted(self.clips)
        shortest = min(len(lq) for lq, _ in self.clips.values())
        height = min(lq.shape[1] for lq, _ in self.clips.values())
        width = min(lq.shape[2] for lq, _ in self.clips.values())
        self.window = min(window, shortest)
        self.crop = min(crop, height, width) // multiple * multiple
        if self.crop < multiple:
            raise TrainingError(f'Frames of {height}x{width} are too small for crops divisible by {multiple}.')

    def sample(self, batch_size):
        lq_batch, gt_batch, targets, origins = [], [], [], []
        for _ in range(batch_size):
            video_id = self.video_ids[int(self.rng.integers(len(self.video_ids)))]
            lq, gt = self.clips[video_id]
            start = int(self.rng.integers(len(lq) - self.window + 1))
            top = int(self.rng.integers(lq.shape[1] - self.crop + 1))
            left = int(self.rng.integers(lq.shape[2] - self.crop + 1))
            frames = slice(start, start + self.window)
            rows, cols = slice(top, top + self.crop), slice(left, left + self.crop)
            lq_batch.append(lq[frames, rows, cols].transpose(0, 3, 1, 2))
            gt_batch.append(gt[frames, rows, cols].transpose(0, 3, 1, 2))
            if self.store is not None:
                targets.append(self.store.embeddings_for(video_id, range(start, start + self.window)))
            origins.append((video_id, start, top, left))
        return WindowBatch(
            lq=torch.from_numpy(np.ascontiguousarray(np.stack(lq_batch))),
            gt=torch.from_numpy(np.ascontiguousarray(np.stack(gt_batch))),
            targets=torch.from_numpy(np.stack(targets)) if targets else None,
            origins=origins,
        )
