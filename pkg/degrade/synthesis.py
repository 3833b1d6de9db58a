import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .clips import ClipRole, atomic_write_text, load_clip, write_clip
from .exceptions import SourceError
from .ops import resolve_video_backend
from .protocols import Protocol, load_protocol
from .samples import write_procedural_sources
from .schedule import apply_schedule, sample_schedule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SourceVideo:
    video_id: str
    degrade_dir: str
    gt_dir: str

    def to_dict(self):
        return asdict(self)


def discover_sources(source_dir):
    """List source videos; a video with blur/ and sharp/ degrades the blurry frames."""
    root = Path(source_dir)
    if not root.is_dir():
        raise SourceError(f'Source directory {root} does not exist.')
    sources = []
    for child in sorted(path for path in root.iterdir() if path.is_dir()):
        if (child / 'blur').is_dir() and (child / 'sharp').is_dir():
            sources.append(SourceVideo(child.name, str(child / 'blur'), str(child / 'sharp')))
        else:
            sources.append(SourceVideo(child.name, str(child), str(child)))
    if not sources:
        raise SourceError(f'No source videos under {root}.')
    return sources


def clip_rng(seed, clip_index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(clip_index,)))


def synthesize_clip(protocol, source, out_dir, seed, clip_index, interval_t, video_backend=None):
    gt = load_clip(source.gt_dir, ClipRole.GT, video_id=source.video_id)
    if source.degrade_dir == source.gt_dir:
        clean = gt
    else:
        clean = load_clip(source.degrade_dir, ClipRole.GT, video_id=source.video_id)
        if clean.shape != gt.shape:
            raise SourceError(
                f'{source.video_id}: blurry frames {clean.shape} do not match sharp frames {gt.shape}.'
            )

    t = protocol.interval_for(len(clean), interval_t)
    schedule = sample_schedule(
        clip_rng(seed, clip_index), t, protocol.candidates, protocol.probability,
        num_segments=math.ceil(len(clean) / t), ranges=protocol.ranges,
    )
    lq, metadata = apply_schedule(clean, schedule, video_backend=video_backend)

    out_dir = Path(out_dir)
    staging = out_dir / f'.{source.video_id}.partial'
    if staging.exists():
        shutil.rmtree(staging)
    write_clip(lq, staging / ClipRole.LQ)
    write_clip(gt, staging / ClipRole.GT)
    lines = [json.dumps(line, sort_keys=True) for line in metadata]
    (staging / 'meta.jsonl').write_text('\n'.join(lines) + '\n', encoding='utf-8')
    (staging / 'schedule.json').write_text(
        json.dumps(schedule.to_dict(), sort_keys=True, indent=2) + '\n', encoding='utf-8'
    )
    target = out_dir / source.video_id
    if target.exists():
        shutil.rmtree(target)
    os.replace(staging, target)
    logger.info('Synthesized %s: %d frames, %d segments of %d', source.video_id, len(lq),
                len(schedule.segments), t)
    return {
        'video_id': source.video_id,
        'frames': len(lq),
        'interval_t': t,
        'segments': len(schedule.segments),
    }


def synthesize_dataset(protocol, source_dir, out_dir, seed, interval_t=6, probability=None,
                       procedural=0, jobs=1, allow_fallback=None):
    """Write paired LQ/GT trees, per-frame metadata and a dataset.json manifest."""
    from .tasks import synthesize_clip_task

    if not isinstance(protocol, Protocol):
        protocol = load_protocol(protocol, probability=probability)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if procedural:
        if source_dir is None:
            source_dir = out_dir.with_name(f'{out_dir.name}_sources')
        write_procedural_sources(source_dir, procedural, seed)
    if source_dir is None:
        raise SourceError('A source directory is required unless procedural sources are requested.')
    sources = discover_sources(source_dir)

    backend = None
    if 'video_compression' in protocol.candidates:
        backend = resolve_video_backend(allow_fallback)
        logger.info('Video compression backend: %s', backend)

    summaries, pending = [], []
    for index, source in enumerate(sources):
        pending.append(synthesize_clip_task.delay(
            protocol.to_dict(), source.to_dict(), str(out_dir), seed, index, interval_t, backend,
        ))
        if len(pending) >= max(1, jobs):
            summaries.extend(result.get() for result in pending)
            pending = []
    summaries.extend(result.get() for result in pending)

    manifest = {
        'protocol': protocol.to_dict(),
        'seed': seed,
        'interval_t': interval_t,
        'video_backend': backend,
        'videos': summaries,
    }
    atomic_write_text(out_dir / 'dataset.json', json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return manifest
