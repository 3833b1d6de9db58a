from celery import shared_task

from .protocols import Protocol
from .synthesis import SourceVideo, synthesize_clip


@shared_task
def synthesize_clip_task(protocol, source, out_dir, seed, clip_index, interval_t, video_backend=None):
    """
    Synthesize one LQ/GT pair. Arguments are plain JSON so workers can run it.
    """
    return synthesize_clip(
        Protocol.from_dict(protocol),
        SourceVideo(**source),
        out_dir,
        seed,
        clip_index,
        interval_t,
        video_backend,
    )
