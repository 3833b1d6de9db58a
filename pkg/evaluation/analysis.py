import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from degrade.clips import ClipRole
from degrade.exceptions import SourceError
from grounding.prompting import FrameRef, GroundedFrameRecord
from grounding.store import EmbeddingStore
from restoration.checkpoint import checkpoint_id, load_checkpoint
from restoration.network import restore_clip

from .exceptions import EvaluationError, MissingGroundTruthError
from .metrics import clip_scores

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VideoScore:
    video_id: str
    frames: int
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    """Per-video scores; aggregates average frames within a video, then videos."""

    analysis: str
    protocol: str
    checkpoint: str
    interval_t: int = None
    videos: list = field(default_factory=list)
    options: dict = field(default_factory=dict)

    @property
    def psnr(self):
        return float(np.mean([video.psnr for video in self.videos]))

    @property
    def ssim(self):
        return float(np.mean([video.ssim for video in self.videos]))

    @property
    def label(self):
        return self.analysis if not self.options else (
            self.analysis + '(' + ', '.join(f'{k}={v}' for k, v in sorted(self.options.items())) + ')'
        )

    def to_dict(self):
        return {
            'analysis': self.analysis,
            'protocol': self.protocol,
            'checkpoint': self.checkpoint,
            'interval_t': self.interval_t,
            'options': dict(self.options),
            'psnr': self.psnr,
            'ssim': self.ssim,
            'videos': [vars(video) for video in self.videos],
        }


@dataclass
class AlignmentReport:
    checkpoint: str
    matched: list
    shuffled: list
    degenerate: int
    frames: list = field(default_factory=list)

    @staticmethod
    def _stats(values):
        return {'min': float(np.min(values)), 'mean': float(np.mean(values)), 'max': float(np.max(values))}

    @property
    def gap(self):
        return float(np.mean(self.matched) - np.mean(self.shuffled))

    def to_dict(self):
        return {
            'checkpoint': self.checkpoint,
            'frames': len(self.matched),
            'degenerate': self.degenerate,
            'matched': self._stats(self.matched),
            'shuffled': self._stats(self.shuffled),
            'gap': self.gap,
        }


def resolve_model(checkpoint):
    """Accept a checkpoint path or an in-memory network; return (model, id)."""
    if isinstance(checkpoint, torch.nn.Module):
        return checkpoint, getattr(checkpoint, 'checkpoint_id', 'in-memory')
    model, _ = load_checkpoint(checkpoint)
    return model, checkpoint_id(checkpoint)


def _load_pair(dataset, video_id):
    try:
        return dataset.load_pair(video_id)
    except SourceError as exc:
        raise MissingGroundTruthError(str(exc)) from exc


def _pad(clip, multiple):
    height, width = clip.shape[1:3]
    pad_h, pad_w = -height % multiple, -width % multiple
    if not pad_h and not pad_w:
        return clip
    frames = np.pad(clip.frames, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)), mode='edge')
    return clip.with_frames(frames, clip.role)


def _restore(model, clip, embeddings=None, prompt_transform=None):
    height, width = clip.shape[1:3]
    restored, prompts = restore_clip(model, _pad(clip, model.config.size_multiple), embeddings, prompt_transform)
    if restored.shape[1:3] != (height, width):
        restored = restored.with_frames(restored.frames[:, :height, :width], ClipRole.RESTORED)
    return restored, prompts


def _score_videos(dataset, score_one, jobs=1):
    video_ids = [video.video_id for video in dataset]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(score_one, video_ids))
    return [score_one(video_id) for video_id in video_ids]


def _video_score(video_id, restored_frames, gt):
    psnrs, ssims = clip_scores(restored_frames, gt.frames)
    return VideoScore(video_id, len(psnrs), float(np.mean(psnrs)), float(np.mean(ssims)))


def _report(analysis, dataset, checkpoint, videos, **options):
    report = MetricsReport(analysis, dataset.protocol, checkpoint, dataset.interval_t, videos, options)
    logger.info('%s on %s: PSNR %.3f dB, SSIM %.4f over %d videos',
                report.label, report.protocol, report.psnr, report.ssim, len(videos))
    return report


def identity(dataset, jobs=1):
    """Scores of the LQ input against GT: the no-restoration baseline."""

    def score_one(video_id):
        lq, gt = _load_pair(dataset, video_id)
        return _video_score(video_id, lq.frames, gt)

    return _report('identity', dataset, 'input', _score_videos(dataset, score_one, jobs))


def evaluate(checkpoint, dataset, jobs=1):
    model, model_id = resolve_model(checkpoint)

    def score_one(video_id):
        lq, gt = _load_pair(dataset, video_id)
        restored, _ = _restore(model, lq)
        return _video_score(video_id, restored.frames, gt)

    return _report('evaluate', dataset, model_id, _score_videos(dataset, score_one, jobs))


def oracle(checkpoint, dataset, store, jobs=1):
    """Inject the stored text embedding in place of the generated prompt."""
    model, model_id = resolve_model(checkpoint)
    if not model.config.use_prompt:
        raise EvaluationError('Oracle prompts need a model with prompt injection.')
    if store.d != model.config.d:
        raise EvaluationError(f'Store has d={store.d}, model expects d={model.config.d}.')

    def score_one(video_id):
        lq, gt = _load_pair(dataset, video_id)
        embeddings = store.embeddings_for(video_id, range(len(lq)))
        restored, _ = _restore(model, lq, embeddings=embeddings)
        return _video_score(video_id, restored.frames, gt)

    return _report('oracle', dataset, model_id, _score_videos(dataset, score_one, jobs))


def perturb_prompts_eval(checkpoint, dataset, noise_sigma, seed=0, jobs=1):
    """evaluate() with P_t + N(0, noise_sigma^2) injected; one seeded stream per video."""
    if noise_sigma < 0:
        raise EvaluationError('noise_sigma must be >= 0.')
    model, model_id = resolve_model(checkpoint)
    if not model.config.use_prompt:
        raise EvaluationError('Prompt perturbation needs a model with prompt injection.')
    video_ids = [video.video_id for video in dataset]
    streams = np.random.SeedSequence(seed).spawn(len(video_ids))

    def score_one(video_id):
        lq, gt = _load_pair(dataset, video_id)
        transform = None
        if noise_sigma:
            state = streams[video_ids.index(video_id)].generate_state(1)
            generator = torch.Generator().manual_seed(int(state[0]))

            def transform(prompt):
                noise = torch.randn(prompt.shape, generator=generator, dtype=torch.float64)
                return prompt + noise_sigma * noise.to(prompt.dtype)

        restored, _ = _restore(model, lq, prompt_transform=transform)
        return _video_score(video_id, restored.frames, gt)

    return _report('perturb', dataset, model_id, _score_videos(dataset, score_one, jobs),
                   noise_sigma=noise_sigma, seed=seed)


def cosine(a, b):
    """Cosine similarity; a zero vector gives (0.0, True) instead of an error."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return 0.0, True
    return float(np.dot(a, b) / norm), False


def collect_prompts(model, dataset):
    prompts = {}
    for video in dataset:
        lq = dataset.load(video.video_id, ClipRole.LQ)
        _, clip_prompts = _restore(model, lq)
        prompts[video.video_id] = clip_prompts
    return prompts


def prompt_alignment(checkpoint, dataset, store, seed=0):
    """Cosine of learned prompts against their own targets and against shuffled ones."""
    model, model_id = resolve_model(checkpoint)
    if not model.config.use_prompt:
        raise EvaluationError('Alignment needs a model that generates prompts.')
    if store.d != model.config.d:
        raise EvaluationError(f'Store has d={store.d}, model expects d={model.config.d}.')
    keys, prompts = [], []
    for video_id, clip_prompts in collect_prompts(model, dataset).items():
        for index, prompt in enumerate(clip_prompts):
            keys.append((video_id, index))
            prompts.append(prompt)
    targets = [store.embedding(*key) for key in keys]
    order = np.random.default_rng(seed).permutation(len(targets))

    matched, shuffled, rows, degenerate = [], [], [], 0
    for i, (key, prompt) in enumerate(zip(keys, prompts)):
        own, own_flag = cosine(prompt, targets[i])
        other, other_flag = cosine(prompt, targets[order[i]])
        degenerate += own_flag
        matched.append(own)
        shuffled.append(other)
        rows.append({'video_id': key[0], 'frame_index': key[1], 'matched': own, 'shuffled': other,
                     'degenerate': own_flag or other_flag})
    if degenerate:
        logger.warning('%d of %d prompts are zero vectors; their cosine is reported as 0.',
                       degenerate, len(prompts))
    report = AlignmentReport(model_id, matched, shuffled, degenerate, rows)
    logger.info('Alignment: matched mean %.4f, shuffled mean %.4f', np.mean(matched), np.mean(shuffled))
    return report


def export_prompt_embeddings(checkpoint, dataset, out_dir):
    """Write learned prompts with synthesis labels as an embedding store."""
    model, model_id = resolve_model(checkpoint)
    if not model.config.use_prompt:
        raise EvaluationError('This model generates no prompts to export.')
    store = EmbeddingStore(model.config.d, model_id)
    for video_id, clip_prompts in collect_prompts(model, dataset).items():
        labels = dataset.labels(video_id)
        paths = dataset.frame_paths(video_id, ClipRole.LQ)
        for index, prompt in enumerate(clip_prompts):
            store.add(GroundedFrameRecord(
                frame=FrameRef(video_id, index, str(Path(paths[index]).resolve())),
                description='learned prompt',
                embedding=np.asarray(prompt, dtype=np.float32),
                encoder_id=model_id,
                labels=tuple(labels[index]) if index < len(labels) else (),
            ))
    store.save(out_dir)
    logger.info('Exported %d prompts to %s', len(store), out_dir)
    return store
