import json
from dataclasses import dataclass
from pathlib import Path

from .clips import ClipRole, list_frames, load_clip
from .exceptions import SourceError
from .serializers import FrameMetadataSerializer


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    root: Path

    def directory(self, split):
        return self.root / split

    @property
    def meta_path(self):
        return self.root / 'meta.jsonl'


class SynthesizedDataset:
    """Reader for out_dir/<video_id>/{lq,gt}/frame_%06d.png + meta.jsonl trees."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise SourceError(f'Dataset directory {self.root} does not exist.')
        manifest_path = self.root / 'dataset.json'
        if manifest_path.is_file():
            self.manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
            ids = [video['video_id'] for video in self.manifest['videos']]
        else:
            self.manifest = {}
            ids = sorted(child.name for child in self.root.iterdir() if (child / 'lq').is_dir())
        if not ids:
            raise SourceError(f'No videos found in {self.root}.')
        self.videos = [VideoEntry(video_id=video_id, root=self.root / video_id) for video_id in ids]
        self._meta_cache = {}

    def __iter__(self):
        return iter(self.videos)

    def __len__(self):
        return len(self.videos)

    @property
    def protocol(self):
        return self.manifest.get('protocol', {}).get('name', 'external')

    @property
    def interval_t(self):
        return self.manifest.get('interval_t')

    def entry(self, video_id):
        for video in self.videos:
            if video.video_id == video_id:
                return video
        raise SourceError(f'Video {video_id!r} is not part of {self.root}.')

    def frame_paths(self, video_id, split=ClipRole.LQ):
        return list_frames(self.entry(video_id).directory(split))

    def load(self, video_id, split=ClipRole.LQ):
        directory = self.entry(video_id).directory(split)
        if not directory.is_dir():
            raise SourceError(f'{video_id} has no {split} frames at {directory}.')
        return load_clip(directory, role=split, video_id=video_id)

    def load_pair(self, video_id):
        return self.load(video_id, ClipRole.LQ), self.load(video_id, ClipRole.GT)

    def metadata(self, video_id):
        if video_id in self._meta_cache:
            return self._meta_cache[video_id]
        path = self.entry(video_id).meta_path
        lines = []
        if path.is_file():
            for raw in path.read_text(encoding='utf-8').splitlines():
                if not raw.strip():
                    continue
                serializer = FrameMetadataSerializer(data=json.loads(raw))
                if not serializer.is_valid():
                    raise SourceError(f'Bad metadata line in {path}: {serializer.errors}')
                lines.append(json.loads(raw))
        self._meta_cache[video_id] = lines
        return lines

    def labels(self, video_id):
        """Per-frame list of applied degradation kinds."""
        return [[spec['kind'] for spec in line['specs']] for line in self.metadata(video_id)]

    def metadata_by_path(self, split=ClipRole.LQ):
        """Resolved frame path -> applied specs; GT frames map to nothing."""
        if split != ClipRole.LQ:
            return {}
        lookup = {}
        for video in self.videos:
            meta = self.metadata(video.video_id)
            for path, line in zip(self.frame_paths(video.video_id, split), meta):
                lookup[str(path.resolve())] = line['specs']
        return lookup
