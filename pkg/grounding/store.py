"""Offline per-frame embedding store.

On disk a store is a directory holding ``store.json`` (header), ``index.jsonl``
(one record per line, sorted by video and frame) and ``embeddings.bin``
(little-endian float32 rows, contiguous, in index order). The header is
written last and records the SHA-256 of both data files, so a directory
without one, or with data files that do not match it, is an interrupted build.
"""
import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from django.conf import settings

from degrade.clips import ClipRole, atomic_write_bytes, atomic_write_text

from .exceptions import GroundingError, MissingEmbeddingError, StoreFormatError
from .prompting import FrameRef, GroundedFrameRecord, embed_description, ground_frame
from .serializers import StoreHeaderSerializer, StoreRecordSerializer

logger = logging.getLogger(__name__)

STORE_FORMAT = 'ronin-embedding-store'
STORE_VERSION = 1
HEADER_FILE = 'store.json'
INDEX_FILE = 'index.jsonl'
EMBEDDINGS_FILE = 'embeddings.bin'


class EmbeddingStore:
    def __init__(self, d, encoder_id, records=None):
        if d < 1:
            raise GroundingError(f'Embedding dimension must be positive, got {d}.')
        self.d = d
        self.encoder_id = encoder_id
        self.records = {}
        for record in records or ():
            self.add(record)

    def __len__(self):
        return len(self.records)

    def __contains__(self, key):
        return tuple(key) in self.records

    def __iter__(self):
        return iter(self.records[key] for key in sorted(self.records))

    def add(self, record):
        if record.embedding is None or np.asarray(record.embedding).shape != (self.d,):
            raise GroundingError(
                f'{record.frame.video_id}:{record.frame.frame_index} embedding does not have length {self.d}.'
            )
        self.records[record.key] = record

    def get(self, video_id, frame_index):
        try:
            return self.records[(video_id, frame_index)]
        except KeyError:
            raise MissingEmbeddingError(video_id, frame_index) from None

    def embedding(self, video_id, frame_index):
        return self.get(video_id, frame_index).embedding

    def embeddings_for(self, video_id, frame_indices):
        return np.stack([self.embedding(video_id, index) for index in frame_indices])

    def missing(self, keys):
        return [key for key in keys if tuple(key) not in self.records]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines, rows = [], []
        for offset, record in enumerate(self):
            lines.append(json.dumps({
                'video_id': record.frame.video_id,
                'frame_index': record.frame.frame_index,
                'path': record.frame.path,
                'description': record.description,
                'detected': [list(item) for item in record.detected],
                'labels': list(record.labels),
                'encoder_id': record.encoder_id,
                'content_hash': record.content_hash,
                'parse_errors': record.parse_errors,
                'offset': offset * self.d,
                'length': self.d,
            }, sort_keys=True, ensure_ascii=False))
            rows.append(np.asarray(record.embedding, dtype='<f4'))
        payload = np.stack(rows).tobytes() if rows else b''
        index = ''.join(line + '\n' for line in lines)
        if len(payload) != len(lines) * self.d * 4:
            raise StoreFormatError(
                f'Refusing to write {directory}: {len(lines)} records but {len(payload)} embedding bytes.'
            )
        atomic_write_bytes(directory / EMBEDDINGS_FILE, payload)
        atomic_write_text(directory / INDEX_FILE, index)
        header = {
            'format': STORE_FORMAT,
            'version': STORE_VERSION,
            'd': self.d,
            'encoder_id': self.encoder_id,
            'count': len(lines),
            'index_sha256': hashlib.sha256(index.encode('utf-8')).hexdigest(),
            'embeddings_sha256': hashlib.sha256(payload).hexdigest(),
        }
        atomic_write_text(directory / HEADER_FILE, json.dumps(header, indent=2, sort_keys=True) + '\n')
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        header_path = directory / HEADER_FILE
        if not header_path.is_file():
            raise StoreFormatError(f'{directory} is not an embedding store (no {HEADER_FILE}).')
        header = StoreHeaderSerializer(data=json.loads(header_path.read_text(encoding='utf-8')))
        if not header.is_valid():
            raise StoreFormatError(f'Bad store header in {directory}: {header.errors}')
        d = header.validated_data['d']
        try:
            payload = (directory / EMBEDDINGS_FILE).read_bytes()
            index = (directory / INDEX_FILE).read_bytes()
        except FileNotFoundError as exc:
            raise StoreFormatError(f'{directory} is missing {Path(exc.filename).name}.') from exc
        digests = ((INDEX_FILE, index, 'index_sha256'), (EMBEDDINGS_FILE, payload, 'embeddings_sha256'))
        for name, raw, key in digests:
            if hashlib.sha256(raw).hexdigest() != header.validated_data[key]:
                raise StoreFormatError(f'{directory / name} does not match {HEADER_FILE}; the last save was interrupted.')
        flat = np.frombuffer(payload, dtype='<f4')

        store = cls(d, header.validated_data['encoder_id'])
        raw_lines = index.decode('utf-8').splitlines()
        for number, raw in enumerate(raw_lines, start=1):
            serializer = StoreRecordSerializer(data=json.loads(raw))
            if not serializer.is_valid():
                raise StoreFormatError(f'{directory / INDEX_FILE}:{number}: {serializer.errors}')
            data = serializer.validated_data
            start, length = data['offset'], data['length']
            if length != d or start + length > flat.size:
                raise StoreFormatError(f'{directory / INDEX_FILE}:{number}: embedding out of bounds.')
            store.add(GroundedFrameRecord(
                frame=FrameRef(data['video_id'], data['frame_index'], data['path']),
                description=data['description'],
                detected=tuple(tuple(item) for item in data['detected']),
                embedding=flat[start:start + length].astype(np.float32),
                encoder_id=data['encoder_id'],
                labels=tuple(data['labels']),
                parse_errors=data['parse_errors'],
                content_hash=data['content_hash'],
            ))
        if len(store) != header.validated_data['count']:
            raise StoreFormatError(
                f'{directory} declares {header.validated_data["count"]} records, index has {len(store)}.'
            )
        return store


def content_hash(frame, candidates, encoder_id):
    digest = hashlib.sha256(Path(frame.path).read_bytes())
    digest.update(json.dumps([list(candidates), encoder_id]).encode('utf-8'))
    return digest.hexdigest()


def dataset_frames(dataset, split=ClipRole.LQ):
    """FrameRefs for every frame of a synthesized dataset, with their synthesis labels."""
    frames, labels = [], {}
    for video in dataset:
        kinds = dataset.labels(video.video_id)
        for index, path in enumerate(dataset.frame_paths(video.video_id, split)):
            frame = FrameRef(video.video_id, index, str(path.resolve()))
            frames.append(frame)
            if split == ClipRole.LQ and index < len(kinds):
                labels[frame.key] = tuple(kinds[index])
    return frames, labels


def _ground_one(frame, client, encoder, candidates, digest, labels):
    record = ground_frame(frame, client, candidates)
    embedding = embed_description(record.description, encoder)
    return GroundedFrameRecord(
        frame=frame,
        description=record.description,
        detected=record.detected,
        embedding=embedding,
        encoder_id=encoder.encoder_id,
        labels=labels,
        parse_errors=record.parse_errors,
        content_hash=digest,
    )


def build_embedding_store(frames, client, encoder, candidates, out_dir, jobs=None, labels=None,
                          flush_every=None):
    """Ground and embed every frame, reusing records whose content hash is unchanged."""
    frames = list(frames)
    if not frames:
        raise GroundingError('No frames to ground.')
    labels = labels or {}
    jobs = jobs or settings.RONIN['GROUNDING_MAX_IN_FLIGHT']
    flush_every = flush_every or settings.RONIN['STORE_FLUSH_EVERY']
    out_dir = Path(out_dir)

    store = EmbeddingStore(encoder.dim, encoder.encoder_id)
    previous = None
    if (out_dir / HEADER_FILE).is_file():
        try:
            previous = EmbeddingStore.load(out_dir)
        except StoreFormatError as exc:
            logger.warning('Ignoring unreadable store at %s: %s', out_dir, exc)
    if previous is not None:
        if previous.d == encoder.dim and previous.encoder_id == encoder.encoder_id:
            store = previous
        else:
            logger.warning('Existing store at %s was built by %s (d=%d); rebuilding.',
                           out_dir, previous.encoder_id, previous.d)

    wanted, pending = set(), []
    for frame in frames:
        digest = content_hash(frame, candidates, encoder.encoder_id)
        wanted.add(frame.key)
        existing = store.records.get(frame.key)
        if existing is not None and existing.content_hash == digest:
            continue
        pending.append((frame, digest))
    for key in [key for key in store.records if key not in wanted]:
        del store.records[key]

    logger.info('Grounding %d of %d frames (%d reused) with %d in flight',
                len(pending), len(frames), len(frames) - len(pending), jobs)
    parse_errors = 0
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = pool.map(
            lambda item: _ground_one(item[0], client, encoder, candidates, item[1],
                                     labels.get(item[0].key, ())),
            pending,
        )
        for done, record in enumerate(results, start=1):
            store.add(record)
            parse_errors += record.parse_errors
            if done % flush_every == 0:
                store.save(out_dir)
                logger.info('Flushed %d/%d grounded frames', done, len(pending))
    if parse_errors:
        logger.warning('%d answers could not be parsed; those candidates were skipped.', parse_errors)
    store.save(out_dir)
    return store


def degradation_term_counts(store, terms):
    """Number of records whose description mentions each term as a whole word."""
    if not terms:
        raise GroundingError('At least one term is required.')
    patterns = {term: re.compile(rf'\b{re.escape(term)}\b', re.IGNORECASE) for term in terms}
    counts = {term: 0 for term in terms}
    for record in store:
        for term, pattern in patterns.items():
            if pattern.search(record.description):
                counts[term] += 1
    return counts
