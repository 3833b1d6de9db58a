"""MLLM and text-encoder clients.

Every client speaks the same request/response protocol: UTF-8 JSON objects,
``{image_path, prompt} -> {text}`` for the MLLM and ``{text} -> {embedding}``
for the encoder. The mocks answer in-process; the socket clients send one
JSON line per request to a local endpoint.
"""
import hashlib
import json
import logging
import re
import socket
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter
from pathlib import Path

import numpy as np
from django.conf import settings

from .exceptions import ClientConfigError, EmptyDescriptionError, TransportError
from .prompting import INTENSITY_PROMPT, NO, PRESENCE_PROMPT, QUALITY_PROMPT, YES
from .serializers import EmbeddingResponseSerializer, TextResponseSerializer

logger = logging.getLogger(__name__)

KIND_TO_CANDIDATE = {
    'gaussian_noise': 'noise',
    'speckle_noise': 'noise',
    'poisson_noise': 'noise',
    'gaussian_blur': 'blur',
    'resize_blur': 'blur',
    'snow': 'snow',
    'rain': 'rain',
    'jpeg_compression': 'compression',
    'video_compression': 'compression',
}

CLEAN_DESCRIPTION = (
    'The image looks clean and sharp, with good overall quality and well preserved detail.'
)

_PRESENCE = re.compile('^' + re.escape(PRESENCE_PROMPT).replace(re.escape('{name}'), '(?P<name>.+)') + '$')
_INTENSITY = re.compile('^' + re.escape(INTENSITY_PROMPT).replace(re.escape('{name}'), '(?P<name>.+)') + '$')

TOKEN = re.compile(r'[a-z0-9]+')
# Template words every description shares; only content words are embedded.
STOPWORDS = frozenset(
    'a an and are be by image in is it of the there this with intensity overall quality '
    'affected degradation step'.split()
)


def severity(spec):
    """Map one applied spec to moderate/severe with fixed thresholds."""
    kind, params = spec['kind'], spec['params']
    if kind in ('gaussian_noise', 'speckle_noise'):
        return 'severe' if params['sigma'] >= 25 else 'moderate'
    if kind == 'poisson_noise':
        return 'severe' if params['alpha'] < 2.5 else 'moderate'
    if kind == 'gaussian_blur':
        return 'severe' if params['sigma'] >= 1.5 else 'moderate'
    if kind == 'resize_blur':
        return 'severe' if params['factor'] >= 3 else 'moderate'
    if kind in ('snow', 'rain'):
        return params['intensity']
    if kind == 'jpeg_compression':
        return 'severe' if params['quality'] <= 10 else 'moderate'
    return 'moderate'


def summarize_specs(specs):
    """Candidate name -> intensity, the worse one winning when kinds share a name."""
    summary = {}
    for spec in specs:
        name = KIND_TO_CANDIDATE[spec['kind']]
        level = severity(spec)
        if summary.get(name) != 'severe':
            summary[name] = level
    return summary


class MLLMClient(ABC):
    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def ask(self, image_path, prompt):
        with self._lock:
            self.calls += 1
        return self.answer(str(image_path), prompt)

    @abstractmethod
    def answer(self, image_path, prompt):
        """Return the model's text reply."""


class TextEncoderClient(ABC):
    encoder_id = ''
    dim = 0

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def embed(self, text):
        with self._lock:
            self.calls += 1
        return self.encode(text)

    @abstractmethod
    def encode(self, text):
        """Return a length-``dim`` vector."""


class MockMLLMClient(MLLMClient):
    """Answers from synthesis metadata: resolved frame path -> applied specs.

    Frames without metadata are treated as clean.
    """

    def __init__(self, metadata_by_path=None):
        super().__init__()
        self.metadata = {
            str(Path(path).resolve()): summarize_specs(specs)
            for path, specs in (metadata_by_path or {}).items()
        }

    def _summary(self, image_path):
        return self.metadata.get(str(Path(image_path).resolve()), {})

    def describe(self, summary):
        if not summary:
            return CLEAN_DESCRIPTION
        level = 'poor' if 'severe' in summary.values() else 'fair'
        phrases = ' and '.join(f'{intensity} {name}' for name, intensity in summary.items())
        return (
            f'The overall quality of the image is {level}. '
            f'Step by step, it is affected by {phrases}.'
        )

    def answer(self, image_path, prompt):
        summary = self._summary(image_path)
        if prompt == QUALITY_PROMPT:
            return self.describe(summary)
        match = _PRESENCE.match(prompt)
        if match:
            return 'Yes' if match['name'] in summary else 'No'
        match = _INTENSITY.match(prompt)
        if match:
            return summary.get(match['name'], 'moderate').capitalize()
        return ''


class ScriptedMLLMClient(MLLMClient):
    """Replies from a fixed prompt -> answer table; unknown prompts get ``default``."""

    def __init__(self, answers, default=NO):
        super().__init__()
        self.answers = dict(answers)
        self.default = default

    def answer(self, image_path, prompt):
        return self.answers.get(prompt, self.default)


class MockTextEncoder(TextEncoderClient):
    """Sum of seeded per-token Gaussian vectors over the content-token multiset."""

    def __init__(self, dim=None, seed=None):
        super().__init__()
        self.dim = dim or settings.RONIN['EMBEDDING_DIM']
        self.seed = settings.RONIN['SEED'] if seed is None else seed
        self.encoder_id = f'mock-bow-{self.dim}-{self.seed}'

    def token_vector(self, token):
        digest = hashlib.sha256(f'{self.seed}:{token}'.encode('utf-8')).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], 'little'))
        return rng.standard_normal(self.dim)

    def encode(self, text):
        tokens = [tok for tok in TOKEN.findall(text.lower()) if tok not in STOPWORDS]
        if not tokens:
            tokens = [text.strip().lower()]
        if not tokens[0]:
            raise EmptyDescriptionError('Cannot embed an empty description.')
        total = np.zeros(self.dim)
        for token, count in sorted(Counter(tokens).items()):
            total += count * self.token_vector(token)
        return (total / np.linalg.norm(total)).astype(np.float32)


def parse_address(address):
    """``host:port`` for TCP, anything else is a unix socket path."""
    host, sep, port = address.rpartition(':')
    if sep and port.isdigit():
        return socket.AF_INET, (host or '127.0.0.1', int(port))
    if not address:
        raise ClientConfigError('Empty socket address.')
    return socket.AF_UNIX, address


class SocketEndpoint:
    def __init__(self, address, timeout=None, retries=None):
        self.address = address
        self.family, self.target = parse_address(address)
        self.timeout = settings.RONIN['CLIENT_TIMEOUT'] if timeout is None else timeout
        self.retries = settings.RONIN['CLIENT_RETRIES'] if retries is None else retries

    def _exchange(self, payload):
        with socket.socket(self.family, socket.SOCK_STREAM) as sock:
            sock.settimeout(self.timeout)
            sock.connect(self.target)
            sock.sendall(json.dumps(payload).encode('utf-8') + b'\n')
            with sock.makefile('rb') as reader:
                line = reader.readline()
        if not line:
            raise ConnectionError('Endpoint closed the connection without replying.')
        return json.loads(line.decode('utf-8'))

    def request(self, payload):
        attempt = 0
        while True:
            try:
                return self._exchange(payload)
            except (OSError, ValueError) as exc:
                if attempt >= self.retries:
                    raise TransportError(
                        f'{self.address} unreachable after {attempt + 1} attempts: {exc}'
                    ) from exc
                attempt += 1
                logger.warning('Retrying %s (%d/%d): %s', self.address, attempt, self.retries, exc)
                time.sleep(0.1 * attempt)


class SocketMLLMClient(MLLMClient):
    def __init__(self, address, timeout=None, retries=None):
        super().__init__()
        self.endpoint = SocketEndpoint(address, timeout, retries)

    def answer(self, image_path, prompt):
        reply = self.endpoint.request({'image_path': image_path, 'prompt': prompt})
        serializer = TextResponseSerializer(data=reply)
        if not serializer.is_valid():
            raise TransportError(f'Malformed reply from {self.endpoint.address}: {serializer.errors}')
        return serializer.validated_data['text']


class SocketTextEncoder(TextEncoderClient):
    def __init__(self, address, dim=None, timeout=None, retries=None):
        super().__init__()
        self.endpoint = SocketEndpoint(address, timeout, retries)
        self.dim = dim or settings.RONIN['EMBEDDING_DIM']
        self.encoder_id = f'socket:{address}'

    def encode(self, text):
        reply = self.endpoint.request({'text': text})
        serializer = EmbeddingResponseSerializer(data=reply)
        if not serializer.is_valid():
            raise TransportError(f'Malformed reply from {self.endpoint.address}: {serializer.errors}')
        return np.asarray(serializer.validated_data['embedding'], dtype=np.float32)


def build_mllm_client(spec, metadata_by_path=None):
    if spec == 'mock':
        return MockMLLMClient(metadata_by_path)
    if spec.startswith('socket:'):
        return SocketMLLMClient(spec[len('socket:'):])
    raise ClientConfigError(f"Client must be 'mock' or 'socket:<addr>', got {spec!r}.")


def build_text_encoder(spec, dim=None, seed=None):
    if spec == 'mock':
        return MockTextEncoder(dim=dim, seed=seed)
    if spec.startswith('socket:'):
        return SocketTextEncoder(spec[len('socket:'):], dim=dim)
    raise ClientConfigError(f"Encoder must be 'mock' or 'socket:<addr>', got {spec!r}.")
