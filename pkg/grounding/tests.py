import json
import socketserver
import tempfile
import threading
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings

from degrade.clips import ClipRole, VideoClip, write_clip
from degrade.dataset import SynthesizedDataset
from degrade.samples import procedural_clip
from degrade.synthesis import synthesize_dataset

from .clients import (
    CLEAN_DESCRIPTION, MockMLLMClient, MockTextEncoder, ScriptedMLLMClient, SocketMLLMClient,
    SocketTextEncoder, build_mllm_client,
)
from .exceptions import (
    ClientConfigError, EmptyDescriptionError, GroundingError, MissingEmbeddingError, StoreFormatError,
    TransportError,
)
from .prompting import (
    INTENSITY_PROMPT, PRESENCE_PROMPT, QUALITY_PROMPT, FrameRef, embed_description, ground_frame,
    query_quality,
)
from .store import EmbeddingStore, build_embedding_store, dataset_frames, degradation_term_counts

CANDIDATES = ['noise', 'rain', 'snow', 'blur', 'compression']


def write_frames(directory, count=10):
    frames = procedural_clip(np.random.default_rng(0), num_frames=count, height=16, width=16)
    paths = write_clip(VideoClip(frames=frames), directory)
    return [FrameRef('video_000', index, str(path.resolve())) for index, path in enumerate(paths)]


def cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


class GroundFrameTest(SimpleTestCase):
    frame = FrameRef('clip', 0, '/data/clip/lq/frame_000000.png')

    def test_description_follows_the_query_algorithm_exactly(self):
        """Scripted answers produce the golden concatenation."""
        client = ScriptedMLLMClient({
            QUALITY_PROMPT: 'The photo is grainy and dim.',
            PRESENCE_PROMPT.format(name='noise'): 'Yes',
            INTENSITY_PROMPT.format(name='noise'): 'Severe.',
            PRESENCE_PROMPT.format(name='rain'): 'No',
            PRESENCE_PROMPT.format(name='snow'): 'yes.',
            INTENSITY_PROMPT.format(name='snow'): 'moderate',
            PRESENCE_PROMPT.format(name='blur'): 'Maybe',
            PRESENCE_PROMPT.format(name='compression'): 'No.',
        })
        record = ground_frame(self.frame, client, CANDIDATES)
        self.assertEqual(
            record.description,
            'The photo is grainy and dim. '
            'There is noise in the image, and the intensity of noise is severe. '
            'There is snow in the image, and the intensity of snow is moderate.',
        )
        self.assertEqual(record.detected, (('noise', 'severe'), ('snow', 'moderate')))
        self.assertEqual(record.parse_errors, 1)

    def test_unknown_intensity_is_rejected_not_coerced(self):
        client = ScriptedMLLMClient({
            QUALITY_PROMPT: 'Fine.',
            PRESENCE_PROMPT.format(name='noise'): 'Yes',
            INTENSITY_PROMPT.format(name='noise'): 'mild',
        })
        record = ground_frame(self.frame, client, ['noise'])
        self.assertEqual(record.detected, ())
        self.assertEqual(record.description, 'Fine.')
        self.assertEqual(record.parse_errors, 1)

    def test_empty_quality_answer(self):
        with self.assertRaises(EmptyDescriptionError):
            query_quality(self.frame, ScriptedMLLMClient({QUALITY_PROMPT: '   '}))

    def test_candidates_are_required(self):
        with self.assertRaises(GroundingError):
            ground_frame(self.frame, ScriptedMLLMClient({QUALITY_PROMPT: 'ok'}), [])


class MockClientTest(SimpleTestCase):
    def mock_client(self, specs):
        return MockMLLMClient({'/tmp/frame.png': specs})

    frame = FrameRef('clip', 0, '/tmp/frame.png')

    def test_noise_and_jpeg_are_moderate(self):
        client = self.mock_client([
            {'kind': 'gaussian_noise', 'params': {'sigma': 12.0}},
            {'kind': 'jpeg_compression', 'params': {'quality': 20}},
        ])
        record = ground_frame(self.frame, client, CANDIDATES)
        self.assertEqual(set(record.detected), {('noise', 'moderate'), ('compression', 'moderate')})

    def test_severe_snow(self):
        client = self.mock_client([{'kind': 'snow', 'params': {'intensity': 'severe'}}])
        self.assertIn('severe snow', query_quality(self.frame, client))
        record = ground_frame(self.frame, client, ['snow'])
        self.assertEqual(record.detected, (('snow', 'severe'),))

    def test_clean_frame_mentions_no_degradation(self):
        client = MockMLLMClient({})
        record = ground_frame(self.frame, client, CANDIDATES)
        self.assertEqual(record.detected, ())
        self.assertEqual(record.description, CLEAN_DESCRIPTION)
        self.assertIn('quality', record.description)
        words = set(record.description.lower().replace(',', ' ').replace('.', ' ').split())
        self.assertFalse(words & set(CANDIDATES))

    def test_unknown_client_spec(self):
        with self.assertRaises(ClientConfigError):
            build_mllm_client('grpc://nowhere')


class EmbedDescriptionTest(SimpleTestCase):
    def setUp(self):
        self.encoder = MockTextEncoder(dim=64, seed=3)

    def test_identical_text_identical_vectors(self):
        text = 'There is noise in the image, and the intensity of noise is severe.'
        np.testing.assert_array_equal(
            embed_description(text, self.encoder), embed_description(text, self.encoder)
        )

    def test_one_word_changes_the_vector(self):
        a = embed_description('There is noise in the image, intensity severe.', self.encoder)
        b = embed_description('There is snow in the image, intensity severe.', self.encoder)
        self.assertLess(cosine(a, b), 1.0)

    def test_shared_degradation_words_land_closer(self):
        noisy = embed_description('moderate noise, the scene is dim', self.encoder)
        noisier = embed_description('severe noise, the scene is dim', self.encoder)
        snowy = embed_description('severe snow over a sharp street', self.encoder)
        self.assertGreater(cosine(noisy, noisier), cosine(noisy, snowy))

    def test_vectors_are_unit_length(self):
        vector = embed_description('moderate compression', self.encoder)
        self.assertEqual(vector.shape, (64,))
        self.assertAlmostEqual(float(np.linalg.norm(vector)), 1.0, places=5)

    def test_empty_text(self):
        with self.assertRaises(EmptyDescriptionError):
            embed_description('', self.encoder)


class EmbeddingStoreTest(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)
        self.frames = write_frames(self.tmp / 'frames')
        specs = [{'kind': 'snow', 'params': {'intensity': 'severe'}}]
        self.metadata = {frame.path: specs for frame in self.frames[::2]}

    def build(self, out='store', frames=None, client=None, encoder=None):
        return build_embedding_store(
            frames or self.frames,
            client or MockMLLMClient(self.metadata),
            encoder or MockTextEncoder(dim=384, seed=0),
            CANDIDATES,
            self.tmp / out,
            jobs=3,
        )

    def test_ten_frames_round_trip(self):
        store = self.build()
        self.assertEqual(len(store), 10)
        loaded = EmbeddingStore.load(self.tmp / 'store')
        self.assertEqual((loaded.d, loaded.encoder_id), (384, store.encoder_id))
        for original, reloaded in zip(store, loaded):
            self.assertEqual(original.frame, reloaded.frame)
            self.assertEqual(original.description, reloaded.description)
            self.assertEqual(original.detected, reloaded.detected)
            self.assertEqual(original.embedding.tobytes(), reloaded.embedding.tobytes())

    def test_rerun_makes_no_client_calls(self):
        self.build()
        client, encoder = MockMLLMClient(self.metadata), MockTextEncoder(dim=384, seed=0)
        store = self.build(client=client, encoder=encoder)
        self.assertEqual(len(store), 10)
        self.assertEqual(client.calls, 0)
        self.assertEqual(encoder.calls, 0)

    def test_interrupted_build_resumes(self):
        self.build(frames=self.frames[:4])
        encoder = MockTextEncoder(dim=384, seed=0)
        store = self.build(encoder=encoder)
        self.assertEqual(len(store), 10)
        self.assertEqual(encoder.calls, 6)

    def test_builds_are_byte_identical(self):
        self.build('first')
        self.build('second')
        for name in ('store.json', 'index.jsonl', 'embeddings.bin'):
            self.assertEqual(
                (self.tmp / 'first' / name).read_bytes(), (self.tmp / 'second' / name).read_bytes()
            )

    def test_half_written_save_is_detected(self):
        self.build(frames=self.frames[:4])
        header = (self.tmp / 'store' / 'store.json').read_bytes()
        self.build()
        # data files from the second save, header from the first
        (self.tmp / 'store' / 'store.json').write_bytes(header)
        with self.assertRaises(StoreFormatError):
            EmbeddingStore.load(self.tmp / 'store')

    def test_unreadable_store_is_rebuilt(self):
        self.build()
        (self.tmp / 'store' / 'embeddings.bin').write_bytes(b'\0' * 16)
        encoder = MockTextEncoder(dim=384, seed=0)
        store = self.build(encoder=encoder)
        self.assertEqual(encoder.calls, 10)
        self.assertEqual(len(EmbeddingStore.load(self.tmp / 'store')), len(store))

    def test_missing_key_is_an_error(self):
        store = self.build()
        with self.assertRaises(MissingEmbeddingError):
            store.get('video_000', 99)
        with self.assertRaises(KeyError):
            store.embedding('other', 0)

    def test_embeddings_file_is_contiguous_little_endian(self):
        store = self.build()
        raw = np.frombuffer((self.tmp / 'store' / 'embeddings.bin').read_bytes(), dtype='<f4')
        self.assertEqual(raw.size, 10 * 384)
        first = json.loads((self.tmp / 'store' / 'index.jsonl').read_text().splitlines()[3])
        np.testing.assert_array_equal(
            raw[first['offset']:first['offset'] + 384], store.embedding('video_000', 3)
        )

    def test_term_counts(self):
        store = self.build()
        counts = degradation_term_counts(store, ['snow', 'noise', 'Quality'])
        self.assertEqual(counts, {'snow': 5, 'noise': 0, 'Quality': 10})
        self.assertEqual(degradation_term_counts(EmbeddingStore(8, 'empty'), ['snow']), {'snow': 0})
        with self.assertRaises(GroundingError):
            degradation_term_counts(store, [])

    def test_no_frames(self):
        with self.assertRaises(GroundingError):
            build_embedding_store([], MockMLLMClient(), MockTextEncoder(dim=8), CANDIDATES, self.tmp / 'x')


@override_settings(RONIN={**settings.RONIN, 'VIDEO_ENCODER': ''})
class DatasetGroundingTest(SimpleTestCase):
    def check_single_weather_protocol(self, protocol, term, other):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            synthesize_dataset(protocol, tmp / 'src', tmp / 'data', 5, 6, procedural=2)
            dataset = SynthesizedDataset(tmp / 'data')
            frames, labels = dataset_frames(dataset)
            client = MockMLLMClient(dataset.metadata_by_path(ClipRole.LQ))
            store = build_embedding_store(frames, client, MockTextEncoder(dim=32), CANDIDATES,
                                          tmp / 'store', labels=labels)
            self.assertEqual(len(store), len(frames))
            for record in store:
                self.assertEqual(record.labels, (term,))
                self.assertEqual([name for name, _ in record.detected], [term])
            counts = degradation_term_counts(store, [term, other])
            self.assertEqual(counts, {term: len(frames), other: 0})

    def test_store_labels_follow_synthesis_metadata(self):
        self.check_single_weather_protocol('fourD_desnow', 'snow', 'noise')

    def test_rain_is_synthesized_and_detected(self):
        self.check_single_weather_protocol('fourD_derain', 'rain', 'snow')


class _JsonLineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        request = json.loads(self.rfile.readline())
        if 'prompt' in request:
            reply = {'text': 'No' if request['prompt'] != QUALITY_PROMPT else 'Looks fine.'}
        else:
            reply = {'embedding': [1.0, 0.0, 0.0, 0.0]}
        self.wfile.write(json.dumps(reply).encode('utf-8') + b'\n')


class SocketClientTest(SimpleTestCase):
    def test_json_line_protocol(self):
        server = socketserver.ThreadingTCPServer(('127.0.0.1', 0), _JsonLineHandler)
        self.addCleanup(server.server_close)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        self.addCleanup(server.shutdown)
        address = f'127.0.0.1:{server.server_address[1]}'

        record = ground_frame(FrameRef('v', 0, '/tmp/x.png'), SocketMLLMClient(address), CANDIDATES)
        self.assertEqual(record.description, 'Looks fine.')
        vector = embed_description(record.description, SocketTextEncoder(address, dim=4))
        np.testing.assert_array_equal(vector, np.array([1, 0, 0, 0], dtype=np.float32))

    def test_unreachable_endpoint(self):
        client = SocketMLLMClient('127.0.0.1:1', timeout=0.5, retries=1)
        with self.assertRaises(TransportError):
            client.ask('/tmp/x.png', QUALITY_PROMPT)
