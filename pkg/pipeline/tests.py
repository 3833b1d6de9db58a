import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from degrade.clips import VideoClip, write_clip
from degrade.samples import procedural_clip
from grounding.store import EmbeddingStore
from restoration.checkpoint import load_checkpoint

from .config import RESOLVED_CONFIG, resolve_config
from .exceptions import RunConfigError
from .serializers import TrainRunSerializer

TINY_TRAIN = dict(stages=[4, 8], crop=16, window=2, batch_size=1)


def run(command, **options):
    out = StringIO()
    call_command(command, stdout=out, **options)
    return out.getvalue()


class ResolveConfigTest(SimpleTestCase):
    def test_flags_override_file_values(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.json'
            path.write_text(json.dumps({'dataset': 'd', 'out': 'o', 'iters': 9, 'no_prompt': True}))
            config = resolve_config(TrainRunSerializer, path, iters=3, seed=None)
        self.assertEqual(config['iters'], 3)
        self.assertTrue(config['no_prompt'])
        self.assertEqual(config['lambda2'], 0.01)

    def test_invalid_values_are_reported(self):
        with self.assertRaises(RunConfigError):
            resolve_config(TrainRunSerializer, None, dataset='d', out='o', no_prompt=True, injection='middle')

    def test_missing_config_file(self):
        with self.assertRaises(RunConfigError):
            resolve_config(TrainRunSerializer, '/nonexistent/run.json')

    def test_paths_have_no_settings_fallback(self):
        self.assertFalse(hasattr(settings, 'DATA_ROOT'))
        with self.assertRaises(RunConfigError):
            resolve_config(TrainRunSerializer, None, no_prompt=True)


class PipelineCommandTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        frames = procedural_clip(np.random.default_rng(0), num_frames=10, height=16, width=16)
        write_clip(VideoClip(frames=frames, video_id='video_000'), cls.tmp / 'src' / 'video_000')
        run('synth', protocol='threeD_denoise', src=str(cls.tmp / 'src'), out=str(cls.tmp / 'data'), seed=1)
        cls.ground_output = run('ground', dataset=str(cls.tmp / 'data'), out=str(cls.tmp / 'store'), dim=16)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def path(self, name):
        return str(self.tmp / name)

    def test_synth_resolved_config_reproduces_the_dataset(self):
        resolved = self.tmp / 'data' / RESOLVED_CONFIG
        self.assertTrue(resolved.is_file())
        run('synth', config=str(resolved), out=self.path('data_again'))
        for name in ('frame_000000.png', 'frame_000009.png'):
            first = (self.tmp / 'data' / 'video_000' / 'lq' / name).read_bytes()
            second = (self.tmp / 'data_again' / 'video_000' / 'lq' / name).read_bytes()
            self.assertEqual(first, second)

    def test_synth_procedural_sources(self):
        output = run('synth', protocol='fourD_desnow', procedural=2, out=self.path('procedural'), seed=4)
        self.assertIn('Synthesized 2 videos', output)

    def test_synth_errors_exit_nonzero(self):
        with self.assertRaises(CommandError):
            run('synth', protocol='no_such_protocol', procedural=1, out=self.path('bad'))
        with self.assertRaises(CommandError):
            run('synth', protocol='threeD_denoise', out=self.path('bad'))

    def test_ground_builds_a_store_and_reuses_it(self):
        self.assertIn('Store', self.ground_output)
        self.assertEqual(len(EmbeddingStore.load(self.tmp / 'store')), 10)
        output = run('ground', dataset=self.path('data'), out=self.path('store'), dim=16)
        self.assertIn('0 MLLM calls, 0 encoder calls', output)

    def test_ground_term_counts(self):
        output = run('ground', dataset=self.path('data'), out=self.path('store'), dim=16,
                     count_terms=['noise', 'snow'])
        lines = output.splitlines()
        self.assertIn('noise  10', lines)
        self.assertIn('snow   0', lines)

    def test_ground_unreachable_endpoint(self):
        with self.assertRaises(CommandError):
            run('ground', dataset=self.path('data'), out=self.path('store_socket'), dim=16,
                client='socket:127.0.0.1:1', jobs=1)

    def test_train_zero_iterations_and_seeded_reruns(self):
        for name in ('run_a', 'run_b'):
            run('train', dataset=self.path('data'), store=self.path('store'), out=self.path(name),
                iters=0, seed=7, **TINY_TRAIN)
        first, _ = load_checkpoint(self.tmp / 'run_a' / 'checkpoint_final.pt')
        second, _ = load_checkpoint(self.tmp / 'run_b' / 'checkpoint_final.pt')
        for name, tensor in first.state_dict().items():
            self.assertTrue((tensor == second.state_dict()[name]).all(), name)
        self.assertEqual(first.config.d, 16)
        self.assertEqual(first.config.injection_sites, (0, 1))

    def test_train_without_prompt(self):
        run('train', dataset=self.path('data'), out=self.path('no_prompt'), iters=2, no_prompt=True,
            no_history=True, **TINY_TRAIN)
        model, _ = load_checkpoint(self.tmp / 'no_prompt' / 'checkpoint_final.pt')
        self.assertFalse(model.config.use_prompt)
        self.assertEqual(model.config.history_mode, 'none')
        snapshot = json.loads((self.tmp / 'no_prompt' / 'run_config.json').read_text())
        self.assertEqual(snapshot['loss']['lambda2'], 0.0)

    def test_train_injection_preset(self):
        run('train', dataset=self.path('data'), store=self.path('store'), out=self.path('first'),
            iters=1, injection='first', **TINY_TRAIN)
        model, _ = load_checkpoint(self.tmp / 'first' / 'checkpoint_final.pt')
        self.assertEqual(model.config.injection_sites, (0,))

    def test_train_with_prompts_needs_a_store(self):
        with self.assertRaises(CommandError):
            run('train', dataset=self.path('data'), out=self.path('no_store'), iters=1, **TINY_TRAIN)

    def test_eval_reports(self):
        run('train', dataset=self.path('data'), store=self.path('store'), out=self.path('for_eval'),
            iters=1, **TINY_TRAIN)
        checkpoint = self.path('for_eval/checkpoint_final.pt')
        output = run('eval', checkpoint=checkpoint, dataset=self.path('data'), store=self.path('store'),
                     out=self.path('reports'),
                     analysis=['identity', 'evaluate', 'perturb', 'oracle', 'alignment', 'export'])
        self.assertIn('PSNR ↑', output)
        reports = self.tmp / 'reports'
        for name in ('reports.csv', 'table.txt', 'alignment.json', 'alignment.csv', RESOLVED_CONFIG):
            self.assertTrue((reports / name).is_file(), name)
        self.assertEqual(len(EmbeddingStore.load(reports / 'prompt_embeddings')), 10)
        rows = (reports / 'reports.csv').read_text().splitlines()
        self.assertEqual(len(rows), 1 + 4 * 2)

    def test_eval_identity_needs_no_checkpoint(self):
        output = run('eval', dataset=self.path('data'), out=self.path('identity'), analysis=['identity'])
        self.assertIn('Average', output)

    def test_eval_errors_exit_nonzero(self):
        with self.assertRaises(CommandError):
            run('eval', dataset=self.path('data'), out=self.path('bad_eval'))
        with self.assertRaises(CommandError):
            run('eval', checkpoint=self.path('missing.pt'), dataset=self.path('data'), out=self.path('bad_eval'))
