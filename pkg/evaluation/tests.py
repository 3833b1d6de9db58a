import math
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase, tag

from degrade.dataset import SynthesizedDataset
from grounding.store import EmbeddingStore, dataset_frames
from restoration.config import ModelConfig
from restoration.network import RestorationNetwork, identity_model
from training.tests import converged_run, prompt_loss_ratio, toy_dataset, toy_store
from training.trainer import TrainConfig, train

from .analysis import (
    MetricsReport, VideoScore, cosine, evaluate, export_prompt_embeddings, identity, oracle,
    perturb_prompts_eval, prompt_alignment,
)
from .exceptions import EvaluationError, MetricShapeError, MissingGroundTruthError
from .metrics import gaussian_window, psnr, ssim, to_luma
from .reports import format_table, write_alignment, write_reports_csv

SMALL = dict(stage_channels=(4, 8), d=16)

NOISE_25 = {
    'name': 'noise25',
    'candidates': ['gaussian_noise'],
    'probability': 1.0,
    'per_clip': True,
    'ranges': {'gaussian_noise': {'sigma': {'uniform': [25, 25]}}},
}


def brute_force_psnr(a, b):
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
    return 10.0 * math.log10(1.0 / (total / a.size))


def brute_force_ssim(a, b, size=11, sigma=1.5):
    """Window-by-window evaluation of the structural-similarity formula."""
    a = a[..., 0] * 0.299 + a[..., 1] * 0.587 + a[..., 2] * 0.114
    b = b[..., 0] * 0.299 + b[..., 1] * 0.587 + b[..., 2] * 0.114
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
            var_a = (w * (pa - mu_a) ** 2).sum()
            var_b = (w * (pb - mu_b) ** 2).sum()
            cov = (w * (pa - mu_a) * (pb - mu_b)).sum()
            values.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


class PsnrTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_identical_frames_hit_the_cap(self):
        frame = self.rng.random((8, 8, 3))
        self.assertEqual(psnr(frame, frame), 100.0)

    def test_constant_offset_of_a_tenth_is_twenty_db(self):
        self.assertAlmostEqual(psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)), 20.0, places=10)

    def test_symmetry(self):
        a, b = self.rng.random((8, 8, 3)), self.rng.random((8, 8, 3))
        self.assertEqual(psnr(a, b), psnr(b, a))

    def test_matches_brute_force(self):
        for _ in range(5):
            a, b = self.rng.random((32, 32, 3)), self.rng.random((32, 32, 3))
            self.assertLessEqual(abs(psnr(a, b) - brute_force_psnr(a, b)), 1e-6 * brute_force_psnr(a, b))

    def test_more_noise_means_lower_psnr(self):
        gt = self.rng.random((32, 32, 3))
        noise = self.rng.standard_normal(gt.shape)
        scores = [psnr(gt + sigma / 255.0 * noise, gt) for sigma in (5, 10, 20, 40)]
        self.assertTrue(all(a > b for a, b in zip(scores, scores[1:])))

    def test_shape_mismatch(self):
        with self.assertRaises(MetricShapeError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class SsimTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_identical_frames(self):
        frame = self.rng.random((32, 32, 3))
        self.assertAlmostEqual(ssim(frame, frame), 1.0, places=12)

    def test_inverted_frame_scores_below_one(self):
        frame = self.rng.random((32, 32, 3))
        self.assertLess(ssim(frame, 1.0 - frame), 1.0)

    def test_matches_direct_formula(self):
        for _ in range(3):
            a = self.rng.random((32, 32, 3))
            b = np.clip(a + 0.1 * self.rng.standard_normal(a.shape), 0, 1)
            expected = brute_force_ssim(a, b)
            self.assertLessEqual(abs(ssim(a, b) - expected), 1e-6 * abs(expected))

    def test_window_is_normalized_and_symmetric(self):
        window = gaussian_window()
        self.assertEqual(window.shape, (11, 11))
        self.assertAlmostEqual(window.sum(), 1.0, places=12)
        np.testing.assert_allclose(window, window.T)

    def test_grayscale_and_luma(self):
        frame = self.rng.random((16, 16, 3))
        np.testing.assert_allclose(to_luma(frame), frame @ np.array([0.299, 0.587, 0.114]))
        self.assertAlmostEqual(ssim(to_luma(frame), to_luma(frame)), 1.0, places=12)

    def test_scores_do_not_depend_on_memory_layout(self):
        planar_a = self.rng.random((3, 24, 24)).astype(np.float32)
        planar_b = self.rng.random((3, 24, 24)).astype(np.float32)
        strided_a, strided_b = planar_a.transpose(1, 2, 0), planar_b.transpose(1, 2, 0)
        self.assertFalse(strided_a.flags['C_CONTIGUOUS'])
        contiguous_a, contiguous_b = np.ascontiguousarray(strided_a), np.ascontiguousarray(strided_b)
        np.testing.assert_array_equal(to_luma(strided_a), to_luma(contiguous_a))
        self.assertEqual(ssim(strided_a, strided_b), ssim(contiguous_a, contiguous_b))
        self.assertEqual(psnr(strided_a, strided_b), psnr(contiguous_a, contiguous_b))

    def test_frames_smaller_than_the_window(self):
        with self.assertRaises(MetricShapeError):
            ssim(np.zeros((10, 32, 3)), np.zeros((10, 32, 3)))


class ReportFormatTest(SimpleTestCase):
    def reports(self):
        videos = [VideoScore('video_000', 12, 24.5, 0.81), VideoScore('video_001', 12, 26.5, 0.85)]
        return [
            MetricsReport('identity', 'TUD', 'input', 6, videos[:1] + [VideoScore('video_001', 12, 22.0, 0.7)]),
            MetricsReport('evaluate', 'TUD', 'checkpoint_final-abc', 6, videos),
        ]

    def test_aggregate_averages_videos(self):
        report = self.reports()[1]
        self.assertEqual(report.psnr, 25.5)
        self.assertAlmostEqual(report.ssim, 0.83)

    def test_table_has_metric_columns_and_average_row(self):
        table = format_table(self.reports())
        self.assertIn('PSNR ↑', table)
        self.assertIn('SSIM ↑', table)
        self.assertEqual(table.splitlines()[-1].split()[0], 'Average')
        self.assertIn('25.50', table)

    def test_csv_is_byte_stable(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = write_reports_csv(Path(tmp) / 'a.csv', self.reports())
            second = write_reports_csv(Path(tmp) / 'b.csv', self.reports())
            self.assertEqual(first.read_bytes(), second.read_bytes())
            rows = first.read_text().splitlines()
            self.assertEqual(len(rows), 1 + 3 + 3)
            self.assertTrue(rows[0].startswith('analysis,protocol'))


class AnalysisTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.dataset = toy_dataset(cls.tmp)
        cls.store = toy_store(cls.dataset, cls.tmp / 'store')
        torch.manual_seed(0)
        cls.model = RestorationNetwork(ModelConfig(**SMALL))

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def test_identity_model_reproduces_input_scores(self):
        baseline = identity(self.dataset)
        report = evaluate(identity_model(ModelConfig(**SMALL)), self.dataset)
        self.assertEqual([v.psnr for v in report.videos], [v.psnr for v in baseline.videos])
        self.assertEqual([v.ssim for v in report.videos], [v.ssim for v in baseline.videos])
        self.assertEqual(report.protocol, 'threeD_denoise')
        self.assertEqual(report.interval_t, 6)

    def test_single_clip_aggregate_is_the_clip_score(self):
        with tempfile.TemporaryDirectory() as tmp:
            dataset = toy_dataset(Path(tmp), clips=1)
            report = evaluate(self.model, dataset)
            self.assertEqual(len(report.videos), 1)
            self.assertEqual(report.psnr, report.videos[0].psnr)
            self.assertEqual(report.ssim, report.videos[0].ssim)

    def test_parallel_scoring_matches_serial(self):
        serial = evaluate(self.model, self.dataset)
        parallel = evaluate(self.model, self.dataset, jobs=2)
        self.assertEqual(serial.videos, parallel.videos)

    def test_zero_noise_perturbation_equals_evaluate(self):
        plain = evaluate(self.model, self.dataset)
        perturbed = perturb_prompts_eval(self.model, self.dataset, 0.0)
        self.assertEqual(plain.videos, perturbed.videos)

    def test_perturbation_is_seeded(self):
        first = perturb_prompts_eval(self.model, self.dataset, 1.0, seed=4)
        second = perturb_prompts_eval(self.model, self.dataset, 1.0, seed=4)
        self.assertEqual(first.videos, second.videos)
        self.assertNotEqual(first.videos, evaluate(self.model, self.dataset).videos)
        self.assertEqual(first.options, {'noise_sigma': 1.0, 'seed': 4})

    def test_perturbation_needs_prompts(self):
        with self.assertRaises(EvaluationError):
            perturb_prompts_eval(RestorationNetwork(ModelConfig(**SMALL, injection_sites=())), self.dataset, 1.0)

    def test_oracle_uses_the_stored_embeddings(self):
        report = oracle(self.model, self.dataset, self.store)
        self.assertEqual(len(report.videos), len(self.dataset))
        self.assertNotEqual(report.videos, evaluate(self.model, self.dataset).videos)
        with self.assertRaises(EvaluationError):
            oracle(self.model, self.dataset, EmbeddingStore(8, 'other'))

    def test_zero_prompts_are_flagged_not_fatal(self):
        report = prompt_alignment(identity_model(ModelConfig(**SMALL)), self.dataset, self.store)
        frames = len(dataset_frames(self.dataset)[0])
        self.assertEqual(report.degenerate, frames)
        self.assertEqual(set(report.matched), {0.0})
        self.assertEqual(report.to_dict()['matched'], {'min': 0.0, 'mean': 0.0, 'max': 0.0})

    def test_cosine_conventions(self):
        v = np.array([0.2, -0.5, 0.1])
        self.assertAlmostEqual(cosine(3 * v, v)[0], 1.0, places=12)
        self.assertEqual(cosine(np.zeros(3), v), (0.0, True))

    def test_alignment_files(self):
        report = prompt_alignment(self.model, self.dataset, self.store, seed=1)
        out = self.tmp / 'alignment'
        out.mkdir(exist_ok=True)
        write_alignment(out, report)
        lines = (out / 'alignment.csv').read_text().splitlines()
        self.assertEqual(len(lines), 1 + len(report.matched))
        self.assertTrue((out / 'alignment.json').is_file())

    def test_export_round_trip_with_labels(self):
        out = self.tmp / 'export'
        written = export_prompt_embeddings(self.model, self.dataset, out)
        loaded = EmbeddingStore.load(out)
        frames = len(dataset_frames(self.dataset)[0])
        self.assertEqual(len(loaded), frames)
        self.assertEqual(loaded.d, 16)
        for record in loaded:
            np.testing.assert_array_equal(record.embedding, written.embedding(*record.key))
            expected = self.dataset.labels(record.frame.video_id)[record.frame.frame_index]
            self.assertEqual(list(record.labels), expected)

    def test_missing_ground_truth(self):
        with tempfile.TemporaryDirectory() as tmp:
            dataset = toy_dataset(Path(tmp), clips=1)
            shutil.rmtree(Path(tmp) / 'data' / 'video_000' / 'gt')
            with self.assertRaises(MissingGroundTruthError):
                evaluate(self.model, SynthesizedDataset(Path(tmp) / 'data'))

    def test_reports_are_reproducible(self):
        paths = []
        for name in ('a', 'b'):
            report = perturb_prompts_eval(self.model, self.dataset, 0.5, seed=2)
            paths.append(write_reports_csv(self.tmp / f'{name}.csv', [report]))
        self.assertEqual(paths[0].read_bytes(), paths[1].read_bytes())


@tag('acceptance')
class EvaluationAcceptanceTest(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def test_restoration_gain_and_prompt_importance(self):
        dataset = toy_dataset(self.tmp, NOISE_25, clips=4, seed=13)
        store = toy_store(dataset, self.tmp / 'store', dim=32)
        result = train(
            dataset, store, ModelConfig(stage_channels=(8, 16, 32), d=32),
            TrainConfig(total_iters=2000, batch_size=2, crop=32, window=4, lr0=2e-3, seed=0),
            out_dir=self.tmp / 'run',
        )
        restored = evaluate(result.checkpoint, dataset)
        baseline = identity(dataset)
        self.assertGreaterEqual(restored.psnr - baseline.psnr, 2.0)

        perturbed = perturb_prompts_eval(result.checkpoint, dataset, 1.0, seed=0)
        self.assertGreaterEqual(restored.psnr - perturbed.psnr, 1.0)

    def test_learned_prompts_align_with_their_targets(self):
        dataset, store, result = converged_run(self.tmp)
        self.assertLess(prompt_loss_ratio(result.curves), 0.5)
        report = prompt_alignment(result.checkpoint, dataset, store, seed=0)
        self.assertGreaterEqual(report.gap, 0.3)
