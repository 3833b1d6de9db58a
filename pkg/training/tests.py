import json
import math
import shutil
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase, tag

from degrade.clips import ClipRole, VideoClip
from degrade.dataset import SynthesizedDataset
from degrade.protocols import Protocol
from degrade.synthesis import synthesize_dataset
from grounding.clients import MockMLLMClient, MockTextEncoder
from grounding.store import build_embedding_store, dataset_frames
from restoration.checkpoint import checkpoint_id, load_checkpoint
from restoration.config import ModelConfig, injection_sites_for
from restoration.network import RestorationNetwork
from restoration.tests import assert_gradients_match, randomize

from .augment import TRANSFORMS, apply_transform, augment, invert_transform
from .exceptions import LossShapeError, NonFiniteLossError, StoreCoverageError, TrainingError
from .losses import LossBreakdown, LossConfig, prompt_loss, restoration_loss, total_loss
from .sampler import WindowSampler
from .trainer import TrainConfig, cosine_lr, forward_window, read_curves, train

CANDIDATES = ['noise', 'rain', 'snow', 'blur', 'compression']
SMALL = dict(stage_channels=(4, 8), d=16)

NOISE_AND_SNOW = {
    'name': 'noise_and_snow',
    'candidates': ['gaussian_noise', 'snow'],
    'probability': 0.55,
    'per_clip': False,
    'ranges': {
        'gaussian_noise': {'sigma': {'uniform': [10, 20]}},
        'snow': {'intensity': {'choice': ['severe']}},
    },
}


def toy_dataset(root, protocol='threeD_denoise', clips=2, seed=3, interval_t=6):
    if isinstance(protocol, dict):
        protocol = Protocol.from_dict(protocol)
    synthesize_dataset(protocol, root / 'src', root / 'data', seed, interval_t, procedural=clips)
    return SynthesizedDataset(root / 'data')


def toy_store(dataset, out_dir, dim=16, seed=0, limit=None):
    frames, labels = dataset_frames(dataset)
    client = MockMLLMClient(dataset.metadata_by_path(ClipRole.LQ))
    return build_embedding_store(frames[:limit], client, MockTextEncoder(dim=dim, seed=seed), CANDIDATES,
                                 out_dir, labels=labels)


# Prompt-loss convergence run; the prompt-alignment check reuses its checkpoint.
CONVERGENCE_MODEL = dict(stage_channels=(8, 16, 32), d=32)
CONVERGENCE_TRAIN = dict(total_iters=500, batch_size=2, crop=32, window=4, lr0=1e-3, warmup_iters=25, seed=0)
CONVERGENCE_LOSS = dict(lambda1=1.0, lambda2=2.0)


def converged_run(root):
    dataset = toy_dataset(root, NOISE_AND_SNOW, clips=4, seed=21)
    store = toy_store(dataset, root / 'store', dim=32)
    result = train(
        dataset, store, ModelConfig(**CONVERGENCE_MODEL), TrainConfig(**CONVERGENCE_TRAIN),
        LossConfig(**CONVERGENCE_LOSS), out_dir=root / 'run',
    )
    return dataset, store, result


def prompt_loss_ratio(curves, span=25):
    series = [row['prompt_loss'] for row in curves]
    return float(np.mean(series[-span:]) / np.mean(series[:span]))


def state_of(path):
    model, _ = load_checkpoint(path)
    return model.state_dict()


def assert_same_state(test, left, right):
    test.assertEqual(left.keys(), right.keys())
    for name in left:
        test.assertTrue(torch.equal(left[name], right[name]), name)


class LossTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_identical_inputs_give_zero(self):
        frames = torch.rand(2, 3, 3, 8, 8)
        self.assertEqual(restoration_loss(frames, frames).item(), 0.0)
        self.assertEqual(total_loss(frames, frames, frames[..., 0, 0], frames[..., 0, 0]).total.item(), 0.0)

    def test_constant_offset(self):
        gt = torch.rand(1, 2, 3, 8, 8, dtype=torch.float64)
        self.assertAlmostEqual(restoration_loss(gt + 0.1, gt).item(), 0.1, places=12)

    def test_matches_brute_force_mean_absolute_error(self):
        pred, gt = self.rng.random((3, 4, 5, 3)), self.rng.random((3, 4, 5, 3))
        expected = sum(abs(p - g) for p, g in zip(pred.ravel(), gt.ravel())) / pred.size
        self.assertAlmostEqual(restoration_loss(pred, gt).item(), expected, places=12)

    def test_video_clips_are_accepted(self):
        frames = self.rng.random((2, 4, 4, 3)).astype(np.float32)
        clip = VideoClip(frames=frames)
        self.assertEqual(restoration_loss(clip, clip.with_frames(frames, ClipRole.RESTORED)).item(), 0.0)

    def test_zero_prompt_against_unit_vector(self):
        v = self.rng.standard_normal(32)
        v /= np.linalg.norm(v)
        loss = prompt_loss(torch.zeros(32, dtype=torch.float64), torch.from_numpy(v))
        self.assertAlmostEqual(loss.item(), np.abs(v).mean(), places=12)

    def test_prompt_loss_is_symmetric(self):
        p, t = torch.randn(2, 16, dtype=torch.float64), torch.randn(2, 16, dtype=torch.float64)
        self.assertEqual(prompt_loss(p, t).item(), prompt_loss(t, p).item())

    def test_shape_mismatch(self):
        with self.assertRaises(LossShapeError):
            restoration_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))
        with self.assertRaises(LossShapeError):
            prompt_loss(torch.zeros(2, 16), torch.zeros(2, 8))

    def test_weighted_sum(self):
        """Restoration 0.2 and prompt 0.5 combine to 0.205 with the default weights."""
        gt = torch.zeros(1, 2, 3, 4, 4, dtype=torch.float64)
        target = torch.zeros(1, 2, 8, dtype=torch.float64)
        losses = total_loss(gt + 0.2, gt, target + 0.5, target, LossConfig(1.0, 0.01))
        self.assertAlmostEqual(losses.restoration.item(), 0.2, places=12)
        self.assertAlmostEqual(losses.prompt.item(), 0.5, places=12)
        self.assertAlmostEqual(losses.total.item(), 0.205, places=12)

    def test_zero_prompt_weight_is_restoration_alone(self):
        pred, gt = torch.rand(1, 2, 3, 4, 4), torch.rand(1, 2, 3, 4, 4)
        losses = total_loss(pred, gt, torch.randn(1, 2, 8), torch.randn(1, 2, 8), LossConfig(1.0, 0.0))
        self.assertEqual(losses.total.item(), restoration_loss(pred, gt).item())
        self.assertGreater(losses.prompt.item(), 0.0)

    def test_missing_prompt_contributes_nothing(self):
        pred, gt = torch.rand(1, 2, 3, 4, 4), torch.rand(1, 2, 3, 4, 4)
        losses = total_loss(pred, gt, None, None)
        self.assertEqual(losses.total.item(), restoration_loss(pred, gt).item())
        self.assertEqual(losses.prompt.item(), 0.0)

    def test_negative_weight_is_invalid(self):
        with self.assertRaises(ValidationError):
            LossConfig(lambda2=-0.1).clean()

    def test_from_dict_validates_through_the_serializer(self):
        self.assertEqual(LossConfig.from_dict({'lambda1': 1.0, 'lambda2': 0.5}), LossConfig(1.0, 0.5))
        for payload in ({'lambda1': 1.0, 'lambda2': -0.1}, {'lambda1': 'heavy', 'lambda2': 0.1}, {'lambda1': None}):
            with self.assertRaises(ValidationError):
                LossConfig.from_dict(payload)


class CosineScheduleTest(SimpleTestCase):
    def test_end_points_and_midpoint(self):
        self.assertTrue(math.isclose(cosine_lr(0, 1000, 4e-4, 1e-7), 4e-4, rel_tol=1e-12))
        self.assertTrue(math.isclose(cosine_lr(1000, 1000, 4e-4, 1e-7), 1e-7, rel_tol=1e-12))
        self.assertTrue(math.isclose(cosine_lr(500, 1000, 4e-4, 1e-7), (4e-4 + 1e-7) / 2, rel_tol=1e-12))

    def test_monotone_decay(self):
        values = [cosine_lr(step, 50, 4e-4, 1e-7) for step in range(51)]
        self.assertTrue(all(a > b for a, b in zip(values, values[1:])))

    def test_steps_outside_the_run_are_clamped(self):
        self.assertEqual(cosine_lr(-5, 10, 1e-3, 1e-6), cosine_lr(0, 10, 1e-3, 1e-6))
        self.assertEqual(cosine_lr(15, 10, 1e-3, 1e-6), cosine_lr(10, 10, 1e-3, 1e-6))

    def test_warmup_ramps_up_then_decays(self):
        values = [cosine_lr(step, 100, 1e-3, 1e-6, warmup=10) for step in range(101)]
        self.assertTrue(math.isclose(values[0], 1e-4, rel_tol=1e-12))
        self.assertTrue(all(a < b for a, b in zip(values[:9], values[1:10])))
        self.assertTrue(math.isclose(values[9], 1e-3, rel_tol=1e-12))
        self.assertTrue(math.isclose(values[10], 1e-3, rel_tol=1e-12))
        self.assertTrue(math.isclose(values[100], 1e-6, rel_tol=1e-12))
        self.assertTrue(all(a > b for a, b in zip(values[10:], values[11:])))

    def test_warmup_longer_than_the_run_is_invalid(self):
        with self.assertRaises(ValidationError):
            TrainConfig(total_iters=5, warmup_iters=6).clean()


class AugmentTest(SimpleTestCase):
    def setUp(self):
        self.frames = torch.arange(2 * 3 * 4 * 4, dtype=torch.float32).reshape(2, 3, 4, 4)

    def test_inverse_recovers_the_original(self):
        for transform_id in range(len(TRANSFORMS)):
            restored = invert_transform(apply_transform(self.frames, transform_id), transform_id)
            self.assertTrue(torch.equal(restored, self.frames), transform_id)

    def test_the_eight_transforms_are_distinct(self):
        outputs = {tuple(apply_transform(self.frames, t).flatten().tolist()) for t in range(len(TRANSFORMS))}
        self.assertEqual(len(outputs), 8)

    def test_transform_zero_is_identity(self):
        self.assertTrue(torch.equal(apply_transform(self.frames, 0), self.frames))

    def test_lq_and_gt_get_the_same_transform(self):
        rng = np.random.default_rng(4)
        for _ in range(16):
            lq, gt, transform_id = augment(self.frames, self.frames * 2, rng)
            self.assertTrue(torch.equal(lq, apply_transform(self.frames, transform_id)))
            self.assertTrue(torch.equal(gt, lq * 2))

    def test_equal_inputs_stay_equal(self):
        lq, gt, _ = augment(self.frames, self.frames.clone(), np.random.default_rng(1))
        self.assertTrue(torch.equal(lq, gt))

    def test_fixed_seed_draws_the_same_transforms(self):
        draws = [[augment(self.frames, self.frames, np.random.default_rng(9))[2] for _ in range(3)]
                 for _ in range(2)]
        self.assertEqual(draws[0], draws[1])


class TrainConfigTest(SimpleTestCase):
    def test_learning_rates_must_decrease(self):
        with self.assertRaises(ValidationError):
            TrainConfig(lr0=1e-7, lr_min=1e-7).clean()
        with self.assertRaises(ValidationError):
            TrainConfig(lr_min=0.0).clean()

    def test_from_dict_validates(self):
        config = TrainConfig.from_dict({'total_iters': 3, 'crop': 16, 'seed': 5})
        self.assertEqual((config.total_iters, config.crop, config.seed), (3, 16, 5))
        self.assertEqual(config.betas, (0.9, 0.999))
        with self.assertRaises(ValidationError):
            TrainConfig.from_dict({'clip_grad': -1})

    def test_dict_round_trip(self):
        config = TrainConfig(total_iters=7, seed=2, clip_grad=1.0)
        self.assertEqual(TrainConfig.from_dict(config.to_dict()), config)


class TrainLoopTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.dataset = toy_dataset(cls.tmp)
        cls.store = toy_store(cls.dataset, cls.tmp / 'store_a', seed=0)
        cls.other_store = toy_store(cls.dataset, cls.tmp / 'store_b', seed=1)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def run_train(self, name, store='default', model=None, loss=None, **overrides):
        options = dict(total_iters=3, batch_size=1, crop=16, window=2, seed=11, checkpoint_every=100)
        options.update(overrides)
        return train(
            self.dataset,
            self.store if store == 'default' else store,
            ModelConfig(**(model or SMALL)),
            TrainConfig(**options),
            loss or LossConfig(),
            out_dir=self.tmp / 'runs' / name,
        )

    def test_zero_iterations_saves_the_initialization(self):
        result = self.run_train('zero', total_iters=0)
        torch.manual_seed(11)
        fresh = RestorationNetwork(ModelConfig(**SMALL))
        assert_same_state(self, state_of(result.checkpoint), fresh.state_dict())
        self.assertEqual(result.curves, [])

    def test_same_seed_gives_identical_parameters(self):
        first = self.run_train('seed_a')
        second = self.run_train('seed_b')
        assert_same_state(self, state_of(first.checkpoint), state_of(second.checkpoint))
        self.assertEqual(first.curves, second.curves)

    def test_different_seed_changes_the_run(self):
        first = self.run_train('seed_c')
        second = self.run_train('seed_d', seed=12)
        self.assertNotEqual(checkpoint_id(first.checkpoint).split('-')[1],
                            checkpoint_id(second.checkpoint).split('-')[1])

    def test_store_contents_only_enter_through_the_prompt_loss(self):
        without = LossConfig(1.0, 0.0)
        first = self.run_train('store_a', loss=without)
        second = self.run_train('store_b', store=self.other_store, loss=without)
        assert_same_state(self, state_of(first.checkpoint), state_of(second.checkpoint))
        self.assertNotEqual([row['prompt_loss'] for row in first.curves],
                            [row['prompt_loss'] for row in second.curves])

        weighted = self.run_train('store_c')
        other = self.run_train('store_d', store=self.other_store)
        self.assertFalse(torch.equal(state_of(weighted.checkpoint)['prompt_head.fc2.bias'],
                                     state_of(other.checkpoint)['prompt_head.fc2.bias']))

    def test_sampled_targets_follow_the_drawn_windows(self):
        sampler = WindowSampler(self.dataset, 3, 16, 4, np.random.default_rng(5), store=self.store)
        batch = sampler.sample(6)
        self.assertEqual(tuple(batch.targets.shape), (6, 3, self.store.d))
        for item, (video_id, start, top, left) in enumerate(batch.origins):
            expected = self.store.embeddings_for(video_id, range(start, start + 3))
            np.testing.assert_array_equal(batch.targets[item].numpy(), expected)
            lq = self.dataset.load(video_id).frames[start:start + 3, top:top + 16, left:left + 16]
            np.testing.assert_array_equal(batch.lq[item].numpy(), lq.transpose(0, 3, 1, 2))

    def test_store_miss_aborts_before_training(self):
        partial = toy_store(self.dataset, self.tmp / 'store_partial', limit=5)
        with self.assertRaises(StoreCoverageError) as caught:
            self.run_train('partial', store=partial)
        self.assertEqual(len(caught.exception.missing), len(dataset_frames(self.dataset)[0]) - 5)
        self.assertFalse((self.tmp / 'runs' / 'partial' / 'checkpoint_final.pt').exists())

    def test_prompt_model_needs_a_store(self):
        with self.assertRaises(TrainingError):
            self.run_train('no_store', store=None)

    def test_store_dimension_must_match(self):
        with self.assertRaises(TrainingError):
            self.run_train('wrong_d', model=dict(stage_channels=(4, 8), d=8))

    def test_curves_checkpoints_and_snapshot(self):
        result = self.run_train('cadence', total_iters=4, checkpoint_every=2)
        run_dir = self.tmp / 'runs' / 'cadence'
        self.assertEqual(
            sorted(path.name for path in run_dir.glob('*.pt')),
            ['checkpoint_000002.pt', 'checkpoint_000004.pt', 'checkpoint_final.pt'],
        )
        curves = read_curves(run_dir / 'curves.csv')
        self.assertEqual([row['step'] for row in curves], [0, 1, 2, 3])
        self.assertEqual(curves, result.curves)
        self.assertAlmostEqual(curves[0]['lr'], 4e-4, places=12)
        self.assertTrue(all(a['lr'] > b['lr'] for a, b in zip(curves, curves[1:])))
        for row in curves:
            self.assertTrue(all(math.isfinite(value) for value in row.values()))
            self.assertAlmostEqual(row['total'], row['restoration_loss'] + 0.01 * row['prompt_loss'], places=6)
        snapshot = json.loads((run_dir / 'run_config.json').read_text())
        self.assertEqual(snapshot['train']['total_iters'], 4)
        self.assertEqual(snapshot['loss'], {'lambda1': 1.0, 'lambda2': 0.01})
        _, payload = load_checkpoint(result.checkpoint)
        self.assertEqual(payload['step'], 4)

    def test_prompt_free_model_forces_zero_prompt_weight(self):
        result = self.run_train('no_prompt', store=None, model=dict(SMALL, injection_sites=()))
        self.assertTrue(all(row['prompt_loss'] == 0.0 for row in result.curves))
        snapshot = json.loads((self.tmp / 'runs' / 'no_prompt' / 'run_config.json').read_text())
        self.assertEqual(snapshot['loss']['lambda2'], 0.0)

    def test_gradient_clipping_runs(self):
        result = self.run_train('clipped', clip_grad=0.5, augment=False)
        self.assertEqual(len(result.curves), 3)

    def test_non_finite_loss_reports_the_step(self):
        nan = torch.tensor(float('nan'))
        with mock.patch('training.trainer.total_loss', return_value=LossBreakdown(nan, nan, nan)):
            with self.assertRaises(NonFiniteLossError) as caught:
                self.run_train('nan')
        self.assertEqual(caught.exception.step, 0)


class TotalLossGradientTest(SimpleTestCase):
    def test_gradients_match_finite_differences(self):
        """Stages 8/16/32, d=32, 16x16 frames, batch 1, double precision."""
        config = ModelConfig(stage_channels=(8, 16, 32), d=32)
        model = randomize(RestorationNetwork(config).double(), std=0.05, seed=2)
        generator = torch.Generator().manual_seed(0)
        lq = torch.rand(1, 2, 3, 16, 16, generator=generator, dtype=torch.float64)
        gt = lq + 2.0
        target = torch.full((1, 2, 32), 3.0, dtype=torch.float64)

        def loss():
            pred, prompt = forward_window(model, lq)
            return total_loss(pred, gt, prompt, target, LossConfig(1.0, 0.01)).total

        assert_gradients_match(self, model, loss, samples=2)


@tag('acceptance')
class TrainAcceptanceTest(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def test_prompt_loss_converges(self):
        _, _, result = converged_run(self.tmp)
        self.assertEqual(len(result.curves), 500)
        self.assertLess(prompt_loss_ratio(result.curves), 0.5)

    def test_ablation_configurations_train_and_differ(self):
        dataset = toy_dataset(self.tmp, clips=2, seed=8)
        store = toy_store(dataset, self.tmp / 'store', dim=16)
        variants = {
            preset: ModelConfig(stage_channels=(4, 8, 16), d=16, injection_sites=injection_sites_for(preset, 3))
            for preset in ('first', 'all', 'last_two')
        }
        variants['no_prompt'] = ModelConfig(stage_channels=(4, 8, 16), d=16, injection_sites=())
        digests = set()
        for name, config in variants.items():
            result = train(
                dataset, store if config.use_prompt else None, config,
                TrainConfig(total_iters=100, batch_size=1, crop=32, window=2, seed=0),
                out_dir=self.tmp / name,
            )
            self.assertEqual(len(result.curves), 100)
            digests.add(checkpoint_id(result.checkpoint).split('-')[1])
        self.assertEqual(len(digests), 4)
