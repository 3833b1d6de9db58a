import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from scipy.special import erf, expit, softmax
from torch.autograd import gradcheck
from torch.func import functional_call

from degrade.clips import VideoClip
from degrade.samples import procedural_clip

from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .config import ModelConfig, injection_sites_for
from .exceptions import CheckpointError, ModelConfigError
from .layers import CrossMix, PromptGenerator, PromptInjection, gap, generate_prompt, inject_prompt
from .network import RestorationNetwork, count_parameters, identity_model, restore_clip

TOY = dict(stage_channels=(8, 16, 32), d=32)


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def toy_clip(frames=5, size=16, seed=0):
    return VideoClip(frames=procedural_clip(np.random.default_rng(seed), frames, size, size))


def randomize(module, std=0.05, seed=0):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for parameter in module.parameters():
            parameter.copy_(torch.randn(parameter.shape, generator=generator, dtype=parameter.dtype) * std)
    return module


def assert_gradients_match(test, module, loss_fn, samples=2, eps=1e-5, seed=0):
    """Central differences on sampled entries of every parameter tensor."""
    module.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    for name, parameter in module.named_parameters():
        flat, grad = parameter.data.view(-1), parameter.grad.view(-1)
        for index in rng.choice(flat.numel(), size=min(samples, flat.numel()), replace=False):
            original = flat[index].item()
            with torch.no_grad():
                flat[index] = original + eps
                plus = loss_fn().item()
                flat[index] = original - eps
                minus = loss_fn().item()
                flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = grad[index].item()
            test.assertLessEqual(
                abs(analytic - numeric), 1e-4 * max(abs(numeric), abs(analytic)) + 1e-8,
                f'{name}[{index}]: analytic {analytic} vs numeric {numeric}',
            )


def parameter_gradcheck(module, loss_fn, fast_mode):
    names = [name for name, _ in module.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in module.parameters())

    def fn(*flat):
        return loss_fn(lambda *args: functional_call(module, dict(zip(names, flat)), args))

    return gradcheck(fn, params, eps=1e-5, atol=1e-7, rtol=1e-4, fast_mode=fast_mode)


class GapTest(SimpleTestCase):
    def test_constant_map(self):
        np.testing.assert_allclose(gap(torch.full((2, 3, 4, 5), 0.7)).numpy(), np.full((2, 3), 0.7), rtol=1e-6)

    def test_single_pixel_map_is_identity(self):
        features = torch.randn(2, 6, 1, 1)
        self.assertTrue(torch.equal(gap(features), features[:, :, 0, 0]))

    def test_one_hot_pixel(self):
        features = torch.zeros(1, 2, 4, 4)
        features[:, :, 1, 2] = 1.0
        np.testing.assert_allclose(gap(features).numpy(), [[1 / 16, 1 / 16]])


class PromptGeneratorTest(SimpleTestCase):
    def test_zero_parameters_give_zero_prompt(self):
        head = PromptGenerator(8, 16)
        with torch.no_grad():
            for parameter in head.parameters():
                parameter.zero_()
        self.assertTrue(torch.equal(head(torch.randn(2, 8, 4, 4)), torch.zeros(2, 16)))

    def test_prompt_ignores_spatial_resolution_of_constant_maps(self):
        head = PromptGenerator(8, 16)
        values = torch.randn(1, 8, 1, 1)
        small, large = values.expand(1, 8, 4, 4), values.expand(1, 8, 8, 8)
        torch.testing.assert_close(head(small), head(large), rtol=0, atol=1e-6)

    def test_matches_straight_line_implementation(self):
        rng = np.random.default_rng(0)
        for case in range(50):
            channels, d = int(rng.integers(1, 17)), int(rng.integers(1, 33))
            head = randomize(PromptGenerator(channels, d).double(), std=0.5, seed=case)
            latent = rng.standard_normal((2, channels, 3, 5))
            got = generate_prompt(torch.from_numpy(latent), head).detach().numpy()
            w1, b1 = head.fc1.weight.detach().numpy(), head.fc1.bias.detach().numpy()
            w2, b2 = head.fc2.weight.detach().numpy(), head.fc2.bias.detach().numpy()
            pooled = latent.mean(axis=(2, 3))
            expected = np_gelu(pooled @ w1.T + b1) @ w2.T + b2
            np.testing.assert_allclose(got, expected, rtol=0, atol=1e-6)

    def test_channel_mismatch(self):
        with self.assertRaises(ModelConfigError):
            PromptGenerator(8, 4)(torch.randn(1, 6, 2, 2))


class CrossMixTest(SimpleTestCase):
    def test_zero_output_projection_is_identity(self):
        mixer = CrossMix(16, 8)
        latent = torch.randn(2, 16, 4, 4)
        self.assertTrue(torch.equal(mixer(latent, torch.randn(2, 8, 16, 16)), latent))

    def test_single_token_gets_full_weight(self):
        mixer = CrossMix(4, 4)
        _, weights = mixer.attend(torch.randn(1, 4, 2, 2), torch.randn(1, 4, 1, 1))
        self.assertTrue(torch.equal(weights, torch.ones_like(weights)))

    def test_two_token_hand_case(self):
        mixer = CrossMix(2, 2, heads=1).double()
        with torch.no_grad():
            for layer in (mixer.to_q, mixer.to_k, mixer.to_v, mixer.proj):
                layer.weight.copy_(torch.eye(2, dtype=torch.float64))
        latent = np.array([[1.0, 0.5], [-1.0, 2.0]])      # channel x token
        enc1 = np.array([[0.3, -0.2], [0.8, 0.1]])
        out = mixer(torch.from_numpy(latent)[None, :, None, :], torch.from_numpy(enc1)[None, :, None, :])
        q, k = latent.T, enc1.T
        expected = latent.T + softmax(q @ k.T / np.sqrt(2.0), axis=-1) @ k
        np.testing.assert_allclose(out[0, :, 0, :].detach().numpy().T, expected, atol=1e-12)

    def test_channel_mismatch(self):
        with self.assertRaises(ModelConfigError):
            CrossMix(16, 8)(torch.randn(1, 16, 2, 2), torch.randn(1, 4, 8, 8))


class PromptInjectionTest(SimpleTestCase):
    def test_zero_logits_give_half_mask(self):
        injection = PromptInjection(8, 4)
        with torch.no_grad():
            injection.fc.weight.zero_()
        features = torch.randn(2, 4, 3, 3)
        self.assertTrue(torch.equal(injection.modulate(features, torch.randn(2, 8)), 0.5 * features))

    def test_saturated_mask_zeroes_features(self):
        injection = PromptInjection(8, 4)
        with torch.no_grad():
            injection.fc.weight.zero_()
            injection.fc.bias.fill_(-1e4)
        features = torch.randn(1, 4, 3, 3)
        prompt = torch.randn(1, 8)
        self.assertTrue(torch.equal(injection.modulate(features, prompt), torch.zeros_like(features)))
        self.assertTrue(torch.equal(injection(features, prompt), torch.zeros_like(features)))

    def test_mask_is_strictly_inside_unit_interval(self):
        mask = PromptInjection(16, 8).mask(torch.randn(4, 16))
        self.assertTrue(bool(((mask > 0) & (mask < 1)).all()))

    def test_matches_straight_line_implementation(self):
        rng = np.random.default_rng(1)
        for case in range(50):
            d, channels = int(rng.integers(1, 17)), int(rng.integers(1, 9))
            injection = randomize(PromptInjection(d, channels).double(), std=0.5, seed=case)
            features = rng.standard_normal((2, channels, 3, 4))
            prompt = rng.standard_normal((2, d))
            got = inject_prompt(torch.from_numpy(features), torch.from_numpy(prompt), injection)
            fc_w, fc_b = injection.fc.weight.detach().numpy(), injection.fc.bias.detach().numpy()
            w1 = injection.mlp[0].weight.detach().numpy()[:, :, 0, 0]
            b1 = injection.mlp[0].bias.detach().numpy()
            w2 = injection.mlp[2].weight.detach().numpy()[:, :, 0, 0]
            b2 = injection.mlp[2].bias.detach().numpy()
            masked = features * expit(prompt @ fc_w.T + fc_b)[:, :, None, None]
            hidden = np_gelu(np.einsum('oc,bchw->bohw', w1, masked) + b1[None, :, None, None])
            expected = masked + np.einsum('oc,bchw->bohw', w2, hidden) + b2[None, :, None, None]
            np.testing.assert_allclose(got.detach().numpy(), expected, rtol=0, atol=1e-6)

    def test_prompt_dimension_mismatch(self):
        with self.assertRaises(ModelConfigError):
            PromptInjection(8, 4)(torch.randn(1, 4, 2, 2), torch.randn(1, 6))


class ModelConfigTest(SimpleTestCase):
    def test_default_injection_is_last_two_decoders(self):
        self.assertEqual(ModelConfig(**TOY).injection_sites, (1, 2))
        self.assertEqual(injection_sites_for('first', 3), (0,))
        self.assertEqual(injection_sites_for('all', 3), (0, 1, 2))

    def test_invalid_configs(self):
        for bad in (dict(stage_channels=(16, 8)), dict(injection_sites=(3,)), dict(attention_heads=5)):
            with self.assertRaises(ValidationError):
                ModelConfig(**{**TOY, **bad}).clean()
        with self.assertRaises(ModelConfigError):
            RestorationNetwork(ModelConfig(**{**TOY, 'history_mode': 'lstm'}))

    def test_dict_round_trip(self):
        config = ModelConfig(**TOY, injection_sites=())
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)
        self.assertFalse(config.use_prompt)


class RestorationNetworkTest(SimpleTestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.model = RestorationNetwork(ModelConfig(**TOY))

    def test_shapes_follow_the_config(self):
        frame = torch.rand(1, 3, 16, 16)
        y, history, prompt = self.model.forward_frame(frame)
        self.assertEqual(tuple(prompt.shape), (1, 32))
        self.assertEqual(y.shape, frame.shape)
        self.assertEqual([tuple(h.shape[1:]) for h in history], [(8, 16, 16), (16, 8, 8), (32, 4, 4)])
        _, _, wide_prompt = self.model.forward_frame(torch.rand(2, 3, 8, 24))
        self.assertEqual(tuple(wide_prompt.shape), (2, 32))

    def test_frame_size_must_divide_by_the_stage_factor(self):
        with self.assertRaises(ModelConfigError):
            self.model.forward_frame(torch.rand(1, 3, 18, 16))

    def test_zero_parameters_reproduce_the_input(self):
        clip = toy_clip()
        restored, prompts = restore_clip(identity_model(ModelConfig(**TOY)), clip)
        np.testing.assert_array_equal(restored.frames, clip.frames)
        self.assertTrue(all(np.array_equal(p, np.zeros(32, np.float32)) for p in prompts))

    def test_same_input_same_output(self):
        frame = torch.rand(1, 3, 16, 16)
        first, _, _ = self.model.forward_frame(frame)
        second, _, _ = self.model.forward_frame(frame)
        self.assertTrue(torch.equal(first, second))

    def test_single_frame_clip_equals_forward_frame(self):
        clip = toy_clip(frames=1)
        restored, _ = restore_clip(self.model, clip)
        with torch.no_grad():
            y, _, _ = self.model.forward_frame(torch.from_numpy(clip.frames[0].transpose(2, 0, 1).copy())[None])
        np.testing.assert_array_equal(restored.frames[0], y[0].clamp(0, 1).permute(1, 2, 0).numpy())

    def test_outputs_are_causal(self):
        clip = toy_clip(frames=6)
        full, full_prompts = restore_clip(self.model, clip)
        for k in (1, 3, 5):
            prefix, prefix_prompts = restore_clip(self.model, VideoClip(frames=clip.frames[:k]))
            np.testing.assert_array_equal(prefix.frames, full.frames[:k])
            for a, b in zip(prefix_prompts, full_prompts):
                np.testing.assert_array_equal(a, b)

    def test_frame_order_matters_through_history(self):
        randomize(self.model, std=0.1)
        clip = toy_clip(frames=4)
        forward, _ = restore_clip(self.model, clip)
        backward, _ = restore_clip(self.model, VideoClip(frames=clip.frames[::-1].copy()))
        self.assertFalse(np.array_equal(forward.frames[-1], backward.frames[0]))

    def test_oracle_embedding_replaces_the_prompt(self):
        randomize(self.model, std=0.1)
        clip = toy_clip(frames=2)
        oracle = [np.ones(32, np.float32), -np.ones(32, np.float32)]
        generated, _ = restore_clip(self.model, clip)
        substituted, _ = restore_clip(self.model, clip, embeddings=oracle)
        self.assertFalse(np.array_equal(generated.frames, substituted.frames))
        with self.assertRaises(ModelConfigError):
            restore_clip(self.model, clip, embeddings=[np.ones(8, np.float32)] * 2)

    def test_ablation_configs_differ_only_in_injection_parameters(self):
        counts, injected = {}, {}
        for preset in ('first', 'all', 'last_two'):
            model = RestorationNetwork(ModelConfig(**TOY, injection_sites=injection_sites_for(preset, 3)))
            counts[preset] = count_parameters(model)
            injected[preset] = count_parameters(model.injections)
        base = {preset: counts[preset] - injected[preset] for preset in counts}
        self.assertEqual(len(set(base.values())), 1)
        self.assertEqual(len(set(counts.values())), 3)
        no_prompt = RestorationNetwork(ModelConfig(**TOY, injection_sites=()))
        self.assertIsNone(no_prompt.prompt_head)
        _, _, prompt = no_prompt.forward_frame(torch.rand(1, 3, 16, 16))
        self.assertIsNone(prompt)

    def test_history_free_mode(self):
        model = RestorationNetwork(ModelConfig(**TOY, history_mode='none'))
        _, history, _ = model.forward_frame(torch.rand(1, 3, 16, 16))
        self.assertEqual(history, ())


class GradientTest(SimpleTestCase):
    def test_layer_gradients_match_finite_differences(self):
        latent = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        enc1 = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        mixer = randomize(CrossMix(4, 3, heads=2).double(), std=0.5)
        head = randomize(PromptGenerator(4, 5).double(), std=0.5)
        injection = randomize(PromptInjection(5, 4).double(), std=0.5)
        prompt = torch.randn(1, 5, dtype=torch.float64)
        weights = torch.randn(1, 4, 2, 2, dtype=torch.float64)

        self.assertTrue(parameter_gradcheck(mixer, lambda f: (f(latent, enc1) * weights).sum(), False))
        self.assertTrue(parameter_gradcheck(head, lambda f: (f(latent) ** 2).sum(), False))
        self.assertTrue(parameter_gradcheck(injection, lambda f: (f(latent, prompt) * weights).sum(), False))
        inputs = latent.clone().requires_grad_(True)
        self.assertTrue(gradcheck(lambda x: gap(x).sum(), (inputs,), eps=1e-5, atol=1e-7, rtol=1e-4))

    def test_network_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        model = randomize(RestorationNetwork(ModelConfig(**TOY)).double(), std=0.05)
        frames = torch.rand(2, 1, 3, 16, 16, dtype=torch.float64)
        weights = torch.randn(1, 3, 16, 16, dtype=torch.float64)

        def loss():
            history, total = (), 0.0
            for frame in frames:
                y, history, prompt = model.forward_frame(frame, history)
                total = total + (y * weights).sum() + (prompt ** 2).sum()
            return total

        assert_gradients_match(self, model, loss)


class CheckpointTest(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)
        torch.manual_seed(1)
        self.model = RestorationNetwork(ModelConfig(**TOY))

    def test_round_trip(self):
        path = save_checkpoint(self.model, self.tmp / 'model.pt', step=7)
        model, payload = load_checkpoint(path, expected_config=ModelConfig(**TOY))
        self.assertEqual(payload['step'], 7)
        for name, tensor in self.model.state_dict().items():
            self.assertTrue(torch.equal(tensor, model.state_dict()[name]), name)
        self.assertTrue(checkpoint_id(path).startswith('model-'))

    def test_config_mismatch_is_rejected(self):
        path = save_checkpoint(self.model, self.tmp / 'model.pt')
        with self.assertRaises(CheckpointError):
            load_checkpoint(path, expected_config=ModelConfig(**{**TOY, 'd': 16}))

    def test_unknown_version_is_rejected(self):
        payload = {'format': 'ronin-checkpoint', 'version': 99, 'config': {}, 'state_dict': {}}
        torch.save(payload, self.tmp / 'future.pt')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.tmp / 'future.pt')

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.tmp / 'absent.pt')
