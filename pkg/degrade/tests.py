import json
import math
import shutil
import tempfile
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings

from .clips import ClipRole, VideoClip, load_clip, write_clip
from .dataset import SynthesizedDataset
from .exceptions import (
    DegradationParameterError, EncoderUnavailableError, ProtocolError, ScheduleError,
)
from .ops import (
    add_gaussian_noise, add_poisson_noise, add_speckle_noise, apply_blur, compress,
    jpeg_roundtrip, overlay_coverage, overlay_rain, overlay_snow, resolve_video_backend,
)
from .protocols import Protocol, load_protocol
from .samples import procedural_clip
from .schedule import (
    DegradationSchedule, DegradationSpec, Segment, apply_schedule, sample_schedule,
)
from .synthesis import synthesize_dataset

JPEG_PROXY = {**settings.RONIN, 'VIDEO_ENCODER': ''}
TUD_CANDIDATES = load_protocol('TUD').candidates


def rng(seed=0):
    return np.random.default_rng(seed)


def textured_frame(seed=0, size=64):
    return procedural_clip(rng(seed), num_frames=1, height=size, width=size)[0]


def laplacian_energy(frame):
    lap = (4 * frame[1:-1, 1:-1] - frame[:-2, 1:-1] - frame[2:, 1:-1]
           - frame[1:-1, :-2] - frame[1:-1, 2:])
    return float((lap.astype(np.float64) ** 2).sum())


def psnr(a, b):
    return 10 * math.log10(1.0 / np.mean((a.astype(np.float64) - b) ** 2))


class NoiseTest(SimpleTestCase):
    def setUp(self):
        self.gray = np.full((256, 256, 3), 0.5, dtype=np.float32)

    def test_zero_sigma_is_identity(self):
        frame = textured_frame()
        np.testing.assert_array_equal(add_gaussian_noise(frame, 0, rng()), frame)
        np.testing.assert_array_equal(add_speckle_noise(frame, 0, rng()), frame)

    def test_gaussian_noise_std_matches_sigma(self):
        out = add_gaussian_noise(self.gray, 50, rng(1))
        std = float(np.std(out.astype(np.float64) - self.gray))
        self.assertAlmostEqual(std / (50 / 255), 1.0, delta=0.05)

    def test_noise_is_deterministic_for_a_seed(self):
        frame = textured_frame()
        for op in (add_gaussian_noise, add_speckle_noise):
            np.testing.assert_array_equal(op(frame, 12, rng(3)), op(frame, 12, rng(3)))
        np.testing.assert_array_equal(
            add_poisson_noise(frame, 3, rng(3)), add_poisson_noise(frame, 3, rng(3))
        )

    def test_negative_sigma_is_rejected(self):
        with self.assertRaises(DegradationParameterError):
            add_gaussian_noise(self.gray, -1, rng())
        with self.assertRaises(DegradationParameterError):
            add_speckle_noise(self.gray, -1, rng())

    def test_speckle_leaves_black_frames_alone(self):
        black = np.zeros((32, 32, 3), dtype=np.float32)
        np.testing.assert_array_equal(add_speckle_noise(black, 15, rng()), black)

    def test_poisson_zero_frame_is_fixed_point(self):
        black = np.zeros((32, 32, 3), dtype=np.float32)
        np.testing.assert_array_equal(add_poisson_noise(black, 2.5, rng()), black)

    def test_poisson_std_follows_the_photon_model(self):
        out = add_poisson_noise(self.gray, 4, rng(2))
        std = float(np.std(out.astype(np.float64) - self.gray))
        self.assertAlmostEqual(std / (math.sqrt(0.5) / 100), 1.0, delta=0.05)

    def test_poisson_vanishes_for_large_alpha(self):
        mse_4 = np.mean((add_poisson_noise(self.gray, 4, rng(2)) - self.gray) ** 2)
        mse_6 = np.mean((add_poisson_noise(self.gray, 6, rng(2)) - self.gray) ** 2)
        self.assertLess(mse_6, 1e-5)
        self.assertLess(mse_6, mse_4)

    def test_poisson_handles_photon_counts_beyond_the_sampler(self):
        for alpha in (15, 25, 400):
            out = add_poisson_noise(self.gray, alpha, rng(2))
            self.assertEqual(out.dtype, self.gray.dtype)
            self.assertLess(float(np.max(np.abs(out - self.gray))), 1e-6)
        black = np.zeros((8, 8, 3), dtype=np.float32)
        np.testing.assert_array_equal(add_poisson_noise(black, 25, rng()), black)

    def test_poisson_rejects_nonpositive_alpha(self):
        for alpha in (0, -1, math.inf, math.nan):
            with self.assertRaises(DegradationParameterError):
                add_poisson_noise(self.gray, alpha, rng())


class BlurTest(SimpleTestCase):
    def test_tiny_gaussian_kernel_is_identity(self):
        frame = textured_frame()
        np.testing.assert_array_equal(apply_blur(frame, 'gaussian_blur', 1e-6), frame)

    def test_constant_frame_is_unchanged(self):
        frame = np.full((32, 32, 3), 0.3, dtype=np.float32)
        for kind, strength in (('gaussian_blur', 1.5), ('resize_blur', 2), ('resize_blur', 3)):
            np.testing.assert_allclose(apply_blur(frame, kind, strength), frame, atol=1e-6)

    def test_resize_blur_removes_high_frequencies(self):
        yy, xx = np.mgrid[0:64, 0:64]
        board = np.repeat(((yy + xx) % 2).astype(np.float32)[..., None], 3, axis=2)
        blurred = apply_blur(board, 'resize_blur', 2)
        self.assertLess(laplacian_energy(blurred), laplacian_energy(board))

    def test_out_of_range_strength(self):
        frame = textured_frame()
        with self.assertRaises(DegradationParameterError):
            apply_blur(frame, 'gaussian_blur', 0)
        with self.assertRaises(DegradationParameterError):
            apply_blur(frame, 'resize_blur', 1)
        with self.assertRaises(DegradationParameterError):
            apply_blur(frame, 'motion_blur', 2)


class CompressionTest(SimpleTestCase):
    def test_requantization_changes_less_the_second_time(self):
        frame = textured_frame(4)
        first = jpeg_roundtrip(frame, 40)
        second = jpeg_roundtrip(first, 40)
        self.assertLess(np.sum((second - first) ** 2), np.sum((first - frame) ** 2))

    def test_lower_quality_means_lower_psnr(self):
        frame = textured_frame(5)
        low = compress(frame, 'jpeg_compression', 20)
        high = compress(frame, 'jpeg_compression', 40)
        self.assertTrue(math.isfinite(psnr(frame, low)))
        self.assertLess(psnr(frame, low), psnr(frame, high))

    def test_jpeg_proxy_is_deterministic(self):
        frames = procedural_clip(rng(6), num_frames=3, height=32, width=32)
        first = compress(frames, 'video_compression', 'mpeg4', backend='jpeg_proxy')
        second = compress(frames, 'video_compression', 'mpeg4', backend='jpeg_proxy')
        self.assertEqual(first.shape, frames.shape)
        np.testing.assert_array_equal(first, second)

    def test_unknown_codec_is_rejected(self):
        with self.assertRaises(DegradationParameterError):
            compress(textured_frame(), 'video_compression', 'vp9', backend='jpeg_proxy')

    @override_settings(RONIN={
        **settings.RONIN, 'VIDEO_ENCODER': 'no-such-encoder-binary', 'VIDEO_COMPRESSION_FALLBACK': False,
    })
    def test_missing_encoder_without_fallback(self):
        with self.assertRaises(EncoderUnavailableError):
            compress(textured_frame(), 'video_compression', 'libx264')

    @skipUnless(shutil.which('false'), 'needs a binary that always fails')
    def test_encoder_that_cannot_encode_falls_back(self):
        frames = procedural_clip(rng(7), num_frames=3, height=32, width=32)
        proxy = compress(frames, 'video_compression', 'libx264', backend='jpeg_proxy')
        with override_settings(RONIN={**settings.RONIN, 'VIDEO_ENCODER': 'false'}):
            self.assertEqual(resolve_video_backend(), 'ffmpeg')
            self.assertEqual(resolve_video_backend(codec='libx264'), 'jpeg_proxy')
            np.testing.assert_array_equal(
                compress(frames, 'video_compression', 'libx264', backend='ffmpeg'), proxy
            )
        settings_without_fallback = {
            **settings.RONIN, 'VIDEO_ENCODER': 'false', 'VIDEO_COMPRESSION_FALLBACK': False,
        }
        with override_settings(RONIN=settings_without_fallback):
            with self.assertRaises(EncoderUnavailableError):
                compress(frames, 'video_compression', 'libx264')


class SnowTest(SimpleTestCase):
    def setUp(self):
        self.frame = np.full((64, 64, 3), 0.5, dtype=np.float32)

    def test_snow_brightens_the_frame(self):
        for intensity in ('moderate', 'severe'):
            out = overlay_snow(self.frame, intensity, rng(0))
            self.assertGreater(out.mean(), self.frame.mean())
            self.assertTrue(np.all(out >= self.frame))

    def test_severe_covers_more_than_moderate(self):
        moderate = overlay_snow(self.frame, 'moderate', rng(9))
        severe = overlay_snow(self.frame, 'severe', rng(9))
        self.assertGreater(overlay_coverage(self.frame, severe), overlay_coverage(self.frame, moderate))

    def test_snow_is_deterministic(self):
        np.testing.assert_array_equal(
            overlay_snow(self.frame, 'severe', rng(1)), overlay_snow(self.frame, 'severe', rng(1))
        )

    def test_phase_moves_the_same_field(self):
        still = overlay_snow(self.frame, 'severe', rng(1), phase=0)
        moved = overlay_snow(self.frame, 'severe', rng(1), phase=3)
        self.assertFalse(np.array_equal(still, moved))

    def test_unknown_intensity(self):
        with self.assertRaises(DegradationParameterError):
            overlay_snow(self.frame, 'light', rng(0))


class RainTest(SimpleTestCase):
    def setUp(self):
        self.frame = np.full((64, 64, 3), 0.4, dtype=np.float32)

    def test_rain_adds_light_streaks(self):
        for intensity in ('moderate', 'severe'):
            out = overlay_rain(self.frame, intensity, rng(0))
            self.assertTrue(np.all(out >= self.frame))
            self.assertGreater(overlay_coverage(self.frame, out), 0)

    def test_streaks_are_longer_than_they_are_wide(self):
        out = overlay_rain(self.frame, 'severe', rng(2))
        mask = (out - self.frame).max(axis=-1) > 0.05
        vertical = np.sum(mask[1:] & mask[:-1])
        horizontal = np.sum(mask[:, 1:] & mask[:, :-1])
        self.assertGreater(vertical, horizontal)

    def test_severe_covers_more_than_moderate(self):
        moderate = overlay_rain(self.frame, 'moderate', rng(9))
        severe = overlay_rain(self.frame, 'severe', rng(9))
        self.assertGreater(overlay_coverage(self.frame, severe), overlay_coverage(self.frame, moderate))

    def test_rain_is_deterministic_and_moves_with_phase(self):
        first = overlay_rain(self.frame, 'moderate', rng(1), phase=1)
        np.testing.assert_array_equal(first, overlay_rain(self.frame, 'moderate', rng(1), phase=1))
        self.assertFalse(np.array_equal(first, overlay_rain(self.frame, 'moderate', rng(1), phase=2)))

    def test_grayscale_frames(self):
        gray = np.full((32, 32), 0.2, dtype=np.float32)
        self.assertEqual(overlay_rain(gray, 'severe', rng(3)).shape, (32, 32))

    def test_unknown_intensity(self):
        with self.assertRaises(DegradationParameterError):
            overlay_rain(self.frame, 'drizzle', rng(0))


class ScheduleTest(SimpleTestCase):
    def clip(self, frames=18, size=16):
        data = rng(11).random((frames, size, size, 3), dtype=np.float32)
        return VideoClip(frames=data, role=ClipRole.GT, video_id='clip')

    def test_full_probability_includes_every_candidate(self):
        schedule = sample_schedule(rng(), 6, TUD_CANDIDATES, 1.0, num_segments=20)
        for segment in schedule.segments:
            self.assertEqual({spec.kind for spec in segment.specs}, set(TUD_CANDIDATES))

    def test_inclusion_frequency_matches_probability(self):
        schedule = sample_schedule(rng(5), 6, TUD_CANDIDATES, 0.55, num_segments=10_000)
        for kind in TUD_CANDIDATES:
            hits = sum(any(spec.kind == kind for spec in seg.specs) for seg in schedule.segments)
            self.assertAlmostEqual(hits / 10_000, 0.55, delta=0.02)

    def test_same_seed_same_schedule(self):
        first = sample_schedule(rng(3), 6, TUD_CANDIDATES, 0.55, num_segments=8)
        second = sample_schedule(rng(3), 6, TUD_CANDIDATES, 0.55, num_segments=8)
        self.assertEqual(first.to_dict(), second.to_dict())

    def test_specs_follow_canonical_order(self):
        schedule = sample_schedule(rng(), 6, list(reversed(TUD_CANDIDATES)), 1.0, num_segments=1)
        kinds = [spec.kind for spec in schedule.segments[0].specs]
        self.assertEqual(kinds[0], 'gaussian_noise')
        self.assertEqual(kinds[-1], 'video_compression')
        self.assertLess(kinds.index('resize_blur'), kinds.index('jpeg_compression'))

    def test_invalid_arguments(self):
        with self.assertRaises(ScheduleError):
            sample_schedule(rng(), 6, [], 0.5)
        with self.assertRaises(ScheduleError):
            sample_schedule(rng(), 6, ['gaussian_noise'], 0.0)
        with self.assertRaises(ScheduleError):
            sample_schedule(rng(), 0, ['gaussian_noise'], 0.5)

    def test_specs_change_only_at_segment_boundaries(self):
        schedule = sample_schedule(rng(2), 6, ['gaussian_noise', 'jpeg_compression'], 1.0, num_segments=3)
        _, metadata = apply_schedule(self.clip(18), schedule)
        self.assertEqual(len({line['segment_index'] for line in metadata}), 3)
        changes = [i for i in range(1, 18) if metadata[i]['specs'] != metadata[i - 1]['specs']]
        self.assertEqual(changes, [6, 12])

    def test_boundaries_for_all_intervals(self):
        clip = self.clip(48, size=8)
        candidates = ['gaussian_noise', 'speckle_noise', 'poisson_noise']
        for t in (6, 12, 24):
            schedule = sample_schedule(rng(t), t, candidates, 1.0, num_segments=48 // t)
            _, metadata = apply_schedule(clip, schedule)
            changes = [i for i in range(1, 48) if metadata[i]['specs'] != metadata[i - 1]['specs']]
            self.assertEqual(changes, list(range(t, 48, t)))
            for start in range(0, 48, t):
                block = [line['specs'] for line in metadata[start:start + t]]
                self.assertTrue(all(specs == block[0] for specs in block))

    def test_empty_segments_pass_frames_through(self):
        clip = self.clip(12)
        schedule = DegradationSchedule(interval_t=6, segments=(Segment(0), Segment(1)), seed=4)
        lq, metadata = apply_schedule(clip, schedule)
        np.testing.assert_array_equal(lq.frames, clip.frames)
        self.assertEqual(lq.role, ClipRole.LQ)
        self.assertTrue(all(line['specs'] == [] for line in metadata))

    def test_apply_schedule_is_deterministic(self):
        clip = self.clip(12)
        schedule = sample_schedule(rng(8), 6, ['gaussian_noise', 'snow', 'jpeg_compression'], 1.0,
                                   num_segments=2)
        first, _ = apply_schedule(clip, schedule)
        second, _ = apply_schedule(clip, schedule)
        np.testing.assert_array_equal(first.frames, second.frames)
        self.assertTrue(np.all((first.frames >= 0) & (first.frames <= 1)))
        self.assertTrue(np.all(np.isfinite(first.frames)))

    def test_short_schedule_is_rejected(self):
        schedule = sample_schedule(rng(), 6, ['gaussian_noise'], 1.0, num_segments=2)
        with self.assertRaises(ScheduleError):
            apply_schedule(self.clip(18), schedule)

    def test_video_compression_records_backend(self):
        schedule = DegradationSchedule(
            interval_t=4,
            segments=(Segment(0, (DegradationSpec('video_compression', {'codec': 'h264'}),)),),
            seed=1,
        )
        lq, metadata = apply_schedule(self.clip(4, size=16), schedule, video_backend='jpeg_proxy')
        self.assertEqual(metadata[0]['video_backend'], 'jpeg_proxy')
        self.assertEqual(lq.shape, (4, 16, 16, 3))

    @skipUnless(shutil.which('false'), 'needs a binary that always fails')
    @override_settings(RONIN={**settings.RONIN, 'VIDEO_ENCODER': 'false'})
    def test_recorded_backend_is_the_one_that_encoded(self):
        schedule = DegradationSchedule(
            interval_t=4,
            segments=(Segment(0, (DegradationSpec('video_compression', {'codec': 'mpeg4'}),)),),
            seed=1,
        )
        _, metadata = apply_schedule(self.clip(4, size=16), schedule, video_backend='ffmpeg')
        self.assertEqual(metadata[0]['video_backend'], 'jpeg_proxy')


class ProtocolTest(SimpleTestCase):
    def test_shipped_protocols_load(self):
        for name in ('threeD_denoise', 'threeD_deblur', 'fourD_desnow', 'fourD_derain', 'TUD', 'snowyscenes'):
            self.assertIsInstance(load_protocol(name), Protocol)

    def test_snowyscenes_adds_no_kernel_blur(self):
        protocol = load_protocol('snowyscenes')
        self.assertNotIn('gaussian_blur', protocol.candidates)
        self.assertNotIn('resize_blur', protocol.candidates)
        self.assertEqual(protocol.probability, 0.55)

    def test_unknown_protocol(self):
        with self.assertRaises(ProtocolError):
            load_protocol('fiveD')

    def test_illegal_range_is_rejected(self):
        payload = load_protocol('TUD').to_dict()
        payload['ranges']['jpeg_compression'] = {'quality': {'choice': [0, 30]}}
        with self.assertRaises(ProtocolError):
            Protocol.from_dict(payload)


@override_settings(RONIN=JPEG_PROXY)
class SynthesizeDatasetTest(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def synth(self, protocol, name='out', seed=3, t=6):
        return synthesize_dataset(protocol, self.tmp / 'src', self.tmp / name, seed, t, procedural=2)

    def test_pairs_have_equal_frame_counts(self):
        manifest = self.synth('TUD')
        self.assertEqual(len(manifest['videos']), 2)
        dataset = SynthesizedDataset(self.tmp / 'out')
        for video in dataset:
            lq, gt = dataset.load_pair(video.video_id)
            self.assertEqual(lq.shape, gt.shape)
            self.assertEqual(len(dataset.metadata(video.video_id)), len(lq))

    def test_frames_are_read_from_the_split_directory(self):
        self.synth('TUD')
        dataset = SynthesizedDataset(self.tmp / 'out')
        video = next(iter(dataset))
        for split in (ClipRole.LQ, ClipRole.GT):
            directory = video.directory(split)
            self.assertEqual(directory, self.tmp / 'out' / video.video_id / split)
            paths = dataset.frame_paths(video.video_id, split)
            self.assertTrue(paths)
            self.assertTrue(all(Path(path).parent == directory for path in paths))

    def test_denoise_protocol_draws_one_sigma_per_clip(self):
        self.synth('threeD_denoise')
        dataset = SynthesizedDataset(self.tmp / 'out')
        for video in dataset:
            specs = [line['specs'] for line in dataset.metadata(video.video_id)]
            self.assertTrue(all(s == specs[0] for s in specs))
            self.assertEqual([spec['kind'] for spec in specs[0]], ['gaussian_noise'])
            self.assertTrue(20 <= specs[0][0]['params']['sigma'] <= 50)

    def test_snowyscenes_never_adds_blur(self):
        self.synth('snowyscenes')
        dataset = SynthesizedDataset(self.tmp / 'out')
        for video in dataset:
            for kinds in dataset.labels(video.video_id):
                self.assertFalse({'gaussian_blur', 'resize_blur'} & set(kinds))

    def test_same_seed_gives_byte_identical_datasets(self):
        self.synth('snowyscenes', name='first')
        self.synth('snowyscenes', name='second')
        first = sorted(p.relative_to(self.tmp / 'first') for p in (self.tmp / 'first').rglob('*') if p.is_file())
        second = sorted(p.relative_to(self.tmp / 'second') for p in (self.tmp / 'second').rglob('*') if p.is_file())
        self.assertEqual(first, second)
        for rel in first:
            self.assertEqual((self.tmp / 'first' / rel).read_bytes(), (self.tmp / 'second' / rel).read_bytes())

    def test_blurry_sources_keep_sharp_ground_truth(self):
        sharp = procedural_clip(rng(1), num_frames=6, height=32, width=32)
        blurry = np.stack([apply_blur(frame, 'gaussian_blur', 1.5) for frame in sharp])
        write_clip(VideoClip(frames=sharp), self.tmp / 'gopro' / 'scene' / 'sharp')
        write_clip(VideoClip(frames=blurry), self.tmp / 'gopro' / 'scene' / 'blur')
        synthesize_dataset('snowyscenes', self.tmp / 'gopro', self.tmp / 'out', 1, 6)
        gt = load_clip(self.tmp / 'out' / 'scene' / 'gt')
        source = load_clip(self.tmp / 'gopro' / 'scene' / 'sharp')
        np.testing.assert_array_equal(gt.frames, source.frames)
        manifest = json.loads((self.tmp / 'out' / 'dataset.json').read_text())
        self.assertEqual(manifest['videos'][0]['frames'], 6)
