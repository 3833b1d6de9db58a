"""Single-frame and segment degradation operators.

Frames are float arrays in [0, 1] shaped H x W x C. Noise levels are given on
the 255 scale. Every operator that draws randomness takes a numpy Generator
and is a pure function of (input, generator state).
"""
import functools
import io
import logging
import math
import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from django.conf import settings
from PIL import Image
from scipy.ndimage import convolve, gaussian_filter

from .clips import FRAME_PATTERN, read_frame, to_uint8, write_frame
from .exceptions import DegradationError, DegradationParameterError, EncoderUnavailableError

logger = logging.getLogger(__name__)

JPEG_QUALITIES = (20, 30, 40)
VIDEO_CODECS = ('libx264', 'h264', 'mpeg4')
BLUR_KINDS = ('gaussian_blur', 'resize_blur')
COMPRESSION_KINDS = ('jpeg_compression', 'video_compression')
WEATHER_INTENSITIES = ('moderate', 'severe')
POISSON_EXACT_MAX_ALPHA = 15


def _finish(frame, out):
    return np.clip(out, 0.0, 1.0).astype(frame.dtype, copy=False)


def add_gaussian_noise(frame, sigma, rng):
    if sigma < 0:
        raise DegradationParameterError(f'Gaussian noise sigma must be >= 0, got {sigma}.')
    noise = rng.normal(0.0, sigma / 255.0, size=frame.shape)
    return _finish(frame, frame + noise)


def add_speckle_noise(frame, sigma, rng):
    if sigma < 0:
        raise DegradationParameterError(f'Speckle noise sigma must be >= 0, got {sigma}.')
    noise = rng.normal(0.0, sigma / 255.0, size=frame.shape)
    return _finish(frame, frame + frame * noise)


def add_poisson_noise(frame, alpha, rng):
    """Photon noise with 10**alpha photons at full intensity."""
    if not math.isfinite(alpha) or alpha <= 0:
        raise DegradationParameterError(f'Poisson alpha must be finite and > 0, got {alpha}.')
    signal = frame.astype(np.float64)
    if alpha < POISSON_EXACT_MAX_ALPHA:
        scale = 10.0 ** alpha
        counts = rng.poisson(signal * scale)
        return _finish(frame, frame + (counts / scale - signal))
    # numpy cannot sample lam >= ~1e15 exactly; N(lam, lam) is indistinguishable there
    noise = rng.standard_normal(frame.shape) * np.sqrt(signal) * 10.0 ** (-alpha / 2)
    return _finish(frame, frame + noise)


def _resize_blur(frame, factor):
    squeeze = frame.ndim == 2
    array = frame[..., None] if squeeze else frame
    height, width = array.shape[:2]
    tensor = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32)).permute(2, 0, 1)[None]
    small = (max(1, round(height / factor)), max(1, round(width / factor)))
    down = F.interpolate(tensor, size=small, mode='bilinear', align_corners=False)
    up = F.interpolate(down, size=(height, width), mode='bilinear', align_corners=False)
    out = up[0].permute(1, 2, 0).numpy()
    return out[..., 0] if squeeze else out


def apply_blur(frame, kind, strength):
    if kind == 'gaussian_blur':
        if strength <= 0:
            raise DegradationParameterError(f'Gaussian blur sigma must be > 0, got {strength}.')
        sigmas = (strength, strength) + (0,) * (frame.ndim - 2)
        out = gaussian_filter(frame, sigma=sigmas, mode='reflect')
    elif kind == 'resize_blur':
        if strength <= 1:
            raise DegradationParameterError(f'Resize factor must be > 1, got {strength}.')
        out = _resize_blur(frame, strength)
    else:
        raise DegradationParameterError(f'Unknown blur kind {kind!r}.')
    return _finish(frame, out)


def jpeg_roundtrip(frame, quality):
    if not 1 <= int(quality) <= 95:
        raise DegradationParameterError(f'JPEG quality must be within 1..95, got {quality}.')
    buffer = io.BytesIO()
    Image.fromarray(to_uint8(frame)).save(buffer, format='JPEG', quality=int(quality))
    buffer.seek(0)
    with Image.open(buffer) as image:
        decoded = np.asarray(image.convert('RGB'), dtype=np.float32) / 255.0
    return decoded.astype(frame.dtype, copy=False)


@functools.lru_cache(maxsize=None)
def encoder_supports(encoder, codec):
    """Encode two tiny frames with ``codec``; cached per (binary, codec)."""
    command = [
        encoder, '-hide_banner', '-loglevel', 'error',
        '-f', 'lavfi', '-i', 'color=c=gray:s=16x16:r=2:d=1',
        '-c:v', codec, '-pix_fmt', 'yuv420p', '-f', 'null', '-',
    ]
    try:
        subprocess.run(command, check=True, capture_output=True, timeout=60)
    except (OSError, subprocess.SubprocessError) as exc:
        logger.warning('%s cannot encode %s: %s', encoder, codec, exc)
        return False
    return True


def resolve_video_backend(allow_fallback=None, codec=None):
    """Return 'ffmpeg' when the external encoder exists (and can encode
    ``codec``, if given), else the JPEG proxy."""
    encoder = settings.RONIN['VIDEO_ENCODER']
    found = bool(encoder) and shutil.which(encoder) is not None
    if found and (codec is None or encoder_supports(encoder, codec)):
        return 'ffmpeg'
    if allow_fallback is None:
        allow_fallback = settings.RONIN['VIDEO_COMPRESSION_FALLBACK']
    if not allow_fallback:
        problem = f'cannot encode {codec}' if found else 'not found'
        raise EncoderUnavailableError(
            f'Video encoder {encoder!r} {problem} and the JPEG proxy fallback is disabled.'
        )
    return 'jpeg_proxy'


def _run(command):
    try:
        subprocess.run(command, check=True, capture_output=True)
    except FileNotFoundError as exc:
        raise EncoderUnavailableError(f'Cannot run {command[0]!r}.') from exc
    except subprocess.CalledProcessError as exc:
        stderr = exc.stderr.decode('utf-8', errors='replace').strip()
        raise DegradationError(f'Video encoder failed: {stderr}') from exc


def _ffmpeg_roundtrip(frames, codec, fps):
    encoder = settings.RONIN['VIDEO_ENCODER']
    height, width = frames.shape[1:3]
    with tempfile.TemporaryDirectory(prefix='ronin-codec-') as tmp:
        tmp = Path(tmp)
        for index, frame in enumerate(frames):
            write_frame(tmp / FRAME_PATTERN.format(index), frame)
        encoded = tmp / 'segment.mp4'
        _run([
            encoder, '-y', '-loglevel', 'error',
            '-framerate', f'{fps:g}', '-start_number', '0',
            '-i', str(tmp / 'frame_%06d.png'),
            '-vf', 'pad=ceil(iw/2)*2:ceil(ih/2)*2',
            '-c:v', codec, '-pix_fmt', 'yuv420p', '-threads', '1',
            str(encoded),
        ])
        decoded_dir = tmp / 'decoded'
        decoded_dir.mkdir()
        _run([
            encoder, '-y', '-loglevel', 'error', '-threads', '1',
            '-i', str(encoded), str(decoded_dir / 'frame_%06d.png'),
        ])
        decoded = sorted(decoded_dir.glob('*.png'))
        if len(decoded) != len(frames):
            raise DegradationError(
                f'Video encoder returned {len(decoded)} frames for a {len(frames)}-frame segment.'
            )
        return np.stack([read_frame(path)[:height, :width] for path in decoded]).astype(frames.dtype)


def compress(frames, kind, param, backend=None, fps=24.0):
    """Compress a single frame or a T x H x W x C segment."""
    single = frames.ndim == 3
    stack = frames[None] if single else frames
    if kind == 'jpeg_compression':
        out = np.stack([jpeg_roundtrip(frame, param) for frame in stack])
    elif kind == 'video_compression':
        if param not in VIDEO_CODECS:
            raise DegradationParameterError(f'Codec must be one of {VIDEO_CODECS}, got {param!r}.')
        if backend != 'jpeg_proxy':
            backend = resolve_video_backend(codec=param)
        if backend == 'ffmpeg':
            out = _ffmpeg_roundtrip(stack, param, fps)
        else:
            quality = settings.RONIN['VIDEO_FALLBACK_QUALITY']
            out = np.stack([jpeg_roundtrip(frame, quality) for frame in stack])
    else:
        raise DegradationParameterError(f'Unknown compression kind {kind!r}.')
    out = _finish(frames, out)
    return out[0] if single else out


def _flake_alpha(transmit, cy, cx, radius, opacity, angle, streak):
    height, width = transmit.shape
    sigma_major = radius * (1.0 + streak)
    reach = int(math.ceil(3.0 * sigma_major))
    y0, y1 = max(0, int(cy) - reach), min(height, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(width, int(cx) + reach + 1)
    if y0 >= y1 or x0 >= x1:
        return
    py, px = np.mgrid[y0:y1, x0:x1]
    py = py - cy
    px = px - cx
    fall_y, fall_x = math.cos(angle), math.sin(angle)
    along = py * fall_y + px * fall_x
    across = -py * fall_x + px * fall_y
    alpha = opacity * np.exp(-0.5 * ((along / sigma_major) ** 2 + (across / radius) ** 2))
    transmit[y0:y1, x0:x1] *= 1.0 - alpha


def overlay_snow(frame, intensity, rng, phase=0, profiles=None):
    """Alpha-composite a seeded field of white, motion-streaked flakes.

    ``phase`` advects the same field along its fall direction, so frames of
    one segment share flakes that move instead of flicker.
    """
    profiles = profiles or settings.RONIN['SNOW_PROFILES']
    if intensity not in WEATHER_INTENSITIES or intensity not in profiles:
        raise DegradationParameterError(f'Snow intensity must be one of {WEATHER_INTENSITIES}.')
    profile = profiles[intensity]
    height, width = frame.shape[:2]
    count = max(1, int(round(profile['density'] * height * width)))
    wind = rng.uniform(-math.pi / 6, math.pi / 6)
    # Rows are drawn in one block so a denser profile extends a sparser one.
    attrs = rng.random((count, 5))
    r_lo, r_hi = profile['radius']
    o_lo, o_hi = profile['opacity']
    transmit = np.ones((height, width), dtype=np.float64)
    for row in attrs:
        radius = r_lo + row[2] * (r_hi - r_lo)
        opacity = o_lo + row[3] * (o_hi - o_lo)
        angle = wind + (row[4] - 0.5) * 0.2
        drift = phase * profile['fall_speed'] * radius
        cy = (row[0] * height + drift * math.cos(angle)) % height
        cx = (row[1] * width + drift * math.sin(angle)) % width
        _flake_alpha(transmit, cy, cx, radius, opacity, angle, profile['streak'])
    coverage = (1.0 - transmit)
    if frame.ndim == 3:
        coverage = coverage[..., None]
    return _finish(frame, frame * (1.0 - coverage) + coverage)


def _streak_kernel(length, angle):
    """Binary line of ``length`` pixels through the center, tilted by ``angle`` from vertical."""
    size = length if length % 2 else length + 1
    center = size // 2
    kernel = np.zeros((size, size))
    for step in np.arange(-(length - 1) / 2, (length - 1) / 2 + 0.25, 0.5):
        y = int(round(center + step * math.cos(angle)))
        x = int(round(center + step * math.sin(angle)))
        kernel[y, x] = 1.0
    return kernel


def overlay_rain(frame, intensity, rng, phase=0, profiles=None):
    """Composite seeded, slanted rain streaks.

    Sparse drops are smeared along the fall direction by a line kernel.
    ``phase`` shifts the same drops downwards, as for snow.
    """
    profiles = profiles or settings.RONIN['RAIN_PROFILES']
    if intensity not in WEATHER_INTENSITIES or intensity not in profiles:
        raise DegradationParameterError(f'Rain intensity must be one of {WEATHER_INTENSITIES}.')
    profile = profiles[intensity]
    height, width = frame.shape[:2]
    wind = rng.uniform(-math.pi / 12, math.pi / 12)
    # Both fields are always drawn so a denser profile extends a sparser one.
    placement, strength = rng.random((height, width)), rng.random((height, width))
    drops = np.where(placement < profile['density'], 0.5 + 0.5 * strength, 0.0)
    drift = phase * profile['fall_speed']
    shift = (int(round(drift * math.cos(wind))), int(round(drift * math.sin(wind))))
    drops = np.roll(drops, shift, axis=(0, 1))
    streaks = convolve(drops, _streak_kernel(profile['length'], wind), mode='wrap')
    coverage = np.clip(streaks * profile['opacity'], 0.0, 1.0)
    if frame.ndim == 3:
        coverage = coverage[..., None]
    return _finish(frame, frame * (1.0 - coverage) + coverage)


def overlay_coverage(before, after, threshold=0.1):
    """Count pixels whose snow or rain opacity exceeds ``threshold``."""
    lift = np.asarray(after, dtype=np.float64) - np.asarray(before, dtype=np.float64)
    room = 1.0 - np.asarray(before, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        opacity = np.where(room > 1e-6, lift / room, 0.0)
    if opacity.ndim == 3:
        opacity = opacity.max(axis=-1)
    return int((opacity > threshold).sum())
