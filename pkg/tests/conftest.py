import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from _archmodel import PathConfig, StackConfig  # noqa: E402
from _corpus import AudioClip, RecordingMeta  # noqa: E402
from _dsp import ResolutionProfile  # noqa: E402

# 8x8 input, paths ending at 1x4 (F) and 4x1 (T)
TINY_STACK = StackConfig(
    input_shape=(8, 8), channels=(2, 2, 2, 2),
    path_f=PathConfig(kernels=((3, 5), (3, 3), (1, 3), (2, 3)), pools=((2, 2), (2, 1), (1, 1), (2, 1))),
    path_t=PathConfig(kernels=((5, 3), (3, 3), (3, 1), (3, 2)), pools=((2, 2), (1, 2), (1, 1), (1, 2))),
    dense_units=4, output_f=(1, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_profiles():
    """Two resolutions at 8 kHz with 8 mel bands and 8 frames."""
    return [ResolutionProfile(64, 8000, mel_bands=8, frames_per_segment=8),
            ResolutionProfile(128, 8000, mel_bands=8, frames_per_segment=8)]


@pytest.fixture
def noise_clip(rng):
    return AudioClip(0.5 * rng.uniform(-1, 1, 8000), 8000)


def sine(freq, seconds, sample_rate=16000, amp=0.5):
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sample_rate)


def make_metas(classes, locations, files, duration=10.0):
    """Synthetic RecordingMeta list: `locations` may be an int or a per-class list."""
    counts = locations if isinstance(locations, (list, tuple)) else [locations] * classes
    metas = []
    for c in range(classes):
        for l in range(counts[c]):
            for f in range(files):
                metas.append(RecordingMeta(f"c{c}/l{l}_{f}.wav", f"class{c}", f"c{c}-l{l}", duration))
    return metas
