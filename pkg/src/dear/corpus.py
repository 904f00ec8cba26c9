"""Synthetic tones-plus-noise clips for desk-scale training and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .signal import AudioSignal, save_wav


def synth_clip(rng: np.random.Generator, length: int, sample_rate: int = 44100, rms_range=(0.05, 0.2)) -> np.ndarray:
    """Harmonic tones over coloured noise with a slow amplitude envelope."""
    t = np.arange(length) / sample_rate
    x = np.zeros(length)
    for _ in range(int(rng.integers(1, 4))):
        f0 = rng.uniform(80, 800)
        for h in range(1, 8):
            if f0 * h < sample_rate / 2:
                x += rng.uniform(0, 1) / h * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
    noise = np.convolve(rng.standard_normal(length), np.ones(int(rng.integers(1, 6))), "same")
    x = x / np.std(x) + rng.uniform(0.05, 0.5) * noise / np.std(noise)
    x *= 1 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 4) * t + rng.uniform(0, 2 * np.pi))
    return x / np.sqrt(np.mean(x**2)) * rng.uniform(*rms_range)


def synth_clips(count: int, length: int, seed: int = 0, sample_rate: int = 44100, rms_range=(0.05, 0.2)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([synth_clip(rng, length, sample_rate, rms_range) for _ in range(count)])


def write_corpus(directory, count: int, length: int, seed: int = 0, sample_rate: int = 44100) -> list[Path]:
    """Write ``count`` float-32 WAV clips named ``clip_0000.wav`` ... into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, clip in enumerate(synth_clips(count, length, seed, sample_rate)):
        p = out / f"clip_{i:04d}.wav"
        save_wav(AudioSignal(clip, sample_rate), p)
        paths.append(p)
    return paths
