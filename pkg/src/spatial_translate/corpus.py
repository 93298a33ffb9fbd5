"""Speech-like and noise test material, so the repo runs without external corpora.

The generated "speech" is a train of voiced syllables (harmonic complexes with
gliding f0 and two formant bumps) separated by pauses, with occasional
fricative noise bursts. It is sparse in time-frequency like real speech,
which is what the masking and clustering code cares about.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import SAMPLE_RATE, wav_write
from .errors import EmptyCorpus


def synthetic_speech(duration_s: float, rng: np.random.Generator, rms: float = 0.25) -> np.ndarray:
    n = int(round(duration_s * SAMPLE_RATE))
    out = np.zeros(n)
    base_f0 = rng.uniform(95.0, 230.0)
    pos = int(rng.uniform(0.0, 0.05) * SAMPLE_RATE)
    while pos < n:
        length = int(rng.uniform(0.09, 0.32) * SAMPLE_RATE)
        seg_n = min(length, n - pos)
        if seg_n <= 16:
            break
        t = np.arange(seg_n) / SAMPLE_RATE
        f0_start = base_f0 * rng.uniform(0.85, 1.15)
        f0_end = f0_start * rng.uniform(0.93, 1.07)
        f0 = np.linspace(f0_start, f0_end, seg_n)
        phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
        formants = (rng.uniform(300, 900), rng.uniform(1000, 2600))
        syl = np.zeros(seg_n)
        for k in range(1, int(4000 / f0_start) + 1):
            fk = k * f0_start
            amp = (1.0 / k) * (
                0.15
                + 3.0 * np.exp(-0.5 * ((fk - formants[0]) / 100.0) ** 2)
                + 1.5 * np.exp(-0.5 * ((fk - formants[1]) / 150.0) ** 2)
            )
            syl += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        if rng.random() < 0.3:
            hiss = scipy.signal.lfilter(*scipy.signal.butter(2, [2500, 6500], "bandpass", fs=SAMPLE_RATE),
                                        rng.standard_normal(seg_n))
            syl += 0.25 * hiss * np.std(syl) / (np.std(hiss) + 1e-12)
        env = np.hanning(seg_n) ** 0.7
        out[pos : pos + seg_n] += syl * env * rng.uniform(0.5, 1.0)
        pos += seg_n + int(rng.uniform(0.05, 0.35) * SAMPLE_RATE)
    level = np.sqrt(np.mean(out**2))
    if level > 0:
        out *= rms / level
    peak = np.max(np.abs(out))
    if peak > 0.99:
        out *= 0.99 / peak
    return out


def synthetic_noise(duration_s: float, rng: np.random.Generator, rms: float = 0.05,
                    coherence: float = 0.5) -> np.ndarray:
    """Partially coherent pink-ish binaural background noise, shape ``(2, n)``."""
    n = int(round(duration_s * SAMPLE_RATE))
    b, a = scipy.signal.butter(1, 600, "lowpass", fs=SAMPLE_RATE)
    common = scipy.signal.lfilter(b, a, rng.standard_normal(n))
    sides = scipy.signal.lfilter(b, a, rng.standard_normal((2, n)), axis=-1)
    noise = np.sqrt(coherence) * common + np.sqrt(1 - coherence) * sides
    return noise * rms / np.sqrt(np.mean(noise**2))


def write_synthetic_corpus(out_dir, n_files: int = 8, duration_s: float = 4.0, seed: int = 0) -> Path:
    """Write mono speech-like WAVs plus a ``corpus.json`` manifest; return the manifest path."""
    out_dir = Path(out_dir)
    files = []
    for i in range(n_files):
        rng = np.random.default_rng([seed, i])
        path = out_dir / f"speech_{i:03d}.wav"
        wav_write(path, synthetic_speech(duration_s, rng))
        files.append(path.name)
    manifest = out_dir / "corpus.json"
    manifest.write_text(json.dumps({"files": files}, indent=2))
    return manifest


def load_corpus(source) -> list[Path]:
    """Resolve a corpus given as a directory of WAVs, a JSON manifest, or a list of paths."""
    if isinstance(source, (list, tuple)):
        files = [Path(p) for p in source]
    else:
        source = Path(source)
        if source.is_dir():
            files = sorted(source.glob("*.wav"))
        elif source.suffix == ".json" and source.exists():
            doc = json.loads(source.read_text())
            files = [source.parent / f for f in doc.get("files", [])]
        else:
            files = []
    if not files:
        raise EmptyCorpus(f"no audio files found in {source!r}")
    return files
