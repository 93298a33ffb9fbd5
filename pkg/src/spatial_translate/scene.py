"""Synthetic binaural scene construction (static and moving sources)."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, as_binaural, as_mono, convolve, wav_read, wav_write
from .corpus import load_corpus, synthetic_noise
from .errors import EmptyCorpus, InvalidSpec, InvalidTrajectory, MissingAsset
from .locsep import ArrayGeometry, tdoa, wrap_diff

log = logging.getLogger(__name__)

GAIN_RANGE = (0.2, 1.0)
MOTION_STEP_S = 0.05
MOTION_FADE_S = 0.010


@dataclass
class BrirEntry:
    azimuth: float
    elevation: float
    ir: np.ndarray  # (2, L): h^l, h^r

    def __post_init__(self):
        self.ir = as_binaural(self.ir)
        if self.ir.shape[1] == 0:
            raise InvalidSpec("empty impulse response")
        self.azimuth = float(self.azimuth) % 360.0


@dataclass
class BrirSet:
    name: str
    entries: list[BrirEntry]
    source: str = "synthetic"

    def __post_init__(self):
        keys = [(round(e.azimuth, 6), round(e.elevation, 6)) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise InvalidSpec(f"BRIR set {self.name!r} has duplicate (azimuth, elevation) keys")
        if len({k[0] for k in keys}) < 2:
            raise InvalidSpec(f"BRIR set {self.name!r} needs at least two azimuths")

    @property
    def azimuths(self) -> np.ndarray:
        return np.array(sorted({e.azimuth for e in self.entries}))

    def nearest(self, azimuth: float, elevation: float = 0.0, warn: bool = True) -> BrirEntry:
        dist = [
            math.hypot(wrap_diff(e.azimuth, azimuth), e.elevation - elevation) for e in self.entries
        ]
        entry = self.entries[int(np.argmin(dist))]
        if warn and min(dist) > 1e-6:
            log.warning("BRIR set %s: no entry at az=%.1f el=%.1f, using az=%.1f el=%.1f",
                        self.name, azimuth, elevation, entry.azimuth, entry.elevation)
        return entry

    def to_manifest(self, path) -> Path:
        """Write one stereo WAV per entry next to ``path`` and the JSON index itself."""
        path = Path(path)
        wav_dir = path.parent / f"{self.name}_wav"
        entries = []
        for e in self.entries:
            wav = wav_dir / f"az{e.azimuth:06.2f}_el{e.elevation:+06.2f}.wav"
            wav_write(wav, e.ir)
            entries.append({"az": e.azimuth, "el": e.elevation,
                            "path": str(wav.relative_to(path.parent))})
        path.write_text(json.dumps({"name": self.name, "source": self.source,
                                    "entries": entries}, indent=2))
        return path

    @classmethod
    def from_manifest(cls, path) -> "BrirSet":
        path = Path(path)
        if not path.exists():
            raise MissingAsset(f"BRIR manifest {path} not found")
        doc = json.loads(path.read_text())
        entries = []
        for item in doc["entries"]:
            wav = path.parent / item["path"]
            if not wav.exists():
                raise MissingAsset(f"BRIR file {wav} not found")
            entries.append(BrirEntry(item["az"], item.get("el", 0.0), wav_read(wav)))
        return cls(doc["name"], entries, doc.get("source", str(path)))


def _delay_kernel(delay: float, length: int) -> np.ndarray:
    """Unit impulse at ``delay`` samples; fractional positions use a Hann-windowed sinc."""
    n = np.arange(length)
    if abs(delay - round(delay)) < 1e-9:
        h = np.zeros(length)
        h[int(round(delay))] = 1.0
        return h
    half = min(delay, length - 1 - delay)
    x = n - delay
    w = np.where(np.abs(x) <= half, 0.5 + 0.5 * np.cos(np.pi * x / half), 0.0)
    return np.sinc(x) * w


def synthetic_brir_set(
    name: str = "synthetic",
    az_step: float = 5.0,
    ild_db: float = 6.0,
    geom: ArrayGeometry | None = None,
    fractional: bool = False,
    ir_len: int = 48,
    base_delay: int = 20,
) -> BrirSet:
    """Free-field delay-and-level BRIRs on a regular azimuth grid at zero elevation.

    Azimuth is counter-clockwise with 90 degrees at the left ear, so a source
    at ``theta`` reaches the right ear ``tdoa(theta)`` seconds after the left.
    The level difference follows ``right/left = -ild_db * sin(theta)`` dB.
    With ``fractional=False`` the inter-aural delay is rounded to whole samples,
    which keeps L1 norms of the kernels equal to their gains.
    """
    geom = geom or ArrayGeometry()
    entries = []
    for az in np.arange(0.0, 360.0, az_step):
        itd = tdoa(az, geom) * SAMPLE_RATE
        if not fractional:
            itd = float(round(itd))
        ild = -ild_db * math.sin(math.radians(az))
        g_left, g_right = 10 ** (-ild / 40), 10 ** (ild / 40)
        ir = np.stack([
            g_left * _delay_kernel(base_delay, ir_len),
            g_right * _delay_kernel(base_delay + itd, ir_len),
        ])
        entries.append(BrirEntry(az, 0.0, ir))
    return BrirSet(name, entries, source=f"synthetic(ild_db={ild_db}, d={geom.d}, fractional={fractional})")


def spatialize(speech, entry: BrirEntry, gain: float = 1.0) -> np.ndarray:
    if gain <= 0:
        raise InvalidSpec("gain must be positive")
    speech = as_mono(speech)
    return gain * np.stack([convolve(speech, entry.ir[0]), convolve(speech, entry.ir[1])])


def _pad_to(x: np.ndarray, n: int) -> np.ndarray:
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, n - x.shape[-1])])


def _load(ref, what: str) -> np.ndarray:
    if isinstance(ref, (str, Path)):
        if not Path(ref).exists():
            raise MissingAsset(f"{what} {ref} not found")
        return wav_read(ref)
    if ref is None:
        raise MissingAsset(f"{what} missing")
    return np.asarray(ref, dtype=np.float64)


@dataclass
class SceneSpec:
    speech: list  # mono arrays or WAV paths
    gains: list[float]
    angles: list[tuple[float, float]]  # (azimuth, elevation)
    brir_set: BrirSet
    noise: object = None  # (2, n) array or WAV path
    noise_present: bool = False
    noise_gain: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if len(self.speech) not in (2, 3):
            raise InvalidSpec(f"a scene needs 2 or 3 speech stems, got {len(self.speech)}")
        if not (len(self.speech) == len(self.gains) == len(self.angles)):
            raise InvalidSpec("speech, gains and angles must have equal lengths")
        lo, hi = GAIN_RANGE
        if any(not lo <= g <= hi for g in self.gains):
            raise InvalidSpec(f"gains must lie in [{lo}, {hi}]")
        for i in range(len(self.angles)):
            for j in range(i):
                a, b = self.angles[i], self.angles[j]
                if wrap_diff(a[0], b[0]) < 1e-6 and abs(a[1] - b[1]) < 1e-6:
                    raise InvalidSpec(f"duplicate source angle {a}")


@dataclass
class SceneInstance:
    mixture: np.ndarray
    stems: list[np.ndarray]
    truth_angles: list[float]
    noise_present: bool
    spec: SceneSpec | None = None
    noise: np.ndarray | None = None
    # moving scenes only: per-step azimuths for each stem
    angle_tracks: list[np.ndarray] | None = None
    step_s: float | None = None

    def stem_power_db(self) -> list[float]:
        return [10 * math.log10(np.mean(s**2)) for s in self.stems]


def synthesize_scene(spec: SceneSpec) -> SceneInstance:
    spec.validate()
    stems, truth = [], []
    for ref, gain, (az, el) in zip(spec.speech, spec.gains, spec.angles):
        speech = as_mono(_load(ref, "speech stem"))
        entry = spec.brir_set.nearest(az, el)
        stems.append(spatialize(speech, entry, gain))
        truth.append(entry.azimuth)
    n = max(s.shape[1] for s in stems)
    stems = [_pad_to(s, n) for s in stems]
    mixture = np.sum(stems, axis=0)
    noise = None
    if spec.noise_present:
        noise = as_binaural(_load(spec.noise, "noise"))
        reps = int(math.ceil(n / noise.shape[1]))
        noise = spec.noise_gain * np.tile(noise, (1, reps))[:, :n]
        mixture = mixture + noise
    return SceneInstance(mixture, stems, truth, spec.noise_present, spec, noise)


def stem_power_diff_db(scene: SceneInstance, i: int = 0, j: int = 1) -> float:
    p = scene.stem_power_db()
    return p[i] - p[j]


@dataclass
class MotionTrajectory:
    start_azimuth: float
    angular_velocity: float  # rad/s, positive = counter-clockwise
    step_s: float = MOTION_STEP_S
    elevation: float = 0.0

    def __post_init__(self):
        if abs(self.angular_velocity) > math.pi / 2 + 1e-12:
            raise InvalidTrajectory("angular velocity must lie in [-pi/2, pi/2] rad/s")
        if abs(self.step_s - MOTION_STEP_S) > 1e-12:
            raise InvalidTrajectory("motion step is fixed at 50 ms")

    def positions(self, duration_s: float) -> np.ndarray:
        """Azimuths at t = 0, step, 2*step, ... up to and including ``duration_s``."""
        n_steps = int(math.ceil(duration_s / self.step_s - 1e-9))
        t = np.arange(n_steps + 1) * self.step_s
        return (self.start_azimuth + np.degrees(self.angular_velocity * t)) % 360.0


def crossfade_weights(n: int, boundaries, fade: int) -> list[np.ndarray]:
    """Partition of unity over ``n`` samples, linear ramps of ``fade`` samples centred on boundaries."""
    t = np.arange(n, dtype=np.float64)
    steps = [np.ones(n)]
    for b in boundaries:
        if fade <= 0:
            steps.append((t >= b).astype(np.float64))
        else:
            steps.append(np.clip((t - (b - fade / 2)) / fade, 0.0, 1.0))
    steps.append(np.zeros(n))
    return [steps[k] - steps[k + 1] for k in range(len(steps) - 1)]


def synthesize_moving_scene(speech, traj: MotionTrajectory, brir_set: BrirSet,
                            gain: float = 1.0) -> SceneInstance:
    speech = as_mono(_load(speech, "speech"))
    az = list(brir_set.azimuths)
    if max(np.diff(az + [az[0] + 360.0])) > 15.0 + 1e-9:
        raise InvalidSpec("moving scenes need BRIR azimuths at least every 15 degrees")
    n = speech.size
    step = int(round(traj.step_s * SAMPLE_RATE))
    n_steps = int(math.ceil(n / step))
    positions = traj.positions(n_steps * traj.step_s)
    step_angles = positions[:n_steps]
    weights = crossfade_weights(n, [k * step for k in range(1, n_steps)],
                                int(round(MOTION_FADE_S * SAMPLE_RATE)))
    # group steps that land on the same BRIR entry, one convolution per entry
    grouped: dict[int, tuple[BrirEntry, np.ndarray]] = {}
    for k in range(n_steps):
        entry = brir_set.nearest(step_angles[k], traj.elevation, warn=False)
        key = id(entry)
        if key in grouped:
            grouped[key] = (entry, grouped[key][1] + weights[k])
        else:
            grouped[key] = (entry, weights[k].copy())
    stem = sum(spatialize(speech * w, entry, gain) for entry, w in grouped.values())
    return SceneInstance(
        mixture=stem.copy(), stems=[stem], truth_angles=[float(step_angles[0])],
        noise_present=False, angle_tracks=[step_angles], step_s=traj.step_s,
    )


def split_brir_sets(sets: list[BrirSet], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, list[BrirSet]]:
    """Disjoint train/val/test split at the level of whole BRIR configurations."""
    if len(sets) < 3:
        raise InvalidSpec("need at least three BRIR sets for a three-way split")
    order = np.random.default_rng(seed).permutation(len(sets))
    n_val = max(1, int(round(fractions[1] * len(sets))))
    n_test = max(1, int(round(fractions[2] * len(sets))))
    n_train = len(sets) - n_val - n_test
    idx = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
           "test": order[n_train + n_val:]}
    return {k: [sets[i] for i in v] for k, v in idx.items()}


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(
    corpus,
    brir_sets: list[BrirSet],
    count: int,
    out_dir,
    noise_prob: float = 0.5,
    seed: int = 0,
    noise_corpus=None,
    n_sources=(2, 3),
    gain_range=GAIN_RANGE,
    max_duration_s: float | None = None,
    half_bin_deg: float = 5.0,
    min_separation_deg: float = 0.0,
) -> dict:
    """Render ``count`` scenes to ``out_dir`` and return (and write) the dataset manifest.

    Every record draws from its own RNG seeded by ``(seed, index)``, so the
    output does not depend on generation order.
    """
    files = load_corpus(corpus)
    if not brir_sets:
        raise EmptyCorpus("no BRIR sets given")
    noise_files = load_corpus(noise_corpus) if noise_corpus is not None else None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        rng = _record_rng(seed, i)
        brir = brir_sets[int(rng.integers(len(brir_sets)))]
        k = int(rng.choice(list(n_sources)))
        azimuths = _draw_azimuths(brir.azimuths, k, rng, min_separation_deg)
        picks = rng.choice(len(files), size=k, replace=len(files) < k)
        speech = []
        for p in picks:
            s = wav_read(files[int(p)])
            if s.ndim != 1:
                s = s.mean(axis=0)
            if max_duration_s is not None:
                s = s[: int(max_duration_s * SAMPLE_RATE)]
            speech.append(s)
        gains = [float(g) for g in rng.uniform(*gain_range, size=k)]
        with_noise = bool(rng.random() < noise_prob)
        noise = None
        if with_noise:
            dur = max(s.size for s in speech) / SAMPLE_RATE + 0.01
            if noise_files:
                noise = wav_read(noise_files[int(rng.integers(len(noise_files)))])
            else:
                noise = synthetic_noise(dur, rng)
        spec = SceneSpec(speech, gains, [(float(a), 0.0) for a in azimuths], brir,
                         noise=noise, noise_present=with_noise, seed=seed)
        scene = synthesize_scene(spec)
        # separator-evaluation target: 60% an occupied azimuth, 40% an empty one
        if rng.random() < 0.6:
            target, has_source = float(rng.choice(scene.truth_angles)), True
        else:
            empty = [a for a in brir.azimuths
                     if all(wrap_diff(a, t) > half_bin_deg for t in scene.truth_angles)]
            target, has_source = float(rng.choice(empty)), False
        rec_dir = out_dir / f"scene_{i:05d}"
        wav_write(rec_dir / "mixture.wav", scene.mixture)
        stem_paths = []
        for j, stem in enumerate(scene.stems):
            wav_write(rec_dir / f"stem_{j}.wav", stem)
            stem_paths.append(f"{rec_dir.name}/stem_{j}.wav")
        records.append({
            "index": i,
            "brir_set": brir.name,
            "sources": [{"file": str(files[int(p)]), "gain": g} for p, g in zip(picks, gains)],
            "angles": [float(a) for a in scene.truth_angles],
            "noise": with_noise,
            "mixture_path": f"{rec_dir.name}/mixture.wav",
            "stem_paths": stem_paths,
            "target_angle": target,
            "target_has_source": has_source,
        })
    manifest = {"seed": seed, "count": count, "noise_prob": noise_prob, "max_duration_s": max_duration_s,
                "brir_sets": [b.name for b in brir_sets], "records": records}
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _draw_azimuths(choices: np.ndarray, k: int, rng: np.random.Generator,
                   min_sep: float) -> list[float]:
    for _ in range(1000):
        picks = rng.choice(choices, size=k, replace=False)
        if all(wrap_diff(a, b) >= min_sep for i, a in enumerate(picks) for b in picks[:i]):
            return [float(a) for a in picks]
    raise InvalidSpec(f"cannot place {k} sources {min_sep} degrees apart on this grid")


def load_scene_record(manifest_path, index: int) -> SceneInstance:
    """Reload one generated record (mixture, stems, angles) from a dataset manifest."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    rec = doc["records"][index]
    return scene_from_record(rec, manifest_path.parent)


def scene_from_record(rec: dict, root) -> SceneInstance:
    root = Path(root)
    mixture = _load(root / rec["mixture_path"], "mixture")
    stems = [_load(root / p, "stem") for p in rec.get("stem_paths", [])]
    return SceneInstance(mixture, stems, list(rec.get("angles", [])), bool(rec.get("noise", False)))
