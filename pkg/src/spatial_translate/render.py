"""Re-spatialisation of translated mono audio.

Direction (ITD) comes from a generic HRTF table looked up at the localised
angle; level difference (ILD) is measured on the separated binaural source
and transferred onto the render, since a generic table gets ILD wrong for
any particular wearer and room.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import (
    SAMPLE_RATE,
    StftConfig,
    as_binaural,
    as_mono,
    convolve,
    istft,
    stft,
    wav_read,
    wav_write,
    xcorr_lag,
)
from .errors import MissingAsset, MissingHrtf, SilentStem
from .locsep import power_gate, wrap_diff
from .scene import BrirSet, crossfade_weights, synthetic_brir_set

EPS = 1e-8
RECONCILE_FADE_S = 0.005
OCTAVE_EDGES_HZ = (0, 125, 250, 500, 1000, 2000, 4000, 8001)
BAND_STFT = StftConfig(window_len=512, hop_len=256, fft_len=512)


class RenderMethod(str, enum.Enum):
    DUPLICATE = "duplicate"
    GENERIC_HRTF = "hrtf"
    GENERIC_HRTF_ILD = "hrtf-ild"


@dataclass
class GenericHrtfTable:
    entries: dict[float, np.ndarray]  # azimuth -> (2, L) pair, elevation 0
    name: str = "generic"

    def __post_init__(self):
        self.entries = {float(az) % 360.0: as_binaural(ir) for az, ir in self.entries.items()}
        az = sorted(self.entries)
        if len(az) < 2:
            raise MissingHrtf("HRTF table needs at least two azimuths")
        gaps = np.diff(az + [az[0] + 360.0])
        if gaps.max() > 15.0 + 1e-9:
            raise ValueError("HRTF table must cover azimuth at least every 15 degrees")

    def nearest(self, azimuth: float) -> tuple[float, np.ndarray]:
        az = min(self.entries, key=lambda a: wrap_diff(a, azimuth))
        return az, self.entries[az]

    def itd_us(self, azimuth: float) -> float:
        _, h = self.nearest(azimuth)
        return xcorr_lag(h[0], h[1]) * 1e6

    @classmethod
    def from_brir_set(cls, brirs: BrirSet) -> "GenericHrtfTable":
        return cls({e.azimuth: e.ir for e in brirs.entries if abs(e.elevation) < 1e-9}, brirs.name)

    def to_manifest(self, path) -> Path:
        path = Path(path)
        wav_dir = path.parent / f"{self.name}_hrtf"
        items = []
        for az, h in sorted(self.entries.items()):
            left, right = wav_dir / f"az{az:06.2f}_L.wav", wav_dir / f"az{az:06.2f}_R.wav"
            wav_write(left, h[0])
            wav_write(right, h[1])
            items.append({"az": az, "left": str(left.relative_to(path.parent)),
                          "right": str(right.relative_to(path.parent))})
        path.write_text(json.dumps({"name": self.name, "entries": items}, indent=2))
        return path

    @classmethod
    def from_manifest(cls, path) -> "GenericHrtfTable":
        path = Path(path)
        if not path.exists():
            raise MissingHrtf(f"HRTF manifest {path} not found")
        doc = json.loads(path.read_text())
        entries = {}
        for item in doc["entries"]:
            pair = []
            for key in ("left", "right"):
                wav = path.parent / item[key]
                if not wav.exists():
                    raise MissingAsset(f"HRTF file {wav} not found")
                pair.append(wav_read(wav))
            entries[item["az"]] = np.stack(pair)
        return cls(entries, doc.get("name", path.stem))


def synthetic_hrtf_table(ild_db: float = 6.0, az_step: float = 5.0) -> GenericHrtfTable:
    """Generic table built from the free-field head model (integer-sample ITDs)."""
    return GenericHrtfTable.from_brir_set(
        synthetic_brir_set("generic", az_step=az_step, ild_db=ild_db, ir_len=40, base_delay=16))


@dataclass
class SpatialCues:
    angle: float
    ild_linear: float
    itd_us: float = float("nan")
    band_ild: np.ndarray | None = None  # per octave band, when requested

    def __post_init__(self):
        if not self.ild_linear > 0:
            raise ValueError("ILD ratio must be positive")


def l1_ild(stem) -> float:
    stem = as_binaural(stem)
    return float((np.abs(stem[1]).sum() + EPS) / (np.abs(stem[0]).sum() + EPS))


def band_ild(stem, edges=OCTAVE_EDGES_HZ, cfg: StftConfig = BAND_STFT) -> np.ndarray:
    spec = np.abs(stft(as_binaural(stem), cfg))
    freqs = np.fft.rfftfreq(cfg.fft_len, 1.0 / SAMPLE_RATE)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (freqs >= lo) & (freqs < hi)
        out.append((spec[1][:, sel].sum() + EPS) / (spec[0][:, sel].sum() + EPS))
    return np.array(out)


def extract_cues(stem, angle: float, table: GenericHrtfTable | None = None,
                 threshold: float = 1e-2, window_s: float = 0.75, per_band: bool = False) -> SpatialCues:
    stem = as_binaural(stem)
    if not power_gate(stem, threshold, window_s):
        raise SilentStem("stem is below the power gate; no cues to extract")
    itd = table.itd_us(angle) if table is not None else float("nan")
    bands = band_ild(stem) if per_band else None
    return SpatialCues(float(angle), l1_ild(stem), itd, bands)


def _apply_band_ild(out: np.ndarray, target: np.ndarray, edges=OCTAVE_EDGES_HZ,
                    cfg: StftConfig = BAND_STFT) -> np.ndarray:
    n = out.shape[1]
    if n < cfg.window_len:
        return out
    spec = stft(out, cfg)
    freqs = np.fft.rfftfreq(cfg.fft_len, 1.0 / SAMPLE_RATE)
    mag = np.abs(spec)
    for (lo, hi), want in zip(zip(edges[:-1], edges[1:]), target):
        sel = (freqs >= lo) & (freqs < hi)
        have = (mag[1][:, sel].sum() + EPS) / (mag[0][:, sel].sum() + EPS)
        spec[1][:, sel] *= want / have
    right = istft(spec[1], cfg, length=n)
    # istft leaves the first sample (zero window weight) empty; keep the original there
    right[0] = out[1, 0]
    return np.stack([out[0], right])


def render(mono, method: RenderMethod | str, angle: float | None = None,
           cues: SpatialCues | None = None, table: GenericHrtfTable | None = None) -> np.ndarray:
    """Binaural render of ``mono``.

    Duplicate returns ``len(mono)`` samples; HRTF methods return the full
    convolution, ``len(mono) + L - 1``.
    """
    method = RenderMethod(method)
    mono = as_mono(mono)
    if method is RenderMethod.DUPLICATE:
        return np.stack([mono, mono])
    if table is None:
        raise MissingHrtf(f"method {method.value} needs a generic HRTF table")
    if angle is None:
        angle = cues.angle if cues is not None else None
    if angle is None:
        raise ValueError("an angle is needed for HRTF rendering")
    _, h = table.nearest(angle)
    out = np.stack([convolve(mono, h[0]), convolve(mono, h[1])])
    if method is RenderMethod.GENERIC_HRTF_ILD:
        if cues is None:
            raise ValueError("ILD compensation needs extracted cues")
        out[1] *= cues.ild_linear * (np.abs(h[0]).sum() / np.abs(h[1]).sum())
        if cues.band_ild is not None:
            out = _apply_band_ild(out, cues.band_ild)
    return out


def render_tail(method: RenderMethod | str, table: GenericHrtfTable | None) -> int:
    if RenderMethod(method) is RenderMethod.DUPLICATE or table is None:
        return 0
    return next(iter(table.entries.values())).shape[1] - 1


def reconcile_delay(cue_stream: list[SpatialCues], chunks, delay_chunks: int,
                    method: RenderMethod | str = RenderMethod.GENERIC_HRTF_ILD,
                    table: GenericHrtfTable | None = None,
                    fade_s: float = RECONCILE_FADE_S) -> np.ndarray:
    """Render a stream of translated chunks with the cues of the live source.

    Translated chunk ``i`` is played while source chunk ``i + delay_chunks`` is
    coming in, so it is rendered with ``cue_stream[i + delay_chunks]`` (the last
    cue is held when the stream runs out). Cue switches are cross-faded over
    ``fade_s``. Returns one binaural buffer covering all chunks plus the
    HRTF tail.
    """
    if delay_chunks < 0:
        raise ValueError("delay must be non-negative")
    if not cue_stream:
        raise ValueError("empty cue stream")
    chunks = [as_mono(c) for c in chunks]
    lengths = [c.size for c in chunks]
    total = int(sum(lengths))
    tail = render_tail(method, table)
    out = np.zeros((2, total + tail))
    if total == 0:
        return out
    mono = np.concatenate(chunks)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
    fade = int(round(fade_s * SAMPLE_RATE))
    weights = crossfade_weights(total, starts[1:], fade)
    for i, (start, w) in enumerate(zip(starts, weights)):
        lo = max(0, start - fade)
        hi = min(total, start + lengths[i] + fade)
        seg = (mono * w)[lo:hi]
        if not np.any(seg):
            continue
        cue = cue_stream[min(i + delay_chunks, len(cue_stream) - 1)]
        r = render(seg, method, cue.angle, cue, table)
        out[:, lo : lo + r.shape[1]] += r
    return out
