"""Search-based joint localisation and separation over an azimuth grid.

For every grid angle the mixture is time-aligned for that direction and
streamed through a separator in 640-sample hops; outputs that survive a
windowed power gate become candidates, and candidates that look like copies
of a louder one (adjacent-bin duplicates, reflections) are folded together
by segment-wise similarity clustering.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .audio import (
    DEFAULT_STFT,
    SAMPLE_RATE,
    StftConfig,
    as_binaural,
    fractional_delay,
    lagged_correlation,
)

log = logging.getLogger(__name__)

HOP = 640


def wrap_diff(a: float, b: float) -> float:
    """Absolute angular distance in degrees, in [0, 180]."""
    d = (a - b) % 360.0
    return min(d, 360.0 - d)


def wrap180(a: float) -> float:
    return (a + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class AngularGrid:
    n_bins: int = 36

    def __post_init__(self):
        if self.n_bins <= 0 or 360 % self.n_bins:
            raise ValueError("n_bins must divide 360")

    @property
    def width(self) -> float:
        return 360.0 / self.n_bins

    @property
    def half_width(self) -> float:
        return 180.0 / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.width

    def bin_of(self, azimuth: float) -> int:
        # bins are [c - w/2, c + w/2); the upper edge belongs to the next bin
        return int(math.floor((azimuth % 360.0) / self.width + 0.5)) % self.n_bins


@dataclass(frozen=True)
class ArrayGeometry:
    d: float = 0.18
    c: float = 340.0

    def __post_init__(self):
        if self.d <= 0 or self.c <= 0:
            raise ValueError("mic distance and sound speed must be positive")


def tdoa(angle: float, geom: ArrayGeometry = ArrayGeometry()) -> float:
    """Far-field inter-channel delay in seconds (right lags left for 0 < angle < 180)."""
    return geom.d * math.sin(math.radians(angle)) / geom.c


def align_to_angle(x, angle: float, geom: ArrayGeometry = ArrayGeometry()) -> np.ndarray:
    """Advance the right channel by ``tdoa(angle)`` so a source there is time-aligned."""
    x = as_binaural(x)
    out = x.copy()
    out[1] = fractional_delay(x[1], -tdoa(angle, geom))
    return out


def ipd_ild_features(spec_l, spec_r, eps: float = 1e-8):
    """Per-bin IPD in (-pi, pi] and ILD in dB, right relative to left."""
    spec_l = np.asarray(spec_l)
    spec_r = np.asarray(spec_r)
    if spec_l.shape != spec_r.shape:
        raise ValueError("spectrogram shapes differ")
    ipd = np.angle(spec_r * np.conj(spec_l))
    ipd = np.where(ipd <= -np.pi, ipd + 2 * np.pi, ipd)
    ild = 20 * np.log10((np.abs(spec_r) + eps) / (np.abs(spec_l) + eps))
    return ipd, ild


class Separator:
    """Streaming separator contract.

    ``process`` receives one aligned binaural hop of 640 samples and returns
    the binaural source at ``angle`` in the original (unaligned) channel
    timing, ``latency`` samples late. It must be causal and return zeros when
    nothing sits at ``angle``. All mutable state lives in the object returned
    by ``init`` so one separator can serve every grid bin concurrently.
    """

    latency = 0

    def init(self, input_latency: int = 0):
        return {}

    def process(self, state, chunk: np.ndarray, angle: float) -> np.ndarray:
        raise NotImplementedError


class OracleSeparator(Separator):
    """Ground-truth stand-in: emits the true stems of sources inside the target bin.

    ``angles`` holds one azimuth per source, or for moving sources an array of
    per-step azimuths with ``step_s`` seconds per step. ``input_latency`` is the
    delay the caller has already added to the stream (e.g. a causal aligner),
    and the oracle reproduces it so its output lines up like a real separator's.
    """

    def __init__(self, stems, angles, n_bins: int = 36, step_s: float | None = None):
        self.stems = [as_binaural(s) for s in stems]
        self.tracks = [np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in angles]
        self.tol = 180.0 / n_bins
        self.step = int(round(step_s * SAMPLE_RATE)) if step_s else None

    def init(self, input_latency: int = 0):
        return {"i": 0, "offset": int(input_latency)}

    def _angle_at(self, track: np.ndarray, center: int) -> float:
        if track.size == 1 or self.step is None:
            return float(track[0])
        return float(track[int(np.clip(center // self.step, 0, track.size - 1))])

    def process(self, state, chunk, angle):
        n = np.shape(chunk)[-1]
        start = state["i"] * n - state["offset"]
        state["i"] += 1
        out = np.zeros((2, n))
        for stem, track in zip(self.stems, self.tracks):
            if wrap_diff(self._angle_at(track, start + n // 2), angle) > self.tol + 1e-9:
                continue
            lo, hi = max(start, 0), min(start + n, stem.shape[1])
            if hi > lo:
                out[:, lo - start : hi - start] += stem[:, lo:hi]
        return out


class PhaseMaskSeparator(Separator):
    """IPD-threshold masking baseline.

    Each hop is joined with the previous 120 input samples into a 760-sample
    frame, masked per frequency bin (1 where |IPD| < ``tau_phase``, else
    ``floor``), un-aligned by a phase rotation of the right channel and
    overlap-added. Output is ``window_len - hop_len`` samples late.
    """

    def __init__(self, geom: ArrayGeometry = ArrayGeometry(), tau_phase: float = 0.35,
                 floor: float = 0.05, cfg: StftConfig = DEFAULT_STFT):
        if cfg.window_len > 2 * cfg.hop_len:
            raise ValueError("phase-mask separator assumes at most two overlapping frames")
        self.geom = geom
        self.tau_phase = tau_phase
        self.floor = floor
        self.cfg = cfg
        self.latency = cfg.window_len - cfg.hop_len
        self.win = cfg.analysis_window()
        hop, ov = cfg.hop_len, self.latency
        norm = self.win[:hop] ** 2
        norm[:ov] += self.win[hop:] ** 2
        self.inv_norm = 1.0 / norm
        self.freqs = np.fft.rfftfreq(cfg.fft_len, 1.0 / SAMPLE_RATE)

    def init(self, input_latency: int = 0):
        return {"hist": np.zeros((2, self.latency)), "tail": np.zeros((2, self.latency))}

    def process(self, state, chunk, angle):
        cfg = self.cfg
        frame = np.concatenate([state["hist"], chunk], axis=1)
        state["hist"] = frame[:, -self.latency:]
        spec = np.fft.rfft(frame * self.win, n=cfg.fft_len)
        ipd = np.angle(spec[1] * np.conj(spec[0]))
        mask = np.where(np.abs(ipd) < self.tau_phase, 1.0, self.floor)
        spec = spec * mask
        spec[1] *= np.exp(-2j * np.pi * self.freqs * tdoa(angle, self.geom))
        y = np.fft.irfft(spec, n=cfg.fft_len)[:, : cfg.window_len] * self.win
        out = y[:, : cfg.hop_len].copy()
        out[:, : self.latency] += state["tail"]
        state["tail"] = y[:, cfg.hop_len :].copy()
        return out * self.inv_norm


def windowed_power(stem, window_s: float = 0.75) -> np.ndarray:
    """Mean square (averaged over channels) of every full window; whole-signal mean if shorter."""
    x = np.asarray(stem, dtype=np.float64)
    p = (x * x).mean(axis=0) if x.ndim == 2 else x * x
    w = int(round(window_s * SAMPLE_RATE))
    if p.size == 0:
        return np.zeros(1)
    if p.size <= w:
        return np.array([p.mean()])
    c = np.concatenate([[0.0], np.cumsum(p)])
    return (c[w:] - c[:-w]) / w


def power_gate(stem, threshold: float = 1e-2, window_s: float = 0.75) -> bool:
    return bool(np.max(windowed_power(stem, window_s)) >= threshold)


@dataclass
class CandidateSource:
    angle: float
    stem: np.ndarray
    energy: float


@dataclass
class SourceEstimate:
    angle: float
    stem: np.ndarray
    energy: float = 0.0


@dataclass(frozen=True)
class ClusterConfig:
    segment_s: float = 0.75
    corr_threshold: float = 0.7
    fraction: float = 0.5
    power_threshold: float = 1e-2
    max_lag_s: float = 1e-3
    active_floor: float = 1e-4  # mean square below which a segment is treated as silent


def _stream_bin(x, angle, geom, separator, hop):
    aligned = align_to_angle(x, angle, geom)
    n = aligned.shape[1]
    total = n + separator.latency
    n_hops = -(-total // hop)
    padded = np.pad(aligned, ((0, 0), (0, n_hops * hop - n)))
    state = separator.init(0)
    out = np.concatenate(
        [separator.process(state, padded[:, k * hop:(k + 1) * hop], angle) for k in range(n_hops)],
        axis=1,
    )
    return out[:, separator.latency : separator.latency + n]


def search(x, grid: AngularGrid = AngularGrid(), geom: ArrayGeometry = ArrayGeometry(),
           separator: Separator | None = None, threshold: float = 1e-2,
           window_s: float = 0.75, workers: int = 1, hop: int = HOP) -> list[CandidateSource]:
    """Run the separator at every bin centre and keep the outputs that pass the power gate."""
    x = as_binaural(x)
    if separator is None:
        separator = PhaseMaskSeparator(geom)

    def run(angle):
        try:
            return _stream_bin(x, angle, geom, separator, hop)
        except Exception:  # one bad bin must not sink the search
            log.exception("separator failed at %.1f deg", angle)
            return None

    angles = [float(a) for a in grid.centers]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outputs = list(pool.map(run, angles))
    else:
        outputs = [run(a) for a in angles]
    return gate_candidates(angles, outputs, threshold, window_s)


def gate_candidates(angles, outputs, threshold=1e-2, window_s=0.75) -> list[CandidateSource]:
    found = []
    for angle, out in zip(angles, outputs):
        if out is None or not power_gate(out, threshold, window_s):
            continue
        found.append(CandidateSource(angle, out, float(np.mean(out * out))))
    return found


def segment_similarity(a, b, cfg: ClusterConfig = ClusterConfig()) -> float:
    """Fraction of jointly active segments whose left channels correlate above threshold."""
    a = np.asarray(a)[0]
    b = np.asarray(b)[0]
    n = min(a.size, b.size)
    seg = int(round(cfg.segment_s * SAMPLE_RATE))
    bounds = [(k, k + seg) for k in range(0, n - seg + 1, seg)] or [(0, n)]
    max_lag = int(math.floor(cfg.max_lag_s * SAMPLE_RATE + 1e-9))
    compared = hits = 0
    for lo, hi in bounds:
        sa, sb = a[lo:hi], b[lo:hi]
        if np.mean(sa * sa) < cfg.active_floor or np.mean(sb * sb) < cfg.active_floor:
            continue
        compared += 1
        scale = np.linalg.norm(sa) * np.linalg.norm(sb)
        if np.max(lagged_correlation(sa, sb, max_lag)) / scale >= cfg.corr_threshold:
            hits += 1
    return hits / compared if compared else 0.0


def _energy_order(candidates):
    """Descending energy; exact ties (mirror bins see identical input) prefer the frontal angle."""
    order = sorted(candidates, key=lambda c: -c.energy)
    out, i = [], 0
    while i < len(order):
        j = i + 1
        while j < len(order) and abs(order[j].energy - order[i].energy) <= 1e-9 * order[i].energy:
            j += 1
        out.extend(sorted(order[i:j], key=lambda c: (abs(wrap180(c.angle)), c.angle)))
        i = j
    return out


def cluster(candidates, cfg: ClusterConfig = ClusterConfig()) -> list[SourceEstimate]:
    clusters: list[SourceEstimate] = []
    for cand in _energy_order(candidates):
        if any(segment_similarity(cand.stem, c.stem, cfg) >= cfg.fraction for c in clusters):
            continue
        clusters.append(SourceEstimate(cand.angle, cand.stem, cand.energy))
    return clusters


def localize_and_separate(x, grid=AngularGrid(), geom=ArrayGeometry(), separator=None,
                          cluster_cfg: ClusterConfig = ClusterConfig(), window_s: float = 0.75,
                          workers: int = 1) -> list[SourceEstimate]:
    cands = search(x, grid, geom, separator, cluster_cfg.power_threshold, window_s, workers)
    return cluster(cands, cluster_cfg)


def bandlimited_delay_taps(delay: float, half_len: int = 24, cutoff_hz: float = 7600.0) -> np.ndarray:
    """Causal Kaiser-windowed sinc FIR delaying by ``delay`` samples (needs ``delay >= half_len``)."""
    if delay < half_len:
        raise ValueError("delay too small for a causal kernel of this length")
    n = np.arange(int(math.ceil(delay)) + half_len + 1)
    x = n - delay
    fc = 2 * cutoff_hz / SAMPLE_RATE
    beta = 8.0
    r = np.clip(x / half_len, -1.0, 1.0)
    window = np.where(np.abs(x) <= half_len, np.i0(beta * np.sqrt(1.0 - r * r)) / np.i0(beta), 0.0)
    h = fc * np.sinc(fc * x) * window
    return h / h.sum()


class StreamingLocSep:
    """Hop-by-hop search engine for live streams.

    Alignment is causal: the left channel is delayed by ``lookahead`` samples
    and the right by ``lookahead - tdoa`` through a 7.6 kHz band-limited FIR,
    so every bin sees an aligned stream ``lookahead`` samples late. Outputs
    from :meth:`push` are therefore ``latency`` samples behind the input.
    """

    def __init__(self, grid: AngularGrid = AngularGrid(), geom: ArrayGeometry = ArrayGeometry(),
                 separator: Separator | None = None, lookahead: int = 40, half_len: int = 24,
                 workers: int = 1):
        self.grid = grid
        self.geom = geom
        self.separator = separator or PhaseMaskSeparator(geom)
        self.angles = [float(a) for a in grid.centers]
        self.lookahead = lookahead
        self.latency = lookahead + self.separator.latency
        taps = [bandlimited_delay_taps(lookahead - tdoa(a, geom) * SAMPLE_RATE, half_len)
                for a in self.angles]
        width = max(t.size for t in taps)
        self.taps = np.zeros((len(taps), width))
        for i, t in enumerate(taps):
            self.taps[i, : t.size] = t
        self.hist = np.zeros((2, width - 1))
        self.states = [self.separator.init(lookahead) for _ in self.angles]
        self.workers = workers
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None
        self.hops_in = 0

    def push(self, hop_block) -> np.ndarray:
        """Consume one binaural hop; return per-bin outputs of shape ``(n_bins, 2, hop)``."""
        hop_block = as_binaural(hop_block)
        n = hop_block.shape[1]
        ext = np.concatenate([self.hist, hop_block], axis=1)
        self.hist = ext[:, n:]
        width = self.taps.shape[1]
        left = ext[0, width - 1 - self.lookahead : width - 1 - self.lookahead + n]
        frames = np.lib.stride_tricks.sliding_window_view(ext[1], width)[:n]
        right = frames[:, ::-1] @ self.taps.T  # (n, n_bins)
        self.hops_in += 1

        def run(i):
            chunk = np.stack([left, right[:, i]])
            return self.separator.process(self.states[i], chunk, self.angles[i])

        idx = range(len(self.angles))
        outs = list(self._pool.map(run, idx)) if self._pool else [run(i) for i in idx]
        return np.stack(outs)

    def close(self):
        if self._pool:
            self._pool.shutdown()
