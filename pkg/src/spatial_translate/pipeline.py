"""End-to-end streaming scheduler: 40 ms separation hops, 960 ms translation
chunks through a delaying translator stand-in, and delay-reconciled binaural
rendering per source. Also the real-time-factor profiler."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .audio import SAMPLE_RATE, as_binaural, wav_write
from .errors import ConfigError, SpatialTranslateError
from .locsep import (
    HOP,
    AngularGrid,
    ArrayGeometry,
    ClusterConfig,
    OracleSeparator,
    PhaseMaskSeparator,
    Separator,
    StreamingLocSep,
    cluster,
    gate_candidates,
    localize_and_separate,
)
from .render import (
    GenericHrtfTable,
    RenderMethod,
    SpatialCues,
    band_ild,
    l1_ild,
    reconcile_delay,
    render_tail,
    synthetic_hrtf_table,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRANS_CHUNK = 15360  # 960 ms
CUE_FLOOR = 1e-6  # chunks quieter than this (mean square) keep the previous cue


@dataclass(frozen=True)
class ChunkSchedule:
    sep_hop: int = HOP
    trans_chunk: int = TRANS_CHUNK
    delay: int = 3

    def __post_init__(self):
        if self.sep_hop <= 0 or self.trans_chunk % self.sep_hop:
            raise ConfigError("trans_chunk must be a positive multiple of sep_hop")
        if self.delay < 0:
            raise ConfigError("delay must be non-negative")

    @property
    def hops_per_chunk(self) -> int:
        return self.trans_chunk // self.sep_hop

    @property
    def delay_s(self) -> float:
        return self.delay * self.trans_chunk / SAMPLE_RATE


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    n_bins: int = 36
    separator: str = "phase-mask"  # or "oracle"
    render_method: str = RenderMethod.GENERIC_HRTF_ILD.value
    delay_chunks: int = 3
    translator: str = "identity"  # or "timewarp"
    rate: float = 1.0
    mono_feed: str = "left"  # or "mid"
    lookahead: int = 40
    power_threshold: float = 1e-2
    window_s: float = 0.75
    segment_s: float = 0.75
    corr_threshold: float = 0.7
    retire_s: float = 2.0
    per_band_ild: bool = False
    hrtf_manifest: str | None = None
    generic_ild_db: float = 6.0
    mic_distance_m: float = 0.18
    workers: int = 1
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.separator not in ("phase-mask", "oracle"):
            raise ConfigError(f"unknown separator {self.separator!r}")
        try:
            RenderMethod(self.render_method)
        except ValueError:
            raise ConfigError(f"unknown render method {self.render_method!r}") from None
        if self.translator not in ("identity", "timewarp"):
            raise ConfigError(f"unknown translator mode {self.translator!r}")
        if self.translator == "identity" and self.rate != 1.0:
            raise ConfigError("identity translator needs rate 1.0")
        if not 0.8 <= self.rate <= 1.25:
            raise ConfigError("timewarp rate must lie in [0.8, 1.25]")
        if self.mono_feed not in ("left", "mid"):
            raise ConfigError("mono_feed must be 'left' or 'mid'")
        if self.delay_chunks < 0:
            raise ConfigError("delay_chunks must be non-negative")
        if self.n_bins < 2 or 360 % self.n_bins:
            raise ConfigError("n_bins must divide 360")
        if self.lookahead < 0 or self.workers < 1 or self.retire_s <= 0:
            raise ConfigError("lookahead >= 0, workers >= 1 and retire_s > 0 are required")
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "schema_version" not in doc:
            raise ConfigError("config lacks schema_version")
        try:
            return cls(**doc).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def schedule(self) -> ChunkSchedule:
        return ChunkSchedule(delay=self.delay_chunks)

    @property
    def retire_chunks(self) -> int:
        return int(math.ceil(self.retire_s * SAMPLE_RATE / TRANS_CHUNK - 1e-9))


class DelayTranslator:
    """Translation stand-in: emits each input block ``delay`` ticks later.

    ``identity`` passes content through. ``timewarp`` linearly resamples each
    block to ``1/rate`` of its duration; a shorter result is zero-padded to
    the block, a longer one spills into the next emitted block.
    """

    def __init__(self, delay: int, mode: str = "identity", rate: float = 1.0,
                 block: int = TRANS_CHUNK):
        if delay < 0:
            raise ConfigError("delay must be non-negative")
        if mode not in ("identity", "timewarp"):
            raise ConfigError(f"unknown translator mode {mode!r}")
        if not 0.8 <= rate <= 1.25:
            raise ConfigError("rate must lie in [0.8, 1.25]")
        self.delay, self.mode, self.rate, self.block = delay, mode, rate, block
        self._queue: list[np.ndarray] = [np.zeros(block)] * delay
        self._carry = np.zeros(0)
        self.ticks = 0

    def _warp(self, x: np.ndarray) -> np.ndarray:
        if self.mode == "identity" or self.rate == 1.0:
            return x
        m = int(round(x.size / self.rate))
        pos = np.arange(m) * (x.size / m)
        return np.interp(pos, np.arange(x.size), x)

    def push(self, block) -> np.ndarray:
        """Consume one block and return the block emitted at this tick."""
        x = np.asarray(block, dtype=np.float64)
        if x.size != self.block:
            raise ValueError(f"blocks must be {self.block} samples")
        content = np.concatenate([self._carry, self._warp(x)])
        out = np.zeros(self.block)
        k = min(self.block, content.size)
        out[:k] = content[:k]
        self._carry = content[k:]
        self._queue.append(out)
        self.ticks += 1
        return self._queue.pop(0)

    def flush(self) -> list[np.ndarray]:
        """Blocks still owed after the input ends (delayed blocks plus any spill)."""
        out = list(self._queue)
        self._queue = []
        while self._carry.size:
            blk = np.zeros(self.block)
            k = min(self.block, self._carry.size)
            blk[:k] = self._carry[:k]
            self._carry = self._carry[k:]
            out.append(blk)
        return out


def delay_translator(delay: int, mode: str = "identity", rate: float = 1.0) -> DelayTranslator:
    return DelayTranslator(delay, mode, rate)


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors from a pipeline stage with its name."""
    try:
        yield
    except SpatialTranslateError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
            exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise


@dataclass
class Session:
    start_chunk: int
    end_chunk: int  # exclusive


@dataclass
class SourceOutput:
    angle: float
    separated: np.ndarray  # (2, n) aligned with the input
    rendered: np.ndarray  # (2, m) on the output timeline
    sessions: list[Session]
    cues: list[SpatialCues]


@dataclass
class PipelineResult:
    sources: list[SourceOutput]
    n_samples: int
    n_chunks: int
    hops_consumed: int
    hops_per_chunk: list[int]
    config: PipelineConfig
    metrics: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "n_samples": self.n_samples,
            "n_chunks": self.n_chunks,
            "hops_consumed": self.hops_consumed,
            "hops_per_chunk": self.hops_per_chunk,
            "schedule_ok": all(h == self.config.schedule.hops_per_chunk for h in self.hops_per_chunk),
            "sources": [
                {
                    "index": i,
                    "angle_deg": s.angle,
                    "sessions": [asdict(x) for x in s.sessions],
                    "ild_db": [round(20 * math.log10(c.ild_linear), 6) for c in s.cues],
                }
                for i, s in enumerate(self.sources)
            ],
            "metrics": self.metrics,
        }


def load_table(cfg: PipelineConfig) -> GenericHrtfTable | None:
    if RenderMethod(cfg.render_method) is RenderMethod.DUPLICATE:
        return None
    if cfg.hrtf_manifest:
        return GenericHrtfTable.from_manifest(cfg.hrtf_manifest)
    return synthetic_hrtf_table(cfg.generic_ild_db)


def make_separator(cfg: PipelineConfig, geom: ArrayGeometry, truth=None) -> Separator:
    if cfg.separator == "oracle":
        if truth is None:
            raise ConfigError("the oracle separator needs ground-truth stems and angles")
        stems, angles = truth[0], truth[1]
        step_s = truth[2] if len(truth) > 2 else None
        return OracleSeparator(stems, angles, cfg.n_bins, step_s)
    return PhaseMaskSeparator(geom)


def stream_search(mixture: np.ndarray, cfg: PipelineConfig, separator: Separator,
                  geom: ArrayGeometry) -> tuple[list[np.ndarray], list[float], int, list[int]]:
    """Push the (chunk-padded) mixture hop by hop; return per-bin outputs aligned to the input."""
    grid = AngularGrid(cfg.n_bins)
    sched = cfg.schedule
    engine = StreamingLocSep(grid, geom, separator, lookahead=cfg.lookahead, workers=cfg.workers)
    n = mixture.shape[1]
    n_chunks = -(-n // sched.trans_chunk)
    padded = np.pad(mixture, ((0, 0), (0, n_chunks * sched.trans_chunk - n)))
    lat_hops = -(-engine.latency // sched.sep_hop)
    tail = np.zeros((2, lat_hops * sched.sep_hop))
    stream = np.concatenate([padded, tail], axis=1)
    outs = []
    hops_per_chunk = []
    try:
        for c in range(n_chunks + (1 if lat_hops else 0)):
            count = 0
            for h in range(sched.hops_per_chunk):
                lo = (c * sched.hops_per_chunk + h) * sched.sep_hop
                if lo >= stream.shape[1]:
                    break
                outs.append(engine.push(stream[:, lo : lo + sched.sep_hop]))
                count += 1
            if c < n_chunks:
                hops_per_chunk.append(count)
    finally:
        engine.close()
    full = np.concatenate(outs, axis=2)[:, :, engine.latency : engine.latency + n]
    return list(full), engine.angles, engine.hops_in, hops_per_chunk


def activity(stem: np.ndarray, cfg: PipelineConfig, n_chunks: int) -> np.ndarray:
    """Per translation chunk: does any gate window overlapping the chunk pass the threshold."""
    chunk = TRANS_CHUNK
    win = int(round(cfg.window_s * SAMPLE_RATE))
    x = np.pad(stem, ((0, 0), (0, n_chunks * chunk - stem.shape[1])))
    power = np.mean(x * x, axis=0)
    csum = np.concatenate([[0.0], np.cumsum(power)])
    out = np.zeros(n_chunks, dtype=bool)
    step = HOP
    for c in range(n_chunks):
        lo, hi = c * chunk, (c + 1) * chunk
        for s in range(max(0, lo - win + step), hi, step):
            e = min(s + win, x.shape[1])
            if e - s > 0 and (csum[e] - csum[s]) / (e - s) >= cfg.power_threshold:
                out[c] = True
                break
    return out


def sessions_from_activity(active: np.ndarray, retire_chunks: int) -> list[Session]:
    """Open a session on the first active chunk; retire after ``retire_chunks`` silent chunks.

    A session keeps translating through its trailing silent chunks, so quiet
    tails below the gate are not cut off.
    """
    sessions = []
    start = None
    silent = 0
    for c, a in enumerate(active):
        if a:
            if start is None:
                start = c
            silent = 0
        elif start is not None:
            silent += 1
            if silent >= retire_chunks:
                sessions.append(Session(start, c + 1))
                start, silent = None, 0
    if start is not None:
        sessions.append(Session(start, len(active)))
    return sessions


def chunk_cues(stem: np.ndarray, angle: float, n_chunks: int, per_band: bool = False) -> list[SpatialCues]:
    """One cue per translation chunk; quiet chunks hold the previous cue."""
    x = np.pad(stem, ((0, 0), (0, n_chunks * TRANS_CHUNK - stem.shape[1])))
    cues: list[SpatialCues | None] = []
    for c in range(n_chunks):
        seg = x[:, c * TRANS_CHUNK : (c + 1) * TRANS_CHUNK]
        if np.mean(seg * seg) < CUE_FLOOR:
            cues.append(None)
            continue
        cues.append(SpatialCues(angle, l1_ild(seg), band_ild=band_ild(seg) if per_band else None))
    first = next((q for q in cues if q is not None), SpatialCues(angle, 1.0))
    held, out = first, []
    for q in cues:
        held = q or held
        out.append(held)
    return out


def mono_feed(stem: np.ndarray, mode: str) -> np.ndarray:
    return stem[0] if mode == "left" else 0.5 * (stem[0] + stem[1])


def render_source(stem: np.ndarray, angle: float, cfg: PipelineConfig, n_chunks: int,
                  table: GenericHrtfTable | None, sessions: list[Session] | None = None):
    """Translate and render one separated source; returns (rendered, sessions, cues)."""
    sched = cfg.schedule
    method = RenderMethod(cfg.render_method)
    if sessions is None:
        sessions = sessions_from_activity(activity(stem, cfg, n_chunks), cfg.retire_chunks)
    cues = chunk_cues(stem, angle, n_chunks, cfg.per_band_ild)
    mono = np.pad(mono_feed(stem, cfg.mono_feed), (0, n_chunks * TRANS_CHUNK - stem.shape[1]))
    spill = 0 if cfg.translator == "identity" else int(math.ceil(n_chunks * (1 / cfg.rate - 1))) + 1
    total = (n_chunks + sched.delay + max(spill, 0)) * TRANS_CHUNK + render_tail(method, table)
    out = np.zeros((2, total))
    for s in sessions:
        stub = DelayTranslator(sched.delay, cfg.translator, cfg.rate)
        emitted = []
        for c in range(s.start_chunk, s.end_chunk):
            emitted.append(stub.push(mono[c * TRANS_CHUNK : (c + 1) * TRANS_CHUNK]))
        emitted.extend(stub.flush())
        # drop the D leading silent ticks; translated chunk i is emitted at tick i + D
        translated = emitted[sched.delay :]
        cue_stream = cues[s.start_chunk :]
        r = reconcile_delay(cue_stream, translated, sched.delay, method, table)
        lo = (s.start_chunk + sched.delay) * TRANS_CHUNK
        out[:, lo : lo + r.shape[1]] += r
    return out, sessions, cues


def run_pipeline(mixture, cfg: PipelineConfig | None = None, truth=None,
                 out_dir=None) -> PipelineResult:
    """Stream a binaural mixture through separation, translation stub and rendering.

    ``truth`` is ``(stems, angles[, step_s])`` and is required for the oracle
    separator. When ``out_dir`` is given, per-source WAVs and report.json /
    report.csv are written there.
    """
    cfg = (cfg or PipelineConfig()).validate()
    with stage("input"):
        mixture = as_binaural(mixture)
    geom = ArrayGeometry(d=cfg.mic_distance_m)
    with stage("render-setup"):
        table = load_table(cfg)
    separator = make_separator(cfg, geom, truth)
    with stage("separation"):
        outputs, angles, hops, hops_per_chunk = stream_search(mixture, cfg, separator, geom)
    ccfg = ClusterConfig(segment_s=cfg.segment_s, corr_threshold=cfg.corr_threshold,
                         power_threshold=cfg.power_threshold)
    with stage("clustering"):
        estimates = cluster(gate_candidates(angles, outputs, cfg.power_threshold, cfg.window_s), ccfg)
    n_chunks = len(hops_per_chunk)

    def job(est):
        with stage("render"):
            rendered, sessions, cues = render_source(est.stem, est.angle, cfg, n_chunks, table)
        return SourceOutput(est.angle, est.stem, rendered, sessions, cues)

    if cfg.workers > 1 and len(estimates) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            sources = list(pool.map(job, estimates))
    else:
        sources = [job(e) for e in estimates]
    result = PipelineResult(sources, mixture.shape[1], n_chunks, hops, hops_per_chunk, cfg)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def batch_process(mixture, cfg: PipelineConfig, truth=None) -> list[SourceOutput]:
    """Whole-file reference path: batch search, one session per source spanning the file."""
    cfg = cfg.validate()
    mixture = as_binaural(mixture)
    geom = ArrayGeometry(d=cfg.mic_distance_m)
    table = load_table(cfg)
    separator = make_separator(cfg, geom, truth)
    ccfg = ClusterConfig(segment_s=cfg.segment_s, corr_threshold=cfg.corr_threshold,
                         power_threshold=cfg.power_threshold)
    ests = localize_and_separate(mixture, AngularGrid(cfg.n_bins), geom, separator, ccfg, cfg.window_s)
    n_chunks = -(-mixture.shape[1] // TRANS_CHUNK)
    out = []
    for e in ests:
        r, s, c = render_source(e.stem, e.angle, cfg, n_chunks, table, [Session(0, n_chunks)])
        out.append(SourceOutput(e.angle, e.stem, r, s, c))
    return out


def write_outputs(result: PipelineResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(result.sources):
        wav_write(out_dir / f"source_{i}_separated.wav", s.separated)
        wav_write(out_dir / f"source_{i}_rendered.wav", s.rendered)
    rep = result.report()
    (out_dir / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "angle_deg", "n_sessions", "first_chunk", "last_chunk"])
        for src in rep["sources"]:
            ss = src["sessions"]
            w.writerow([src["index"], src["angle_deg"], len(ss),
                        ss[0]["start_chunk"] if ss else "", ss[-1]["end_chunk"] if ss else ""])
    return out_dir


@dataclass
class RtfReport:
    chunk_ms: float
    stages: dict[str, dict[str, float]]  # name -> {"mean_ms", "rtf"}
    cumulative_rtf: float
    warmup: int
    measure: int

    def to_dict(self) -> dict:
        return asdict(self)


def profile_rtf(stages: dict[str, Callable[[int], object]], chunk_s: float = HOP / SAMPLE_RATE,
                warmup: int = 10, measure: int = 200) -> RtfReport:
    """Time each stage callable (called with the chunk index) per chunk.

    The first ``warmup`` calls are discarded, then the mean over ``measure``
    calls is reported. Stages are timed one after another on one thread.
    """
    if measure < 1 or warmup < 0:
        raise ConfigError("measure >= 1 and warmup >= 0 are required")
    if chunk_s <= 0:
        raise ConfigError("chunk duration must be positive")
    report = {}
    for name, fn in stages.items():
        for i in range(warmup):
            fn(i)
        times = []
        for i in range(warmup, warmup + measure):
            t0 = time.perf_counter()
            fn(i)
            times.append(time.perf_counter() - t0)
        mean = float(np.mean(times))
        report[name] = {"mean_ms": 1e3 * mean, "rtf": mean / chunk_s}
    total = sum(v["rtf"] for v in report.values())
    return RtfReport(1e3 * chunk_s, report, total, warmup, measure)


def dsp_stages(n_bins: int = 36, n_sources: int = 2, seed: int = 0,
               method: str = RenderMethod.GENERIC_HRTF_ILD.value, delay: int = 3,
               workers: int = 1) -> dict[str, Callable[[int], object]]:
    """Per-40 ms-hop closures for the DSP path: phase-mask search over all bins,
    the translator stand-in and rendering of ``n_sources`` streams."""
    from .corpus import synthetic_noise

    rng = np.random.default_rng(seed)
    geom = ArrayGeometry()
    signal = synthetic_noise(30.0, rng, rms=0.1)
    n_hops = signal.shape[1] // HOP
    engine = StreamingLocSep(AngularGrid(n_bins), geom, PhaseMaskSeparator(geom), workers=workers)
    table = synthetic_hrtf_table()
    stubs = [DelayTranslator(delay, block=HOP) for _ in range(n_sources)]
    cue = SpatialCues(30.0, 0.8)

    def hop(i):
        k = i % n_hops
        return signal[:, k * HOP : (k + 1) * HOP]

    def separation(i):
        return engine.push(hop(i))

    def translate(i):
        return [s.push(hop(i)[0]) for s in stubs]

    def render_stage(i):
        return [reconcile_delay([cue], [hop(i)[0]], 0, method, table) for _ in range(n_sources)]

    return {"separation": separation, "translation-stub": translate, "render": render_stage}
