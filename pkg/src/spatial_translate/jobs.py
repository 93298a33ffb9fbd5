"""Job runners behind both the HTTP endpoints and the in-process CLI.

Every runner takes a request model and returns a response model, so the two
front ends stay thin and cannot drift apart.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, as_binaural, wav_read, wav_write
from .corpus import write_synthetic_corpus
from .errors import ConfigError, DataError, MissingAsset
from .locsep import AngularGrid, ArrayGeometry, OracleSeparator, PhaseMaskSeparator, localize_and_separate
from .metrics import (
    EvalReport,
    RenderReport,
    aggregate,
    count_match,
    delta_ild,
    delta_itd,
    separation_report,
)
from .pipeline import (
    TRANS_CHUNK,
    PipelineConfig,
    chunk_cues,
    dsp_stages,
    profile_rtf,
    run_pipeline,
)
from .policy import load_streams, simulate_corpus, synthetic_streams
from .render import (
    GenericHrtfTable,
    RenderMethod,
    SpatialCues,
    extract_cues,
    reconcile_delay,
    render,
    synthetic_hrtf_table,
)
from .scene import BrirSet, SceneInstance, generate_dataset, load_scene_record, synthetic_brir_set
from .service import schemas as S

log = logging.getLogger(__name__)


def _scene(inp: S.SceneInput) -> SceneInstance:
    if inp.dataset:
        path = Path(inp.dataset)
        if not path.exists():
            raise MissingAsset(f"dataset manifest {path} not found")
        try:
            return load_scene_record(path, inp.index)
        except IndexError:
            raise DataError(f"dataset has no record {inp.index}") from None
    if inp.mixture:
        path = Path(inp.mixture)
        if not path.exists():
            raise MissingAsset(f"mixture {path} not found")
        return SceneInstance(as_binaural(wav_read(path)), [], [], False)
    raise ConfigError("scene needs either a dataset record or a mixture WAV")


def _table(manifest: str | None) -> GenericHrtfTable:
    return GenericHrtfTable.from_manifest(manifest) if manifest else synthetic_hrtf_table()


def synth(req: S.SynthRequest) -> S.SynthResponse:
    out = Path(req.out_dir).resolve()
    if req.corpus:
        corpus = Path(req.corpus).resolve()
    else:
        corpus = write_synthetic_corpus(out / "corpus", req.corpus_files, seed=req.seed)
    if req.brir_manifest:
        brirs = BrirSet.from_manifest(req.brir_manifest)
    else:
        brirs = synthetic_brir_set(ild_db=req.ild_db, fractional=req.fractional)
    if any(k not in (2, 3) for k in req.n_sources):
        raise ConfigError("scenes hold 2 or 3 sources")
    if req.gain_min > req.gain_max:
        raise ConfigError("gain_min exceeds gain_max")
    generate_dataset(corpus, [brirs], req.count, out, req.noise_prob, req.seed,
                     n_sources=tuple(req.n_sources), max_duration_s=req.max_duration_s,
                     min_separation_deg=req.min_separation_deg, gain_range=(req.gain_min, req.gain_max))
    return S.SynthResponse(manifest=str(out / "dataset.json"), count=req.count, corpus=str(corpus))


def _separator(kind: str, scene: SceneInstance, n_bins: int, geom: ArrayGeometry):
    if kind == "oracle":
        if not scene.stems:
            raise ConfigError("the oracle separator needs a dataset scene with stems")
        return OracleSeparator(scene.stems, scene.truth_angles, n_bins)
    return PhaseMaskSeparator(geom)


def separate(req: S.SeparateRequest) -> S.SeparateResponse:
    scene = _scene(req.scene)
    geom = ArrayGeometry()
    sep = _separator(req.separator, scene, req.n_bins, geom)
    ests = localize_and_separate(scene.mixture, AngularGrid(req.n_bins), geom, sep, workers=req.workers)
    out = Path(req.out_dir)
    items = []
    for i, e in enumerate(ests):
        path = out / f"estimate_{i}.wav"
        wav_write(path, e.stem)
        items.append(S.EstimateOut(angle_deg=e.angle, energy=e.energy, path=str(path)))
    resp = S.SeparateResponse(estimates=items)
    if scene.truth_angles:
        m = count_match([e.angle for e in ests], scene.truth_angles, 180.0 / req.n_bins)
        resp.precision, resp.recall = m.precision, m.recall
    out.mkdir(parents=True, exist_ok=True)
    (out / "estimates.json").write_text(resp.model_dump_json(indent=2))
    return resp


def render_job(req: S.RenderRequest) -> S.RenderResponse:
    mono = wav_read(req.mono)
    if mono.ndim != 1:
        mono = mono[0]
    method = RenderMethod(req.method)
    table = None if method is RenderMethod.DUPLICATE else _table(req.hrtf_manifest)
    n_chunks = -(-mono.size // TRANS_CHUNK)
    if method is RenderMethod.GENERIC_HRTF_ILD and not req.stem and req.ild_db is None:
        raise ConfigError("hrtf-ild needs a separated stem or an explicit ild_db")
    if req.stem:
        stem = as_binaural(wav_read(req.stem))
        extract_cues(stem, req.angle)  # rejects silent stems
        cue_stream = chunk_cues(stem, req.angle, max(n_chunks + req.delay_chunks, 1), req.per_band_ild)
    else:
        ild = 10 ** ((req.ild_db or 0.0) / 20)
        cue_stream = [SpatialCues(req.angle, ild)]
    padded = np.pad(mono, (0, n_chunks * TRANS_CHUNK - mono.size))
    chunks = [padded[c * TRANS_CHUNK : (c + 1) * TRANS_CHUNK] for c in range(n_chunks)]
    if req.delay_chunks == 0 and len(cue_stream) == 1:
        out = render(mono, method, req.angle, cue_stream[0], table)
    else:
        out = reconcile_delay(cue_stream, chunks, req.delay_chunks, method, table)
    wav_write(req.out, out)
    ild_db = float(20 * np.log10(cue_stream[0].ild_linear))
    return S.RenderResponse(out=str(req.out), n_samples=int(out.shape[1]), ild_db=ild_db)


def pipeline_job(req: S.PipelineRequest) -> S.PipelineResponse:
    if req.config is not None and req.config_path is not None:
        raise ConfigError("give config or config_path, not both")
    if req.config_path:
        cfg = PipelineConfig.load(req.config_path)
    elif req.config is not None:
        cfg = PipelineConfig.from_dict({"schema_version": 1, **req.config})
    else:
        cfg = PipelineConfig()
    scene = _scene(req.scene)
    truth = (scene.stems, scene.truth_angles) if scene.stems else None
    result = run_pipeline(scene.mixture, cfg, truth=truth, out_dir=req.out_dir)
    report = result.report()
    if scene.truth_angles:
        m = count_match([s.angle for s in result.sources], scene.truth_angles, 180.0 / cfg.n_bins)
        report["metrics"] = {"precision": m.precision, "recall": m.recall,
                             "angular_errors_deg": m.errors}
        (Path(req.out_dir) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return S.PipelineResponse(out_dir=str(req.out_dir), report=report)


def policy_job(req: S.PolicyRequest) -> S.PolicyResponse:
    items = load_streams(req.streams) if req.streams else synthetic_streams(req.n_synthetic, req.seed)
    summary = simulate_corpus(items, req.chunk_ms / 1000.0)
    resp = S.PolicyResponse(al_s=summary.al_s, bleu=summary.bleu, n_writes=summary.n_writes,
                            chunk_ms=req.chunk_ms)
    if req.out:
        Path(req.out).parent.mkdir(parents=True, exist_ok=True)
        Path(req.out).write_text(resp.model_dump_json(indent=2))
    return resp


def _speech_for(rec: dict, j: int, max_duration_s) -> np.ndarray:
    path = Path(rec["sources"][j]["file"])
    if not path.exists():
        raise MissingAsset(f"source speech {path} not found")
    s = wav_read(path)
    if s.ndim != 1:
        s = s.mean(axis=0)
    if max_duration_s is not None:
        s = s[: int(max_duration_s * SAMPLE_RATE)]
    return s


def eval_job(req: S.EvalRequest) -> S.EvalResponse:
    path = Path(req.dataset)
    if not path.exists():
        raise MissingAsset(f"dataset manifest {path} not found")
    doc = json.loads(path.read_text())
    records = doc["records"][: req.limit] if req.limit else doc["records"]
    method = RenderMethod(req.method)
    table = None if method is RenderMethod.DUPLICATE else _table(req.hrtf_manifest)
    geom = ArrayGeometry()
    grid = AngularGrid()
    seps, renders = [], []
    for i, rec in enumerate(records):
        scene = load_scene_record(path, rec["index"])
        sep = _separator(req.separator, scene, grid.n_bins, geom)
        ests = localize_and_separate(scene.mixture, grid, geom, sep)
        rep = separation_report(ests, scene.truth_angles, scene.stems, scene.mixture, grid.half_width)
        seps.append(rep)
        m = count_match([e.angle for e in ests], scene.truth_angles, grid.half_width)
        for ei, tj in m.pairs:
            speech = _speech_for(rec, tj, doc.get("max_duration_s"))
            try:
                cues = extract_cues(ests[ei].stem, ests[ei].angle, table)
            except DataError:
                continue
            out = render(speech, method, ests[ei].angle, cues, table)
            renders.append(RenderReport(delta_itd(out, scene.stems[tj]), delta_ild(out, scene.stems[tj])))
    al = bleu = None
    if req.streams:
        summary = simulate_corpus(load_streams(req.streams), req.chunk_ms / 1000.0)
        al, bleu = summary.al_s, summary.bleu
    report: EvalReport = aggregate(seps, renders, al, bleu)
    out = Path(req.out_dir)
    report.write(out / "eval.json", out / "eval.csv")
    return S.EvalResponse(**report.to_dict())


def profile_job(req: S.ProfileRequest) -> S.ProfileResponse:
    stages = dsp_stages(req.n_bins, req.n_sources, method=req.method)
    rep = profile_rtf(stages, warmup=req.warmup, measure=req.measure)
    resp = S.ProfileResponse(**rep.to_dict())
    if req.out:
        out = Path(req.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(resp.model_dump_json(indent=2))
        with open(out.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "mean_ms", "rtf"])
            for name, t in rep.stages.items():
                w.writerow([name, t["mean_ms"], t["rtf"]])
            w.writerow(["cumulative", "", rep.cumulative_rtf])
    return resp


RUNNERS = {
    "synth": (S.SynthRequest, synth),
    "separate": (S.SeparateRequest, separate),
    "render": (S.RenderRequest, render_job),
    "pipeline": (S.PipelineRequest, pipeline_job),
    "policy-sim": (S.PolicyRequest, policy_job),
    "eval": (S.EvalRequest, eval_job),
    "profile": (S.ProfileRequest, profile_job),
}
