"""Request and response models shared by the HTTP service and the CLI."""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

from ..pipeline import PipelineConfig


class SceneInput(BaseModel):
    """A scene is either a record of a generated dataset or a bare mixture WAV."""

    dataset: Optional[str] = Field(None, description="dataset.json written by synth")
    index: int = 0
    mixture: Optional[str] = Field(None, description="binaural mixture WAV")


class SynthRequest(BaseModel):
    out_dir: str
    count: int = Field(10, ge=1)
    seed: int = 0
    corpus: Optional[str] = Field(None, description="speech directory or corpus.json; synthetic if omitted")
    corpus_files: int = Field(8, ge=1)
    brir_manifest: Optional[str] = None
    ild_db: float = 6.0
    fractional: bool = False
    noise_prob: float = Field(0.5, ge=0.0, le=1.0)
    n_sources: list[int] = [2, 3]
    min_separation_deg: float = 0.0
    max_duration_s: Optional[float] = None
    gain_min: float = Field(0.2, ge=0.2, le=1.0)
    gain_max: float = Field(1.0, ge=0.2, le=1.0)


class SynthResponse(BaseModel):
    manifest: str
    count: int
    corpus: str


class SeparateRequest(BaseModel):
    scene: SceneInput
    out_dir: str
    separator: Literal["phase-mask", "oracle"] = "phase-mask"
    n_bins: int = 36
    workers: int = Field(1, ge=1)


class EstimateOut(BaseModel):
    angle_deg: float
    energy: float
    path: str


class SeparateResponse(BaseModel):
    estimates: list[EstimateOut]
    precision: Optional[float] = None
    recall: Optional[float] = None


class RenderRequest(BaseModel):
    mono: str = Field(..., description="mono (translated) speech WAV")
    out: str
    method: Literal["duplicate", "hrtf", "hrtf-ild"] = "hrtf-ild"
    angle: float = 0.0
    stem: Optional[str] = Field(None, description="separated binaural stem the cues are taken from")
    ild_db: Optional[float] = Field(None, description="cue ILD when no stem is given")
    delay_chunks: int = Field(0, ge=0)
    hrtf_manifest: Optional[str] = None
    per_band_ild: bool = False


class RenderResponse(BaseModel):
    out: str
    n_samples: int
    ild_db: float


class PipelineRequest(BaseModel):
    scene: SceneInput
    out_dir: str
    config: Optional[dict] = None
    config_path: Optional[str] = None


class PipelineResponse(BaseModel):
    out_dir: str
    report: dict


class PolicyRequest(BaseModel):
    streams: Optional[str] = Field(None, description="oracle-stream JSON; synthetic if omitted")
    chunk_ms: float = Field(960.0, gt=0)
    n_synthetic: int = 50
    seed: int = 0
    out: Optional[str] = None


class PolicyResponse(BaseModel):
    al_s: float
    bleu: float
    n_writes: int
    chunk_ms: float


class EvalRequest(BaseModel):
    dataset: str
    out_dir: str
    separator: Literal["phase-mask", "oracle"] = "oracle"
    method: Literal["duplicate", "hrtf", "hrtf-ild"] = "hrtf-ild"
    limit: Optional[int] = None
    streams: Optional[str] = None
    chunk_ms: float = 960.0
    hrtf_manifest: Optional[str] = None


class EvalResponse(BaseModel):
    precision: Optional[float] = None
    recall: Optional[float] = None
    aoa_median_deg: Optional[float] = None
    aoa_p90_deg: Optional[float] = None
    si_sdri_mean_db: Optional[float] = None
    ditd_mean_us: Optional[float] = None
    dild_mean_db: Optional[float] = None
    al_s: Optional[float] = None
    bleu: Optional[float] = None


class ProfileRequest(BaseModel):
    n_bins: int = 36
    n_sources: int = 2
    warmup: int = 10
    measure: int = 200
    method: Literal["duplicate", "hrtf", "hrtf-ild"] = "hrtf-ild"
    out: Optional[str] = None


class StageTiming(BaseModel):
    mean_ms: float
    rtf: float


class ProfileResponse(BaseModel):
    chunk_ms: float
    stages: dict[str, StageTiming]
    cumulative_rtf: float
    warmup: int
    measure: int


def default_config() -> dict:
    return PipelineConfig().to_dict()
