"""FastAPI front end. Each endpoint hands its request model to the matching job runner.

Run with ``uvicorn spatial_translate.service.app:app`` or ``spatial-translate serve``.
"""
from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, jobs
from ..errors import ConfigError, DataError
from . import schemas as S

app = FastAPI(title="spatial-translate", version=__version__)


@app.exception_handler(ConfigError)
async def _config_error(request: Request, exc: ConfigError):
    return JSONResponse(status_code=422, content={"error": "config", "detail": str(exc)})


@app.exception_handler(DataError)
async def _data_error(request: Request, exc: DataError):
    return JSONResponse(status_code=400, content={"error": type(exc).__name__, "detail": str(exc)})


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/synth", response_model=S.SynthResponse)
def synth(req: S.SynthRequest):
    return jobs.synth(req)


@app.post("/separate", response_model=S.SeparateResponse)
def separate(req: S.SeparateRequest):
    return jobs.separate(req)


@app.post("/render", response_model=S.RenderResponse)
def render(req: S.RenderRequest):
    return jobs.render_job(req)


@app.post("/pipeline", response_model=S.PipelineResponse)
def pipeline(req: S.PipelineRequest):
    return jobs.pipeline_job(req)


@app.post("/policy-sim", response_model=S.PolicyResponse)
def policy_sim(req: S.PolicyRequest):
    return jobs.policy_job(req)


@app.post("/eval", response_model=S.EvalResponse)
def evaluate(req: S.EvalRequest):
    return jobs.eval_job(req)


@app.post("/profile", response_model=S.ProfileResponse)
def profile(req: S.ProfileRequest):
    return jobs.profile_job(req)
