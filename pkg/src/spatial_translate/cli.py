"""Command-line client.

Each subcommand builds the same request model the HTTP service accepts and
either runs the job in-process (default) or posts it to ``--server``.
Exit status: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from pydantic import ValidationError

from .errors import ConfigError, DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _scene_args(p):
    p.add_argument("--dataset", help="dataset.json written by synth")
    p.add_argument("--index", type=int, default=0, help="record index in the dataset")
    p.add_argument("--mixture", help="binaural mixture WAV (phase-mask separator only)")


def _scene(a) -> dict:
    return {"dataset": a.dataset, "index": a.index, "mixture": a.mixture}


def _methods(p, default="hrtf-ild"):
    p.add_argument("--method", choices=["duplicate", "hrtf", "hrtf-ild"], default=default)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spatial-translate", description=__doc__.splitlines()[0])
    ap.add_argument("--server", help="base URL of a running service; run in-process if omitted")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", help="speech WAV directory or corpus.json")
    p.add_argument("--brir-manifest")
    p.add_argument("--ild-db", type=float, default=6.0)
    p.add_argument("--fractional", action="store_true", help="fractional-sample ITDs in the BRIRs")
    p.add_argument("--noise-prob", type=float, default=0.5)
    p.add_argument("--n-sources", type=int, nargs="+", default=[2, 3])
    p.add_argument("--min-separation", type=float, default=0.0)
    p.add_argument("--max-duration", type=float)
    p.add_argument("--gain-min", type=float, default=0.2)
    p.add_argument("--gain-max", type=float, default=1.0)

    p = sub.add_parser("separate", help="localise and separate the sources of one scene")
    _scene_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--separator", choices=["phase-mask", "oracle"], default="phase-mask")
    p.add_argument("--bins", type=int, default=36)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("render", help="render mono speech binaurally")
    p.add_argument("--mono", required=True)
    p.add_argument("--out", required=True)
    _methods(p)
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--stem", help="separated binaural stem to take ILD cues from")
    p.add_argument("--ild-db", type=float)
    p.add_argument("--delay-chunks", type=int, default=0)
    p.add_argument("--hrtf", help="generic HRTF table manifest")
    p.add_argument("--per-band", action="store_true", help="octave-band ILD compensation")

    p = sub.add_parser("pipeline", help="run the streaming end-to-end pipeline on one scene")
    _scene_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--separator", choices=["phase-mask", "oracle"])
    p.add_argument("--method", choices=["duplicate", "hrtf", "hrtf-ild"])
    p.add_argument("--delay-chunks", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("policy-sim", help="simulate the READ/WRITE policy on oracle streams")
    p.add_argument("--streams", help="oracle-stream JSON; synthetic streams if omitted")
    p.add_argument("--chunk-ms", type=float, default=960.0)
    p.add_argument("--n", type=int, default=50, help="number of synthetic streams")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="evaluate separation, rendering and policy over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--separator", choices=["phase-mask", "oracle"], default="oracle")
    _methods(p)
    p.add_argument("--limit", type=int)
    p.add_argument("--streams")
    p.add_argument("--chunk-ms", type=float, default=960.0)
    p.add_argument("--hrtf")

    p = sub.add_parser("profile", help="real-time factor of the DSP path")
    p.add_argument("--bins", type=int, default=36)
    p.add_argument("--sources", type=int, default=2)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--measure", type=int, default=200)
    _methods(p)
    p.add_argument("--out")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return ap


def _pipeline_payload(a) -> dict:
    overrides = {k: v for k, v in (("separator", a.separator), ("render_method", a.method),
                                   ("delay_chunks", a.delay_chunks), ("workers", a.workers))
                 if v is not None}
    payload = {"scene": _scene(a), "out_dir": a.out}
    if overrides:
        config = {}
        if a.config:
            from .pipeline import PipelineConfig

            config = PipelineConfig.load(a.config).to_dict()
        payload["config"] = {**config, **overrides}
    elif a.config:
        payload["config_path"] = a.config
    return payload


def payload_for(a) -> dict:
    c = a.command
    if c == "synth":
        return {"out_dir": a.out, "count": a.count, "seed": a.seed, "corpus": a.corpus,
                "brir_manifest": a.brir_manifest, "ild_db": a.ild_db, "fractional": a.fractional,
                "noise_prob": a.noise_prob, "n_sources": a.n_sources,
                "min_separation_deg": a.min_separation, "max_duration_s": a.max_duration,
                "gain_min": a.gain_min, "gain_max": a.gain_max}
    if c == "separate":
        return {"scene": _scene(a), "out_dir": a.out, "separator": a.separator,
                "n_bins": a.bins, "workers": a.workers}
    if c == "render":
        return {"mono": a.mono, "out": a.out, "method": a.method, "angle": a.angle, "stem": a.stem,
                "ild_db": a.ild_db, "delay_chunks": a.delay_chunks, "hrtf_manifest": a.hrtf,
                "per_band_ild": a.per_band}
    if c == "pipeline":
        return _pipeline_payload(a)
    if c == "policy-sim":
        return {"streams": a.streams, "chunk_ms": a.chunk_ms, "n_synthetic": a.n,
                "seed": a.seed, "out": a.out}
    if c == "eval":
        return {"dataset": a.dataset, "out_dir": a.out, "separator": a.separator, "method": a.method,
                "limit": a.limit, "streams": a.streams, "chunk_ms": a.chunk_ms,
                "hrtf_manifest": a.hrtf}
    if c == "profile":
        return {"n_bins": a.bins, "n_sources": a.sources, "warmup": a.warmup,
                "measure": a.measure, "method": a.method, "out": a.out}
    raise ConfigError(f"unknown command {c}")


def _remote(server: str, command: str, payload: dict) -> tuple[int, dict]:
    import httpx

    r = httpx.post(f"{server.rstrip('/')}/{command}", json=payload, timeout=None)
    body = r.json()
    if r.status_code == 200:
        return EXIT_OK, body
    return (EXIT_CONFIG if r.status_code == 422 else EXIT_DATA), body


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        import uvicorn

        uvicorn.run("spatial_translate.service.app:app", host=args.host, port=args.port)
        return EXIT_OK
    try:
        payload = payload_for(args)
        if args.server:
            code, body = _remote(args.server, args.command, payload)
            print(json.dumps(body, indent=2))
            return code
        from .jobs import RUNNERS

        model, runner = RUNNERS[args.command]
        resp = runner(model(**payload))
        print(resp.model_dump_json(indent=2))
        return EXIT_OK
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
