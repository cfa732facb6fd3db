from __future__ import annotations

import json
import logging
import os
import time
import uuid
from pathlib import Path
from typing import Any

from fastapi import Depends, FastAPI, Query, Request
from fastapi.responses import Response

from zdalab.cache import TTLCache, make_cache_key
from zdalab.deps import api_key_guard
from zdalab.errors import APIError, LabError, register_exception_handlers
from zdalab.models import HealthResponse, RunResponse, ScenarioConfig
from zdalab.scenario import Scenario, run_experiment
from zdalab.settings import get_settings

logger = logging.getLogger("zdalab")
cache = TTLCache()

POLICY_PATTERN = r"^(intermittent|classic)$"


def _resolve_version() -> str:
    v = os.getenv("VERSION")
    if v and v.strip():
        return v.strip()

    sha = os.getenv("VCS_REF") or os.getenv("GIT_SHA")
    if sha and sha.strip():
        return sha.strip()

    sha_fs = _read_git_sha()
    if sha_fs:
        return sha_fs

    return "dev"


def _read_git_sha() -> str | None:
    root = Path(__file__).resolve().parent.parent
    try:
        head = (root / ".git" / "HEAD").read_text(encoding="utf-8").strip()
    except OSError:
        return None
    if head.startswith("ref:"):
        ref = head.split(" ", 1)[1].strip()
        try:
            sha = (root / ".git" / ref).read_text(encoding="utf-8").strip()
        except OSError:
            return None
    else:
        sha = head
    return sha[:7] if sha else None


def _error_code_from_exc(exc: Exception) -> str | None:
    if isinstance(exc, (APIError, LabError)):
        return exc.code
    return None


def _cached(request: Request, route: str, config: ScenarioConfig, variant: str = "") -> tuple[str, Any | None]:
    key = make_cache_key(route, config.model_dump(mode="json"), variant)
    hit = cache.get(key)
    if hit is not None:
        request.state.cache_hit = True
    return key, hit


def _scenario(config: ScenarioConfig) -> Scenario:
    return Scenario.from_config(config)


def create_app() -> FastAPI:
    settings = get_settings()
    logging.basicConfig(level=settings.log_level, format="%(message)s")

    app = FastAPI(title="zdalab", dependencies=[Depends(api_key_guard)])
    register_exception_handlers(app)

    @app.middleware("http")
    async def request_logger(request: Request, call_next) -> Response:
        request_id = str(uuid.uuid4())
        request.state.request_id = request_id
        request.state.cache_hit = False
        start = time.perf_counter()
        try:
            response = await call_next(request)
        except Exception as exc:
            latency_ms = int((time.perf_counter() - start) * 1000)
            payload = {
                "request_id": request_id,
                "endpoint": request.url.path,
                "params": dict(request.query_params),
                "latency_ms": latency_ms,
                "cache_hit": getattr(request.state, "cache_hit", False),
                "error_code": _error_code_from_exc(exc),
            }
            logger.error(json.dumps(payload, separators=(",", ":")))
            raise
        latency_ms = int((time.perf_counter() - start) * 1000)
        payload = {
            "request_id": request_id,
            "endpoint": request.url.path,
            "params": dict(request.query_params),
            "latency_ms": latency_ms,
            "cache_hit": getattr(request.state, "cache_hit", False),
            "error_code": None,
        }
        logger.info(json.dumps(payload, separators=(",", ":")))
        return response

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=_resolve_version(), output_dir=get_settings().output_dir)

    @app.post("/defense")
    def defense(request: Request, config: ScenarioConfig) -> dict[str, Any]:
        key, hit = _cached(request, "defense", config)
        if hit is not None:
            return hit
        payload = _scenario(config).defense_report().as_dict()
        cache.set(key, payload, get_settings().cache_ttl_seconds)
        return payload

    @app.post("/certify")
    def certify(request: Request, config: ScenarioConfig) -> dict[str, Any]:
        key, hit = _cached(request, "certify", config)
        if hit is not None:
            return hit
        certificates = _scenario(config).certificates()
        payload = {name: cert.as_dict() for name, cert in certificates.items()}
        cache.set(key, payload, get_settings().cache_ttl_seconds)
        return payload

    @app.post("/synthesize")
    def synthesize(
        request: Request,
        config: ScenarioConfig,
        topology: int = Query(...),
        policy: str | None = Query(None, pattern=POLICY_PATTERN),
    ) -> dict[str, Any]:
        key, hit = _cached(request, "synthesize", config, f"{topology}:{policy}")
        if hit is not None:
            return hit
        candidates = _scenario(config).candidates(topology, policy)
        payload = {"topology": topology, "candidates": [c.as_dict() for c in candidates]}
        cache.set(key, payload, get_settings().cache_ttl_seconds)
        return payload

    @app.post("/run", response_model=RunResponse)
    def run(config: ScenarioConfig) -> RunResponse:
        out = Path(get_settings().output_dir) / config.name
        artifacts = run_experiment(config, out)
        return RunResponse(
            name=config.name,
            output_dir=str(artifacts.output_dir),
            trajectory_csv=str(artifacts.trajectory_csv),
            residual_csv=str(artifacts.residual_csv),
            detection=str(artifacts.detection),
            summary=artifacts.summary,
        )

    return app


app = create_app()
