"""HTTP facade over the pipeline runners.

Package errors map to a structured body {"error_kind", "detail"} so
clients can translate them into exit codes without parsing messages.
"""

from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import (ConfigError, DataError, DomainError, ShapeError,
                      UsageError)
from ..pipeline import (build_config, run_bench, run_eval, run_predict,
                        run_synth, run_train)
from .schemas import (BenchRequest, BenchResponse, EvalRequest, EvalResponse,
                      HealthResponse, PredictRequest, PredictResponse,
                      SynthRequest, SynthResponse, TrainRequest,
                      TrainResponse)


def _overrides(request) -> dict:
    return request.model_dump(exclude_none=True, exclude={"preset"})


def _error_handler(kind: str, status: int):
    async def handle(request, exc):
        return JSONResponse(status_code=status,
                            content={"error_kind": kind, "detail": str(exc)})
    return handle


def create_app() -> FastAPI:
    app = FastAPI(title="crackfuse", version=__version__)

    for exc_type in (ConfigError, UsageError, RequestValidationError):
        app.add_exception_handler(exc_type, _error_handler("config", 400))
    for exc_type in (DataError, DomainError, ShapeError):
        app.add_exception_handler(exc_type, _error_handler("data", 422))
    app.add_exception_handler(OSError, _error_handler("io", 500))

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=SynthResponse)
    def synth(request: SynthRequest) -> SynthResponse:
        cfg = build_config("synth", request.preset, _overrides(request))
        return SynthResponse(**run_synth(cfg))

    @app.post("/train", response_model=TrainResponse)
    def train(request: TrainRequest) -> TrainResponse:
        cfg = build_config("train", request.preset, _overrides(request))
        return TrainResponse(**run_train(cfg))

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(request: EvalRequest) -> EvalResponse:
        cfg = build_config("eval", request.preset, _overrides(request))
        return EvalResponse(**run_eval(cfg))

    @app.post("/predict", response_model=PredictResponse)
    def predict(request: PredictRequest) -> PredictResponse:
        cfg = build_config("predict", request.preset, _overrides(request))
        return PredictResponse(**run_predict(cfg))

    @app.post("/bench-attn", response_model=BenchResponse)
    def bench(request: BenchRequest) -> BenchResponse:
        cfg = build_config("bench-attn", request.preset, _overrides(request))
        return BenchResponse(**run_bench(cfg))

    return app
