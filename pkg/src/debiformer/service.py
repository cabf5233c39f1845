"""HTTP facade over the model core.

All heavy artifacts (weight archives, input tensors, logits) stay on disk;
requests carry server-side paths plus small knobs.  Every error is returned
as {"error": {"code", "message"}} with no stack traces.  The CLI talks to
this app in-process through an ASGI transport, so command behavior and
service behavior cannot drift apart.
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from . import __version__, analysis, dbt, verification
from .backbone import backbone_forward, init_params, load_params, params_to_arrays
from .config import VARIANTS, ModelConfig, make_variant
from .dbra import ConfigError
from .rng import Rng, derive_seed
from .tensor import ShapeError, Tensor

DTYPES = {"f32": np.float32, "f64": np.float64}


class ApiError(Exception):
    def __init__(self, code: str, message: str, status: int = 400):
        super().__init__(message)
        self.code = code
        self.message = message
        self.status = status


def _error_response(code: str, message: str, status: int) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


# ---------------------------------------------------------------------------
# Request models


class InitRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: str
    seed: int = 0
    dtype: str = "f32"
    config_out: str
    weights_out: str


class ForwardRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config_path: str
    weights_path: str
    input_path: Optional[str] = None
    random_seed: Optional[int] = None
    out_path: Optional[str] = None
    dtype: Optional[str] = None
    stats: bool = False


class VerifyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    suites: Optional[list[str]] = None
    seed: int = 0


class ReportRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: Optional[str] = None
    config_path: Optional[str] = None


class RoutesRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config_path: str
    weights_path: str
    input_path: Optional[str] = None
    random_seed: Optional[int] = None
    dtype: Optional[str] = None


# ---------------------------------------------------------------------------
# Shared loading helpers


def _dtype_of(name: Optional[str]):
    if name is None:
        return None
    if name not in DTYPES:
        raise ApiError("bad_request", f"dtype must be one of {sorted(DTYPES)}, got {name!r}")
    return DTYPES[name]


def _config_from(req: ReportRequest) -> ModelConfig:
    if (req.variant is None) == (req.config_path is None):
        raise ApiError("bad_request", "provide exactly one of variant or config_path")
    if req.variant is not None:
        return _variant(req.variant)
    return _load_config(req.config_path)


def _variant(name: str) -> ModelConfig:
    try:
        return make_variant(name)
    except ConfigError as e:
        raise ApiError("bad_request", str(e))


def _load_config(path: str) -> ModelConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return ModelConfig.from_json(fh.read())
    except FileNotFoundError:
        raise ApiError("not_found", f"config file not found: {path}", status=404)
    except (ConfigError, ValueError) as e:
        raise ApiError("format", f"bad config file {path}: {e}")


def _load_weights(config: ModelConfig, path: str, dtype):
    try:
        arrays = dbt.load_archive(path)
    except FileNotFoundError:
        raise ApiError("not_found", f"weight archive not found: {path}", status=404)
    except dbt.FormatError as e:
        raise ApiError("format", f"bad weight archive {path}: {e}")
    try:
        return load_params(config, arrays, dtype=dtype)
    except (ConfigError, ShapeError) as e:
        raise ApiError("config", str(e))


def _load_input(config: ModelConfig, req, dtype) -> Tensor:
    n = config.input_size
    if (req.input_path is None) == (req.random_seed is None):
        raise ApiError("bad_request", "provide exactly one of input_path or random_seed")
    if req.random_seed is not None:
        data = Rng(derive_seed(req.random_seed, "input")).uniform(n * n * 3)
        return Tensor(data.reshape(n, n, 3).astype(dtype or np.float32))
    try:
        arrays = dbt.load_archive(req.input_path)
    except FileNotFoundError:
        raise ApiError("not_found", f"input file not found: {req.input_path}", status=404)
    except dbt.FormatError as e:
        raise ApiError("format", f"bad input file {req.input_path}: {e}")
    if len(arrays) != 1:
        raise ApiError("format", f"input archive must hold exactly one tensor, has {len(arrays)}")
    img = next(iter(arrays.values()))
    if img.ndim != 3 or img.shape[2] != 3:
        raise ApiError("config", f"input must be [H, W, 3], got {img.shape}")
    if img.shape[0] != n or img.shape[1] != n:
        raise ApiError("config", f"input is {img.shape[0]}x{img.shape[1]}, config wants {n}x{n}")
    if float(img.min()) < 0.0 or float(img.max()) > 1.0:
        raise ApiError("format", "input values must lie in [0, 1]")
    return Tensor(img.astype(dtype) if dtype is not None else img)


def _attention_row_sum_extrema(trace: dict) -> dict:
    lo, hi = np.inf, -np.inf
    for st in trace["stages"]:
        for bt in st["blocks"]:
            for key in ("bi_attention", "def_attention"):
                if key in bt:
                    sums = np.asarray(bt[key]).sum(axis=-1)
                    lo = min(lo, float(sums.min()))
                    hi = max(hi, float(sums.max()))
    return {"min": lo, "max": hi}


# ---------------------------------------------------------------------------
# App


app = FastAPI(title="debiformer", version=__version__)


@app.exception_handler(ApiError)
async def _api_error(request: Request, exc: ApiError):
    return _error_response(exc.code, exc.message, exc.status)


@app.exception_handler(RequestValidationError)
async def _validation_error(request: Request, exc: RequestValidationError):
    msgs = "; ".join(
        f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()
    )
    return _error_response("bad_request", msgs, 400)


@app.exception_handler(Exception)
async def _unhandled(request: Request, exc: Exception):
    return _error_response("internal", "internal error", 500)


@app.get("/healthz")
def healthz():
    return {"status": "ok", "version": __version__}


@app.get("/v1/variants")
def variants():
    out = []
    for name in VARIANTS:
        c = make_variant(name)
        out.append({
            "variant": name,
            "input_size": c.input_size,
            "num_classes": c.num_classes,
            "depths": [len(s.layout) for s in c.stages],
            "widths": [s.C for s in c.stages],
            "heads": [s.M for s in c.stages],
            "params": analysis.count_params(c),
        })
    return {"variants": out}


@app.post("/v1/init")
def init(req: InitRequest):
    config = _variant(req.variant)
    dtype = _dtype_of(req.dtype) or np.float32
    params = init_params(config, seed=req.seed, dtype=dtype)
    arrays = params_to_arrays(params)
    try:
        with open(req.config_out, "w", encoding="utf-8") as fh:
            fh.write(config.to_json())
        dbt.save_archive(req.weights_out, arrays)
    except OSError as e:
        raise ApiError("io", f"cannot write output: {e}")
    return {
        "config_path": req.config_out,
        "weights_path": req.weights_out,
        "params": int(sum(a.size for a in arrays.values())),
        "tensors": len(arrays),
        "bytes": os.path.getsize(req.weights_out),
    }


@app.post("/v1/forward")
def forward(req: ForwardRequest):
    config = _load_config(req.config_path)
    dtype = _dtype_of(req.dtype)
    params = _load_weights(config, req.weights_path, dtype)
    img = _load_input(config, req, dtype)
    trace: dict = {}
    logits = backbone_forward(img, config, params, trace=trace)
    summary = {
        "logits_shape": list(logits.shape),
        "argmax": int(np.argmax(logits.data)),
        "dtype": str(logits.data.dtype),
        "stage_shapes": [
            {"stage": i + 1, "resolution": st["resolution"], "channels": st["channels"]}
            for i, st in enumerate(trace["stages"])
        ],
    }
    if req.stats:
        summary["attention_row_sums"] = _attention_row_sum_extrema(trace)
    if req.out_path is not None:
        try:
            dbt.save_archive(req.out_path, {"logits": logits.data})
        except OSError as e:
            raise ApiError("io", f"cannot write output: {e}")
        summary["out_path"] = req.out_path
    return summary


@app.post("/v1/verify")
def verify(req: VerifyRequest):
    names = req.suites or list(verification.SUITES)
    for name in names:
        if name not in verification.SUITES:
            raise ApiError(
                "bad_request",
                f"unknown suite {name!r}, expected subset of {list(verification.SUITES)}",
            )
    results = [verification.run_suite(name, seed=req.seed) for name in names]
    return {
        "passed": all(r.passed for r in results),
        "results": [r.to_dict() for r in results],
    }


@app.post("/v1/flops")
def flops(req: ReportRequest):
    report = analysis.model_flops(_config_from(req))
    return {"report": report.to_dict(), "text": analysis.format_flops_report(report)}


@app.post("/v1/params")
def params_report(req: ReportRequest):
    config = _config_from(req)
    return {
        "variant": config.variant,
        "total": analysis.count_params(config),
        "by_group": analysis.param_breakdown(config),
    }


@app.post("/v1/routes")
def routes(req: RoutesRequest):
    config = _load_config(req.config_path)
    dtype = _dtype_of(req.dtype)
    params = _load_weights(config, req.weights_path, dtype)
    img = _load_input(config, req, dtype)
    return analysis.route_stats(config, params, img)
