"""FastAPI application: read-only inference over a checkpoint directory.

``generate_response`` is the single implementation behind POST /generate;
the CLI calls it directly and writes the same canonical bytes, which is
what makes service and CLI outputs comparable byte-for-byte.
"""

from __future__ import annotations

import base64
import io
import logging
import secrets

import numpy as np

from .. import autodiff as ad
from ..feedback import LoopConfig, FeedbackError, afl_generate, \
    feedback_switch_generate
from ..evaluation import mean_min_distance
from ..rng import stream
from .schemas import GenerateRequest, canonical_json
from .store import CheckpointStore, TraceStore, StoreError

__all__ = ["ApiError", "create_app", "generate_response"]

log = logging.getLogger("aflgan.service")


class ApiError(Exception):
    """Client-side failure with a named field; mapped to a 4xx response."""

    def __init__(self, status: int, field: str, message: str):
        super().__init__(message)
        self.status = status
        self.field = field
        self.message = message


def _latent_dim_of(G) -> int:
    first = G.layers[0]
    if first.kind == "dense":
        return first.in_dim
    if first.kind == "reshape":
        return int(np.prod(first.shape))
    raise RuntimeError("cannot infer latent dimension")


def _decode_image_reference(b64: str, want_shape: tuple) -> np.ndarray:
    from PIL import Image

    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception as exc:
        raise ApiError(422, "reference", f"undecodable image payload: {exc}")
    arr = np.asarray(img, dtype=np.float64) / 127.5 - 1.0  # to tanh range
    arr = arr.transpose(2, 0, 1)
    if arr.shape != want_shape[1:]:
        raise ApiError(422, "reference",
                       f"image shape {arr.shape} != generator output "
                       f"shape {want_shape[1:]}")
    return np.broadcast_to(arr, want_shape).copy()


def _resolve_reference(ref, traces: TraceStore, want_shape: tuple) -> np.ndarray:
    if ref.points is not None:
        arr = np.asarray(ref.points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape != want_shape:
            raise ApiError(422, "reference",
                           f"points shape {arr.shape} != generator output "
                           f"shape {want_shape}")
        return arr
    if ref.sample_id is not None:
        arr = traces.get(ref.sample_id)
        if arr is None:
            raise ApiError(404, "reference",
                           f"unknown sample id {ref.sample_id!r}")
        if arr.shape != want_shape:
            raise ApiError(422, "reference",
                           f"sample {ref.sample_id!r} has shape {arr.shape}, "
                           f"need {want_shape}")
        return arr
    return _decode_image_reference(ref.image_b64, want_shape)


def _encode_outputs(arr: np.ndarray, kind: str) -> list:
    if kind == "points":
        return [[float(v) for v in row] for row in arr]
    from PIL import Image

    out = []
    for img in arr:
        u8 = np.clip((img + 1.0) * 127.5, 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(buf, "PNG")
        out.append(base64.b64encode(buf.getvalue()).decode("ascii"))
    return out


def _reference_metric(outputs: np.ndarray, reference: np.ndarray,
                      kind: str) -> float:
    if kind == "points":
        return mean_min_distance(outputs, reference)
    return float(np.mean(np.abs(outputs - reference)))


def generate_response(store: CheckpointStore, traces: TraceStore,
                      req: GenerateRequest) -> dict:
    """Run one generation request and return the response payload dict."""
    try:
        ckpt = store.load(req.checkpoint_id)
    except StoreError as exc:
        raise ApiError(404, "checkpoint_id", str(exc))
    info = store.summary(req.checkpoint_id)
    G, D, modules = ckpt.build()
    if not modules and (req.alpha_overrides or req.reference is not None):
        raise ApiError(422, "checkpoint_id",
                       f"checkpoint {req.checkpoint_id!r} has no feedback "
                       f"modules (phase {ckpt.phase})")
    names = {m.name for m in modules}
    for name in req.alpha_overrides:
        if name not in names:
            raise ApiError(422, "alpha_overrides",
                           f"unknown module {name!r}; checkpoint has "
                           f"{sorted(names)}")
    loop = LoopConfig(iterations=req.iterations,
                      alpha_global=req.alpha_global,
                      alpha_overrides=dict(req.alpha_overrides))
    z = stream(req.seed, "service/x").normal(
        size=(req.n_samples, _latent_dim_of(G)))
    x = ad.constant(z)

    metric = None
    if req.reference is not None:
        with ad.no_grad():
            want = G.forward(x).data.shape
        reference = _resolve_reference(req.reference, traces, want)
        try:
            y = feedback_switch_generate(G, D, modules, x,
                                         ad.constant(reference), loop)
        except FeedbackError as exc:
            raise ApiError(422, "reference", str(exc))
        with ad.no_grad():
            y0 = G.forward(x)
        trace_arrays = [y0.data, y.data]
        outputs = y.data
        metric = _reference_metric(outputs, reference, info["kind"])
    else:
        y, trace = afl_generate(G, D, modules, x, loop)
        trace_arrays = [t.data for t in trace]
        outputs = y.data

    trace_ids = [traces.put(a) for a in trace_arrays]
    payload = {
        "outputs": _encode_outputs(outputs, info["kind"]),
        "trace_ids": trace_ids,
        "metric_vs_reference": metric,
        "metadata": {
            "checkpoint_id": req.checkpoint_id,
            "kind": info["kind"],
            "phase": info["phase"],
            "modules": [m.name for m in modules],
            "tap_shapes": {m.name: list(m.disc_shape) for m in modules},
            "default_alpha": 0.2,
            "seed": req.seed,
        },
    }
    return payload


def create_app(checkpoint_dir, trace_capacity: int = 64):
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse, Response

    store = CheckpointStore(checkpoint_dir)
    traces = TraceStore(trace_capacity)
    app = FastAPI(title="aflgan service", docs_url=None, redoc_url=None)
    app.state.store = store
    app.state.traces = traces

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"error": {"field": exc.field,
                                               "message": exc.message}})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        loc = [str(p) for p in first.get("loc", []) if p != "body"]
        return JSONResponse(
            status_code=422,
            content={"error": {"field": ".".join(loc) or "body",
                               "message": first.get("msg", "invalid request")}})

    @app.exception_handler(Exception)
    async def _internal_error(request: Request, exc: Exception):
        error_id = secrets.token_hex(8)
        log.exception("internal error %s", error_id)
        return JSONResponse(status_code=500,
                            content={"error": {"id": error_id}})

    @app.get("/health")
    async def health():
        return {"status": "ok", "checkpoints": len(store.ids())}

    @app.get("/checkpoints")
    async def list_checkpoints():
        return [store.summary(cid) for cid in store.ids()]

    @app.get("/checkpoints/{checkpoint_id}")
    async def describe_checkpoint(checkpoint_id: str):
        try:
            return store.describe(checkpoint_id)
        except StoreError as exc:
            raise ApiError(404, "checkpoint_id", str(exc))

    @app.post("/generate")
    async def generate(req: GenerateRequest):
        payload = generate_response(store, traces, req)
        return Response(content=canonical_json(payload),
                        media_type="application/json")

    return app
