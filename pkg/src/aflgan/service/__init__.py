"""HTTP inference layer over trained checkpoints."""

from .app import create_app, generate_response
from .schemas import GenerateRequest, GenerateResponse, canonical_json
from .store import CheckpointStore, TraceStore

__all__ = ["create_app", "generate_response", "GenerateRequest",
           "GenerateResponse", "canonical_json", "CheckpointStore",
           "TraceStore"]
