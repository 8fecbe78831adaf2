"""Request/response models and canonical serialization.

Responses are serialized with ``canonical_json`` (sorted keys, compact
separators) so the HTTP body and the CLI's file output are the same bytes
for the same request.
"""

from __future__ import annotations

import json

from pydantic import BaseModel, Field, ConfigDict, model_validator

__all__ = ["Reference", "GenerateRequest", "GenerateResponse",
           "canonical_json"]


def canonical_json(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


class Reference(BaseModel):
    """Feedback-switching target: exactly one of an inline point list, a
    previously generated sample id, or a base64 PNG image payload."""
    model_config = ConfigDict(extra="forbid")

    points: list[list[float]] | None = None
    sample_id: str | None = None
    image_b64: str | None = None

    @model_validator(mode="after")
    def _exactly_one(self):
        given = [f for f in ("points", "sample_id", "image_b64")
                 if getattr(self, f) is not None]
        if len(given) != 1:
            raise ValueError(
                f"reference needs exactly one of points, sample_id, "
                f"image_b64; got {given or 'none'}")
        return self


class GenerateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint_id: str
    seed: int = 0
    n_samples: int = Field(default=256, ge=1, le=1024)
    alpha_global: float = Field(default=0.2, ge=0.0, le=1.0)
    alpha_overrides: dict[str, float] = Field(default_factory=dict)
    iterations: int = Field(default=1, ge=0, le=8)
    reference: Reference | None = None

    @model_validator(mode="after")
    def _override_range(self):
        for name, value in self.alpha_overrides.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(
                    f"alpha_overrides[{name!r}] = {value} outside [0, 1]")
        if self.reference is not None and self.iterations != 1:
            raise ValueError("reference switching is a single correction "
                             "pass; iterations must be 1")
        return self


class GenerateResponse(BaseModel):
    """Shape contract for the generate payload (the wire format itself is
    produced by canonical_json for byte determinism)."""
    outputs: list
    trace_ids: list[str]
    metric_vs_reference: float | None = None
    metadata: dict
