"""Regenerate the browser UI's parity fixtures.

Builds two small deterministic checkpoints (a 2-D one and a 32x32 image
one), replays five canned session states against the in-process service,
and writes one JSON fixture per state to frontend/tests/fixtures/.

Each fixture records the session state, the exact request the UI must
derive from it, the service response, and the matching gain-zero baseline
request/response pair. The UI test suite asserts its request construction
and its rendered view against these files, so the displayed result equals
the service result by construction.

Run from the repository root:

    python scripts/make_ui_fixtures.py
"""

import json
import sys
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from aflgan.checkpoint import Checkpoint
from aflgan.evaluation import SwissRollParams, make_swiss_sampler
from aflgan.nets import build_dcgan_pair, build_toy_pair, dcgan_tap_bindings
from aflgan.rng import stream
from aflgan.service import create_app
from aflgan.training import TrainConfig, build_modules, train_phase1, train_phase2

FIXTURE_DIR = Path(__file__).resolve().parent.parent / "frontend" / "tests" / "fixtures"

DEFAULT_ALPHA = 0.2

# The five canned session states. "alphas" maps module name -> slider value;
# the request derivation below mirrors the UI rule exactly: a uniform board
# becomes alpha_global, a mixed board keeps the default global and lists
# every module in alpha_overrides.
def canned_states(toy_modules, image_modules):
    return [
        {
            "name": "toy-defaults",
            "checkpoint": "toy",
            "seed": 0,
            "nSamples": 16,
            "iterations": 1,
            "alphas": {m: DEFAULT_ALPHA for m in toy_modules},
            "reference": {"kind": "none"},
        },
        {
            "name": "toy-alpha-zero",
            "checkpoint": "toy",
            "seed": 1,
            "nSamples": 8,
            "iterations": 1,
            "alphas": {m: 0.0 for m in toy_modules},
            "reference": {"kind": "none"},
        },
        {
            "name": "toy-full-gain-three-passes",
            "checkpoint": "toy",
            "seed": 2,
            "nSamples": 4,
            "iterations": 3,
            "alphas": {m: 1.0 for m in toy_modules},
            "reference": {"kind": "none"},
        },
        {
            "name": "image-mixed-sliders",
            "checkpoint": "image32",
            "seed": 4,
            "nSamples": 4,
            "iterations": 1,
            "alphas": {m: (0.7 if m == "f0" else DEFAULT_ALPHA) for m in image_modules},
            "reference": {"kind": "none"},
        },
        {
            "name": "image-alpha-zero",
            "checkpoint": "image32",
            "seed": 3,
            "nSamples": 4,
            "iterations": 1,
            "alphas": {m: 0.0 for m in image_modules},
            "reference": {"kind": "none"},
        },
    ]


def session_to_request(state):
    """Mirror of the UI's buildRequest (frontend/src/state.ts)."""
    names = sorted(state["alphas"])
    values = [round(state["alphas"][m], 4) for m in names]
    req = {
        "checkpoint_id": state["checkpoint"],
        "seed": state["seed"],
        "n_samples": state["nSamples"],
        "alpha_global": DEFAULT_ALPHA,
        "iterations": state["iterations"],
    }
    if names and all(v == values[0] for v in values):
        req["alpha_global"] = values[0]
    elif names:
        req["alpha_overrides"] = dict(zip(names, values))
    return req


def baseline_request(state):
    return {
        "checkpoint_id": state["checkpoint"],
        "seed": state["seed"],
        "n_samples": state["nSamples"],
        "alpha_global": 0.0,
        "iterations": 1,
    }


def build_toy_checkpoint(directory: Path) -> list[str]:
    G, D = build_toy_pair(width=8, seed=0)
    sampler = make_swiss_sampler(SwissRollParams())
    ck1 = train_phase1(G, D, sampler, TrainConfig(
        phase=1, batch_size=8, iterations=4, seed=0, gp_lambda=0.1))
    ck2 = train_phase2(ck1, sampler, TrainConfig(
        phase=2, batch_size=8, iterations=4, seed=0, gp_lambda=0.1))
    ck2.save(str(directory / "toy.afl1"))
    _, _, modules = ck2.build()
    return [m.name for m in modules]


def build_image_checkpoint(directory: Path) -> list[str]:
    G, D = build_dcgan_pair(image_size=32, base_channels=4, n_taps=4, seed=7)
    probe = stream(7, "ui/fixtures/probe").normal(size=(2, 128))
    modules = build_modules(G, D, dcgan_tap_bindings(G, D, 4), "single", 7, probe)
    # Untrained modules emit corrections around 1e-6, which vanish under the
    # PNG's 8-bit quantization and would make the image fixtures vacuous.
    # Boosting each module's final normalization gain keeps the pipeline
    # untouched while making the corrected row visibly differ at gain > 0.
    for m in modules:
        m.inner.state_arrays()["param/n2.gamma"] *= 2.0e5
    ck = Checkpoint.snapshot(2, G, D, modules, rng_info={}, train_meta={})
    ck.save(str(directory / "image32.afl1"))
    return [m.name for m in modules]


def main() -> int:
    FIXTURE_DIR.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        ckpt_dir = Path(tmp)
        toy_modules = build_toy_checkpoint(ckpt_dir)
        image_modules = build_image_checkpoint(ckpt_dir)
        client = TestClient(create_app(ckpt_dir))
        for idx, state in enumerate(canned_states(toy_modules, image_modules), 1):
            req = session_to_request(state)
            base_req = baseline_request(state)
            resp = client.post("/generate", json=req)
            base_resp = client.post("/generate", json=base_req)
            if resp.status_code != 200 or base_resp.status_code != 200:
                print(f"{state['name']}: service returned "
                      f"{resp.status_code}/{base_resp.status_code}", file=sys.stderr)
                return 1
            fixture = {
                "name": state["name"],
                "session": state,
                "request": req,
                "response": resp.json(),
                "baseline_request": base_req,
                "baseline_response": base_resp.json(),
            }
            out = FIXTURE_DIR / f"state{idx}.json"
            out.write_text(json.dumps(fixture, indent=1, sort_keys=True) + "\n")
            print(f"wrote {out.relative_to(FIXTURE_DIR.parent.parent.parent)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
