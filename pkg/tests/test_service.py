"""HTTP service: endpoints, validation, determinism, CLI parity."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from aflgan.nets import build_toy_pair
from aflgan.training import TrainConfig, train_phase1, train_phase2
from aflgan.evaluation import SwissRollParams, make_swiss_sampler
from aflgan.service import create_app, canonical_json
from aflgan.service.store import CheckpointStore, TraceStore, trace_id
from aflgan.service.app import generate_response
from aflgan.service.schemas import GenerateRequest
from aflgan.cli import main as cli_main


@pytest.fixture(scope="module")
def ckpt_dir(tmp_path_factory):
    """Directory with one tiny phase-2 toy checkpoint and its phase-1 parent."""
    d = tmp_path_factory.mktemp("ckpts")
    G, D = build_toy_pair(width=8, seed=0)
    sampler = make_swiss_sampler(SwissRollParams())
    ck1 = train_phase1(G, D, sampler, TrainConfig(
        phase=1, batch_size=8, iterations=4, seed=0, gp_lambda=0.1))
    ck2 = train_phase2(ck1, sampler, TrainConfig(
        phase=2, batch_size=8, iterations=4, seed=0, gp_lambda=0.1))
    ck1.save(str(d / "toy_p1.afl1"))
    ck2.save(str(d / "toy_p2.afl1"))
    return d


@pytest.fixture()
def client(ckpt_dir):
    return TestClient(create_app(ckpt_dir), raise_server_exceptions=False)


def _gen(client, **kw):
    body = {"checkpoint_id": "toy_p2", "n_samples": 16}
    body.update(kw)
    return client.post("/generate", json=body)


# -- endpoints -----------------------------------------------------------------

def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "checkpoints": 2}


def test_list_checkpoints(client):
    r = client.get("/checkpoints")
    assert r.status_code == 200
    ids = [c["id"] for c in r.json()]
    assert ids == ["toy_p1", "toy_p2"]
    by_id = {c["id"]: c for c in r.json()}
    assert by_id["toy_p2"]["phase"] == 2
    assert by_id["toy_p2"]["n_modules"] == 1
    assert by_id["toy_p1"]["n_modules"] == 0


def test_describe_checkpoint(client):
    r = client.get("/checkpoints/toy_p2")
    assert r.status_code == 200
    body = r.json()
    assert body["kind"] == "points"
    assert len(body["modules"]) == 1
    assert body["modules"][0]["name"] == "f0"
    r404 = client.get("/checkpoints/nosuch")
    assert r404.status_code == 404
    assert r404.json()["error"]["field"] == "checkpoint_id"


def test_empty_checkpoint_dir(tmp_path):
    empty = TestClient(create_app(tmp_path))
    assert empty.get("/health").json()["checkpoints"] == 0
    assert empty.get("/checkpoints").json() == []


# -- generation ----------------------------------------------------------------

def test_generate_basic_shape(client):
    r = _gen(client, seed=3)
    assert r.status_code == 200
    body = r.json()
    assert len(body["outputs"]) == 16
    assert len(body["outputs"][0]) == 2
    assert len(body["trace_ids"]) == 2  # y0 and y1
    assert body["metric_vs_reference"] is None
    assert body["metadata"]["modules"] == ["f0"]
    assert body["metadata"]["seed"] == 3


def test_generate_is_deterministic_bytes(client):
    a = _gen(client, seed=5)
    b = _gen(client, seed=5)
    assert a.content == b.content
    c = _gen(client, seed=6)
    assert c.content != a.content


def test_generate_alpha_zero_matches_phase1_baseline(client):
    corrected = _gen(client, seed=2, alpha_global=0.0)
    baseline = _gen(client, seed=2, checkpoint_id="toy_p1")
    assert corrected.json()["outputs"] == baseline.json()["outputs"]


def test_generate_trace_length_tracks_iterations(client):
    r = _gen(client, iterations=3)
    assert len(r.json()["trace_ids"]) == 4


def test_generate_with_reference_points(client):
    ref = np.column_stack([np.linspace(-0.5, 0.5, 16),
                           np.zeros(16)]).tolist()
    r = _gen(client, seed=1, reference={"points": ref})
    assert r.status_code == 200
    body = r.json()
    assert body["metric_vs_reference"] is not None
    assert body["metric_vs_reference"] >= 0
    assert len(body["trace_ids"]) == 2


def test_generate_with_sample_id_reference(client):
    first = _gen(client, seed=4).json()
    y0_id = first["trace_ids"][0]
    r = _gen(client, seed=4, reference={"sample_id": y0_id})
    assert r.status_code == 200
    r404 = _gen(client, seed=4, reference={"sample_id": "0" * 24})
    assert r404.status_code == 404
    assert r404.json()["error"]["field"] == "reference"


# -- validation ----------------------------------------------------------------

def test_validation_unknown_checkpoint(client):
    r = _gen(client, checkpoint_id="ghost")
    assert r.status_code == 404
    assert r.json()["error"]["field"] == "checkpoint_id"


def test_validation_bounds(client):
    assert _gen(client, n_samples=0).status_code == 422
    assert _gen(client, n_samples=4097).status_code == 422
    assert _gen(client, alpha_global=1.5).status_code == 422
    assert _gen(client, iterations=-1).status_code == 422
    assert _gen(client, iterations=99).status_code == 422


def test_validation_error_names_field(client):
    r = _gen(client, alpha_global=2.0)
    assert r.json()["error"]["field"] == "alpha_global"


def test_validation_unknown_override_module(client):
    r = _gen(client, alpha_overrides={"f9": 0.5})
    assert r.status_code == 422
    assert r.json()["error"]["field"] == "alpha_overrides"


def test_validation_extra_fields_forbidden(client):
    r = _gen(client, bogus_field=1)
    assert r.status_code == 422


def test_validation_reference_needs_single_iteration(client):
    ref = {"points": [[0.0, 0.0]] * 16}
    r = _gen(client, reference=ref, iterations=2)
    assert r.status_code == 422


def test_validation_reference_exactly_one_source(client):
    r = _gen(client, reference={})
    assert r.status_code == 422
    r2 = _gen(client, reference={"points": [[0.0, 0.0]] * 16,
                                 "sample_id": "a" * 24})
    assert r2.status_code == 422


def test_validation_reference_shape(client):
    r = _gen(client, reference={"points": [[0.0, 0.0]] * 7})
    assert r.status_code == 422
    assert r.json()["error"]["field"] == "reference"


def test_overrides_on_moduleless_checkpoint(client):
    r = _gen(client, checkpoint_id="toy_p1", alpha_overrides={"f0": 0.5})
    assert r.status_code == 422


# -- trace store ---------------------------------------------------------------

def test_trace_ids_are_content_addressed():
    a = np.arange(8.0).reshape(2, 4)
    assert trace_id(a) == trace_id(a.copy())
    assert trace_id(a) != trace_id(a.T)
    assert trace_id(a) != trace_id(a + 1)


def test_trace_store_lru_eviction():
    store = TraceStore(capacity=2)
    ids = [store.put(np.full((1, 1), float(i))) for i in range(3)]
    assert store.get(ids[0]) is None  # evicted
    assert store.get(ids[1]) is not None
    assert store.get(ids[2]) is not None


def test_trace_store_get_refreshes_recency():
    store = TraceStore(capacity=2)
    a = store.put(np.full((1, 1), 1.0))
    b = store.put(np.full((1, 1), 2.0))
    store.get(a)
    store.put(np.full((1, 1), 3.0))  # should evict b, not a
    assert store.get(a) is not None
    assert store.get(b) is None


def test_trace_store_copies_data():
    store = TraceStore(capacity=2)
    arr = np.zeros((2, 2))
    key = store.put(arr)
    arr[0, 0] = 99.0
    assert store.get(key)[0, 0] == 0.0


# -- CLI parity ----------------------------------------------------------------

def test_cli_generate_matches_http_bytes(ckpt_dir, tmp_path, capsys):
    cases = [
        {"seed": 0, "n_samples": 16, "alpha_global": 0.2, "iterations": 1},
        {"seed": 1, "n_samples": 8, "alpha_global": 0.0, "iterations": 1},
        {"seed": 2, "n_samples": 4, "alpha_global": 1.0, "iterations": 3},
        {"seed": 3, "n_samples": 32, "alpha_global": 0.5, "iterations": 0},
        {"seed": 4, "n_samples": 16, "alpha_global": 0.3, "iterations": 1,
         "alpha_overrides": {"f0": 0.7}},
    ]
    client = TestClient(create_app(ckpt_dir))
    for i, case in enumerate(cases):
        out_dir = tmp_path / f"case{i}"
        argv = ["generate", "--checkpoint", str(ckpt_dir / "toy_p2.afl1"),
                "--seed", str(case["seed"]), "--out-dir", str(out_dir),
                "--n-samples", str(case["n_samples"]),
                "--alpha", str(case["alpha_global"]),
                "--iterations", str(case["iterations"])]
        if "alpha_overrides" in case:
            argv += ["--alpha-overrides", json.dumps(case["alpha_overrides"])]
        assert cli_main(argv) == 0
        http = client.post("/generate", json={"checkpoint_id": "toy_p2", **case})
        assert http.status_code == 200
        cli_bytes = (out_dir / "response.json").read_bytes()
        assert cli_bytes == http.content


def test_generate_response_payload_is_canonical(ckpt_dir):
    store = CheckpointStore(ckpt_dir)
    req = GenerateRequest(checkpoint_id="toy_p2", seed=0, n_samples=4)
    payload = generate_response(store, TraceStore(), req)
    blob = canonical_json(payload)
    assert json.loads(blob) == payload
    assert b": " not in blob  # compact separators
