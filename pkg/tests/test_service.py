"""HTTP API over a trained bank: contracts, error codes, determinism."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import make_synth_bank
from lamp.families import supported_probes
from lamp.mixing import MixSolution
from lamp.service import create_app

BOUNDS_X = (0.30, 0.60)  # ellipsoid semi_axis_x
SPAN_X = BOUNDS_X[1] - BOUNDS_X[0]


@pytest.fixture(scope="module")
def client(ell_bank8):
    return TestClient(create_app(ell_bank8, safety_seed=0))


@pytest.fixture(scope="module")
def bank(ell_bank8):
    return ell_bank8


def test_healthz(client):
    r = client.get("/healthz")
    assert r.status_code == 200
    assert r.json() == {"status": "ok"}


def test_bank_metadata_matches_bank(client, bank):
    r = client.get("/bank")
    assert r.status_code == 200
    meta = r.json()
    assert meta["family"] == "ellipsoid"
    assert meta["param_names"] == bank.param_names
    assert len(meta["param_names"]) == meta["d"] == bank.d
    assert meta["n"] == bank.n
    assert meta["weight_dim"] == bank.weight_dim
    assert meta["epsilon"] == bank.epsilon
    assert meta["fingerprint"] == bank.fingerprint
    assert meta["bounds"] == [list(b) for b in bank.family.bounds]
    assert meta["safety_seed"] == 0
    assert client.get("/bank").json() == meta


def test_mix_exemplar_params_accepted_and_measured(client, bank):
    targets = dict(zip(bank.param_names, bank.P[0].tolist()))
    r = client.post("/mix", json={"targets": targets})
    assert r.status_code == 200
    body = r.json()
    assert body["safety"]["accepted"] is True
    assert body["safety"]["epsilon"] == bank.epsilon
    assert body["safety"]["seed"] == 0
    assert len(body["alpha"]) == bank.n
    assert abs(sum(body["alpha"]) - 1.0) < 1e-9
    for name, want in targets.items():
        assert body["achieved"][name] == pytest.approx(want, abs=1e-9)
    assert body["residual"] < 1e-9
    assert "mesh" in body
    verts = np.asarray(body["mesh"]["vertices"])
    tris = np.asarray(body["mesh"]["triangles"])
    assert verts.shape[1] == 3 and tris.shape[1] == 3
    assert tris.max() < len(verts)
    for j in supported_probes(bank.family):
        name = bank.param_names[j]
        assert body["measured"][name] == pytest.approx(targets[name], abs=0.05)


def test_mix_unknown_parameter_400(client):
    r = client.post("/mix", json={"targets": {"wheelbase": 0.5}})
    assert r.status_code == 400
    assert "wheelbase" in r.json()["detail"]
    r = client.post("/mix", json={"targets": {"semi_axis_x": 0.4},
                                  "constrained": ["semi_axis_q"]})
    assert r.status_code == 400


def test_mix_empty_constrained_400(client):
    assert client.post("/mix", json={"targets": {}}).status_code == 400
    r = client.post("/mix", json={"targets": {"semi_axis_x": 0.4},
                                  "constrained": []})
    assert r.status_code == 400


def test_mix_constrained_without_value_400(client):
    r = client.post("/mix", json={"targets": {"semi_axis_x": 0.4},
                                  "constrained": ["semi_axis_y"]})
    assert r.status_code == 400
    assert "semi_axis_y" in r.json()["detail"]


def test_mix_non_finite_target_422(client):
    # raw body: the JSON Infinity/NaN extensions parse server-side
    for literal in ("Infinity", "NaN"):
        r = client.post("/mix", content='{"targets": {"semi_axis_x": %s}}' % literal,
                        headers={"Content-Type": "application/json"})
        assert r.status_code == 422


def test_mix_resolution_cap_422(client):
    r = client.post("/mix", json={"targets": {"semi_axis_x": 0.4},
                                  "resolution": 256})
    assert r.status_code == 422


def test_mix_rejected_omits_mesh_unless_forced(client):
    wild = {"targets": {"semi_axis_x": BOUNDS_X[1] + 3.0 * SPAN_X}}
    r = client.post("/mix", json=wild)
    assert r.status_code == 200
    body = r.json()
    assert body["safety"]["accepted"] is False
    assert body["safety"]["score"] >= body["safety"]["epsilon"]
    assert "mesh" not in body
    assert body["measured"] == {}

    r = client.post("/mix", json={**wild, "force_mesh": True})
    assert r.status_code == 200
    assert "mesh" in r.json()


def test_mix_want_mesh_false_skips_decode(client):
    r = client.post("/mix", json={"targets": {"semi_axis_x": 0.4},
                                  "want_mesh": False})
    assert r.status_code == 200
    body = r.json()
    assert body["safety"]["accepted"] is True
    assert "mesh" not in body
    assert body["measured"] == {}


def test_mix_perf_target_only(client, bank):
    r = client.post("/mix", json={"targets": {}, "perf_target": 0.5})
    assert r.status_code == 200
    assert r.json()["achieved_perf"] == pytest.approx(0.5, abs=1e-9)


def test_perf_target_without_perf_column_400():
    synth = make_synth_bank(np.array([[0.35, 0.4, 0.5], [0.55, 0.45, 0.35],
                                      [0.45, 0.35, 0.55], [0.5, 0.5, 0.4]]))
    app = create_app(synth)
    with TestClient(app) as c:
        r = c.post("/mix", json={"targets": {"p0": 0.4}, "perf_target": 0.5})
        assert r.status_code == 400
        assert "performance" in r.json()["detail"]


def test_solver_fallback_maps_to_500(client, monkeypatch, bank):
    import lamp.service as service

    def fake_solve(b, req):
        return MixSolution(
            alpha=np.full(b.n, 1.0 / b.n), achieved=b.param_mean,
            achieved_perf=None, residual=0.0, residual_raw=0.0,
            alpha_norm=1.0, mixed_weights=np.zeros(b.weight_dim),
            constrained=req.constrained, targets=req.targets,
            used_fallback=True,
        )

    monkeypatch.setattr(service, "solve_mix", fake_solve)
    r = client.post("/mix", json={"targets": {"semi_axis_x": 0.4}})
    assert r.status_code == 500
    assert "ridge" in r.json()["detail"]


def test_sweep_ordered_accepted_deterministic(client):
    body = {"param": "semi_axis_x", "lo": BOUNDS_X[0], "hi": BOUNDS_X[1],
            "steps": 10}
    r = client.post("/sweep", json=body)
    assert r.status_code == 200
    entries = r.json()
    assert len(entries) == 10
    want = np.linspace(BOUNDS_X[0], BOUNDS_X[1], 10)
    got = [e["target"] for e in entries]
    assert got == pytest.approx(want.tolist())
    assert all(e["accepted"] for e in entries)  # in-range sweep on a good bank
    for e in entries:
        assert set(e) == {"target", "score", "accepted", "achieved"}
        assert "mesh" not in e
    assert client.post("/sweep", json=body).content == r.content


def test_sweep_errors(client):
    r = client.post("/sweep", json={"param": "no_such", "lo": 0, "hi": 1,
                                    "steps": 3})
    assert r.status_code == 400
    r = client.post("/sweep",
                    content='{"param": "semi_axis_x", "lo": -Infinity, '
                            '"hi": 1, "steps": 3}',
                    headers={"Content-Type": "application/json"})
    assert r.status_code == 422
    r = client.post("/sweep", json={"param": "semi_axis_x", "lo": 0, "hi": 1,
                                    "steps": 0})
    assert r.status_code == 422
