"""HTTP JSON API over one immutable bank.

All endpoints are pure functions of the loaded bank plus the request, with
a single process-wide safety seed so gauge readings stay stable while a
client drags sliders. Meshes travel as plain JSON vertex/triangle arrays.
"""

from __future__ import annotations

import math

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from . import families as _families
from .bank import WeightBank, load_bank
from .mesher import decode_mesh
from .mixing import MixRequest, solve_mix
from .safety import SafetyConfig, SafetyEvaluator

DEFAULT_RESOLUTION = 64
MAX_RESOLUTION = 128
DEFAULT_SAFETY_SEED = 0


class MixRequestDto(BaseModel):
    targets: dict[str, float] = Field(default_factory=dict)
    constrained: list[str] | None = None  # default: every key in targets
    perf_target: float | None = None
    resolution: int = Field(default=DEFAULT_RESOLUTION, ge=2, le=MAX_RESOLUTION)
    want_mesh: bool = True
    force_mesh: bool = False  # return the mesh even when the gate rejects


class SweepRequestDto(BaseModel):
    param: str
    lo: float
    hi: float
    steps: int = Field(default=10, ge=1, le=1000)


def _finite_or_422(name, value):
    if not math.isfinite(value):
        raise HTTPException(status_code=422,
                            detail=f"{name} must be finite, got {value!r}")
    return float(value)


def create_app(bank: WeightBank, safety_seed: int = DEFAULT_SAFETY_SEED,
               safety_points: int = 2048) -> FastAPI:
    app = FastAPI(title="lamp", docs_url=None, redoc_url=None)
    # browser explorers run off a separate static server, so cross-origin
    # requests must be allowed; the API is local, read-only over one bank
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    evaluator = SafetyEvaluator(bank, SafetyConfig(
        n_points=safety_points, epsilon=bank.epsilon, rng_seed=safety_seed))
    name_to_index = {n: i for i, n in enumerate(bank.param_names)}
    try:
        probes = tuple(_families.supported_probes(bank.family))
    except KeyError:  # family without registered mesh probes: skip measured
        probes = ()

    def resolve_request(dto: MixRequestDto) -> MixRequest:
        names = dto.constrained if dto.constrained is not None else list(dto.targets)
        if not names and dto.perf_target is None:
            raise HTTPException(status_code=400, detail="empty constrained set")
        idx, targets = [], []
        for name in names:
            if name not in name_to_index:
                raise HTTPException(
                    status_code=400,
                    detail=f"unknown parameter {name!r}; "
                           f"bank has {bank.param_names}")
            if name not in dto.targets:
                raise HTTPException(status_code=400,
                                    detail=f"no target value for {name!r}")
            idx.append(name_to_index[name])
            targets.append(_finite_or_422(name, dto.targets[name]))
        for name in dto.targets:
            if name not in name_to_index:
                raise HTTPException(
                    status_code=400,
                    detail=f"unknown parameter {name!r}; "
                           f"bank has {bank.param_names}")
        order = np.argsort(idx)
        idx = [idx[i] for i in order]
        targets = [targets[i] for i in order]
        if dto.perf_target is not None:
            if not bank.has_perf:
                raise HTTPException(status_code=400,
                                    detail="bank has no performance column")
            idx.append(bank.d)
            targets.append(_finite_or_422("perf_target", dto.perf_target))
        return MixRequest(tuple(idx), tuple(targets))

    def solve_or_500(req: MixRequest):
        sol = solve_mix(bank, req)
        if sol.used_fallback:
            raise HTTPException(
                status_code=500,
                detail="solver fell back to ridge regularization; the "
                       "constrained design matrix is degenerate for "
                       f"columns {req.constrained}")
        return sol

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/bank")
    def bank_meta():
        return {
            "family": bank.family.family_id,
            "param_names": bank.param_names,
            "bounds": [list(b) for b in bank.family.bounds],
            "n": bank.n,
            "d": bank.d,
            "weight_dim": bank.weight_dim,
            "epsilon": bank.epsilon,
            "fingerprint": bank.fingerprint,
            "has_perf": bank.has_perf,
            "param_mean": bank.param_mean.tolist(),
            "param_std": bank.param_std.tolist(),
            "safety_seed": safety_seed,
        }

    @app.post("/mix")
    def mix(dto: MixRequestDto):
        req = resolve_request(dto)
        sol = solve_or_500(req)
        rep = evaluator.score(sol.alpha)
        response = {
            "alpha": sol.alpha.tolist(),
            "achieved": {n: float(v) for n, v in zip(bank.param_names,
                                                     sol.achieved)},
            "achieved_perf": sol.achieved_perf,
            "residual": sol.residual,
            "safety": rep.to_dict(),
            "measured": {},
        }
        if dto.want_mesh and (rep.accepted or dto.force_mesh):
            mesh = decode_mesh(bank.arch, sol.mixed_weights, dto.resolution,
                               provenance=f"service-mix-{bank.fingerprint[:8]}")
            response["mesh"] = {
                "vertices": mesh.vertices.tolist(),
                "triangles": mesh.triangles.tolist(),
            }
            for j in probes:
                try:
                    response["measured"][bank.param_names[j]] = (
                        _families.measure_param(mesh, bank.family, j))
                except _families.MeasurementError:
                    pass
        return response

    @app.post("/sweep")
    def sweep(dto: SweepRequestDto):
        if dto.param not in name_to_index:
            raise HTTPException(
                status_code=400,
                detail=f"unknown parameter {dto.param!r}; "
                       f"bank has {bank.param_names}")
        lo = _finite_or_422("lo", dto.lo)
        hi = _finite_or_422("hi", dto.hi)
        j = name_to_index[dto.param]
        targets = np.linspace(lo, hi, dto.steps)
        out = []
        for target in targets:
            sol = solve_or_500(MixRequest((j,), (float(target),)))
            rep = evaluator.score(sol.alpha)
            out.append({
                "target": float(target),
                "score": rep.score,
                "accepted": rep.accepted,
                "achieved": {n: float(v) for n, v in zip(bank.param_names,
                                                         sol.achieved)},
            })
        return out

    return app


def app_from_path(path, safety_seed: int = DEFAULT_SAFETY_SEED) -> FastAPI:
    return create_app(load_bank(path, verify=False), safety_seed=safety_seed)
