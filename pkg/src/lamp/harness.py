"""Experiment pipelines over banks, baselines, safety, and metrics.

Each run_* function executes one experiment end to end and writes, under
cfg.out_dir, one or more CSV tables, optional SVG scatter plots, and a
manifest.json embedding the config, its hash, bank fingerprints, seeds,
and summary statistics. Reruns with the same config are byte-identical.

Every generated mesh is scored by the safety gate. Rejected generations
stay in the tables (flagged) but are excluded from fidelity aggregates
and counted separately in the summary.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import baselines as _baselines
from . import families as _families
from .bank import WeightBank, _child_seeds, build_bank, load_bank, subset_bank
from .evaluation import chamfer, fit_surrogate, mds_embed, mmd, regression_scores
from .families import ConfigurationError, ShapeInstance
from .mesher import (
    DECODE_BOUNDS,
    OccupancyGrid,
    VoxelGrid,
    decode_mesh,
    grid_nodes,
    marching_cubes,
    sample_surface,
    voxelize,
)
from .mixing import MixRequest, affine_projection, optimize_performance, solve_mix
from .safety import (
    SafetyConfig,
    SafetyEvaluator,
    auto_label,
    calibrate_cd_threshold,
    safe_range,
    validate_metric,
)
from .sdf_net import TrainConfig

EXPERIMENTS = (
    "interpolation",
    "range_extrapolation",
    "large_extrapolation",
    "multi_param",
    "perf_opt",
    "ablation",
    "safety_validation",
)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    family: str = "ellipsoid"
    out_dir: str = "reports"
    seed: int = 0
    seeds: tuple = ()  # trend experiments; empty means (seed,)
    bank_size: int = 100
    bank_sizes: tuple = (10, 50, 100)
    holdout_count: int = 20
    sample_mode: str = "full_range"
    fraction: float = 1.0
    sweep_steps: int = 10
    extrapolation: float = 1.0  # sweep reach beyond bounds, fraction of span
    max_extrapolation: float = 3.0  # safety sweeps and safe-range walks
    n_params_swept: int = 0  # 0 means every probe-supported parameter
    decay: float = 0.10
    n_trials: int = 100
    resolution: int = 96
    voxel_resolution: int = 64
    label_resolution: int = 64
    cloud_points: int = 2048
    safety_points: int = 2048
    surrogate_train: int = 120
    surrogate_lambda: float = 0.03
    surrogate_source: str = "analytic"  # "decoded" trains on the bank's meshes
    aelpa_k: int = 0  # 0 means min(N-1, 2d)
    dni_ridge: float = 1e-6
    quality_threshold: float = 0.01
    epsilon: float = 0.01
    families_extra: tuple = ()  # safety_validation scores several banks
    bank_path: str = ""  # reuse a prebuilt bank for single-bank experiments
    train: dict | None = None  # TrainConfig overrides (rng_seed comes from seed)
    finetune: dict | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(
                f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}"
            )
        _families.get_family(self.family)
        for fam in self.families_extra:
            _families.get_family(fam)
        if self.surrogate_source not in ("analytic", "decoded"):
            raise ConfigurationError(
                "surrogate_source must be 'analytic' or 'decoded', "
                f"got {self.surrogate_source!r}"
            )
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "bank_sizes", tuple(int(n) for n in self.bank_sizes))
        object.__setattr__(self, "families_extra", tuple(self.families_extra))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls(**json.loads(text))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _seed_list(cfg):
    return cfg.seeds if cfg.seeds else (cfg.seed,)


def _train_cfg(cfg, seed) -> TrainConfig:
    return TrainConfig(**{**(cfg.train or {}), "rng_seed": int(seed)})


def _finetune_cfg(cfg, seed):
    if cfg.finetune is None:
        return None
    return TrainConfig(**{**cfg.finetune, "rng_seed": int(seed)})


def _bank_for(cfg, family_id, n, seed, sample_mode=None, fraction=None) -> WeightBank:
    if cfg.bank_path:
        bank = load_bank(cfg.bank_path, verify=False)
        if bank.family.family_id == family_id:
            return bank
        # multi-family experiments fall through and build the others
    return build_bank(
        _families.get_family(family_id),
        n,
        sample_mode=sample_mode or cfg.sample_mode,
        train_cfg=_train_cfg(cfg, seed),
        finetune_cfg=_finetune_cfg(cfg, seed),
        fraction=cfg.fraction if fraction is None else fraction,
        quality_threshold=cfg.quality_threshold,
        epsilon=cfg.epsilon,
    )


def _safety_cfg(cfg) -> SafetyConfig:
    return SafetyConfig(
        n_points=cfg.safety_points, epsilon=cfg.epsilon, rng_seed=cfg.seed
    )


# ------------------------------------------------------------ report io


def _fmt_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for row in rows:
            w.writerow([_fmt_cell(row.get(k)) for k in fieldnames])


def _to_jsonable(v):
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_to_jsonable(x) for x in v]
    return v


def write_manifest(cfg, out, fingerprints, summary, files):
    manifest = {
        "experiment": cfg.experiment,
        "config": _to_jsonable(asdict(cfg)),
        "config_hash": config_hash(cfg),
        "bank_fingerprints": list(fingerprints),
        "seeds": list(_seed_list(cfg)),
        "summary": _to_jsonable(summary),
        "files": files,
    }
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def svg_scatter(path, series, title, xlabel, ylabel, size=(640, 480)):
    """Minimal deterministic scatter plot; series = [(label, color, xs, ys)]."""
    w, h = size
    ml, mr, mt, mb = 60, 20, 36, 44
    xs_all = np.concatenate([np.asarray(s[2], dtype=np.float64) for s in series])
    ys_all = np.concatenate([np.asarray(s[3], dtype=np.float64) for s in series])
    if xs_all.size == 0:
        xs_all = ys_all = np.array([0.0, 1.0])
    x0, x1 = float(xs_all.min()), float(xs_all.max())
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (w - ml - mr)

    def py(y):
        return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.6g}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<line x1="{ml}" y1="{h - mb}" x2="{w - mr}" y2="{h - mb}" '
        f'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{h - mb}" stroke="black"/>',
        f'<text x="{w / 2:.6g}" y="{h - 10}" text-anchor="middle" '
        f'font-size="12">{xlabel}</text>',
        f'<text x="14" y="{h / 2:.6g}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {h / 2:.6g})">{ylabel}</text>',
        f'<text x="{ml}" y="{h - mb + 16}" font-size="10" '
        f'text-anchor="middle">{x0:.4g}</text>',
        f'<text x="{w - mr}" y="{h - mb + 16}" font-size="10" '
        f'text-anchor="middle">{x1:.4g}</text>',
        f'<text x="{ml - 6}" y="{h - mb}" font-size="10" '
        f'text-anchor="end">{y0:.4g}</text>',
        f'<text x="{ml - 6}" y="{mt + 4}" font-size="10" '
        f'text-anchor="end">{y1:.4g}</text>',
    ]
    for i, (label, color, xs, ys) in enumerate(series):
        for x, y in zip(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)):
            out.append(
                f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" '
                f'fill="{color}" fill-opacity="0.75"/>'
            )
        out.append(
            f'<text x="{w - mr - 4}" y="{mt + 14 * (i + 1)}" text-anchor="end" '
            f'font-size="11" fill="{color}">{label}</text>'
        )
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


# ------------------------------------------------------------ shared steps


def _analytic_mesh(family, params, resolution):
    inst = ShapeInstance(family, params)
    res3 = (resolution,) * 3
    vals = _families.analytic_sdf(inst, grid_nodes(res3, DECODE_BOUNDS))
    return marching_cubes(VoxelGrid(res3, DECODE_BOUNDS, vals.astype(np.float32)))


def _analytic_occupancy(family, params, resolution) -> OccupancyGrid:
    inst = ShapeInstance(family, params)
    res3 = (resolution,) * 3
    vals = _families.analytic_sdf(inst, grid_nodes(res3, DECODE_BOUNDS))
    return OccupancyGrid(resolution=res3, bounds=DECODE_BOUNDS, occupied=vals < 0.0)


def _iou_vs_analytic(mesh, family, params, resolution):
    from .evaluation import iou

    return iou(voxelize(mesh, resolution), _analytic_occupancy(family, params, resolution))


def _family_surrogate(cfg, family, bank=None):
    """Surrogate for reading parameters back off generated meshes.

    surrogate_source "analytic" trains on analytic meshes sampled across the
    family range; "decoded" trains on the bank's own decoded exemplar meshes,
    matching the geometry domain the surrogate is later asked to read.
    surrogate_lambda == 0 delegates lambda to per-parameter cross-validation.
    """
    clouds, params = [], []
    if cfg.surrogate_source == "decoded":
        if bank is None:
            raise ConfigurationError("decoded surrogate_source needs a bank")
        for i in range(bank.n):
            mesh = decode_mesh(bank.arch, bank.W[i], cfg.label_resolution,
                               provenance=f"surrogate-exemplar-{i}")
            if mesh.is_empty:
                continue
            clouds.append(sample_surface(mesh, cfg.cloud_points, seed=90_000 + i))
            params.append(np.asarray(bank.P[i], dtype=np.float64))
    else:
        seeds = _child_seeds(cfg.seed, 444, cfg.surrogate_train)
        for s in seeds:
            inst = _families.sample_design(family, s, mode="full_range")
            mesh = _analytic_mesh(family, inst.params, cfg.label_resolution)
            clouds.append(sample_surface(mesh, cfg.cloud_points,
                                         seed=int(s) % (2**32)))
            params.append(inst.params)
    return fit_surrogate(
        clouds, np.stack(params),
        lam=cfg.surrogate_lambda if cfg.surrogate_lambda > 0 else None,
        n_sample_points=cfg.cloud_points,
    )


def _surrogate_mae(surrogate, mesh, target_params, bank, seed=0):
    pred = surrogate.predict(mesh, seed=seed)
    t = (np.asarray(target_params) - bank.param_mean) / bank.param_std
    p = (pred - bank.param_mean) / bank.param_std
    return float(np.abs(p - t).mean())


def _swept_params(cfg, family, rng):
    supported = list(_families.supported_probes(family))
    k = cfg.n_params_swept or len(supported)
    k = min(k, len(supported))
    idx = rng.choice(len(supported), size=k, replace=False)
    return sorted(supported[i] for i in idx)


def _ensure_out(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    probe = os.path.join(cfg.out_dir, ".write_probe")
    try:
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise ConfigurationError(f"output dir not writable: {exc}") from None
    return cfg.out_dir


def _weights_for(method, bank, dni, aelpa, param_index, target, evaluator):
    """One generated design: weights, coefficients, solver diagnostics."""
    if method == "lamp":
        sol = solve_mix(bank, MixRequest((param_index,), (float(target),)))
        return sol.mixed_weights, sol.alpha, sol.residual, sol.used_fallback
    p = _families.mean_design(bank.family).params.copy()
    p[param_index] = target
    if method == "dni":
        w = _baselines.dni_generate(dni, p)
    else:
        w = _baselines.aelpa_generate(aelpa, p)
    alpha, resid = affine_projection(bank, w)
    return w, alpha, resid, False


def _accepted_mean(rows, key, accepted_key="accepted"):
    vals = [r[key] for r in rows if r.get(accepted_key) and r.get(key) is not None]
    return float(np.mean(vals)) if vals else None


# ------------------------------------------------------------ experiments


def run_interpolation(cfg: ExperimentConfig) -> dict:
    out = _ensure_out(cfg)
    if cfg.holdout_count < 1:
        raise ConfigurationError("holdout_count must be >= 1")
    family = _families.get_family(cfg.family)
    bank = _bank_for(cfg, cfg.family, cfg.bank_size, cfg.seed)
    surrogate = _family_surrogate(cfg, family, bank=bank)
    evaluator = SafetyEvaluator(bank, _safety_cfg(cfg))
    holdout_seeds = _child_seeds(cfg.seed, 999, cfg.holdout_count)

    rows = []
    for t, s in enumerate(holdout_seeds):
        inst = _families.sample_design(family, s, mode=cfg.sample_mode,
                                       fraction=cfg.fraction)
        sol = solve_mix(bank, MixRequest(tuple(range(bank.d)),
                                         tuple(float(x) for x in inst.params)))
        rep = evaluator.score(sol.alpha)
        mesh = decode_mesh(bank.arch, sol.mixed_weights, cfg.resolution,
                           provenance=f"interpolation-{t}")
        row = {
            "index": t,
            **{f"target_{n}": float(v) for n, v in zip(bank.param_names, inst.params)},
            "alpha_norm": float(np.linalg.norm(sol.alpha)),
            "residual": sol.residual,
            "safety_score": rep.score,
            "accepted": rep.accepted,
            "cd": None, "iou": None, "surrogate_mae": None,
        }
        if not mesh.is_empty:
            ref = _analytic_mesh(family, inst.params, cfg.resolution)
            row["cd"] = chamfer(
                sample_surface(mesh, cfg.cloud_points, seed=2 * t),
                sample_surface(ref, cfg.cloud_points, seed=2 * t + 1),
            )
            row["iou"] = _iou_vs_analytic(mesh, family, inst.params,
                                          cfg.voxel_resolution)
            row["surrogate_mae"] = _surrogate_mae(surrogate, mesh, inst.params,
                                                  bank, seed=t)
        rows.append(row)

    fields = list(rows[0].keys())
    write_csv(os.path.join(out, "interpolation.csv"), fields, rows)
    summary = {
        "n_targets": len(rows),
        "n_rejected": sum(1 for r in rows if not r["accepted"]),
        "mean_cd": _accepted_mean(rows, "cd"),
        "mean_iou": _accepted_mean(rows, "iou"),
        "mean_surrogate_mae": _accepted_mean(rows, "surrogate_mae"),
    }
    return write_manifest(cfg, out, [bank.fingerprint], summary,
                          {"table": "interpolation.csv"})


def run_range_extrapolation(cfg: ExperimentConfig) -> dict:
    out = _ensure_out(cfg)
    if cfg.fraction >= 1.0:
        raise ConfigurationError(
            "range extrapolation needs fraction < 1 so a holdout region exists"
        )
    if cfg.holdout_count < 1:
        raise ConfigurationError("holdout_count must be >= 1")
    family = _families.get_family(cfg.family)
    bank = _bank_for(cfg, cfg.family, cfg.bank_size, cfg.seed,
                     sample_mode="centered_fraction", fraction=cfg.fraction)
    dni = _baselines.dni_fit(bank, ridge=cfg.dni_ridge)
    surrogate = _family_surrogate(cfg, family, bank=bank)
    evaluator = SafetyEvaluator(bank, _safety_cfg(cfg))

    bounds = np.asarray(family.bounds, dtype=np.float64)
    span = bounds[:, 1] - bounds[:, 0]
    center = bounds.mean(axis=1)
    inner_lo = center - 0.5 * cfg.fraction * span
    inner_hi = center + 0.5 * cfg.fraction * span

    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(cfg.seed, 333))
    )
    targets = []
    guard = 0
    while len(targets) < cfg.holdout_count:
        p = rng.uniform(bounds[:, 0], bounds[:, 1])
        if np.any((p < inner_lo) | (p > inner_hi)):
            targets.append(p)
        guard += 1
        if guard > 1000 * cfg.holdout_count:
            raise ConfigurationError("could not sample targets outside the "
                                     "training interval")

    rows = []
    for t, p in enumerate(targets):
        for method in ("lamp", "dni"):
            if method == "lamp":
                sol = solve_mix(bank, MixRequest(tuple(range(bank.d)),
                                                 tuple(float(x) for x in p)))
                w, alpha, resid = sol.mixed_weights, sol.alpha, sol.residual
            else:
                w = _baselines.dni_generate(dni, p)
                alpha, resid = affine_projection(bank, w)
            rep = evaluator.score_weights(w, alpha)
            mesh = decode_mesh(bank.arch, w, cfg.resolution,
                               provenance=f"range-extrap-{method}-{t}")
            row = {
                "index": t, "method": method,
                **{f"target_{n}": float(v) for n, v in zip(bank.param_names, p)},
                "residual": resid,
                "safety_score": rep.score, "accepted": rep.accepted,
                "cd": None, "iou": None, "surrogate_mae": None,
            }
            if not mesh.is_empty:
                ref = _analytic_mesh(family, p, cfg.resolution)
                row["cd"] = chamfer(
                    sample_surface(mesh, cfg.cloud_points, seed=2 * t),
                    sample_surface(ref, cfg.cloud_points, seed=2 * t + 1),
                )
                row["iou"] = _iou_vs_analytic(mesh, family, p, cfg.voxel_resolution)
                row["surrogate_mae"] = _surrogate_mae(surrogate, mesh, p, bank, seed=t)
            rows.append(row)

    fields = list(rows[0].keys())
    write_csv(os.path.join(out, "range_extrapolation.csv"), fields, rows)
    by_method = {
        m: {
            "mean_cd": _accepted_mean([r for r in rows if r["method"] == m], "cd"),
            "mean_iou": _accepted_mean([r for r in rows if r["method"] == m], "iou"),
            "mean_surrogate_mae": _accepted_mean(
                [r for r in rows if r["method"] == m], "surrogate_mae"),
            "n_rejected": sum(1 for r in rows
                              if r["method"] == m and not r["accepted"]),
        }
        for m in ("lamp", "dni")
    }
    summary = {"methods": by_method, "n_targets": len(targets)}
    lamp_mae = by_method["lamp"]["mean_surrogate_mae"]
    dni_mae = by_method["dni"]["mean_surrogate_mae"]
    if lamp_mae is not None and dni_mae is not None:
        summary["lamp_mae_leq_dni"] = bool(lamp_mae <= dni_mae)
    return write_manifest(cfg, out, [bank.fingerprint], summary,
                          {"table": "range_extrapolation.csv"})


def run_large_extrapolation(cfg: ExperimentConfig) -> dict:
    out = _ensure_out(cfg)
    family = _families.get_family(cfg.family)
    bank = _bank_for(cfg, cfg.family, cfg.bank_size, cfg.seed)
    dni = _baselines.dni_fit(bank, ridge=cfg.dni_ridge)
    k = cfg.aelpa_k or min(bank.n - 1, 2 * bank.d)
    aelpa = _baselines.aelpa_fit(bank, k=k)
    surrogate = _family_surrogate(cfg, family, bank=bank)
    evaluator = SafetyEvaluator(bank, _safety_cfg(cfg))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 222)))
    swept = _swept_params(cfg, family, rng)
    bounds = np.asarray(family.bounds, dtype=np.float64)

    rows = []
    clouds_by_method = {"lamp": [], "dni": [], "aelpa": []}
    for j in swept:
        lo, hi = bounds[j]
        span = hi - lo
        targets = np.linspace(lo - cfg.extrapolation * span,
                              hi + cfg.extrapolation * span, cfg.sweep_steps)
        for step, target in enumerate(targets):
            for method in ("lamp", "dni", "aelpa"):
                w, alpha, resid, fallback = _weights_for(
                    method, bank, dni, aelpa, j, float(target), evaluator)
                rep = evaluator.score_weights(w, alpha)
                mesh = decode_mesh(bank.arch, w, cfg.resolution,
                                   provenance=f"large-extrap-{method}-{j}-{step}")
                row = {
                    "method": method, "param": bank.param_names[j],
                    "target": float(target),
                    "in_range": bool(lo <= target <= hi),
                    "projection_residual": resid,
                    "safety_score": rep.score, "accepted": rep.accepted,
                    "measured": None, "surrogate_pred": None, "cd": None,
                }
                if not mesh.is_empty:
                    try:
                        row["measured"] = _families.measure_param(mesh, family, j)
                    except _families.MeasurementError:
                        pass
                    row["surrogate_pred"] = float(
                        surrogate.predict(mesh, seed=step)[j])
                    cloud = sample_surface(mesh, cfg.cloud_points, seed=step)
                    if rep.accepted:
                        clouds_by_method[method].append(cloud)
                rows.append(row)

    fields = list(rows[0].keys())
    write_csv(os.path.join(out, "large_extrapolation.csv"), fields, rows)

    reference = [
        sample_surface(_analytic_mesh(family, bank.P[i], cfg.label_resolution),
                       cfg.cloud_points, seed=i)
        for i in range(bank.n)
    ]
    summary = {"swept_params": [bank.param_names[j] for j in swept], "methods": {}}
    for m in ("lamp", "dni", "aelpa"):
        entry = {"n_accepted": len(clouds_by_method[m]),
                 "n_total": sum(1 for r in rows if r["method"] == m)}
        # R2 per swept parameter (scale invariant), then averaged, so one
        # wide-range parameter cannot mask another's misses
        per_r2, per_mae = {}, {}
        for j in swept:
            name = bank.param_names[j]
            mrows = [r for r in rows if r["method"] == m and r["accepted"]
                     and r["measured"] is not None and r["param"] == name]
            if len(mrows) >= 2 and len({r["target"] for r in mrows}) >= 2:
                scores = regression_scores([r["target"] for r in mrows],
                                           [r["measured"] for r in mrows])
                per_r2[name] = scores["r2"]
                per_mae[name] = scores["mae"] / float(bank.param_std[j])
        if per_r2:
            entry["measured_r2"] = float(np.mean(list(per_r2.values())))
            entry["measured_mae"] = float(np.mean(list(per_mae.values())))
            entry["per_param_r2"] = per_r2
        if clouds_by_method[m]:
            entry["mmd"] = mmd(clouds_by_method[m], reference)
        summary["methods"][m] = entry

    colors = {"lamp": "#1b6ca8", "dni": "#c0392b", "aelpa": "#27ae60"}
    first = swept[0]
    series = []
    for m in ("lamp", "dni", "aelpa"):
        mrows = [r for r in rows if r["method"] == m
                 and r["param"] == bank.param_names[first]
                 and r["measured"] is not None]
        series.append((m, colors[m], [r["target"] for r in mrows],
                       [r["measured"] for r in mrows]))
    svg_scatter(os.path.join(out, "measured_vs_target.svg"), series,
                f"{cfg.family}: measured vs target ({bank.param_names[first]})",
                "target", "measured")

    mds_sets = [("reference", "#555555", reference[: min(len(reference), 20)])]
    for m in ("lamp", "dni", "aelpa"):
        mds_sets.append((m, colors[m], clouds_by_method[m]))
    all_clouds = [c for _, _, cs in mds_sets for c in cs]
    if len(all_clouds) >= 2:
        npts = len(all_clouds)
        D = np.zeros((npts, npts))
        for a in range(npts):
            for b in range(a + 1, npts):
                D[a, b] = D[b, a] = np.sqrt(max(chamfer(all_clouds[a],
                                                        all_clouds[b]), 0.0))
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            coords = mds_embed(D)
        series, at = [], 0
        for label, color, cs in mds_sets:
            series.append((label, color, coords[at : at + len(cs), 0],
                           coords[at : at + len(cs), 1]))
            at += len(cs)
        svg_scatter(os.path.join(out, "mds_scatter.svg"), series,
                    f"{cfg.family}: generation MDS", "mds-1", "mds-2")

    files = {"table": "large_extrapolation.csv",
             "scatter": "measured_vs_target.svg", "mds": "mds_scatter.svg"}
    return write_manifest(cfg, out, [bank.fingerprint], summary, files)


def run_multi_param(cfg: ExperimentConfig) -> dict:
    """Joint extrapolated targets over a random parameter subset."""
    out = _ensure_out(cfg)
    if cfg.holdout_count < 1:
        raise ConfigurationError("holdout_count must be >= 1")
    family = _families.get_family(cfg.family)
    bank = _bank_for(cfg, cfg.family, cfg.bank_size, cfg.seed)
    dni = _baselines.dni_fit(bank, ridge=cfg.dni_ridge)
    evaluator = SafetyEvaluator(bank, _safety_cfg(cfg))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 111)))
    swept = _swept_params(cfg, family, rng)
    bounds = np.asarray(family.bounds, dtype=np.float64)
    span = bounds[:, 1] - bounds[:, 0]

    rows = []
    for t in range(cfg.holdout_count):
        p = _families.mean_design(family).params.copy()
        for j in swept:
            p[j] = rng.uniform(bounds[j, 0] - cfg.extrapolation * span[j],
                               bounds[j, 1] + cfg.extrapolation * span[j])
        for method in ("lamp", "dni"):
            if method == "lamp":
                sol = solve_mix(bank, MixRequest(
                    tuple(swept), tuple(float(p[j]) for j in swept)))
                w, alpha, resid = sol.mixed_weights, sol.alpha, sol.residual
            else:
                w = _baselines.dni_generate(dni, p)
                alpha, resid = affine_projection(bank, w)
            rep = evaluator.score_weights(w, alpha)
            mesh = decode_mesh(bank.arch, w, cfg.resolution,
                               provenance=f"multi-param-{method}-{t}")
            row = {"index": t, "method": method,
                   **{f"target_{bank.param_names[j]}": float(p[j]) for j in swept},
                   "residual": resid, "safety_score": rep.score,
                   "accepted": rep.accepted}
            for j in swept:
                key = f"measured_{bank.param_names[j]}"
                row[key] = None
                if not mesh.is_empty:
                    try:
                        row[key] = _families.measure_param(mesh, family, j)
                    except _families.MeasurementError:
                        pass
            rows.append(row)

    fields = list(rows[0].keys())
    write_csv(os.path.join(out, "multi_param.csv"), fields, rows)
    summary = {"swept_params": [bank.param_names[j] for j in swept], "methods": {}}
    for m in ("lamp", "dni"):
        pairs = []
        for r in rows:
            if r["method"] != m or not r["accepted"]:
                continue
            for j in swept:
                got = r[f"measured_{bank.param_names[j]}"]
                if got is not None:
                    pairs.append((r[f"target_{bank.param_names[j]}"], got))
        entry = {"n_pairs": len(pairs)}
        if len(pairs) >= 2 and len({a for a, _ in pairs}) >= 2:
            scores = regression_scores([a for a, _ in pairs], [b for _, b in pairs])
            entry.update(measured_r2=scores["r2"], measured_mae=scores["mae"])
        summary["methods"][m] = entry
    return write_manifest(cfg, out, [bank.fingerprint], summary,
                          {"table": "multi_param.csv"})


def run_perf_opt(cfg: ExperimentConfig) -> dict:
    out = _ensure_out(cfg)
    if cfg.n_trials < 1:
        raise ConfigurationError("n_trials must be >= 1")
    family = _families.get_family(cfg.family)
    bank = _bank_for(cfg, cfg.family, cfg.bank_size, cfg.seed)
    if not bank.has_perf:
        raise ConfigurationError("perf_opt needs a bank with the proxy column")
    evaluator = SafetyEvaluator(bank, _safety_cfg(cfg))
    proxy_idx = _families.proxy_param_indices(family)
    probes = set(_families.supported_probes(family))
    if not set(proxy_idx) <= probes:
        raise ConfigurationError(
            f"{family.family_id}: proxy factors are not mesh-measurable"
        )
    design_seeds = _child_seeds(cfg.seed, 888, cfg.n_trials)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 777)))

    def measured_proxy_and_params(mesh, base_params, indices):
        """Proxy recomputed from mesh measurements of the given params."""
        measured = base_params.copy()
        for j in indices:
            measured[j] = _families.measure_param(mesh, family, j)
        return _families.performance_proxy(
            ShapeInstance(family, measured)), measured

    rows = []
    for t, s in enumerate(design_seeds):
        inst = _families.sample_design(family, s, mode="full_range")
        c0 = _families.performance_proxy(inst)
        target_perf = (1.0 - cfg.decay) * c0
        n_fixed = int(rng.integers(1, bank.d))
        fixed = sorted(rng.choice(sorted(probes), size=min(n_fixed, len(probes)),
                                  replace=False).tolist())
        sol = optimize_performance(
            bank, {j: float(inst.params[j]) for j in fixed}, target_perf)
        rep = evaluator.score(sol.alpha)
        mesh = decode_mesh(bank.arch, sol.mixed_weights, cfg.resolution,
                           provenance=f"perf-opt-{t}")
        # reference: the original design generated by the same pipeline, so
        # the decay ratio compares like with like and decoder bias cancels
        base_sol = solve_mix(bank, MixRequest(
            tuple(range(bank.d)), tuple(float(x) for x in inst.params)))
        base_mesh = decode_mesh(bank.arch, base_sol.mixed_weights,
                                cfg.resolution, provenance=f"perf-base-{t}")
        row = {
            "trial": t,
            "fixed": "|".join(bank.param_names[j] for j in fixed),
            "proxy_original": c0, "proxy_target": target_perf,
            "proxy_achieved": sol.achieved_perf,
            "residual": sol.residual,
            "safety_score": rep.score, "accepted": rep.accepted,
            "proxy_measured": None, "proxy_measured_base": None,
            "decay_error_pp": None, "fixed_mae": None, "baseline_mae": None,
        }
        need = sorted(set(fixed) | set(proxy_idx))
        if not mesh.is_empty and not base_mesh.is_empty:
            try:
                proxy_measured, measured = measured_proxy_and_params(
                    mesh, inst.params, need)
                proxy_base, measured_base = measured_proxy_and_params(
                    base_mesh, inst.params, need)
                row["proxy_measured"] = proxy_measured
                row["proxy_measured_base"] = proxy_base
                if proxy_base > 1e-9:
                    row["decay_error_pp"] = abs(
                        proxy_measured / proxy_base - (1.0 - cfg.decay)) * 100.0
                row["fixed_mae"] = float(np.mean(
                    [abs(measured[j] - inst.params[j]) / bank.param_std[j]
                     for j in fixed]))
                row["baseline_mae"] = float(np.mean(
                    [abs(measured_base[j] - inst.params[j]) / bank.param_std[j]
                     for j in fixed]))
            except _families.MeasurementError:
                pass
        rows.append(row)

    fields = list(rows[0].keys())
    write_csv(os.path.join(out, "perf_opt.csv"), fields, rows)
    decay_errs = [r["decay_error_pp"] for r in rows
                  if r["accepted"] and r["decay_error_pp"] is not None]
    summary = {
        "n_trials": len(rows),
        "n_rejected": sum(1 for r in rows if not r["accepted"]),
        "median_decay_error_pp": float(np.median(decay_errs)) if decay_errs else None,
        "mean_fixed_mae": _accepted_mean(rows, "fixed_mae"),
        "mean_baseline_mae": _accepted_mean(rows, "baseline_mae"),
    }
    return write_manifest(cfg, out, [bank.fingerprint], summary,
                          {"table": "perf_opt.csv"})


def run_ablation(cfg: ExperimentConfig) -> dict:
    out = _ensure_out(cfg)
    if not cfg.bank_sizes:
        raise ConfigurationError("ablation needs bank_sizes")
    family = _families.get_family(cfg.family)
    probes = list(_families.supported_probes(family))
    rows, fingerprints = [], []
    sizes_desc = sorted(cfg.bank_sizes, reverse=True)
    for seed in _seed_list(cfg):
        # one bank per seed; smaller sizes are nested prefix subsets so the
        # only thing varying across a row group is exemplar count
        full = _bank_for(cfg, cfg.family, sizes_desc[0], seed)
        for n in cfg.bank_sizes:
            bank = full if n >= full.n else subset_bank(full, np.arange(n))
            fingerprints.append(bank.fingerprint)
            scfg = SafetyConfig(n_points=cfg.safety_points, epsilon=cfg.epsilon,
                                rng_seed=cfg.seed)
            ranges = [safe_range(bank, j, max_extrap=cfg.max_extrapolation, cfg=scfg)
                      for j in range(bank.d)]
            targets, got = [], []
            probe_seeds = _child_seeds(seed, 666, cfg.holdout_count)
            evaluator = SafetyEvaluator(bank, scfg)
            n_rejected = 0
            for t, s in enumerate(probe_seeds):
                inst = _families.sample_design(family, s, mode="full_range")
                sol = solve_mix(bank, MixRequest(
                    tuple(range(bank.d)), tuple(float(x) for x in inst.params)))
                if not evaluator.score(sol.alpha).accepted:
                    n_rejected += 1
                    continue
                mesh = decode_mesh(bank.arch, sol.mixed_weights, cfg.resolution,
                                   provenance=f"ablation-{seed}-{n}-{t}")
                if mesh.is_empty:
                    continue
                for j in probes:
                    try:
                        got.append(_families.measure_param(mesh, family, j))
                        targets.append(float(inst.params[j]))
                    except _families.MeasurementError:
                        pass
            row = {"seed": seed, "n": n, "mean_safe_range_pct": float(np.mean(ranges)),
                   "n_rejected": n_rejected, "r2": None, "mae": None}
            if len(targets) >= 2 and len(set(targets)) >= 2:
                scores = regression_scores(targets, got)
                row["r2"], row["mae"] = scores["r2"], scores["mae"]
            rows.append(row)

    fields = list(rows[0].keys())
    write_csv(os.path.join(out, "ablation.csv"), fields, rows)
    trend = {}
    sizes = sorted(cfg.bank_sizes)
    if len(sizes) >= 2:
        ok = 0
        for seed in _seed_list(cfg):
            per = {r["n"]: r["mean_safe_range_pct"] for r in rows
                   if r["seed"] == seed}
            if per[sizes[-1]] >= per[sizes[0]]:
                ok += 1
        trend = {"safe_range_non_decreasing_seeds": ok,
                 "n_seeds": len(_seed_list(cfg))}
    summary = {"rows": len(rows), **trend}
    return write_manifest(cfg, out, fingerprints, summary, {"table": "ablation.csv"})


def run_safety_validation(cfg: ExperimentConfig) -> dict:
    out = _ensure_out(cfg)
    fams = (cfg.family,) + cfg.families_extra
    rows, fingerprints = [], []
    for fam_id in fams:
        family = _families.get_family(fam_id)
        bank = _bank_for(cfg, fam_id, cfg.bank_size, cfg.seed)
        fingerprints.append(bank.fingerprint)
        threshold = calibrate_cd_threshold(
            bank, resolution=cfg.label_resolution, n_samples=cfg.cloud_points)
        evaluator = SafetyEvaluator(bank, _safety_cfg(cfg))
        bounds = np.asarray(family.bounds, dtype=np.float64)
        for j in range(bank.d):
            lo, hi = bounds[j]
            span = hi - lo
            targets = np.linspace(lo - cfg.max_extrapolation * span,
                                  hi + cfg.max_extrapolation * span,
                                  cfg.sweep_steps)
            for target in targets:
                sol = solve_mix(bank, MixRequest((j,), (float(target),)))
                rep = evaluator.score(sol.alpha)
                mesh = decode_mesh(bank.arch, sol.mixed_weights,
                                   cfg.label_resolution,
                                   provenance=f"safety-{fam_id}-{j}")
                valid = auto_label(mesh, sol.achieved, family, threshold,
                                   resolution=cfg.label_resolution,
                                   n_samples=cfg.cloud_points)
                rows.append({
                    "family": fam_id, "param": bank.param_names[j],
                    "target": float(target), "safety_score": rep.score,
                    "accepted": rep.accepted, "valid": bool(valid),
                    "cd_threshold": threshold,
                })

    metrics = validate_metric([(r["safety_score"], r["valid"]) for r in rows],
                              extra_thresholds=(cfg.epsilon,))
    fields = list(rows[0].keys())
    write_csv(os.path.join(out, "safety_samples.csv"), fields, rows)
    curve_fields = ["threshold", "tpr", "fpr", "precision", "recall"]
    write_csv(os.path.join(out, "safety_thresholds.csv"), curve_fields,
              metrics["threshold_curve"])
    summary = {
        "roc_auc": metrics["roc_auc"], "pr_auc": metrics["pr_auc"],
        "n_samples": len(rows),
        "n_valid": sum(1 for r in rows if r["valid"]),
        "n_invalid": sum(1 for r in rows if not r["valid"]),
    }
    return write_manifest(cfg, out, fingerprints, summary, {
        "samples": "safety_samples.csv", "thresholds": "safety_thresholds.csv",
    })


RUNNERS = {
    "interpolation": run_interpolation,
    "range_extrapolation": run_range_extrapolation,
    "large_extrapolation": run_large_extrapolation,
    "multi_param": run_multi_param,
    "perf_opt": run_perf_opt,
    "ablation": run_ablation,
    "safety_validation": run_safety_validation,
}


def run_experiment(cfg: ExperimentConfig) -> dict:
    return RUNNERS[cfg.experiment](cfg)
