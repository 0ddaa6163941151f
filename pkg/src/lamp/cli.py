"""Command line front end: bank building, mixing, sweeps, experiments, serving."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import families as _families
from .bank import BankError, build_bank, load_bank, save_bank
from .evaluation import FitError
from .families import ConfigurationError
from .harness import ExperimentConfig, run_experiment, write_csv
from .mesher import decode_mesh, export_obj
from .mixing import MixRequest, solve_mix
from .safety import SafetyConfig, SafetyEvaluator
from .sdf_net import TrainConfig, finetune_config


def _parse_set(pairs, bank):
    names = bank.param_names
    targets = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"--set expects name=value, got {pair!r}")
        name, _, raw = pair.partition("=")
        if name not in names:
            raise SystemExit(f"unknown parameter {name!r}; bank has {names}")
        try:
            value = float(raw)
        except ValueError:
            raise SystemExit(f"target for {name!r} is not a number: {raw!r}")
        if not np.isfinite(value):
            raise SystemExit(f"target for {name!r} must be finite")
        targets[name] = value
    return targets


def cmd_build_bank(args) -> int:
    family = _families.get_family(args.family)
    train = TrainConfig(steps=args.steps, points_per_step=args.points,
                        rng_seed=args.seed)
    bank = build_bank(
        family, args.n, sample_mode=args.sample_mode, train_cfg=train,
        finetune_cfg=finetune_config(train), fraction=args.fraction,
        quality_threshold=args.quality_threshold,
    )
    save_bank(bank, args.out)
    print(f"wrote {args.out}: family={family.family_id} n={bank.n} "
          f"fingerprint={bank.fingerprint[:16]}")
    return 0


def cmd_mix(args) -> int:
    bank = load_bank(args.bank, verify=False)
    targets = _parse_set(args.set, bank)
    idx = sorted(bank.param_names.index(n) for n in targets)
    values = tuple(targets[bank.param_names[j]] for j in idx)
    if args.perf is not None:
        if not bank.has_perf:
            raise SystemExit("bank has no performance column")
        idx = list(idx) + [bank.d]
        values = values + (args.perf,)
    if not idx:
        raise SystemExit("nothing to constrain: pass --set and/or --perf")
    sol = solve_mix(bank, MixRequest(tuple(idx), values))
    rep = SafetyEvaluator(bank, SafetyConfig(rng_seed=args.safety_seed)).score(
        sol.alpha)
    report = {
        "alpha": sol.alpha.tolist(),
        "achieved": {n: float(v) for n, v in zip(bank.param_names, sol.achieved)},
        "achieved_perf": sol.achieved_perf,
        "residual": sol.residual,
        "safety": rep.to_dict(),
        "accepted": rep.accepted,
    }
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
    print(f"score={rep.score:.6f} accepted={rep.accepted} "
          f"residual={sol.residual:.3e}")
    if args.out:
        if rep.accepted or args.force:
            mesh = decode_mesh(bank.arch, sol.mixed_weights, args.resolution,
                               provenance=f"cli-mix-{bank.fingerprint[:8]}")
            export_obj(mesh, args.out)
            print(f"wrote {args.out} ({len(mesh.triangles)} triangles)")
        else:
            print("rejected by the safety gate; no mesh written "
                  "(--force overrides)")
            return 1
    return 0


def cmd_safety_sweep(args) -> int:
    bank = load_bank(args.bank, verify=False)
    if args.param not in bank.param_names:
        raise SystemExit(f"unknown parameter {args.param!r}; "
                         f"bank has {bank.param_names}")
    j = bank.param_names.index(args.param)
    lo_b, hi_b = bank.family.bounds[j]
    span = hi_b - lo_b
    lo = args.lo if args.lo is not None else lo_b - args.max_extrap * span
    hi = args.hi if args.hi is not None else hi_b + args.max_extrap * span
    evaluator = SafetyEvaluator(bank, SafetyConfig(rng_seed=args.safety_seed))
    rows = []
    for target in np.linspace(lo, hi, args.steps):
        rep = evaluator.score(solve_mix(bank, MixRequest((j,),
                                                         (float(target),))).alpha)
        rows.append({"target": float(target), "score": rep.score,
                     "accepted": rep.accepted})
    write_csv(args.out, ["target", "score", "accepted"], rows)
    n_ok = sum(1 for r in rows if r["accepted"])
    print(f"wrote {args.out}: {n_ok}/{len(rows)} accepted")
    return 0


# Post-run gates for --strict, keyed by experiment. Each returns a list of
# (check, passed) using the same thresholds the acceptance tests assert.
def _strict_failures(experiment, summary):
    checks = []
    if experiment == "interpolation":
        iou = summary.get("mean_iou")
        mae = summary.get("mean_surrogate_mae")
        checks = [("mean_iou >= 0.90", iou is not None and iou >= 0.90),
                  ("surrogate_mae < 0.1", mae is not None and mae < 0.1)]
    elif experiment == "range_extrapolation":
        checks = [("lamp mae <= dni mae", bool(summary.get("lamp_mae_leq_dni")))]
    elif experiment in ("large_extrapolation", "multi_param"):
        lamp = summary.get("methods", {}).get("lamp", {})
        dni = summary.get("methods", {}).get("dni", {})
        r2, r2_dni = lamp.get("measured_r2"), dni.get("measured_r2")
        checks = [("lamp r2 >= 0.85", r2 is not None and r2 >= 0.85),
                  ("lamp r2 > dni r2",
                   r2 is not None and r2_dni is not None and r2 > r2_dni)]
    elif experiment == "perf_opt":
        med = summary.get("median_decay_error_pp")
        fixed = summary.get("mean_fixed_mae")
        base = summary.get("mean_baseline_mae")
        checks = [("median decay error <= 5pp", med is not None and med <= 5.0),
                  ("fixed-param mae <= 2x interpolation baseline",
                   fixed is not None and base is not None and fixed <= 2.0 * base)]
    elif experiment == "ablation":
        ok, n = summary.get("safe_range_non_decreasing_seeds"), summary.get("n_seeds")
        checks = [("safe range non-decreasing in >= 80% of seeds",
                   ok is not None and n and ok >= 0.8 * n)]
    elif experiment == "safety_validation":
        checks = [("roc_auc >= 0.95", summary.get("roc_auc", 0.0) >= 0.95),
                  ("pr_auc >= 0.95", summary.get("pr_auc", 0.0) >= 0.95)]
    return [name for name, passed in checks if not passed]


def cmd_run(args) -> int:
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
    overrides["experiment"] = args.experiment
    if args.out:
        overrides["out_dir"] = args.out
    cfg = ExperimentConfig(**overrides)
    manifest = run_experiment(cfg)
    print(f"{cfg.experiment}: reports in {cfg.out_dir}")
    for key, value in sorted(manifest["summary"].items()):
        print(f"  {key} = {value}")
    if args.strict:
        failures = _strict_failures(cfg.experiment, manifest["summary"])
        for name in failures:
            print(f"STRICT FAIL: {name}")
        return 1 if failures else 0
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    bank = load_bank(args.bank, verify=False)
    app = create_app(bank, safety_seed=args.safety_seed)
    print(f"serving bank {bank.fingerprint[:16]} "
          f"({bank.family.family_id}, n={bank.n}) on {args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_families_doc(args) -> int:
    text = _families.families_markdown()
    with open(args.out, "w") as fh:
        fh.write(text)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lamp")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-bank", help="train exemplars and save a bank")
    b.add_argument("--family", required=True)
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--steps", type=int, default=TrainConfig().steps)
    b.add_argument("--points", type=int, default=TrainConfig().points_per_step)
    b.add_argument("--sample-mode", default="full_range",
                   choices=["full_range", "centered_fraction"])
    b.add_argument("--fraction", type=float, default=1.0)
    b.add_argument("--quality-threshold", type=float, default=0.01)
    b.set_defaults(func=cmd_build_bank)

    m = sub.add_parser("mix", help="solve one constrained mix")
    m.add_argument("--bank", required=True)
    m.add_argument("--set", action="append", default=[], metavar="NAME=VALUE")
    m.add_argument("--perf", type=float, default=None)
    m.add_argument("--out", default="", help="OBJ path for the decoded mesh")
    m.add_argument("--report", default="", help="JSON report path")
    m.add_argument("--resolution", type=int, default=64)
    m.add_argument("--force", action="store_true",
                   help="write the mesh even when the gate rejects")
    m.add_argument("--safety-seed", type=int, default=0)
    m.set_defaults(func=cmd_mix)

    s = sub.add_parser("safety-sweep", help="score a one-parameter sweep")
    s.add_argument("--bank", required=True)
    s.add_argument("--param", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lo", type=float, default=None)
    s.add_argument("--hi", type=float, default=None)
    s.add_argument("--steps", type=int, default=25)
    s.add_argument("--max-extrap", type=float, default=3.0,
                   help="default range reach in spans beyond the bounds")
    s.add_argument("--safety-seed", type=int, default=0)
    s.set_defaults(func=cmd_safety_sweep)

    r = sub.add_parser("run", help="run one experiment pipeline")
    r.add_argument("experiment")
    r.add_argument("--config", default="", help="ExperimentConfig JSON file")
    r.add_argument("--out", default="", help="report directory")
    r.add_argument("--strict", action="store_true",
                   help="nonzero exit when a summary gate fails")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("serve", help="serve the HTTP API over a bank")
    v.add_argument("--bank", required=True)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.add_argument("--safety-seed", type=int, default=0)
    v.set_defaults(func=cmd_serve)

    f = sub.add_parser("families-doc", help="write the family registry doc")
    f.add_argument("--out", default="FAMILIES.md")
    f.set_defaults(func=cmd_families_doc)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, BankError, FitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
