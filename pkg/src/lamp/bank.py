"""Aligned weight banks: build, normalize, persist, load, subset.

A bank stacks one overfit decoder per sampled design, all fine-tuned from a
single shared initialization so that affine combinations of rows stay
meaningful. It carries the raw parameter matrix P (N x d), the weight matrix
W (N x D, float32), the shared init w0, z-scoring statistics, per-exemplar
held-out errors, and an optional performance-proxy column.

Serialized format (.lampbank): magic "LAMPBANK", little-endian u32 version,
u64 metadata byte length, UTF-8 JSON metadata, then dense little-endian
payload w0[D] f32, W[N*D] f32 row-major, P[N*d] f64 row-major, and perf[N]
f64 when present. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import families as _families
from . import sdf_net as _sdf_net
from .families import FamilySpec, ShapeInstance
from .sdf_net import Architecture, TrainConfig

MAGIC = b"LAMPBANK"
FORMAT_VERSION = 1
DEFAULT_EPSILON = 0.01
DEFAULT_SPREAD_CAP = 0.5
HELDOUT_POINTS = 8192


class BankError(RuntimeError):
    pass


class BankFormatError(BankError):
    """Bad magic bytes or unsupported format version."""


class BankTruncationError(BankError):
    """File ends before the declared payload does (or has trailing bytes)."""


class BankStructuralError(BankError):
    """Metadata and payload disagree about shapes or families."""


class BankInvariantError(BankError):
    """A stored invariant (quality, spread, normalization) fails on load."""


@dataclass
class WeightBank:
    family: FamilySpec
    arch: Architecture
    P: np.ndarray  # (N, d) float64, raw parameter units
    W: np.ndarray  # (N, D) float32
    w0: np.ndarray  # (D,) float32
    param_mean: np.ndarray  # (d,)
    param_std: np.ndarray  # (d,), constant columns fall back to 1
    heldout_errors: np.ndarray  # (N,)
    eval_seeds: tuple  # per-row held-out RNG seeds, survive subsetting
    epsilon: float
    seed: int
    train_cfg: TrainConfig
    finetune_cfg: TrainConfig
    fingerprint: str
    perf: np.ndarray | None = None  # (N,) normalized proxy values
    perf_mean: float = 0.0
    perf_std: float = 1.0
    spread_cap: float = DEFAULT_SPREAD_CAP
    stats_self_computed: bool = True

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def d(self):
        return self.P.shape[1]

    @property
    def weight_dim(self):
        return self.W.shape[1]

    @property
    def has_perf(self):
        return self.perf is not None

    @property
    def param_names(self):
        return list(self.family.param_names)

    def instance(self, i) -> ShapeInstance:
        return ShapeInstance(self.family, self.P[i])

    def p_norm(self) -> np.ndarray:
        return (self.P - self.param_mean) / self.param_std

    def perf_norm(self) -> np.ndarray:
        if self.perf is None:
            raise BankStructuralError("bank has no performance column")
        return (self.perf - self.perf_mean) / self.perf_std

    def augmented_norm(self) -> np.ndarray:
        """z-scored parameters, with the proxy appended as column d if present."""
        cols = self.p_norm()
        if self.perf is not None:
            cols = np.column_stack([cols, self.perf_norm()])
        return cols

    def normalize_target(self, index, raw_value):
        """Raw target for column index (d = proxy column) to normalized units."""
        if index == self.d and self.perf is not None:
            return (raw_value - self.perf_mean) / self.perf_std
        return (raw_value - self.param_mean[index]) / self.param_std[index]

    def spread_ratio(self):
        w0 = self.w0.astype(np.float64)
        diffs = self.W.astype(np.float64) - w0[None, :]
        return float(np.linalg.norm(diffs, axis=1).max() / np.linalg.norm(w0))


def normalize_params(bank: WeightBank, p_raw) -> np.ndarray:
    p = np.asarray(p_raw, dtype=np.float64)
    if p.shape[-1] != bank.d:
        raise BankStructuralError(f"expected {bank.d} parameters, got {p.shape[-1]}")
    return (p - bank.param_mean) / bank.param_std


def denormalize_params(bank: WeightBank, p_norm) -> np.ndarray:
    return np.asarray(p_norm, dtype=np.float64) * bank.param_std + bank.param_mean


def _norm_stats(columns):
    mean = columns.mean(axis=0)
    std = columns.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)  # constant columns pass through
    return mean, std


def _child_seeds(root_seed, stream, n):
    ss = np.random.SeedSequence(entropy=(int(root_seed), int(stream)))
    return [int(s) for s in ss.generate_state(n, dtype=np.uint64)]


def _fingerprint(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def bank_fingerprint_payload(family, n, sample_mode, fraction, train_cfg, finetune_cfg,
                             arch, with_perf, quality_threshold, epsilon):
    return {
        "format_version": FORMAT_VERSION,
        "family": family.family_id,
        "n": int(n),
        "sample_mode": sample_mode,
        "fraction": float(fraction),
        "train_cfg": json.loads(train_cfg.to_json()),
        "finetune_cfg": json.loads(finetune_cfg.to_json()),
        "arch": arch.to_dict(),
        "with_perf": bool(with_perf),
        "quality_threshold": float(quality_threshold),
        "epsilon": float(epsilon),
    }


def build_bank(family: FamilySpec, n, sample_mode="full_range", train_cfg=None,
               finetune_cfg=None, fraction=1.0, with_perf=True,
               quality_threshold=0.01, epsilon=DEFAULT_EPSILON,
               spread_cap=DEFAULT_SPREAD_CAP, arch=None) -> WeightBank:
    """Sample n designs, overfit each from the shared init, stack the bank.

    Deterministic in train_cfg.rng_seed. Every exemplar must clear the
    held-out quality threshold or the build fails.
    """
    if n < 1:
        raise BankStructuralError("bank needs n >= 1 exemplars")
    arch = arch or Architecture()
    train_cfg = train_cfg or TrainConfig()
    if finetune_cfg is None:
        finetune_cfg = _sdf_net.finetune_config(train_cfg)
    seed = train_cfg.rng_seed

    design_seeds = _child_seeds(seed, 555, n)
    instances = [
        _families.sample_design(family, design_seeds[i], mode=sample_mode, fraction=fraction)
        for i in range(n)
    ]
    P = np.stack([inst.params for inst in instances])

    mean_inst = _families.mean_design(family)
    w0, _ = _sdf_net.fit_shared_init(
        lambda p: _families.analytic_sdf(mean_inst, p), arch, train_cfg
    )
    fns = [
        (lambda p, inst=inst: _families.analytic_sdf(inst, p)) for inst in instances
    ]
    W, _ = _sdf_net.train_many(arch, fns, finetune_cfg, w0)

    eval_seeds = _child_seeds(seed, 777, n)
    errors = np.array([
        _sdf_net.heldout_error(arch, W[i], fns[i], finetune_cfg,
                               n=HELDOUT_POINTS, seed=eval_seeds[i])
        for i in range(n)
    ])
    if (errors >= quality_threshold).any():
        worst = int(errors.argmax())
        raise _sdf_net.TrainingFailureError(
            f"exemplar {worst} held-out error {errors[worst]:.5f} "
            f"exceeds quality threshold {quality_threshold}"
        )

    mean, std = _norm_stats(P)
    perf = None
    perf_mean, perf_std = 0.0, 1.0
    if with_perf:
        perf = np.array([_families.performance_proxy(inst) for inst in instances])
        pm, ps = _norm_stats(perf[:, None])
        perf_mean, perf_std = float(pm[0]), float(ps[0])

    fp = _fingerprint(bank_fingerprint_payload(
        family, n, sample_mode, fraction, train_cfg, finetune_cfg, arch,
        with_perf, quality_threshold, epsilon,
    ))
    bank = WeightBank(
        family=family, arch=arch, P=P, W=W, w0=w0,
        param_mean=mean, param_std=std, heldout_errors=errors,
        eval_seeds=tuple(eval_seeds),
        epsilon=float(epsilon), seed=int(seed),
        train_cfg=train_cfg, finetune_cfg=finetune_cfg, fingerprint=fp,
        perf=perf, perf_mean=perf_mean, perf_std=perf_std,
        spread_cap=float(spread_cap), stats_self_computed=True,
    )
    ratio = bank.spread_ratio()
    if ratio > spread_cap:
        raise BankInvariantError(
            f"weight spread ratio {ratio:.4f} exceeds cap {spread_cap}"
        )
    return bank


def subset_bank(bank: WeightBank, indices) -> WeightBank:
    """Row subset sharing the parent's normalization statistics."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size < 1:
        raise BankStructuralError("subset needs at least one row")
    if (idx < 0).any() or (idx >= bank.n).any():
        raise BankStructuralError("subset index out of range")
    sub_fp = _fingerprint({"parent": bank.fingerprint, "rows": idx.tolist()})
    return replace(
        bank,
        P=bank.P[idx].copy(),
        W=bank.W[idx].copy(),
        heldout_errors=bank.heldout_errors[idx].copy(),
        eval_seeds=tuple(bank.eval_seeds[i] for i in idx),
        perf=None if bank.perf is None else bank.perf[idx].copy(),
        fingerprint=sub_fp,
        stats_self_computed=False,
    )


def _metadata(bank: WeightBank) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "family": {
            "family_id": bank.family.family_id,
            "param_names": list(bank.family.param_names),
            "bounds": [list(b) for b in bank.family.bounds],
            "linear_flag": bank.family.linear_flag,
        },
        "arch": bank.arch.to_dict(),
        "n": bank.n,
        "d": bank.d,
        "weight_dim": bank.weight_dim,
        "norm_stats": {
            "mean": bank.param_mean.tolist(),
            "std": bank.param_std.tolist(),
        },
        "has_perf": bank.has_perf,
        "perf_norm": {"mean": bank.perf_mean, "std": bank.perf_std},
        "heldout_errors": bank.heldout_errors.tolist(),
        "eval_seeds": [int(s) for s in bank.eval_seeds],
        "epsilon": bank.epsilon,
        "seed": bank.seed,
        "train_cfg": json.loads(bank.train_cfg.to_json()),
        "finetune_cfg": json.loads(bank.finetune_cfg.to_json()),
        "fingerprint": bank.fingerprint,
        "spread_cap": bank.spread_cap,
        "spread_ratio": bank.spread_ratio(),
        "stats_self_computed": bank.stats_self_computed,
        "tie_break": "uniform-center",
    }


def save_bank(bank: WeightBank, path):
    meta = json.dumps(_metadata(bank), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(bank.w0, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bank.W, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bank.P, dtype="<f8").tobytes())
        if bank.perf is not None:
            fh.write(np.ascontiguousarray(bank.perf, dtype="<f8").tobytes())


def load_bank(path, verify=True) -> WeightBank:
    """Load and validate a bank; round-trip of save_bank is bit-exact.

    verify=True re-evaluates every exemplar's held-out error against the
    analytic oracle and requires agreement with the stored value to 1e-6.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise BankFormatError("bad magic bytes, not a lampbank file")
    off = len(MAGIC)
    if len(blob) < off + 12:
        raise BankTruncationError("file too short for header")
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != FORMAT_VERSION:
        raise BankFormatError(f"unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if len(blob) < off + meta_len:
        raise BankTruncationError("metadata truncated")
    try:
        meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BankStructuralError(f"metadata is not valid JSON: {exc}") from None
    off += meta_len

    try:
        fam_meta = meta["family"]
        family = _families.get_family(fam_meta["family_id"])
        arch = Architecture.from_dict(meta["arch"])
        n, d, D = int(meta["n"]), int(meta["d"]), int(meta["weight_dim"])
        train_cfg = TrainConfig(**meta["train_cfg"])
        finetune_cfg = TrainConfig(**meta["finetune_cfg"])
    except (KeyError, TypeError, _families.ConfigurationError, _sdf_net.StructuralError) as exc:
        raise BankStructuralError(f"bad metadata: {exc}") from None

    if list(family.param_names) != list(fam_meta["param_names"]) or [
        list(b) for b in family.bounds
    ] != fam_meta["bounds"]:
        raise BankStructuralError(
            f"stored family definition for {family.family_id!r} does not match the registry"
        )
    if arch.weight_count != D:
        raise BankStructuralError(
            f"metadata weight_dim {D} does not match architecture D={arch.weight_count}"
        )
    if d != family.param_count:
        raise BankStructuralError(
            f"metadata d={d} does not match family d={family.param_count}"
        )

    has_perf = bool(meta["has_perf"])
    expect = D * 4 + n * D * 4 + n * d * 8 + (n * 8 if has_perf else 0)
    if len(blob) - off < expect:
        raise BankTruncationError(
            f"payload truncated: expected {expect} bytes, found {len(blob) - off}"
        )
    if len(blob) - off > expect:
        raise BankTruncationError(
            f"trailing bytes: expected {expect} payload bytes, found {len(blob) - off}"
        )
    w0 = np.frombuffer(blob, dtype="<f4", count=D, offset=off).copy()
    off += D * 4
    W = np.frombuffer(blob, dtype="<f4", count=n * D, offset=off).reshape(n, D).copy()
    off += n * D * 4
    P = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d).copy()
    off += n * d * 8
    perf = None
    if has_perf:
        perf = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()

    bank = WeightBank(
        family=family, arch=arch, P=P, W=W, w0=w0,
        param_mean=np.asarray(meta["norm_stats"]["mean"], dtype=np.float64),
        param_std=np.asarray(meta["norm_stats"]["std"], dtype=np.float64),
        heldout_errors=np.asarray(meta["heldout_errors"], dtype=np.float64),
        eval_seeds=tuple(int(s) for s in meta["eval_seeds"]),
        epsilon=float(meta["epsilon"]), seed=int(meta["seed"]),
        train_cfg=train_cfg, finetune_cfg=finetune_cfg,
        fingerprint=meta["fingerprint"],
        perf=perf, perf_mean=float(meta["perf_norm"]["mean"]),
        perf_std=float(meta["perf_norm"]["std"]),
        spread_cap=float(meta["spread_cap"]),
        stats_self_computed=bool(meta["stats_self_computed"]),
    )
    if bank.param_mean.shape != (d,) or bank.param_std.shape != (d,):
        raise BankStructuralError("norm_stats shape does not match d")
    if bank.heldout_errors.shape != (n,):
        raise BankStructuralError("heldout_errors length does not match n")
    if len(bank.eval_seeds) != n:
        raise BankStructuralError("eval_seeds length does not match n")
    _validate_invariants(bank, verify=verify)
    return bank


def _validate_invariants(bank: WeightBank, verify):
    ratio = bank.spread_ratio()
    if ratio > bank.spread_cap + 1e-12:
        raise BankInvariantError(
            f"weight spread ratio {ratio:.4f} exceeds cap {bank.spread_cap}"
        )
    if bank.stats_self_computed and bank.n > 1:
        pn = bank.p_norm()
        varying = bank.P.std(axis=0) >= 1e-12
        if np.abs(pn.mean(axis=0)[varying]).max(initial=0.0) > 1e-9:
            raise BankInvariantError("z-scored parameter columns are not centered")
        if np.abs(pn.std(axis=0)[varying] - 1.0).max(initial=0.0) > 1e-9:
            raise BankInvariantError("z-scored parameter columns are not unit scale")
    if not verify:
        return
    for i in range(bank.n):
        inst = bank.instance(i)
        err = _sdf_net.heldout_error(
            bank.arch, bank.W[i],
            lambda p, inst=inst: _families.analytic_sdf(inst, p),
            bank.finetune_cfg, n=HELDOUT_POINTS, seed=bank.eval_seeds[i],
        )
        if abs(err - bank.heldout_errors[i]) > 1e-6:
            raise BankInvariantError(
                f"exemplar {i} re-evaluated held-out error {err:.8f} does not "
                f"match stored {bank.heldout_errors[i]:.8f}"
            )
