"""Linearity-mismatch safety gate and its validation machinery.

A mixed decoder is trustworthy only where decoding the mixed weights agrees
with mixing the decoded values: score = mean_z |f(z; W^T a) - sum_i a_i
f(z; w_i)|. Scores below epsilon gate acceptance. validate_metric checks the
score against auto-generated validity labels (ROC/PR), and safe_range sweeps
a parameter outward until the gate trips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import families as _families
from .bank import WeightBank
from .evaluation import chamfer
from .families import ConfigurationError
from .mesher import DECODE_BOUNDS, TriMesh, decode_mesh, sample_surface
from .mixing import MixRequest, mix_weights, solve_mix
from .sdf_net import forward_many

DEFAULT_N_POINTS = 4096
SAMPLERS = ("uniform_cube", "near_surface_mix")


class DegenerateValidationError(ValueError):
    """Metric validation needs both valid and invalid samples."""


@dataclass(frozen=True)
class SafetyConfig:
    n_points: int = DEFAULT_N_POINTS
    epsilon: float = 0.01
    sampler: str = "uniform_cube"
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ConfigurationError("n_points must be >= 1")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.sampler not in SAMPLERS:
            raise ConfigurationError(f"sampler must be one of {SAMPLERS}")


@dataclass(frozen=True)
class SafetyReport:
    score: float
    accepted: bool
    max_abs: float
    n_points: int
    seed: int
    epsilon: float

    def to_dict(self):
        return {
            "score": self.score, "accepted": self.accepted,
            "max_abs": self.max_abs, "n_points": self.n_points,
            "seed": self.seed, "epsilon": self.epsilon,
        }


class SafetyEvaluator:
    """Caches the sample points and the per-exemplar prediction matrix.

    With the uniform sampler, scoring one alpha costs a single mixed forward
    pass plus a dot product against the cached (N, N_z) matrix, which is what
    makes parameter sweeps affordable.
    """

    def __init__(self, bank: WeightBank, cfg: SafetyConfig = SafetyConfig()):
        self.bank = bank
        self.cfg = cfg
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.rng_seed, spawn_key=(13,))
        )
        lo, hi = np.asarray(DECODE_BOUNDS[0]), np.asarray(DECODE_BOUNDS[1])
        self._uniform = rng.uniform(lo, hi, size=(cfg.n_points, 3))
        self._pool = (
            rng.uniform(lo, hi, size=(4 * cfg.n_points, 3))
            if cfg.sampler == "near_surface_mix" else None
        )
        self._W64 = bank.W.astype(np.float64)
        self._F_uniform = None  # lazy (N, N_z) exemplar predictions

    def _points_for(self, w_mixed):
        if self.cfg.sampler == "uniform_cube":
            return self._uniform
        # near_surface_mix: keep 30% of a larger pool, ranked by |mixed sdf|
        n = self.cfg.n_points
        n_near = int(round(0.3 * n))
        vals = forward_many(self.bank.arch, w_mixed[None, :], self._pool)[0]
        near = self._pool[np.argsort(np.abs(vals), kind="stable")[:n_near]]
        return np.concatenate([self._uniform[: n - n_near], near])

    def score(self, alpha) -> SafetyReport:
        alpha = self._check_alpha(alpha)
        return self.score_weights(mix_weights(self.bank, alpha), alpha)

    def _check_alpha(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != (self.bank.n,):
            raise ConfigurationError(
                f"alpha has shape {alpha.shape}, bank has {self.bank.n} exemplars"
            )
        if abs(alpha.sum() - 1.0) > 1e-6:
            raise ConfigurationError("alpha must sum to 1 (tolerance 1e-6)")
        return alpha

    def score_weights(self, weights, alpha) -> SafetyReport:
        """Mismatch of an arbitrary weight vector against an alpha-combination.

        For solver output weights == W^T alpha this equals score(alpha); for
        externally generated weights pass their affine-projection alpha.
        """
        alpha = self._check_alpha(alpha)
        w_mixed = np.asarray(weights, dtype=np.float64)
        if w_mixed.shape != (self.bank.weight_dim,):
            raise ConfigurationError(
                f"weights have shape {w_mixed.shape}, "
                f"bank weight_dim is {self.bank.weight_dim}"
            )
        pts = self._points_for(w_mixed)
        if self.cfg.sampler == "uniform_cube":
            if self._F_uniform is None:
                self._F_uniform = forward_many(self.bank.arch, self._W64, pts)
            F = self._F_uniform
        else:
            F = forward_many(self.bank.arch, self._W64, pts)
        mixed = forward_many(self.bank.arch, w_mixed[None, :], pts)[0]
        diff = np.abs(mixed - alpha @ F)
        score = float(diff.mean())
        return SafetyReport(
            score=score,
            accepted=bool(score < self.cfg.epsilon),
            max_abs=float(diff.max()),
            n_points=len(pts),
            seed=self.cfg.rng_seed,
            epsilon=self.cfg.epsilon,
        )


def linearity_mismatch(bank: WeightBank, alpha, cfg: SafetyConfig = SafetyConfig()) -> SafetyReport:
    return SafetyEvaluator(bank, cfg).score(alpha)


def validate_metric(scored_samples, extra_thresholds=()) -> dict:
    """ROC/PR of the score as a detector of invalid generations.

    scored_samples: iterable of (score, valid_label). The invalid class is
    the positive class; a sample is flagged when score >= threshold. ROC AUC
    by rank statistic with ties averaged; PR AUC by step integration.
    """
    pairs = list(scored_samples)
    scores = np.asarray([s for s, _ in pairs], dtype=np.float64)
    valid = np.asarray([bool(v) for _, v in pairs])
    pos = ~valid  # invalid = positive
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateValidationError(
            "need both valid and invalid samples to validate the metric"
        )

    # rank-based ROC AUC, average ranks over ties
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # 1-based average rank
        i = j + 1
    roc_auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # threshold sweep over distinct scores, descending; thresholds flag >=
    thresholds = np.unique(np.concatenate([scores, np.asarray(extra_thresholds,
                                                              dtype=np.float64)]))[::-1]
    curve = []
    for thr in thresholds:
        flagged = scores >= thr
        tp = int((flagged & pos).sum())
        fp = int((flagged & ~pos).sum())
        curve.append({
            "threshold": float(thr),
            "tpr": tp / n_pos,
            "fpr": fp / n_neg,
            "precision": tp / (tp + fp) if (tp + fp) else 1.0,
            "recall": tp / n_pos,
        })

    # PR step integration: sum P(k) * (R(k) - R(k-1)) over increasing recall
    pr_auc = 0.0
    prev_recall = 0.0
    for row in curve:
        if row["recall"] > prev_recall:
            pr_auc += row["precision"] * (row["recall"] - prev_recall)
            prev_recall = row["recall"]

    return {"roc_auc": float(roc_auc), "pr_auc": float(pr_auc),
            "threshold_curve": curve}


def calibrate_cd_threshold(bank: WeightBank, resolution=64, n_samples=2048,
                           max_exemplars=8) -> float:
    """Per-family validity threshold: 3x the median exemplar self-CD.

    Self-CD compares each exemplar's decoded mesh against its own analytic
    shape, so the threshold tracks what a known-good decode looks like for
    this bank and family.
    """
    m = min(bank.n, max_exemplars)
    cds = []
    for i in range(m):
        cds.append(_cd_to_analytic(
            decode_mesh(bank.arch, bank.W[i], resolution=resolution),
            bank.P[i], bank.family, resolution, n_samples,
        ))
    med = float(np.median(cds))
    if not np.isfinite(med):
        raise ConfigurationError("could not calibrate: an exemplar decoded empty")
    return 3.0 * med


def _cd_to_analytic(mesh, params, family, resolution, n_samples):
    if mesh.is_empty:
        return np.inf
    from .mesher import VoxelGrid, grid_nodes, marching_cubes

    inst = _families.ShapeInstance(family, params)
    res3 = (resolution,) * 3
    vals = _families.analytic_sdf(inst, grid_nodes(res3, DECODE_BOUNDS))
    ref = marching_cubes(VoxelGrid(res3, DECODE_BOUNDS, vals.astype(np.float32)))
    if ref.is_empty:
        return np.inf
    return chamfer(
        sample_surface(mesh, n_samples, seed=5),
        sample_surface(ref, n_samples, seed=6),
    )


def auto_label(mesh: TriMesh, target_params, family, cd_threshold,
               resolution=64, n_samples=2048) -> bool:
    """Valid iff the mesh is non-empty and close to the analytic shape."""
    if mesh.is_empty:
        return False
    cd = _cd_to_analytic(mesh, target_params, family, resolution, n_samples)
    return bool(cd < cd_threshold)


def safe_range(bank: WeightBank, param_index, step=0.1, max_extrap=3.0,
               cfg: SafetyConfig = SafetyConfig()) -> float:
    """Largest symmetric extrapolation (percent of span) the gate accepts.

    Walks outward from each bound in step*span increments until the
    mismatch score reaches epsilon; returns the mean of the two one-sided
    safe ranges, in percent of the parameter span.
    """
    if step <= 0:
        raise ConfigurationError("step must be > 0")
    lo, hi = bank.family.bounds[param_index]
    span = hi - lo
    ev = SafetyEvaluator(bank, cfg)

    def one_side(start, direction):
        k = 0
        while (k + 1) * step <= max_extrap + 1e-12:
            target = start + direction * (k + 1) * step * span
            sol = solve_mix(bank, MixRequest((param_index,), (target,)))
            if ev.score(sol.alpha).score >= cfg.epsilon:
                return k * step
            k += 1
        return max_extrap

    up = one_side(hi, +1.0)
    down = one_side(lo, -1.0)
    return float(0.5 * (up + down) * 100.0)
