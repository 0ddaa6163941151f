"""Parameter-constrained affine mixing in weight space.

Given a bank of aligned decoders, find coefficients alpha with sum(alpha)=1
whose parameter mix hits the requested targets, then synthesize the decoder
w_d = W^T alpha. Targets are matched in z-scored parameter units so that
residuals are comparable across parameters; the performance proxy, when the
bank carries one, acts as column index d.

The minimizer of ||A alpha - t||^2 subject to 1^T alpha = 1 is generally a
whole affine subspace (N exemplars, fewer constraints). We return the unique
minimizer closest to the uniform center 1/N, computed exactly via a
null-space reduction: alpha = u + Z y with Z an orthonormal basis of the
constraint null space and y the minimum-norm least-squares solution. Keeping
alpha near 1/N keeps w_d near the bank centroid, which is where affine mixes
of the decoders are most trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import WeightBank
from .families import ConfigurationError

RESIDUAL_TOL = 1e-8
_RIDGE = 1e-8


class MixRequestError(ConfigurationError):
    """Malformed constraint set or targets."""


@dataclass(frozen=True)
class MixRequest:
    constrained: tuple  # column indices into [0, d], d = perf column
    targets: tuple  # raw units, same length as constrained

    def __post_init__(self):
        if len(self.constrained) == 0:
            raise MixRequestError("constraint set is empty")
        if len(self.constrained) != len(set(self.constrained)):
            raise MixRequestError("duplicate constrained indices")
        if len(self.targets) != len(self.constrained):
            raise MixRequestError("targets length does not match constraints")
        if not np.all(np.isfinite(self.targets)):
            raise MixRequestError("targets must be finite")


@dataclass(frozen=True)
class MixSolution:
    alpha: np.ndarray  # (N,)
    achieved: np.ndarray  # (d,) raw parameter units, P^T alpha
    achieved_perf: float | None  # proxy column mix when the bank has one
    residual: float  # l2 over constrained columns, normalized units
    residual_raw: float  # same, raw units
    alpha_norm: float
    mixed_weights: np.ndarray  # (D,) float64
    constrained: tuple
    targets: tuple
    used_fallback: bool = False


def request_for(bank: WeightBank, targets_by_name, perf_target=None) -> MixRequest:
    """Build a MixRequest from {param_name: value} plus an optional proxy target."""
    names = bank.param_names
    idx, vals = [], []
    for name, value in targets_by_name.items():
        if name not in names:
            raise MixRequestError(
                f"unknown parameter {name!r}; family has {names}"
            )
        idx.append(names.index(name))
        vals.append(float(value))
    if perf_target is not None:
        if not bank.has_perf:
            raise MixRequestError("bank has no performance column")
        idx.append(bank.d)
        vals.append(float(perf_target))
    return MixRequest(tuple(idx), tuple(vals))


def _null_space_basis(n):
    """Orthonormal basis of {x : 1^T x = 0} from a Householder reflector."""
    e = np.zeros(n)
    e[0] = 1.0
    v = e - np.full(n, 1.0 / np.sqrt(n))
    v /= np.linalg.norm(v)
    H = np.eye(n) - 2.0 * np.outer(v, v)  # maps e1 to the unit ones-vector
    return H[:, 1:]


def solve_mix(bank: WeightBank, req: MixRequest) -> MixSolution:
    n, d = bank.n, bank.d
    if n < 1:
        raise MixRequestError("bank is empty")
    max_col = d if bank.has_perf else d - 1
    for j in req.constrained:
        if not 0 <= j <= max_col:
            raise MixRequestError(
                f"constrained index {j} out of range 0..{max_col}"
            )

    X = bank.augmented_norm()  # (N, d) or (N, d+1)
    cols = list(req.constrained)
    A = X[:, cols].T  # (k, N)
    t = np.array([bank.normalize_target(j, v) for j, v in zip(cols, req.targets)])

    u = np.full(n, 1.0 / n)
    used_fallback = False
    if n == 1:
        alpha = np.ones(1)
    else:
        Z = _null_space_basis(n)
        B = A @ Z
        r = t - A @ u
        y, *_ = np.linalg.lstsq(B, r, rcond=None)
        if not np.all(np.isfinite(y)):
            y = np.linalg.solve(B.T @ B + _RIDGE * np.eye(n - 1), B.T @ r)
            used_fallback = True
        alpha = u + Z @ y

    return _solution(bank, alpha, req, used_fallback)


def _solution(bank, alpha, req, used_fallback):
    achieved = bank.P.T @ alpha
    achieved_perf = float(bank.perf @ alpha) if bank.has_perf else None

    res_n, res_r = 0.0, 0.0
    for j, v in zip(req.constrained, req.targets):
        got_raw = achieved_perf if j == bank.d else achieved[j]
        res_r += (got_raw - v) ** 2
        res_n += (bank.normalize_target(j, got_raw) - bank.normalize_target(j, v)) ** 2

    return MixSolution(
        alpha=alpha,
        achieved=achieved,
        achieved_perf=achieved_perf,
        residual=float(np.sqrt(res_n)),
        residual_raw=float(np.sqrt(res_r)),
        alpha_norm=float(np.linalg.norm(alpha)),
        mixed_weights=mix_weights(bank, alpha),
        constrained=tuple(req.constrained),
        targets=tuple(req.targets),
        used_fallback=used_fallback,
    )


def mix_weights(bank: WeightBank, alpha) -> np.ndarray:
    """w_d = W^T alpha, accumulated in double precision."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.shape != (bank.n,):
        raise MixRequestError(
            f"alpha has shape {a.shape}, bank has {bank.n} exemplars"
        )
    return bank.W.astype(np.float64).T @ a


def affine_projection(bank: WeightBank, weights):
    """Best sum-to-one coefficients reproducing a weight vector.

    Returns (alpha, l2 weight-space residual). The residual is ~0 exactly
    when the vector lies in the exemplars' affine hull, which is how
    externally generated weights get coefficients for the mismatch gauge.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (bank.weight_dim,):
        raise MixRequestError(
            f"weights have shape {w.shape}, bank weight_dim is {bank.weight_dim}"
        )
    W = bank.W.astype(np.float64)
    n = bank.n
    u = np.full(n, 1.0 / n)
    if n == 1:
        return np.ones(1), float(np.linalg.norm(W[0] - w))
    Z = _null_space_basis(n)
    y, _, _, _ = np.linalg.lstsq(W.T @ Z, w - W.T @ u, rcond=None)
    alpha = u + Z @ y
    return alpha, float(np.linalg.norm(W.T @ alpha - w))


def optimize_performance(bank: WeightBank, fixed_params, perf_target) -> MixSolution:
    """Treat the proxy as one more target column alongside the fixed parameters."""
    if not bank.has_perf:
        raise MixRequestError("bank has no performance column")
    idx = sorted(int(i) for i in fixed_params)
    targets = [float(fixed_params[i]) for i in idx]
    if any(not 0 <= i < bank.d for i in idx):
        raise MixRequestError("fixed parameter index out of range")
    req = MixRequest(tuple(idx) + (bank.d,), tuple(targets) + (float(perf_target),))
    return solve_mix(bank, req)
