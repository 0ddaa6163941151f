"""DNI and AE-LPA baselines over an aligned weight bank.

Both emit length-D weight vectors that flow through the same decode,
safety, and metric pipeline as mixed weights. DNI is a ridge-regularized
linear hypermap from normalized design parameters to weight offsets
(w - w0). AE-LPA is a linear autoencoder: PCA of the centered weight rows
computed through the N x N Gram matrix, plus a least-squares alignment
from normalized parameters to the latent coordinates.

Serialized formats mirror the bank conventions: magic, little-endian u32
version, u64 metadata length, UTF-8 JSON metadata, then dense
little-endian float64 arrays in a fixed order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .bank import BankFormatError, BankTruncationError, WeightBank
from .evaluation import FitError
from .families import ConfigurationError

DNI_MAGIC = b"LAMPDNI\x00"
AELPA_MAGIC = b"LAMPAELP"
FORMAT_VERSION = 1
DEFAULT_RIDGE = 1e-6


def _normalize(p_raw, mean, std, d):
    p = np.asarray(p_raw, dtype=np.float64)
    if p.shape != (d,):
        raise ConfigurationError(f"expected {d} parameters, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ConfigurationError("parameters must be finite")
    return (p - mean) / std


@dataclass(frozen=True)
class DniModel:
    """Linear map normalized params -> weight offset, applied on top of w0."""

    coef: np.ndarray  # (d, D)
    intercept: np.ndarray  # (D,)
    w0: np.ndarray  # (D,)
    param_mean: np.ndarray
    param_std: np.ndarray
    ridge: float
    fingerprint: str

    @property
    def d(self):
        return self.coef.shape[0]

    @property
    def weight_dim(self):
        return self.coef.shape[1]


def dni_fit(bank: WeightBank, ridge: float = DEFAULT_RIDGE) -> DniModel:
    """Least-squares params -> (w - w0), intercept unpenalized.

    ridge=0 requires a full-rank centered design (so N >= d+1 distinct
    designs); any positive ridge keeps the normal equations well posed.
    """
    if ridge < 0:
        raise ConfigurationError("ridge must be non-negative")
    X = bank.p_norm()
    Y = bank.W.astype(np.float64) - bank.w0.astype(np.float64)
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    Xc = X - xm
    Yc = Y - ym
    if ridge == 0.0:
        coef, _, rank, _ = np.linalg.lstsq(Xc, Yc, rcond=None)
        if rank < bank.d:
            raise FitError(
                f"centered design has rank {rank} < {bank.d}; "
                "use a positive ridge or more exemplars"
            )
    else:
        A = Xc.T @ Xc + ridge * np.eye(bank.d)
        coef = np.linalg.solve(A, Xc.T @ Yc)
    intercept = ym - xm @ coef
    return DniModel(
        coef=coef, intercept=intercept, w0=bank.w0.astype(np.float64),
        param_mean=bank.param_mean.copy(), param_std=bank.param_std.copy(),
        ridge=float(ridge), fingerprint=bank.fingerprint,
    )


def dni_generate(model: DniModel, p_raw) -> np.ndarray:
    z = _normalize(p_raw, model.param_mean, model.param_std, model.d)
    return model.w0 + z @ model.coef + model.intercept


@dataclass(frozen=True)
class AeLpaModel:
    """PCA autoencoder over weight rows with a linear param->latent alignment.

    components rows are orthonormal principal directions; directions whose
    eigenvalue is numerically zero are stored as zero rows and carry no
    variance. latents holds the training exemplars' coordinates and
    recon_errors their l2 autoencoding residuals at this k.
    """

    k: int
    mean_w: np.ndarray  # (D,)
    components: np.ndarray  # (k, D)
    align_coef: np.ndarray  # (d, k)
    align_intercept: np.ndarray  # (k,)
    latents: np.ndarray  # (N, k)
    eigvals: np.ndarray  # (k,)
    recon_errors: np.ndarray  # (N,)
    param_mean: np.ndarray
    param_std: np.ndarray
    fingerprint: str

    @property
    def d(self):
        return self.align_coef.shape[0]

    @property
    def weight_dim(self):
        return self.mean_w.shape[0]


def aelpa_fit(bank: WeightBank, k: int) -> AeLpaModel:
    n, D = bank.n, bank.weight_dim
    k_max = min(n - 1, D)
    if not 0 <= k <= k_max:
        raise ConfigurationError(f"latent dimension k={k} outside [0, {k_max}]")
    W64 = bank.W.astype(np.float64)
    mean_w = W64.mean(axis=0)
    Wc = W64 - mean_w
    vals, vecs = np.linalg.eigh(Wc @ Wc.T)
    order = np.argsort(vals)[::-1][:k]
    vals = vals[order]
    vecs = vecs[:, order]
    tol = max(float(vals[0]) if k else 0.0, 0.0) * 1e-12
    components = np.zeros((k, D))
    for j in range(k):
        if vals[j] > tol:
            components[j] = (vecs[:, j] @ Wc) / np.sqrt(vals[j])
    latents = Wc @ components.T
    X = np.hstack([bank.p_norm(), np.ones((n, 1))])
    sol, _, _, _ = np.linalg.lstsq(X, latents, rcond=None)
    recon = latents @ components
    recon_errors = np.linalg.norm(Wc - recon, axis=1)
    return AeLpaModel(
        k=k, mean_w=mean_w, components=components,
        align_coef=sol[:-1], align_intercept=sol[-1],
        latents=latents, eigvals=np.maximum(vals, 0.0),
        recon_errors=recon_errors,
        param_mean=bank.param_mean.copy(), param_std=bank.param_std.copy(),
        fingerprint=bank.fingerprint,
    )


def aelpa_latent(model: AeLpaModel, p_raw) -> np.ndarray:
    z = _normalize(p_raw, model.param_mean, model.param_std, model.d)
    return z @ model.align_coef + model.align_intercept


def aelpa_generate(model: AeLpaModel, p_raw) -> np.ndarray:
    return model.mean_w + aelpa_latent(model, p_raw) @ model.components


def aelpa_reconstruct(model: AeLpaModel, w) -> np.ndarray:
    """Encode-decode a weight vector through the k-dimensional subspace."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != model.mean_w.shape:
        raise ConfigurationError("weight vector length does not match model")
    offset = w - model.mean_w
    return model.mean_w + (offset @ model.components.T) @ model.components


def hull_confinement(model: AeLpaModel, latent_rows) -> float:
    """Fraction of latent coordinates inside the training min/max box.

    1.0 means every generated coordinate stays within the span the training
    exemplars occupy; values below 1 quantify how far generation escapes it.
    """
    Z = np.atleast_2d(np.asarray(latent_rows, dtype=np.float64))
    if model.k == 0:
        return 1.0
    lo = model.latents.min(axis=0)
    hi = model.latents.max(axis=0)
    slack = 1e-9 * np.maximum(hi - lo, 1.0)
    inside = (Z >= lo - slack) & (Z <= hi + slack)
    return float(inside.mean())


# ------------------------------------------------------------ persistence


def _write_blob(path, magic, meta: dict, arrays):
    payload = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_blob(path, magic, kind):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(magic)] != magic:
        raise BankFormatError(f"bad magic bytes, not a {kind} file")
    off = len(magic)
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
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    return meta, blob, off + meta_len


def _take(blob, off, shape):
    count = int(np.prod(shape, dtype=np.int64))
    end = off + 8 * count
    if end > len(blob):
        raise BankTruncationError("array payload truncated")
    a = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape)
    return a.astype(np.float64), end


def save_dni(model: DniModel, path):
    meta = {
        "kind": "dni", "d": model.d, "weight_dim": model.weight_dim,
        "ridge": model.ridge, "fingerprint": model.fingerprint,
        "param_mean": model.param_mean.tolist(),
        "param_std": model.param_std.tolist(),
    }
    _write_blob(path, DNI_MAGIC, meta, [model.coef, model.intercept, model.w0])


def load_dni(path) -> DniModel:
    meta, blob, off = _read_blob(path, DNI_MAGIC, "dni model")
    d, D = int(meta["d"]), int(meta["weight_dim"])
    coef, off = _take(blob, off, (d, D))
    intercept, off = _take(blob, off, (D,))
    w0, off = _take(blob, off, (D,))
    if off != len(blob):
        raise BankFormatError("trailing bytes after payload")
    return DniModel(
        coef=coef, intercept=intercept, w0=w0,
        param_mean=np.asarray(meta["param_mean"], dtype=np.float64),
        param_std=np.asarray(meta["param_std"], dtype=np.float64),
        ridge=float(meta["ridge"]), fingerprint=str(meta["fingerprint"]),
    )


def save_aelpa(model: AeLpaModel, path):
    n = model.latents.shape[0]
    meta = {
        "kind": "aelpa", "k": model.k, "d": model.d, "n": n,
        "weight_dim": model.weight_dim, "fingerprint": model.fingerprint,
        "param_mean": model.param_mean.tolist(),
        "param_std": model.param_std.tolist(),
    }
    arrays = [model.mean_w, model.components, model.align_coef,
              model.align_intercept, model.latents, model.eigvals,
              model.recon_errors]
    _write_blob(path, AELPA_MAGIC, meta, arrays)


def load_aelpa(path) -> AeLpaModel:
    meta, blob, off = _read_blob(path, AELPA_MAGIC, "aelpa model")
    k, d, n, D = (int(meta[x]) for x in ("k", "d", "n", "weight_dim"))
    mean_w, off = _take(blob, off, (D,))
    components, off = _take(blob, off, (k, D))
    align_coef, off = _take(blob, off, (d, k))
    align_intercept, off = _take(blob, off, (k,))
    latents, off = _take(blob, off, (n, k))
    eigvals, off = _take(blob, off, (k,))
    recon_errors, off = _take(blob, off, (n,))
    if off != len(blob):
        raise BankFormatError("trailing bytes after payload")
    return AeLpaModel(
        k=k, mean_w=mean_w, components=components, align_coef=align_coef,
        align_intercept=align_intercept, latents=latents, eigvals=eigvals,
        recon_errors=recon_errors,
        param_mean=np.asarray(meta["param_mean"], dtype=np.float64),
        param_std=np.asarray(meta["param_std"], dtype=np.float64),
        fingerprint=str(meta["fingerprint"]),
    )
