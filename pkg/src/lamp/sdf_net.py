"""Fourier-feature MLP signed distance decoders and per-shape overfitting.

A decoder is a plain MLP on a positional encoding of the query point:

    gamma(z) = [z, sin(2^0 pi z), cos(2^0 pi z), ..., sin(2^L pi z), cos(2^L pi z)]
    h_k = phi(W_k h_{k-1} + b_k),   f(z; w) = W_K h_{K-1} + b_K

All weights of one decoder live in a single flat vector w of length D using a
fixed layer-major order (W_1 row-major, b_1, W_2, b_2, ...). Training is
two-stage: fit one shared initialization on a family's mean design, then
overfit every exemplar from that same initialization, which keeps exemplar
weights clustered and makes affine combinations of them meaningful.

Training runs in float32 with a hand-rolled Adam; evaluation-quality forward
passes run in float64. Many exemplars can be trained simultaneously through
stacked batched matmuls, with one independent RNG stream per exemplar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np


class TrainingFailureError(RuntimeError):
    pass


class StructuralError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    fourier_bands: int = 4
    hidden_layers: int = 3
    hidden_width: int = 64
    activation: str = "softplus"
    input_dim: int = 3
    output_dim: int = 1

    def __post_init__(self):
        if self.activation not in ("softplus", "relu"):
            raise StructuralError(f"unknown activation {self.activation!r}")
        if self.fourier_bands < 0 or self.hidden_layers < 0 or self.hidden_width < 1:
            raise StructuralError("architecture sizes must be non-negative")
        if self.input_dim != 3 or self.output_dim != 1:
            raise StructuralError("decoders are scalar fields over 3D points")

    @property
    def encoded_dim(self):
        return self.input_dim + 2 * self.input_dim * (self.fourier_bands + 1)

    def layer_dims(self):
        dims = [self.encoded_dim]
        dims += [self.hidden_width] * self.hidden_layers
        dims += [self.output_dim]
        return dims

    @property
    def weight_count(self):
        dims = self.layer_dims()
        return int(sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1)))

    def to_dict(self):
        return {
            "fourier_bands": self.fourier_bands,
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "activation": self.activation,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _layer_slices(arch: Architecture):
    dims = arch.layer_dims()
    slices = []
    off = 0
    for i in range(len(dims) - 1):
        nw = dims[i] * dims[i + 1]
        slices.append((off, off + nw, dims[i], dims[i + 1]))
        off += nw + dims[i + 1]
    return slices


@dataclass
class MlpWeights:
    """Flat weight vector plus per-layer views, in fixed layer-major order."""

    arch: Architecture
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat)
        if self.flat.shape != (self.arch.weight_count,):
            raise StructuralError(
                f"flat weight length {self.flat.shape} does not match "
                f"D={self.arch.weight_count}"
            )

    def layers(self):
        out = []
        for a, b, din, dout in _layer_slices(self.arch):
            out.append((self.flat[a:b].reshape(din, dout), self.flat[b : b + dout]))
        return out


def flatten_layers(arch: Architecture, layers) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w).reshape(-1))
        parts.append(np.asarray(b).reshape(-1))
    flat = np.concatenate(parts)
    return MlpWeights(arch, flat).flat


def encode(points, fourier_bands):
    """Positional encoding, shape (..., 3) -> (..., 3 + 6*(L+1))."""
    pts = np.asarray(points)
    parts = [pts]
    for band in range(fourier_bands + 1):
        w = (2.0**band) * np.pi * pts
        parts.append(np.sin(w))
        parts.append(np.cos(w))
    return np.concatenate(parts, axis=-1)


def _stacked_views(arch, flat2d):
    # per-layer views into an (M, D) stack; column slices reshape without copy
    views = []
    for a, b, din, dout in _layer_slices(arch):
        views.append((flat2d[:, a:b].reshape(flat2d.shape[0], din, dout),
                      flat2d[:, b : b + dout]))
    return views


def _act_forward(pre, activation):
    if activation == "relu":
        return np.maximum(pre, 0.0), (pre > 0)
    e = np.exp(-np.abs(pre))
    a = 1.0 / (1.0 + e)
    act = np.maximum(pre, 0.0) + np.log1p(e)
    sig = np.where(pre >= 0, a, e * a)  # d softplus / d pre
    return act, sig


def forward(arch: Architecture, weights, points, dtype=np.float64):
    """Decode SDF values at points; float64 math by default."""
    w = weights.flat if isinstance(weights, MlpWeights) else np.asarray(weights)
    if w.shape != (arch.weight_count,):
        raise StructuralError(
            f"weight length {w.shape} does not match D={arch.weight_count}"
        )
    pts = np.asarray(points, dtype=dtype)
    scalar = pts.ndim == 1
    if scalar:
        pts = pts[None, :]
    out = forward_many(arch, w[None, :].astype(dtype, copy=False), pts, dtype=dtype)[0]
    return float(out[0]) if scalar else out


def forward_many(arch: Architecture, weight_stack, points, dtype=np.float64):
    """Decode a stack of weight vectors.

    weight_stack: (M, D). points: (B, 3) shared across the stack or (M, B, 3)
    per-exemplar. Returns (M, B).
    """
    W = np.ascontiguousarray(np.asarray(weight_stack), dtype=dtype)
    if W.ndim != 2 or W.shape[1] != arch.weight_count:
        raise StructuralError(
            f"weight stack shape {W.shape} does not match D={arch.weight_count}"
        )
    pts = np.asarray(points, dtype=dtype)
    h = encode(pts, arch.fourier_bands)
    if h.ndim == 2:
        h = np.broadcast_to(h, (W.shape[0],) + h.shape)
    layers = _stacked_views(arch, W)
    for li, (Wl, bl) in enumerate(layers):
        pre = np.matmul(h, Wl) + bl[:, None, :]
        if li < len(layers) - 1:
            h, _ = _act_forward(pre, arch.activation)
        else:
            h = pre
    return h[..., 0]


def init_weights(arch: Architecture, seed) -> np.ndarray:
    """He-scaled random initialization, float32, deterministic by seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dims = arch.layer_dims()
    layers = []
    for i in range(len(dims) - 1):
        w = rng.standard_normal((dims[i], dims[i + 1])) * np.sqrt(2.0 / dims[i])
        layers.append((w, np.zeros(dims[i + 1])))
    return flatten_layers(arch, layers).astype(np.float32)


@dataclass(frozen=True)
class TrainConfig:
    points_per_step: int = 4096
    steps: int = 3000
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"  # "cosine" or "constant"
    near_surface_fraction: float = 0.3
    near_surface_sigma: float = 0.05
    clamp_delta: float = 0.1
    loss: str = "huber"  # "huber" (default), "mae", "mse"
    huber_beta: float = 0.01
    weight_anchor: float = 0.0  # L2 pull toward the run's starting weights
    rng_seed: int = 0

    def __post_init__(self):
        if self.points_per_step < 1 or self.steps < 0:
            raise StructuralError("points_per_step must be >= 1 and steps >= 0")
        if self.learning_rate <= 0 or self.clamp_delta <= 0 or self.huber_beta <= 0:
            raise StructuralError("learning_rate, clamp_delta, huber_beta must be > 0")
        if not 0.0 <= self.near_surface_fraction <= 1.0:
            raise StructuralError("near_surface_fraction must be in [0, 1]")
        if self.weight_anchor < 0:
            raise StructuralError("weight_anchor must be >= 0")
        if self.loss not in ("huber", "mae", "mse"):
            raise StructuralError(f"unknown loss {self.loss!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise StructuralError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str):
        return cls(**json.loads(text))


def sample_training_points(sdf_fn, n, near_surface_fraction, sigma, rng):
    """70/30-style mix: uniform cube points plus jittered near-surface points.

    Near-surface points come from projecting uniform seeds onto the zero set
    with a few distance-and-gradient steps, then adding Gaussian jitter.
    """
    n_near = int(round(n * near_surface_fraction))
    n_uni = n - n_near
    uni = rng.uniform(-1.0, 1.0, (n_uni, 3))
    if n_near == 0:
        return uni
    x = rng.uniform(-1.0, 1.0, (n_near, 3))
    h = 1e-4
    eye = np.eye(3) * h
    for _ in range(5):
        d = sdf_fn(x)
        grad = np.stack(
            [(sdf_fn(x + eye[k]) - sdf_fn(x - eye[k])) / (2 * h) for k in range(3)],
            axis=-1,
        )
        norm2 = np.maximum((grad * grad).sum(-1), 1e-12)
        x = x - (d / norm2)[:, None] * grad
    x = x + rng.normal(0.0, sigma, x.shape)
    return np.concatenate([uni, x])


def _loss_grad(out, y, cfg: TrainConfig):
    delta = cfg.clamp_delta
    res = np.clip(out, -delta, delta) - y
    if cfg.loss == "mae":
        g = np.sign(res)
    elif cfg.loss == "mse":
        g = 2.0 * res
    else:
        g = np.clip(res / cfg.huber_beta, -1.0, 1.0)
    # keep pulling saturated outputs back toward the clamp band
    gate = ((out > -delta) | (y > out)) & ((out < delta) | (y < out))
    return np.abs(res).mean(axis=-1), (g * gate) / res.shape[-1]


def _lr_at(cfg: TrainConfig, step):
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    t = step / max(cfg.steps, 1)
    return cfg.learning_rate * (0.005 + 0.995 * 0.5 * (1.0 + np.cos(np.pi * t)))


@np.errstate(over="ignore", invalid="ignore")  # divergence is reported by raising
def train_many(arch: Architecture, sdf_fns, cfg: TrainConfig, init):
    """Overfit one decoder per SDF oracle, all advancing in lock step.

    init: (D,) shared start for every decoder, or (M, D) per-decoder starts.
    Exemplar m draws from its own RNG stream (cfg.rng_seed, m). Returns
    (weights (M, D) float32, list of info dicts).
    """
    M = len(sdf_fns)
    D = arch.weight_count
    init = np.asarray(init, dtype=np.float32)
    if init.ndim == 1:
        init = np.broadcast_to(init, (M, D))
    if init.shape != (M, D):
        raise StructuralError(f"init shape {init.shape} does not match ({M}, {D})")
    W = np.ascontiguousarray(init, dtype=np.float32).copy()
    if cfg.steps == 0:
        return W, [{"final_loss": None, "steps": 0} for _ in range(M)]
    W_start = W.copy() if cfg.weight_anchor > 0 else None

    rngs = [
        np.random.default_rng(np.random.SeedSequence(entropy=cfg.rng_seed, spawn_key=(m,)))
        for m in range(M)
    ]
    views = _stacked_views(arch, W)
    G = np.zeros_like(W)
    gviews = _stacked_views(arch, G)
    mom = np.zeros_like(W)
    vel = np.zeros_like(W)
    b1, b2, eps = 0.9, 0.999, 1e-8
    delta = cfg.clamp_delta
    B = cfg.points_per_step
    n_layers = len(views)
    last_loss = np.zeros(M)

    for step in range(1, cfg.steps + 1):
        pts = np.empty((M, B, 3), dtype=np.float64)
        y = np.empty((M, B), dtype=np.float32)
        for m in range(M):
            p = sample_training_points(
                sdf_fns[m], B, cfg.near_surface_fraction, cfg.near_surface_sigma, rngs[m]
            )
            pts[m] = p
            y[m] = np.clip(sdf_fns[m](p), -delta, delta)
        h = encode(pts.astype(np.float32), arch.fourier_bands)

        acts = []
        for li, (Wl, bl) in enumerate(views):
            pre = np.matmul(h, Wl) + bl[:, None, :]
            if li < n_layers - 1:
                nh, sig = _act_forward(pre, arch.activation)
                acts.append((h, sig))
                h = nh
            else:
                out = pre[..., 0]
        final_in = h  # input of the affine output layer

        last_loss, g = _loss_grad(out, y, cfg)
        g = g.astype(np.float32)

        gh = g[..., None] * views[-1][0][:, None, :, 0]
        np.matmul(final_in.transpose(0, 2, 1), g[..., None], out=gviews[-1][0])
        gviews[-1][1][:] = g.sum(axis=1)[:, None]
        for li in range(n_layers - 2, -1, -1):
            h_in, sig = acts[li]
            gpre = gh * sig
            np.matmul(h_in.transpose(0, 2, 1), gpre, out=gviews[li][0])
            gviews[li][1][:] = gpre.sum(axis=1)
            if li > 0:
                gh = np.matmul(gpre, views[li][0].transpose(0, 2, 1))

        if W_start is not None:
            # suppresses optimizer drift along loss-flat weight directions,
            # keeping converged starts (and hence exemplars) near their anchor
            G += np.float32(cfg.weight_anchor) * (W - W_start)

        lr = np.float32(_lr_at(cfg, step))
        mom *= b1
        mom += (1 - b1) * G
        vel *= b2
        vel += (1 - b2) * np.square(G)
        mhat = mom / np.float32(1 - b1**step)
        vhat = vel / np.float32(1 - b2**step)
        W -= lr * mhat / (np.sqrt(vhat) + np.float32(eps))

        if step % 200 == 0 or step == cfg.steps:
            if not np.isfinite(W).all():
                raise TrainingFailureError(f"non-finite weights at step {step}")

    if not np.isfinite(last_loss).all():
        raise TrainingFailureError("non-finite training loss")
    infos = [{"final_loss": float(last_loss[m]), "steps": cfg.steps} for m in range(M)]
    return W, infos


def heldout_error(arch: Architecture, weights, sdf_fn, cfg: TrainConfig, n=8192, seed=0):
    """Mean |clamped prediction - clamped truth| on fresh points.

    Points follow the same uniform/near-surface law as training so that a
    decoder saturated at +-delta cannot score well. float64 evaluation,
    deterministic by seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    pts = sample_training_points(
        sdf_fn, n, cfg.near_surface_fraction, cfg.near_surface_sigma, rng
    )
    delta = cfg.clamp_delta
    w = weights.flat if isinstance(weights, MlpWeights) else np.asarray(weights)
    pred = forward(arch, w.astype(np.float64), pts)
    truth = np.clip(sdf_fn(pts), -delta, delta)
    return float(np.abs(np.clip(pred, -delta, delta) - truth).mean())


def fit_shared_init(sdf_fn, arch: Architecture, cfg: TrainConfig):
    """Overfit the mean-design oracle from scratch; the bank's shared start."""
    w_init = init_weights(arch, cfg.rng_seed)
    W, infos = train_many(arch, [sdf_fn], cfg, w_init)
    return W[0], infos[0]


def overfit_exemplar(sdf_fn, w0, arch: Architecture, cfg: TrainConfig):
    """Fine-tune one decoder from the shared initialization (never re-init)."""
    W, infos = train_many(arch, [sdf_fn], cfg, np.asarray(w0, dtype=np.float32))
    return W[0], infos[0]


def finetune_config(cfg: TrainConfig, steps=500, points_per_step=512, learning_rate=5e-4,
                    weight_anchor=0.03):
    """Default per-exemplar schedule: shorter and gentler than the shared fit.

    The anchor keeps a decoder that already fits its target (for example the
    mean design refit from w0) from wandering along loss-flat directions.
    """
    return replace(cfg, steps=steps, points_per_step=points_per_step,
                   learning_rate=learning_rate, weight_anchor=weight_anchor)
