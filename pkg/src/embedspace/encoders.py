"""Utterance-level pooling layers and margin losses as plain numpy kernels.

Forward passes for global average pooling (mean, mean+std) and learnable
dictionary encoding, the A-softmax loss with annealing, and analytic
gradients for the trainable pieces.  No training loop lives here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev
from scipy.special import logsumexp, softmax

STD_FLOOR = 1e-10
LDE_EPS = 1e-8
COS_CLAMP = 1e-12


class EncoderError(ValueError):
    pass


def _feature_maps(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 1:
        raise EncoderError(f"feature maps must be C x H x W, got shape {f.shape}")
    return f


def gap_mean(f) -> np.ndarray:
    """Per-channel mean over the H x W grid."""
    f = _feature_maps(f)
    c = f.shape[0]
    return f.reshape(c, -1).mean(axis=1)


def gap_mean_std(f) -> np.ndarray:
    """Per-channel mean and biased standard deviation, concatenated.

    The variance is floored at ``STD_FLOOR`` before the square root.
    """
    f = _feature_maps(f)
    flat = f.reshape(f.shape[0], -1)
    mu = flat.mean(axis=1)
    var = ((flat - mu[:, None]) ** 2).mean(axis=1)
    return np.concatenate([mu, np.sqrt(np.maximum(var, STD_FLOOR))])


# -- learnable dictionary encoding -------------------------------------------

@dataclass
class LdeParams:
    centers: np.ndarray     # (K, D)
    scales: np.ndarray      # (K,)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        if self.centers.ndim != 2 or len(self.centers) < 1:
            raise EncoderError("centers must be K x D with K >= 1")
        if self.scales.shape != (len(self.centers),):
            raise EncoderError("need one scale per dictionary component")
        if np.any(self.scales < 0):
            raise EncoderError("scales must be non-negative")

    @classmethod
    def init(cls, dim: int, n_components: int = 64, seed: int = 0) -> "LdeParams":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((n_components, dim)), np.ones(n_components))


def _lde_parts(x, p: LdeParams):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise EncoderError("frame sequence must be L x D with L >= 1")
    if x.shape[1] != p.centers.shape[1]:
        raise EncoderError(f"frame dim {x.shape[1]} != dictionary dim {p.centers.shape[1]}")
    r = x[:, None, :] - p.centers[None, :, :]          # (L, K, D)
    d2 = np.einsum("lkd,lkd->lk", r, r)
    w = softmax(-p.scales[None, :] * d2, axis=1)       # (L, K)
    mass = w.sum(axis=0) + LDE_EPS                     # (K,)
    e = np.einsum("lk,lkd->kd", w, r) / mass[:, None]
    return r, d2, w, mass, e


def lde_forward(x, p: LdeParams) -> np.ndarray:
    """Soft-assigned mean residual per dictionary component, flattened to K*D."""
    return _lde_parts(x, p)[-1].reshape(-1)


def lde_backward(x, p: LdeParams, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``<upstream, lde_forward(x, p)>`` w.r.t. frames, centers and scales."""
    r, d2, w, mass, e = _lde_parts(x, p)
    k, d = p.centers.shape
    g = np.asarray(upstream, dtype=np.float64).reshape(k, d)
    g_scaled = g / mass[:, None]                                  # dL/d(numerator)
    # dL/dw_lc = g_c . (r_lc - e_c) / mass_c
    gw = np.einsum("kd,lkd->lk", g_scaled, r) - (g_scaled * e).sum(axis=1)[None, :]
    # softmax backward to the logits a_lc = -s_c * d2_lc
    ga = w * (gw - (w * gw).sum(axis=1, keepdims=True))
    g_d2 = -p.scales[None, :] * ga
    g_scales = -(d2 * ga).sum(axis=0)
    g_r = w[:, :, None] * g_scaled[None, :, :] + 2.0 * g_d2[:, :, None] * r
    return g_r.sum(axis=1), -g_r.sum(axis=0), g_scales


# -- A-softmax ---------------------------------------------------------------

@dataclass
class AsoftmaxParams:
    weights: np.ndarray     # (n_classes, D), rows unit norm
    margin: int = 4
    lam: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise EncoderError("weights must be n_classes x D")
        if int(self.margin) != self.margin or self.margin < 1:
            raise EncoderError("margin must be a positive integer")
        if self.lam < 0:
            raise EncoderError("annealing weight must be non-negative")
        self.margin = int(self.margin)

    @classmethod
    def init(cls, n_classes: int, dim: int, margin: int = 4, lam: float = 0.0,
             seed: int = 0) -> "AsoftmaxParams":
        w = np.random.default_rng(seed).standard_normal((n_classes, dim))
        return cls(w / np.linalg.norm(w, axis=1, keepdims=True), margin, lam)


def _psi(cos_t: float, m: int) -> tuple[float, float]:
    """Margin function (-1)^k cos(m theta) - 2k and its derivative in cos(theta)."""
    theta = np.arccos(cos_t)
    k = int(np.floor(m * theta / np.pi))
    k = min(k, m - 1)   # theta == pi lands in the last interval
    sign = -1.0 if k % 2 else 1.0
    tm = np.zeros(m + 1)
    tm[m] = 1.0         # Chebyshev T_m: cos(m theta) = T_m(cos theta)
    val = sign * chebyshev.chebval(cos_t, tm) - 2.0 * k
    der = sign * chebyshev.chebval(cos_t, chebyshev.chebder(tm))
    return float(val), float(der)


def asoftmax_loss(x, label: int, p: AsoftmaxParams) -> tuple[float, np.ndarray, np.ndarray]:
    """Annealed A-softmax cross-entropy for one embedding.

    Class weights are row-normalized inside the loss, so the returned
    weight gradient is with respect to the raw rows (for unit rows it is the
    tangent-space gradient).  The target logit is
    ``|x| (lam cos + psi(theta)) / (1 + lam)``.  Returns
    ``(loss, d loss / d x, d loss / d weights)``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    w = p.weights
    if x.shape[0] != w.shape[1]:
        raise EncoderError("embedding dim does not match the class weights")
    if not 0 <= label < len(w):
        raise EncoderError("label out of range")
    norm_x = float(np.linalg.norm(x))
    if norm_x == 0:
        raise EncoderError("A-softmax is undefined for a zero embedding")
    w_norm = np.linalg.norm(w, axis=1)
    if np.any(w_norm == 0):
        raise EncoderError("zero class weight row")
    wh = w / w_norm[:, None]
    u = wh @ x                                    # |x| cos(theta_j)
    logits = u.copy()
    c_raw = u[label] / norm_x
    clamped = abs(c_raw) >= 1.0 - COS_CLAMP
    c = float(np.clip(c_raw, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP))
    psi, dpsi = _psi(c, p.margin)
    lam = p.lam
    g = (lam * c + psi) / (1.0 + lam)
    dg = 0.0 if clamped else (lam + dpsi) / (1.0 + lam)
    logits[label] = norm_x * g
    loss = float(logsumexp(logits) - logits[label])
    delta = softmax(logits)
    delta[label] -= 1.0

    # non-target logits: z_j = wh_j . x
    grad_x = wh.T @ delta - delta[label] * wh[label]
    grad_wh = np.outer(delta, x)
    # target logit: z_y = |x| g(c), c = wh_y . x / |x|
    dz_dx = g * x / norm_x + dg * (wh[label] - c_raw * x / norm_x)
    grad_x += delta[label] * dz_dx
    grad_wh[label] = delta[label] * dg * x
    # through the row normalization wh = w / |w|
    radial = np.einsum("ij,ij->i", grad_wh, wh)
    grad_w = (grad_wh - radial[:, None] * wh) / w_norm[:, None]
    return loss, grad_x, grad_w


def normalized_softmax_loss(x, label: int, weights) -> float:
    """Cross-entropy with logits ``(w_j / |w_j|) . x`` (the margin-free reference)."""
    w = np.asarray(weights, dtype=np.float64)
    logits = (w / np.linalg.norm(w, axis=1, keepdims=True)) @ np.asarray(x, dtype=np.float64)
    return float(logsumexp(logits) - logits[label])


@dataclass(frozen=True)
class AnnealConfig:
    base: float = 1000.0
    gamma: float = 0.1
    minimum: float = 5.0

    def __post_init__(self):
        if self.base < 0 or self.gamma < 0 or self.minimum < 0:
            raise EncoderError("annealing parameters must be non-negative")


def anneal_schedule(step: int, cfg: AnnealConfig = AnnealConfig()) -> float:
    """``max(minimum, base / (1 + gamma * step))``: softmax-like early, A-softmax late."""
    if step < 0:
        raise EncoderError("step must be non-negative")
    return max(cfg.minimum, cfg.base / (1.0 + cfg.gamma * step))


# -- finite-difference checking ----------------------------------------------

def max_relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - n) / (np.maximum(np.abs(a), np.abs(n)) + 1e-8), initial=0.0))


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_lde_gradients(seed: int, frames: int = 7, dim: int = 4, components: int = 3,
                        h: float = 1e-5) -> dict:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((frames, dim))
    p = LdeParams(rng.standard_normal((components, dim)), rng.uniform(0.1, 1.0, components))
    up = rng.standard_normal(components * dim)

    def obj():
        return float(up @ lde_forward(x, p))

    gx, gmu, gs = lde_backward(x, p, up)
    return {
        "frames": max_relative_error(gx, numeric_gradient(obj, x, h)),
        "centers": max_relative_error(gmu, numeric_gradient(obj, p.centers, h)),
        "scales": max_relative_error(gs, numeric_gradient(obj, p.scales, h)),
    }


def check_asoftmax_gradients(seed: int, dim: int = 6, n_classes: int = 4, margin: int = 4,
                             lam: float = 5.0, h: float = 1e-5) -> dict:
    rng = np.random.default_rng(seed)
    p = AsoftmaxParams.init(n_classes, dim, margin, lam, seed=seed + 1)
    x = rng.standard_normal(dim)
    y = int(rng.integers(n_classes))
    _, gx, gw = asoftmax_loss(x, y, p)
    return {
        "embedding": max_relative_error(gx, numeric_gradient(lambda: asoftmax_loss(x, y, p)[0], x, h)),
        "weights": max_relative_error(gw, numeric_gradient(lambda: asoftmax_loss(x, y, p)[0],
                                                           p.weights, h)),
    }
