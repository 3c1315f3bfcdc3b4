"""Affine score calibration by prior-weighted logistic regression, and fusion."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import DataError, FormatError, ScoreSet

DEFAULT_PRIOR = 0.01
SCALE_RIDGE = 1e-6


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class Calibration:
    scale: float
    bias: float
    effective_prior: float = DEFAULT_PRIOR

    def __post_init__(self):
        if not (np.isfinite(self.scale) and np.isfinite(self.bias)):
            raise CalibrationError("calibration parameters must be finite")
        if not 0.0 < self.effective_prior < 1.0:
            raise CalibrationError("effective prior must be in (0, 1)")

    def to_text(self) -> str:
        return f"a={self.scale!r} b={self.bias!r} prior={self.effective_prior!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "Calibration":
        kv = dict(re.findall(r"(\w+)=(\S+)", text))
        try:
            return cls(float(kv["a"]), float(kv["b"]), float(kv["prior"]))
        except (KeyError, ValueError):
            raise FormatError("calibration file must read 'a=<v> b=<v> prior=<v>'") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Calibration":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def calibration_objective(params, tar: np.ndarray, non: np.ndarray, prior: float,
                          ridge: float = SCALE_RIDGE):
    """Prior-weighted cross-entropy (nats), its gradient and Hessian in ``(a, b)``."""
    a, b = params
    off = logit(prior)
    zt = a * tar + b + off
    zn = a * non + b + off
    wt = prior / len(tar)
    wn = (1.0 - prior) / len(non)
    # -log sigmoid(z) = logaddexp(0, -z)
    f = wt * np.logaddexp(0.0, -zt).sum() + wn * np.logaddexp(0.0, zn).sum() + ridge * a * a
    gt = -expit(-zt)            # d/dz of -log sigmoid(z)
    gn = expit(zn)              # d/dz of -log sigmoid(-z)
    grad = np.array([wt * (gt * tar).sum() + wn * (gn * non).sum() + 2 * ridge * a,
                     wt * gt.sum() + wn * gn.sum()])
    ht = expit(zt) * expit(-zt)
    hn = expit(zn) * expit(-zn)
    haa = wt * (ht * tar * tar).sum() + wn * (hn * non * non).sum() + 2 * ridge
    hab = wt * (ht * tar).sum() + wn * (hn * non).sum()
    hbb = wt * ht.sum() + wn * hn.sum()
    return float(f), grad, np.array([[haa, hab], [hab, hbb]])


def fit_calibration(scores: ScoreSet, effective_prior: float = DEFAULT_PRIOR,
                    ridge: float = SCALE_RIDGE, init=(1.0, 0.0), tol: float = 1e-8,
                    max_iter: int = 1000) -> Calibration:
    """Learn ``a, b`` so that ``a*s + b`` behaves as a log-likelihood ratio.

    Damped Newton with backtracking on a convex two-parameter objective.
    The small ridge on ``a`` keeps the optimum finite for separable scores.
    """
    if not 0.0 < effective_prior < 1.0:
        raise CalibrationError("effective prior must be in (0, 1)")
    tar, non = scores.labeled_split()
    if len(tar) == 0 or len(non) == 0:
        raise CalibrationError("calibration needs both target and nontarget trials")
    x = np.array(init, dtype=np.float64)
    f, g, h = calibration_objective(x, tar, non, effective_prior, ridge)
    for _ in range(max_iter):
        if np.max(np.abs(g)) < tol:
            break
        try:
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = -g
        if step @ g >= 0:
            step = -g
        t = 1.0
        while True:
            xn = x + t * step
            fn, gn, hn = calibration_objective(xn, tar, non, effective_prior, ridge)
            if fn <= f + 1e-4 * t * (step @ g) or t < 1e-12:
                break
            t *= 0.5
        if fn > f:
            break
        x, f, g, h = xn, fn, gn, hn
    return Calibration(float(x[0]), float(x[1]), effective_prior)


def apply_calibration(scores: ScoreSet, cal: Calibration) -> ScoreSet:
    return scores.with_scores(cal.scale * scores.scores + cal.bias)


def fuse(calibrated: list[ScoreSet]) -> ScoreSet:
    """Equal-weight sum of calibrated systems, aligned to the first trial list."""
    if not calibrated:
        raise CalibrationError("nothing to fuse")
    ref = calibrated[0].trials
    total = calibrated[0].scores.copy()
    for k, sys in enumerate(calibrated[1:], 2):
        try:
            total = total + sys.aligned_to(ref).scores
        except DataError as e:
            raise CalibrationError(f"system {k} trial list does not match system 1: {e}") from None
    return ScoreSet(ref, total)
