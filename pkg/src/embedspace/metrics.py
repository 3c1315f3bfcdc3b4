"""Detection metrics: EER and normalized detection costs (minC, actC).

A trial is accepted at threshold ``theta`` iff its score is ``>= theta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ScoreSet


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    c_miss: float = 1.0
    c_fa: float = 1.0
    p_targets: tuple = (0.01, 0.005)

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise MetricsError("costs must be positive")
        pt = tuple(float(p) for p in self.p_targets)
        if not pt or not all(0.0 < p < 1.0 for p in pt):
            raise MetricsError("p_targets must be a nonempty list of values in (0, 1)")
        object.__setattr__(self, "p_targets", pt)


# Operating points of the SRE18 evaluation plan (not stated in the system description).
COST_PROFILES = {
    "cmn2": CostParams(1.0, 1.0, (0.01, 0.005)),
    "vast": CostParams(1.0, 1.0, (0.05,)),
}


def cost_profile(name: str, p_targets=None, c_miss: float = 1.0, c_fa: float = 1.0) -> CostParams:
    if name == "custom":
        if not p_targets:
            raise MetricsError("custom cost profile needs p_targets")
        return CostParams(c_miss, c_fa, tuple(p_targets))
    try:
        return COST_PROFILES[name]
    except KeyError:
        raise MetricsError(f"unknown cost profile {name!r}") from None


def _split(scores) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, ScoreSet):
        tar, non = scores.labeled_split()
    else:
        tar, non = (np.asarray(a, dtype=np.float64) for a in scores)
    if len(tar) == 0 or len(non) == 0:
        raise MetricsError("metrics need at least one target and one nontarget trial")
    if not (np.all(np.isfinite(tar)) and np.all(np.isfinite(non))):
        raise MetricsError("non-finite scores")
    return tar, non


def roc_counts(tar: np.ndarray, non: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Miss and false-alarm counts at every distinct threshold.

    Point 0 rejects everything; each following point additionally accepts
    one group of tied scores, in descending score order.
    """
    scores = np.concatenate([tar, non])
    is_tar = np.concatenate([np.ones(len(tar), dtype=np.int64), np.zeros(len(non), dtype=np.int64)])
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = is_tar[order]
    # last index of each tie group
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    acc_t = np.cumsum(t)[ends]
    acc_n = np.cumsum(1 - t)[ends]
    miss = np.concatenate([[len(tar)], len(tar) - acc_t])
    fa = np.concatenate([[0], acc_n])
    return miss, fa


def compute_eer(scores) -> float:
    """Equal error rate with linear interpolation between bracketing ROC points.

    ``scores`` is a labeled :class:`ScoreSet` or a ``(targets, nontargets)`` pair.
    """
    tar, non = _split(scores)
    miss, fa = roc_counts(tar, non)
    pm = miss / len(tar)
    pf = fa / len(non)
    diff = pm - pf          # starts at 1, ends at -1, non-increasing
    hit = np.flatnonzero(diff == 0)
    if len(hit):
        return float(pm[hit[0]])
    i = int(np.flatnonzero(diff < 0)[0])   # first point past the crossing
    d0, d1 = diff[i - 1], diff[i]
    frac = d0 / (d0 - d1)
    return float(pm[i - 1] + frac * (pm[i] - pm[i - 1]))


def _normalized_cost(pm, pf, p, params: CostParams):
    norm = min(params.c_miss * p, params.c_fa * (1.0 - p))
    return (params.c_miss * p * pm + params.c_fa * (1.0 - p) * pf) / norm


def compute_min_cost(scores, params: CostParams = COST_PROFILES["cmn2"]) -> float:
    tar, non = _split(scores)
    miss, fa = roc_counts(tar, non)
    pm, pf = miss / len(tar), fa / len(non)
    costs = [float(np.min(_normalized_cost(pm, pf, p, params))) for p in params.p_targets]
    return float(np.mean(costs))


def compute_act_cost(scores, params: CostParams = COST_PROFILES["cmn2"]) -> float:
    """Cost at the Bayes threshold; ``scores`` must be calibrated LLRs."""
    tar, non = _split(scores)
    costs = []
    for p in params.p_targets:
        theta = np.log(params.c_fa * (1.0 - p) / (params.c_miss * p))
        pm = np.count_nonzero(tar < theta) / len(tar)
        pf = np.count_nonzero(non >= theta) / len(non)
        costs.append(float(_normalized_cost(pm, pf, p, params)))
    return float(np.mean(costs))


@dataclass(frozen=True)
class Report:
    eer: float
    min_cost: float
    act_cost: float

    def line(self) -> str:
        """``EER[%] / minC / actC`` as printed in results tables."""
        return f"{100 * self.eer:.2f} / {self.min_cost:.3f} / {self.act_cost:.3f}"

    def tsv(self) -> str:
        return (f"eer\tmin_cost\tact_cost\n"
                f"{self.eer!r}\t{self.min_cost!r}\t{self.act_cost!r}\n")


def evaluate(scores, params: CostParams = COST_PROFILES["cmn2"]) -> Report:
    return Report(compute_eer(scores), compute_min_cost(scores, params),
                  compute_act_cost(scores, params))
