"""Trial scoring (cosine, PLDA) and adaptive symmetric score normalization."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingSet, ScoreSet, TrialList
from .plda import PldaModel, PldaScoringMatrices

# Work is split into fixed-size row chunks so results never depend on the
# number of worker threads.
CHUNK_ROWS = 2048

DEFAULT_TOP_K = {"asnorm1": 100, "asnorm2": 200}


class ScoringError(ValueError):
    pass


def _chunked(n: int, fn, threads: int = 1) -> list:
    bounds = [(lo, min(lo + CHUNK_ROWS, n)) for lo in range(0, n, CHUNK_ROWS)]
    if threads <= 1 or len(bounds) <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


class CosineScorer:
    name = "cosine"

    def _unit(self, x: np.ndarray, ids=None) -> np.ndarray:
        norms = np.linalg.norm(x, axis=1)
        zero = np.flatnonzero(norms == 0)
        if len(zero):
            who = ids[zero[0]] if ids is not None else f"row {zero[0]}"
            raise ScoringError(f"zero vector {who} under cosine scoring")
        return x / norms[:, None]

    def pair_scores(self, e: np.ndarray, t: np.ndarray, e_ids=None, t_ids=None) -> np.ndarray:
        eu, tu = self._unit(e, e_ids), self._unit(t, t_ids)
        return np.einsum("ij,ij->i", eu, tu)

    def matrix_scores(self, e: np.ndarray, c: np.ndarray, e_ids=None, c_ids=None) -> np.ndarray:
        return self._unit(e, e_ids) @ self._unit(c, c_ids).T


class PldaScorer:
    name = "plda"

    def __init__(self, model: PldaModel):
        self.model = model
        self._m = PldaScoringMatrices(model)

    def pair_scores(self, e, t, e_ids=None, t_ids=None) -> np.ndarray:
        return self._m.pair_scores(e, t)

    def matrix_scores(self, e, c, e_ids=None, c_ids=None) -> np.ndarray:
        return self._m.matrix_scores(e, c)


def _resolve(trials: TrialList, enroll: EmbeddingSet, test: EmbeddingSet):
    ie = np.empty(len(trials), dtype=np.int64)
    it = np.empty(len(trials), dtype=np.int64)
    for k, tr in enumerate(trials):
        if not enroll.has(tr.enroll_id):
            raise ScoringError(f"enroll id {tr.enroll_id!r} not found (trial {k + 1})")
        if not test.has(tr.test_id):
            raise ScoringError(f"test id {tr.test_id!r} not found (trial {k + 1})")
        ie[k] = enroll.index_of(tr.enroll_id)
        it[k] = test.index_of(tr.test_id)
    return ie, it


def score_trials(trials: TrialList, enroll: EmbeddingSet, test: EmbeddingSet, scorer,
                 threads: int = 1) -> ScoreSet:
    """Score every trial; ``enroll`` and ``test`` may be the same set."""
    if enroll.dim != test.dim:
        raise ScoringError(f"enroll dim {enroll.dim} != test dim {test.dim}")
    ie, it = _resolve(trials, enroll, test)
    e_ids, t_ids = enroll.utt_ids, test.utt_ids

    def work(lo, hi):
        sel_e, sel_t = ie[lo:hi], it[lo:hi]
        return scorer.pair_scores(enroll.vectors[sel_e], test.vectors[sel_t],
                                  [e_ids[i] for i in sel_e], [t_ids[i] for i in sel_t])

    parts = _chunked(len(trials), work, threads)
    scores = np.concatenate(parts) if parts else np.zeros(0)
    return ScoreSet(trials, scores)


# -- AS-Norm -----------------------------------------------------------------

@dataclass(frozen=True)
class Cohort:
    embeddings: EmbeddingSet
    label: str = "cohort"

    def __post_init__(self):
        if len(self.embeddings) < 2:
            raise ScoringError("a cohort needs at least two embeddings")

    def sorted_by_id(self) -> EmbeddingSet:
        order = sorted(range(len(self.embeddings)), key=lambda i: self.embeddings.utt_ids[i])
        return self.embeddings.subset(order)


@dataclass(frozen=True)
class AsNormConfig:
    variant: str = "asnorm1"
    top_k: int | None = None

    def __post_init__(self):
        if self.variant not in DEFAULT_TOP_K:
            raise ScoringError(f"unknown AS-Norm variant {self.variant!r}")
        if self.top_k is None:
            object.__setattr__(self, "top_k", DEFAULT_TOP_K[self.variant])
        if self.top_k < 2:
            raise ScoringError("top_k must be >= 2")


def cohort_scores(emb: EmbeddingSet, ids, cohort_set: EmbeddingSet, scorer,
                  threads: int = 1) -> np.ndarray:
    """Score matrix of the given utterances (rows) against the cohort (columns)."""
    rows = np.array([emb.index_of(u) for u in ids], dtype=np.int64)

    def work(lo, hi):
        sel = rows[lo:hi]
        return scorer.matrix_scores(emb.vectors[sel], cohort_set.vectors,
                                    [emb.utt_ids[i] for i in sel], cohort_set.utt_ids)

    parts = _chunked(len(rows), work, threads)
    return np.vstack(parts) if parts else np.zeros((0, len(cohort_set)))


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Per row, column indices of the ``k`` largest scores.

    Columns must already be in ascending utt_id order; the stable sort then
    breaks ties by utt_id.
    """
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _norm_stats(values: np.ndarray):
    """Row means and biased standard deviations; ``bad`` flags zero-variance rows."""
    mu = values.mean(axis=1)
    sd = np.sqrt(((values - mu[:, None]) ** 2).mean(axis=1))
    scale = np.abs(values).max(axis=1)
    bad = np.flatnonzero(sd <= 1e-12 * np.maximum(scale, 1e-300))
    return mu, sd, bad


def _zero_variance(trials: TrialList, k: int, side: str) -> ScoringError:
    t = trials[int(k)]
    return ScoringError(f"zero cohort variance on the {side} side of trial "
                        f"{t.enroll_id} {t.test_id}")


def asnorm(raw: ScoreSet, enroll: EmbeddingSet, test: EmbeddingSet, cohort: Cohort,
           cfg: AsNormConfig, scorer, threads: int = 1) -> ScoreSet:
    """Adaptive symmetric normalization of ``raw`` (produced by ``scorer``).

    ``asnorm1`` picks each side's top-k cohort members by that side's own
    scores.  ``asnorm2`` cross-selects: the enroll statistics use the
    cohort members that score highest against the test segment, and vice
    versa.  Both combine ``((s - mu_e)/sd_e + (s - mu_t)/sd_t) / 2`` with
    biased standard deviations.
    """
    cset = cohort.sorted_by_id()
    if cset.dim != enroll.dim or cset.dim != test.dim:
        raise ScoringError("cohort dimension does not match the trial embeddings")
    k = cfg.top_k
    if k > len(cset):
        raise ScoringError(f"top_k={k} exceeds cohort size {len(cset)}")
    trials = raw.trials
    ie, it = _resolve(trials, enroll, test)

    # one cohort-score row per distinct segment, keyed by utt_id
    e_ids = sorted({enroll.utt_ids[i] for i in ie})
    t_ids = sorted({test.utt_ids[i] for i in it})
    se = cohort_scores(enroll, e_ids, cset, scorer, threads)
    st = cohort_scores(test, t_ids, cset, scorer, threads)
    e_row = {u: r for r, u in enumerate(e_ids)}
    t_row = {u: r for r, u in enumerate(t_ids)}
    re = np.array([e_row[enroll.utt_ids[i]] for i in ie], dtype=np.int64)
    rt = np.array([t_row[test.utt_ids[i]] for i in it], dtype=np.int64)
    top_e = top_k_indices(se, k)
    top_t = top_k_indices(st, k)

    if cfg.variant == "asnorm1":
        mu_e_seg, sd_e_seg, bad_e = _norm_stats(np.take_along_axis(se, top_e, axis=1))
        mu_t_seg, sd_t_seg, bad_t = _norm_stats(np.take_along_axis(st, top_t, axis=1))
        if len(bad_e):
            raise _zero_variance(trials, np.flatnonzero(np.isin(re, bad_e))[0], "enroll")
        if len(bad_t):
            raise _zero_variance(trials, np.flatnonzero(np.isin(rt, bad_t))[0], "test")

        def work(lo, hi):
            s = raw.scores[lo:hi]
            a, b = re[lo:hi], rt[lo:hi]
            return 0.5 * ((s - mu_e_seg[a]) / sd_e_seg[a] + (s - mu_t_seg[b]) / sd_t_seg[b])
    else:
        def work(lo, hi):
            s = raw.scores[lo:hi]
            a, b = re[lo:hi], rt[lo:hi]
            # enroll-side values at the members ranked by the test side, and vice versa
            mu_e, sd_e, bad_e = _norm_stats(np.take_along_axis(se[a], top_t[b], axis=1))
            mu_t, sd_t, bad_t = _norm_stats(np.take_along_axis(st[b], top_e[a], axis=1))
            if len(bad_e):
                raise _zero_variance(trials, lo + bad_e[0], "enroll")
            if len(bad_t):
                raise _zero_variance(trials, lo + bad_t[0], "test")
            return 0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t)

    parts = _chunked(len(trials), work, threads)
    out = np.concatenate(parts) if parts else np.zeros(0)
    return ScoreSet(trials, out)


def snorm(raw: ScoreSet, enroll: EmbeddingSet, test: EmbeddingSet, cohort: Cohort,
          scorer) -> ScoreSet:
    """Plain symmetric normalization against the whole cohort."""
    cset = cohort.embeddings
    ie, it = _resolve(raw.trials, enroll, test)
    se = scorer.matrix_scores(enroll.vectors[ie], cset.vectors)
    st = scorer.matrix_scores(test.vectors[it], cset.vectors)
    mu_e, sd_e, bad_e = _norm_stats(se)
    mu_t, sd_t, bad_t = _norm_stats(st)
    if len(bad_e):
        raise _zero_variance(raw.trials, bad_e[0], "enroll")
    if len(bad_t):
        raise _zero_variance(raw.trials, bad_t[0], "test")
    s = raw.scores
    return ScoreSet(raw.trials, 0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t))


def make_scorer(kind: str, model: PldaModel | None = None):
    if kind == "cosine":
        return CosineScorer()
    if kind == "plda":
        if model is None:
            raise ScoringError("PLDA scoring needs a model")
        return PldaScorer(model)
    raise ScoringError(f"unknown scorer {kind!r}")
