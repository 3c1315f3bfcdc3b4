"""Two-covariance Gaussian PLDA: EM training and log-likelihood-ratio scoring.

Model: ``x = mu + y_s + e`` with ``y_s ~ N(0, B)`` shared by all utterances
of speaker ``s`` and ``e ~ N(0, W)`` per utterance.  B is full rank and
unconstrained, W is a full covariance.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EmbeddingSet, FormatError

log = logging.getLogger(__name__)

PLDA_MAGIC = b"PLDA"
_LOG2PI = np.log(2.0 * np.pi)


class PldaError(ValueError):
    pass


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def floor_between(b: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(_sym(b))
    if vals.min() >= 0:
        return _sym(b)
    return _sym((vecs * np.clip(vals, 0.0, None)) @ vecs.T)


def floor_within(w: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(_sym(w))
    floor = 1e-10 * vals.max()
    if vals.min() >= floor:
        return _sym(w)
    return _sym((vecs * np.maximum(vals, floor)) @ vecs.T)


@dataclass(frozen=True)
class PldaModel:
    mean: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        b = np.asarray(self.between_cov, dtype=np.float64)
        w = np.asarray(self.within_cov, dtype=np.float64)
        d = len(mu)
        if b.shape != (d, d) or w.shape != (d, d):
            raise PldaError("PLDA covariance shapes do not match the mean")
        for name, m in (("mean", mu), ("between_cov", b), ("within_cov", w)):
            if not np.all(np.isfinite(m)):
                raise PldaError(f"non-finite values in {name}")
        for a in (mu, b, w):
            a.setflags(write=False)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "between_cov", b)
        object.__setattr__(self, "within_cov", w)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def to_bytes(self) -> bytes:
        return (PLDA_MAGIC + struct.pack("<I", self.dim) + self.mean.astype("<f8").tobytes()
                + self.between_cov.astype("<f8").tobytes()
                + self.within_cov.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PldaModel":
        if buf[:4] != PLDA_MAGIC or len(buf) < 8:
            raise FormatError("not a PLDA model file")
        (d,) = struct.unpack_from("<I", buf, 4)
        if len(buf) != 8 + 8 * (d + 2 * d * d):
            raise FormatError("PLDA payload size does not match header")
        arr = np.frombuffer(buf, dtype="<f8", offset=8).astype(np.float64)
        return cls(arr[:d], arr[d:d + d * d].reshape(d, d), arr[d + d * d:].reshape(d, d))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PldaModel":
        return cls.from_bytes(Path(path).read_bytes())


# -- sufficient statistics ---------------------------------------------------

@dataclass
class _Stats:
    counts: np.ndarray      # (S,) utterances per speaker
    means: np.ndarray       # (S, D) per-speaker mean
    scatter: np.ndarray     # (D, D) summed within-speaker scatter
    n: int


def _stats(emb: EmbeddingSet) -> _Stats:
    emb.require_labels("PLDA training")
    speakers, spk = emb.speaker_groups()
    x = emb.vectors
    counts = np.bincount(spk, minlength=len(speakers))
    sums = np.zeros((len(speakers), emb.dim))
    np.add.at(sums, spk, x)
    means = sums / counts[:, None]
    xw = x - means[spk]
    return _Stats(counts, means, _sym(xw.T @ xw), len(x))


def _logdet(a: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(a)
    if sign <= 0:
        raise PldaError("covariance is not positive definite")
    return float(val)


def log_likelihood(model: PldaModel, st: _Stats) -> float:
    """Marginal log-likelihood of the training data under ``model``.

    For a speaker with ``n`` utterances, mean ``m`` and within scatter ``S``,
    the stacked vector splits (by an orthogonal change of basis) into the
    scaled mean with covariance ``W + n B`` and ``n-1`` contrasts with
    covariance ``W``.
    """
    d = model.dim
    b, w = model.between_cov, model.within_cov
    w_inv = np.linalg.inv(w)
    ll = -0.5 * (st.n * d * _LOG2PI + (st.n - len(st.counts)) * _logdet(w)
                 + float(np.sum(w_inv * st.scatter)))
    for n in np.unique(st.counts):
        sel = st.counts == n
        c = w + n * b
        dev = st.means[sel] - model.mean
        quad = np.einsum("ij,ij->i", dev, np.linalg.solve(c, dev.T).T)
        ll -= 0.5 * (sel.sum() * _logdet(c) + n * quad.sum())
    return float(ll)


def _initial_model(st: _Stats) -> PldaModel:
    counts = st.counts.astype(np.float64)
    mu = (st.means * counts[:, None]).sum(axis=0) / st.n
    dev = st.means - st.means.mean(axis=0)
    b = _sym(dev.T @ dev / len(dev))
    w = st.scatter / st.n
    if np.trace(w) <= 1e-12 * max(np.trace(b), 1e-300):
        # no speaker has two utterances: split the total covariance evenly
        total = b + w
        b, w = 0.5 * total, 0.5 * total
    return PldaModel(mu, floor_between(b), floor_within(w))


def _em_step(model: PldaModel, st: _Stats) -> PldaModel:
    mu, b, w = model.mean, model.between_cov, model.within_cov
    n_spk = len(st.counts)
    y_hat = np.empty_like(st.means)
    post_cov_sum = np.zeros_like(b)         # sum_s C_s
    weighted_cov_sum = np.zeros_like(b)     # sum_s n_s C_s
    for n in np.unique(st.counts):
        sel = st.counts == n
        # posterior of y given n observations with mean m:
        #   gain = B (B + W/n)^-1, mean = mu + gain (m - mu), cov = B - gain B
        gain = np.linalg.solve(b + w / n, b).T
        cov = _sym(b - gain @ b)
        y_hat[sel] = mu + (st.means[sel] - mu) @ gain.T
        k = int(sel.sum())
        post_cov_sum += k * cov
        weighted_cov_sum += k * n * cov
    new_mu = y_hat.mean(axis=0)
    dy = y_hat - new_mu
    new_b = (post_cov_sum + dy.T @ dy) / n_spk
    r = st.means - y_hat
    new_w = (st.scatter + (r * st.counts[:, None]).T @ r + weighted_cov_sum) / st.n
    return PldaModel(new_mu, floor_between(_sym(new_b)), floor_within(_sym(new_w)))


def train_plda(train: EmbeddingSet, n_iters: int = 20,
               init_seed: int = 0) -> tuple[PldaModel, list[float]]:
    """Fit PLDA by EM from a moment-matched start.

    Returns the model and the log-likelihood before the first iteration and
    after each one (``n_iters + 1`` values).  The start point is
    moment-matched, so ``init_seed`` has no effect; it is accepted for
    interface stability.  When every speaker has a single utterance the two
    covariances are not separately identifiable; only their sum is learned.
    """
    if n_iters < 1:
        raise PldaError("n_iters must be >= 1")
    st = _stats(train)
    if len(st.counts) < 2:
        raise PldaError("PLDA training needs at least two speakers")
    model = _initial_model(st)
    lls = [log_likelihood(model, st)]
    for it in range(n_iters):
        model = _em_step(model, st)
        lls.append(log_likelihood(model, st))
        log.debug("PLDA iter %d: llk %.6f", it + 1, lls[-1])
    return model, lls


# -- scoring -----------------------------------------------------------------

class PldaScoringMatrices:
    """Precomputed quadratic forms for the closed-form LLR.

    ``llr(e, t) = k + 1/2 e'Qe + 1/2 t'Qt + e'Pt`` on mean-removed inputs.
    """

    def __init__(self, model: PldaModel):
        b = model.between_cov
        tot = b + model.within_cov
        tot_inv = np.linalg.inv(tot)
        # Schur complement of the same-speaker joint covariance
        schur = _sym(tot - b @ tot_inv @ b)
        schur_inv = np.linalg.inv(schur)
        self.mean = model.mean
        self.Q = _sym(tot_inv - schur_inv)
        self.P = _sym(tot_inv @ b @ schur_inv)
        self.const = 0.5 * (_logdet(tot) - _logdet(schur))

    def half_quad(self, x: np.ndarray) -> np.ndarray:
        xc = x - self.mean
        return 0.5 * np.einsum("ij,ij->i", xc @ self.Q, xc)

    def pair_scores(self, e: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Row-wise LLRs; bitwise symmetric under swapping ``e`` and ``t``."""
        ec, tc = e - self.mean, t - self.mean
        qe = 0.5 * np.einsum("ij,ij->i", ec @ self.Q, ec)
        qt = 0.5 * np.einsum("ij,ij->i", tc @ self.Q, tc)
        cross = 0.5 * (np.einsum("ij,ij->i", ec @ self.P, tc)
                       + np.einsum("ij,ij->i", tc @ self.P, ec))
        return self.const + (qe + qt) + cross

    def matrix_scores(self, e: np.ndarray, c: np.ndarray) -> np.ndarray:
        """All-pairs LLRs between rows of ``e`` and rows of ``c``."""
        ec, cc = e - self.mean, c - self.mean
        qe = 0.5 * np.einsum("ij,ij->i", ec @ self.Q, ec)
        qc = 0.5 * np.einsum("ij,ij->i", cc @ self.Q, cc)
        cross = 0.5 * ((ec @ self.P) @ cc.T + ec @ (cc @ self.P).T)
        return self.const + (qe[:, None] + qc[None, :]) + cross


def plda_llr(model: PldaModel, enroll, test) -> float:
    """Same-speaker vs different-speaker log-likelihood ratio of one pair."""
    e = np.asarray(enroll, dtype=np.float64).reshape(1, -1)
    t = np.asarray(test, dtype=np.float64).reshape(1, -1)
    if e.shape[1] != model.dim or t.shape[1] != model.dim:
        raise PldaError("input dimension does not match the model")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(t))):
        raise PldaError("non-finite input to plda_llr")
    return float(PldaScoringMatrices(model).pair_scores(e, t)[0])


def enroll_average(model: PldaModel, vectors) -> np.ndarray:
    """Average several enrollment embeddings and re-length-normalize.

    An approximation to multi-session PLDA enrollment.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if len(v) == 0:
        raise PldaError("enroll_average needs at least one vector")
    if v.shape[1] != model.dim:
        raise PldaError("input dimension does not match the model")
    m = v.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm <= 1e-12 * max(1.0, float(np.abs(v).max())):
        raise PldaError("enrollment vectors average to zero")
    return m / norm
