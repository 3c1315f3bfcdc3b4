"""Embedding-space preprocessing: centering, LDA, LSDA, CORAL, whitening.

Every fit returns a :class:`LinearTransform` acting on column vectors as
``y = matrix @ x + offset``.  Covariances use the biased (1/N) estimator.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.spatial import cKDTree

from .data import EmbeddingSet, FormatError

LXF_MAGIC = b"LXF1"
KINDS = ("identity", "center", "scale", "lda", "lsda", "coral", "whiten", "compose")

# relative ridge added to a singular within-class scatter before LDA/LSDA eigen-solves
SINGULAR_RIDGE = 1e-6


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class LinearTransform:
    matrix: np.ndarray
    offset: np.ndarray
    kind: str = "identity"

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, ndmin=2)
        b = np.array(self.offset, dtype=np.float64).reshape(-1)
        if b.shape != (m.shape[0],):
            raise TransformError(f"offset length {b.shape[0]} != output dim {m.shape[0]}")
        if self.kind not in KINDS:
            raise TransformError(f"unknown transform kind {self.kind!r}")
        m.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", b)

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "LinearTransform":
        return cls(np.eye(dim), np.zeros(dim), "identity")

    @classmethod
    def center(cls, mean) -> "LinearTransform":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(np.eye(len(mean)), -mean, "center")

    @classmethod
    def scale(cls, dim: int, factor: float) -> "LinearTransform":
        return cls(factor * np.eye(dim), np.zeros(dim), "scale")

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise TransformError(f"input dim {x.shape[-1]} != transform input dim {self.in_dim}")
        return x @ self.matrix.T + self.offset

    def apply(self, emb: EmbeddingSet) -> EmbeddingSet:
        return emb.with_vectors(self.apply_array(emb.vectors))

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        kind = self.kind.encode("ascii")
        out.write(LXF_MAGIC)
        out.write(struct.pack("<B", len(kind)))
        out.write(kind)
        out.write(struct.pack("<II", self.out_dim, self.in_dim))
        out.write(self.matrix.astype("<f8").tobytes())
        out.write(self.offset.astype("<f8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "LinearTransform":
        if buf[:4] != LXF_MAGIC:
            raise FormatError("not an LXF1 transform file")
        try:
            (n,) = struct.unpack_from("<B", buf, 4)
            kind = buf[5:5 + n].decode("ascii")
            pos = 5 + n
            k, d = struct.unpack_from("<II", buf, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError):
            raise FormatError("malformed LXF1 header") from None
        if len(buf) != pos + 8 * (k * d + k):
            raise FormatError("LXF1 payload size does not match header")
        m = np.frombuffer(buf, dtype="<f8", count=k * d, offset=pos).reshape(k, d)
        b = np.frombuffer(buf, dtype="<f8", count=k, offset=pos + 8 * k * d)
        return cls(m.astype(np.float64), b.astype(np.float64), kind)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LinearTransform":
        return cls.from_bytes(Path(path).read_bytes())


def compose(t1: LinearTransform, t2: LinearTransform) -> LinearTransform:
    """Transform equivalent to applying ``t1`` first, then ``t2``."""
    if t2.in_dim != t1.out_dim:
        raise TransformError(f"cannot compose: {t1.out_dim}-dim output into {t2.in_dim}-dim input")
    return LinearTransform(t2.matrix @ t1.matrix, t2.matrix @ t1.offset + t2.offset, "compose")


# -- statistics helpers ------------------------------------------------------

def _covariance(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    xc = x - mu
    c = xc.T @ xc / len(x)
    return mu, 0.5 * (c + c.T)


def _sym_power(c: np.ndarray, power: float, floor_rel: float = 0.0) -> np.ndarray:
    """Symmetric matrix power via eigendecomposition (eigenvalues floored at ``floor_rel*max``)."""
    vals, vecs = np.linalg.eigh(c)
    top = vals.max(initial=0.0)
    if top <= 0:
        raise TransformError("covariance is zero")
    vals = np.maximum(vals, floor_rel * top)
    if power < 0 and vals.min() <= 0:
        raise TransformError("covariance is singular; use a positive ridge")
    out = (vecs * vals ** power) @ vecs.T
    return 0.5 * (out + out.T)


def _scatter_matrices(emb: EmbeddingSet) -> tuple[np.ndarray, np.ndarray, int]:
    """Biased between- and within-class scatter of a labeled set."""
    emb.require_labels("this fit")
    speakers, spk = emb.speaker_groups()
    x = emb.vectors
    n, d = x.shape
    counts = np.bincount(spk, minlength=len(speakers)).astype(np.float64)
    sums = np.zeros((len(speakers), d))
    np.add.at(sums, spk, x)
    means = sums / counts[:, None]
    mu = x.mean(axis=0)
    dev = means - mu
    sb = (dev * counts[:, None]).T @ dev / n
    xw = x - means[spk]
    sw = xw.T @ xw / n
    return 0.5 * (sb + sb.T), 0.5 * (sw + sw.T), len(speakers)


def _regularize_if_singular(s: np.ndarray) -> np.ndarray:
    vals = np.linalg.eigvalsh(s)
    d = len(s)
    tr = float(np.trace(s))
    if tr <= 0:
        raise TransformError("scatter matrix is zero")
    if vals.min() <= 1e-12 * vals.max():
        s = s + SINGULAR_RIDGE * tr / d * np.eye(d)
    return s


def _canonical_sign(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its first non-negligible component is positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        tol = 1e-12 * np.abs(col).max(initial=0.0)
        nz = np.flatnonzero(np.abs(col) > tol)
        if len(nz) and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def _top_generalized_eigvecs(a: np.ndarray, b: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` solutions of ``a v = lam b v`` with ``v' b v = 1``, descending lam."""
    vals, vecs = scipy.linalg.eigh(a, b)
    order = np.argsort(-vals, kind="stable")[:k]
    return vals[order], _canonical_sign(vecs[:, order])


# -- dataset centering -------------------------------------------------------

@dataclass(frozen=True)
class DatasetMeans:
    means: dict

    @property
    def dim(self) -> int:
        return len(next(iter(self.means.values())))

    def global_mean(self) -> np.ndarray:
        """Mean of the stored per-dataset means (fallback for unseen datasets)."""
        keys = sorted(self.means)
        return np.mean([self.means[k] for k in keys], axis=0)

    def to_text(self) -> str:
        return "".join(f"{k}\t{','.join(repr(float(v)) for v in self.means[k])}\n"
                       for k in sorted(self.means))

    @classmethod
    def from_text(cls, text: str) -> "DatasetMeans":
        means = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise FormatError(f"expected dataset<TAB>values at line {lineno}")
            means[cols[0]] = np.array([float(v) for v in cols[1].split(",")])
        if not means:
            raise FormatError("empty dataset-means file")
        dims = {len(v) for v in means.values()}
        if len(dims) != 1:
            raise FormatError("dataset means have inconsistent dimensions")
        return cls(means)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetMeans":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def fit_dataset_centering(train: EmbeddingSet) -> DatasetMeans:
    if len(train) == 0:
        raise TransformError("cannot fit centering on an empty set")
    ds = np.array(train.dataset_ids)
    means = {}
    for name in sorted(set(train.dataset_ids)):
        means[name] = train.vectors[ds == name].mean(axis=0)
    return DatasetMeans(means)


def apply_centering(emb: EmbeddingSet, means: DatasetMeans,
                    fallback: str = "global_mean") -> EmbeddingSet:
    """Subtract each record's dataset mean.

    ``fallback`` decides what happens to datasets that were not seen at fit
    time: ``"global_mean"`` subtracts the average of the stored means,
    ``"error"`` raises.
    """
    if fallback not in ("global_mean", "error"):
        raise ValueError(f"unknown fallback {fallback!r}")
    if emb.dim != means.dim:
        raise TransformError(f"embedding dim {emb.dim} != means dim {means.dim}")
    out = emb.vectors.copy()
    ds = np.array(emb.dataset_ids, dtype=object)
    for name in sorted(set(emb.dataset_ids)):
        if name in means.means:
            mu = means.means[name]
        elif fallback == "error":
            raise TransformError(f"dataset {name!r} was not seen when fitting centering")
        else:
            mu = means.global_mean()
        out[ds == name] -= mu
    return emb.with_vectors(out)


# -- LDA / LSDA --------------------------------------------------------------

def fit_lda(train: EmbeddingSet, out_dim: int) -> LinearTransform:
    """Linear discriminant analysis with a sphered within-class covariance.

    Rows of the returned matrix are generalized eigenvectors of the
    (between, within) scatter pair, scaled so the projected within-class
    covariance of ``train`` is the identity.
    """
    sb, sw, n_spk = _scatter_matrices(train)
    if n_spk < 2:
        raise TransformError("LDA needs at least two speakers")
    limit = min(train.dim, n_spk - 1)
    if not 1 <= out_dim <= limit:
        raise TransformError(f"LDA out_dim must be in [1, {limit}], got {out_dim}")
    sw = _regularize_if_singular(sw)
    _, vecs = _top_generalized_eigvecs(sb, sw, out_dim)
    return LinearTransform(vecs.T, np.zeros(out_dim), "lda")


def _knn_graphs(x: np.ndarray, labels: np.ndarray, k: int):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise TransformError("LSDA neighbour search needs non-zero vectors")
    xn = x / norms
    n = len(x)
    # query k+1 because each point is its own nearest neighbour
    _, nbr = cKDTree(xn).query(xn, k=k + 1)
    rows = np.repeat(np.arange(n), k + 1)
    cols = nbr.reshape(-1)
    keep = rows != cols
    adj = scipy.sparse.coo_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])),
                                  shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).astype(np.float64).tocoo()
    same = labels[adj.row] == labels[adj.col]
    w_within = scipy.sparse.coo_matrix((adj.data[same], (adj.row[same], adj.col[same])),
                                       shape=(n, n)).tocsr()
    w_between = scipy.sparse.coo_matrix((adj.data[~same], (adj.row[~same], adj.col[~same])),
                                        shape=(n, n)).tocsr()
    return w_within, w_between


def lsda_matrices(train: EmbeddingSet, k_neighbors: int, alpha: float):
    """The (objective, constraint) matrix pair of the LSDA eigenproblem.

    Returns ``X (alpha L_b + (1-alpha) W_w) X'`` and ``X D_w X'`` where
    ``X`` holds the mean-centred records as columns.  The neighbour graph
    is built on the raw vectors.
    """
    train.require_labels("LSDA")
    n = len(train)
    if not 1 <= k_neighbors < n:
        raise TransformError(f"k_neighbors must be in [1, {n - 1}], got {k_neighbors}")
    if not 0.0 <= alpha <= 1.0:
        raise TransformError("alpha must be in [0, 1]")
    _, labels = train.speaker_groups()
    ww, wb = _knn_graphs(train.vectors, labels, k_neighbors)
    dw = np.asarray(ww.sum(axis=1)).ravel()
    if not np.any(dw > 0):
        raise TransformError("degenerate LSDA graph: no record has a same-class neighbour")
    db = np.asarray(wb.sum(axis=1)).ravel()
    # centred, otherwise a direction with constant projection is a trivial optimum
    x = train.vectors - train.vectors.mean(axis=0)
    # X L_b X' = X D_b X' - X W_b X'
    xlbx = (x * db[:, None]).T @ x - x.T @ (wb @ x)
    obj = alpha * xlbx + (1.0 - alpha) * (x.T @ (ww @ x))
    con = (x * dw[:, None]).T @ x
    return 0.5 * (obj + obj.T), 0.5 * (con + con.T)


def fit_lsda(train: EmbeddingSet, out_dim: int, k_neighbors: int = 10,
             alpha: float = 0.5) -> LinearTransform:
    """Locality sensitive discriminant analysis.

    Neighbours are found by Euclidean distance between length-normalized
    vectors and edges are binary.  Records without a same-class neighbour
    only enter the between-class graph.
    """
    if not 1 <= out_dim <= train.dim:
        raise TransformError(f"LSDA out_dim must be in [1, {train.dim}], got {out_dim}")
    obj, con = lsda_matrices(train, k_neighbors, alpha)
    con = _regularize_if_singular(con)
    _, vecs = _top_generalized_eigvecs(obj, con, out_dim)
    return LinearTransform(vecs.T, np.zeros(out_dim), "lsda")


# -- CORAL / whitening -------------------------------------------------------

def default_ridge(cov: np.ndarray) -> float:
    return 1e-3 * float(np.trace(cov)) / len(cov)


def coral_matrix(cov_source: np.ndarray, cov_target: np.ndarray,
                 ridge: float | None = None) -> np.ndarray:
    """Column-vector CORAL map ``C_t^{1/2} C_s^{-1/2}`` for given covariances.

    ``ridge=None`` adds ``1e-3 * trace(C)/D`` to each covariance.
    """
    cs = np.asarray(cov_source, dtype=np.float64)
    ct = np.asarray(cov_target, dtype=np.float64)
    if cs.shape != ct.shape:
        raise TransformError(f"covariance shapes differ: {cs.shape} vs {ct.shape}")
    if ridge is not None and ridge < 0:
        raise TransformError("ridge must be >= 0")
    d = len(cs)
    rs = default_ridge(cs) if ridge is None else ridge
    rt = default_ridge(ct) if ridge is None else ridge
    cs = cs + rs * np.eye(d)
    ct = ct + rt * np.eye(d)
    return _sym_power(ct, 0.5) @ _sym_power(cs, -0.5)


def fit_coral(source: EmbeddingSet, target: EmbeddingSet,
              ridge: float | None = None) -> LinearTransform:
    """Map the source covariance onto the target covariance (target may be unlabeled)."""
    if source.dim != target.dim:
        raise TransformError(f"source dim {source.dim} != target dim {target.dim}")
    if len(source) < 2 or len(target) < 2:
        raise TransformError("CORAL needs at least two records per domain")
    _, cs = _covariance(source.vectors)
    _, ct = _covariance(target.vectors)
    return LinearTransform(coral_matrix(cs, ct, ridge), np.zeros(source.dim), "coral")


def fit_whitening(indomain: EmbeddingSet, ridge: float = 0.0) -> LinearTransform:
    """``y = C^{-1/2} (x - mu)`` with mean and covariance of the in-domain set."""
    if ridge < 0:
        raise TransformError("ridge must be >= 0")
    if len(indomain) == 0:
        raise TransformError("cannot fit whitening on an empty set")
    mu, c = _covariance(indomain.vectors)
    w = _sym_power(c + ridge * np.eye(indomain.dim), -0.5, floor_rel=1e-10)
    return LinearTransform(w, -w @ mu, "whiten")


def length_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    norms = np.linalg.norm(emb.vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise TransformError(f"cannot length-normalize zero vector {emb.utt_ids[zero[0]]}")
    return emb.with_vectors(emb.vectors / norms[:, None])
