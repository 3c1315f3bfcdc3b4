"""Embedding, trial and score containers plus their on-disk formats.

Binary embedding layout (little-endian)::

    b"EMB1" | u32 dim | u64 count |
    count x ( u16 len, utt_id | u16 len, speaker_id | u16 len, dataset_id | dim x f32 )

TSV embedding layout: ``utt_id <TAB> speaker_id <TAB> dataset_id <TAB> v1,v2,...``

Vectors are held as float64 in memory; storage is float32.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNKNOWN_SPEAKER = "unknown"
EMB_MAGIC = b"EMB1"

TARGET = "target"
NONTARGET = "nontarget"
UNKNOWN = "unknown"
LABELS = (TARGET, NONTARGET, UNKNOWN)


class FormatError(ValueError):
    """Raised when a file does not parse under its declared format."""


class DataError(ValueError):
    """Raised on inconsistent in-memory data (duplicates, mismatches)."""


@dataclass(frozen=True)
class Embedding:
    utt_id: str
    speaker_id: str
    dataset_id: str
    vector: np.ndarray


class EmbeddingSet:
    """An ordered, immutable collection of same-dimension embeddings.

    Vectors are stored as a single ``(N, dim)`` float64 array so transforms
    and scorers can work on the whole set at once.
    """

    def __init__(self, utt_ids: Sequence[str], speaker_ids: Sequence[str],
                 dataset_ids: Sequence[str], vectors, dim: int | None = None):
        vectors = np.asarray(vectors, dtype=np.float64)
        n = len(utt_ids)
        if vectors.ndim != 2:
            if n == 0 and dim is not None:
                vectors = vectors.reshape(0, dim)
            else:
                raise DataError("vectors must be a 2-D array")
        if dim is None:
            dim = vectors.shape[1]
        if dim < 1:
            raise DataError("embedding dimension must be >= 1")
        if vectors.shape != (n, dim):
            raise DataError(f"vectors shape {vectors.shape} != ({n}, {dim})")
        if len(speaker_ids) != n or len(dataset_ids) != n:
            raise DataError("id lists and vectors have different lengths")
        if not np.all(np.isfinite(vectors)):
            bad = int(np.argwhere(~np.isfinite(vectors))[0, 0])
            raise DataError(f"non-finite value in record {bad + 1} ({utt_ids[bad]})")
        index = {}
        for i, u in enumerate(utt_ids):
            if u in index:
                raise DataError(f"duplicate utt_id {u!r} at record {i + 1}")
            index[u] = i
        self.dim = int(dim)
        self.utt_ids = tuple(utt_ids)
        self.speaker_ids = tuple(speaker_ids)
        self.dataset_ids = tuple(dataset_ids)
        vectors = vectors.copy()
        vectors.setflags(write=False)
        self.vectors = vectors
        self._index = index

    @classmethod
    def from_records(cls, records: Iterable[Embedding], dim: int | None = None) -> "EmbeddingSet":
        records = list(records)
        if not records:
            if dim is None:
                raise DataError("dim is required for an empty set")
            return cls([], [], [], np.zeros((0, dim)), dim=dim)
        vecs = [np.asarray(r.vector, dtype=np.float64) for r in records]
        d = len(vecs[0]) if dim is None else dim
        for i, v in enumerate(vecs):
            if v.shape != (d,):
                raise DataError(f"dimension mismatch at record {i + 1}")
        return cls([r.utt_id for r in records], [r.speaker_id for r in records],
                   [r.dataset_id for r in records], np.vstack(vecs), dim=d)

    def __len__(self) -> int:
        return len(self.utt_ids)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Embedding:
        return Embedding(self.utt_ids[i], self.speaker_ids[i], self.dataset_ids[i],
                         self.vectors[i])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (self.dim == other.dim and self.utt_ids == other.utt_ids
                and self.speaker_ids == other.speaker_ids
                and self.dataset_ids == other.dataset_ids
                and np.array_equal(self.vectors, other.vectors))

    def __repr__(self) -> str:
        return f"EmbeddingSet(dim={self.dim}, n={len(self)})"

    def index_of(self, utt_id: str) -> int:
        try:
            return self._index[utt_id]
        except KeyError:
            raise KeyError(f"utt_id {utt_id!r} not found") from None

    def has(self, utt_id: str) -> bool:
        return utt_id in self._index

    def with_vectors(self, vectors) -> "EmbeddingSet":
        """Same ids, new vectors (possibly of a different dimension)."""
        vectors = np.asarray(vectors, dtype=np.float64)
        dim = vectors.shape[1] if vectors.ndim == 2 else self.dim
        return EmbeddingSet(self.utt_ids, self.speaker_ids, self.dataset_ids, vectors, dim=dim)

    def subset(self, indices) -> "EmbeddingSet":
        idx = list(indices)
        return EmbeddingSet([self.utt_ids[i] for i in idx], [self.speaker_ids[i] for i in idx],
                            [self.dataset_ids[i] for i in idx], self.vectors[idx], dim=self.dim)

    def concat(self, other: "EmbeddingSet") -> "EmbeddingSet":
        if other.dim != self.dim:
            raise DataError(f"cannot concatenate dim {self.dim} with dim {other.dim}")
        return EmbeddingSet(self.utt_ids + other.utt_ids, self.speaker_ids + other.speaker_ids,
                            self.dataset_ids + other.dataset_ids,
                            np.vstack([self.vectors, other.vectors]), dim=self.dim)

    @property
    def is_labeled(self) -> bool:
        return UNKNOWN_SPEAKER not in self.speaker_ids

    def require_labels(self, what: str) -> None:
        """Raise if any record carries the ``unknown`` speaker sentinel."""
        for i, s in enumerate(self.speaker_ids):
            if s == UNKNOWN_SPEAKER:
                raise DataError(f"{what} needs speaker labels; record {i + 1} "
                                f"({self.utt_ids[i]}) is unlabeled")

    def speaker_groups(self) -> tuple[list[str], np.ndarray]:
        """Sorted unique speakers and, per record, the index of its speaker."""
        speakers = sorted(set(self.speaker_ids))
        lookup = {s: i for i, s in enumerate(speakers)}
        return speakers, np.array([lookup[s] for s in self.speaker_ids], dtype=np.int64)


# -- binary embeddings -------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"identifier too long for binary format: {s[:32]}...")
    return struct.pack("<H", len(raw)) + raw


def embeddings_to_bytes(emb: EmbeddingSet) -> bytes:
    out = io.BytesIO()
    out.write(EMB_MAGIC)
    out.write(struct.pack("<IQ", emb.dim, len(emb)))
    vec32 = emb.vectors.astype("<f4")
    for i in range(len(emb)):
        out.write(_pack_str(emb.utt_ids[i]))
        out.write(_pack_str(emb.speaker_ids[i]))
        out.write(_pack_str(emb.dataset_ids[i]))
        out.write(vec32[i].tobytes())
    return out.getvalue()


def embeddings_from_bytes(buf: bytes) -> EmbeddingSet:
    if len(buf) < 16 or buf[:4] != EMB_MAGIC:
        raise FormatError("malformed header: missing EMB1 magic")
    dim, count = struct.unpack_from("<IQ", buf, 4)
    if dim < 1:
        raise FormatError("malformed header: dim must be >= 1")
    pos = 16
    utts, spks, dsets, vecs = [], [], [], []
    seen = set()

    def read_str(rec):
        nonlocal pos
        if pos + 2 > len(buf):
            raise FormatError(f"truncated record {rec}")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n > len(buf):
            raise FormatError(f"truncated record {rec}")
        try:
            s = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid utf-8 identifier in record {rec}") from None
        pos += n
        return s

    for rec in range(1, count + 1):
        u, s, d = read_str(rec), read_str(rec), read_str(rec)
        nbytes = 4 * dim
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated record {rec}")
        v = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += nbytes
        if not np.all(np.isfinite(v)):
            raise FormatError(f"non-finite value at record {rec}")
        if u in seen:
            raise FormatError(f"duplicate utt_id {u!r} at record {rec}")
        seen.add(u)
        utts.append(u)
        spks.append(s)
        dsets.append(d)
        vecs.append(v)
    if pos != len(buf):
        raise FormatError(f"trailing bytes after record {count}")
    arr = np.vstack(vecs) if vecs else np.zeros((0, dim))
    return EmbeddingSet(utts, spks, dsets, arr, dim=dim)


# -- tsv embeddings ----------------------------------------------------------

def _fmt_float(x: float) -> str:
    # repr is the shortest string that round-trips a float64
    return repr(float(x))


def embeddings_to_tsv(emb: EmbeddingSet) -> str:
    lines = []
    for i in range(len(emb)):
        vals = ",".join(_fmt_float(v) for v in emb.vectors[i])
        lines.append(f"{emb.utt_ids[i]}\t{emb.speaker_ids[i]}\t{emb.dataset_ids[i]}\t{vals}\n")
    return "".join(lines)


def _parse_float(tok: str, where: str) -> float:
    tok = tok.strip(" ")
    # float() accepts things like "1_0" and unicode digits; keep to plain ASCII decimals
    if not tok or not tok.isascii() or "_" in tok:
        raise FormatError(f"bad number {tok!r} {where}")
    try:
        x = float(tok)
    except ValueError:
        raise FormatError(f"bad number {tok!r} {where}") from None
    return x


def embeddings_from_tsv(text: str) -> EmbeddingSet:
    utts, spks, dsets, vecs = [], [], [], []
    seen = set()
    dim = None
    rec = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec += 1
        cols = line.split("\t")
        if len(cols) != 4:
            raise FormatError(f"expected 4 tab-separated columns at record {rec} (line {lineno})")
        u, s, d, values = cols
        where = f"at record {rec} (line {lineno})"
        v = [_parse_float(t, where) for t in values.split(",")]
        if dim is None:
            dim = len(v)
        elif len(v) != dim:
            raise FormatError(f"dimension mismatch at record {rec}")
        if not all(math.isfinite(x) for x in v):
            raise FormatError(f"non-finite value at record {rec}")
        if u in seen:
            raise FormatError(f"duplicate utt_id {u!r} at record {rec}")
        seen.add(u)
        utts.append(u)
        spks.append(s)
        dsets.append(d)
        vecs.append(v)
    if dim is None:
        raise FormatError("empty TSV embedding file (dimension unknown)")
    return EmbeddingSet(utts, spks, dsets, np.array(vecs, dtype=np.float64), dim=dim)


def detect_format(path) -> str:
    with open(path, "rb") as f:
        head = f.read(4)
    return "binary" if head == EMB_MAGIC else "tsv"


def read_embeddings(path, format: str | None = None) -> EmbeddingSet:
    """Read an embedding file; ``format`` is ``"binary"``, ``"tsv"`` or None to sniff."""
    fmt = format or detect_format(path)
    data = Path(path).read_bytes()
    if fmt == "binary":
        return embeddings_from_bytes(data)
    if fmt == "tsv":
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("TSV embedding file is not valid utf-8") from None
        return embeddings_from_tsv(text)
    raise ValueError(f"unknown embedding format {fmt!r}")


def write_embeddings(emb: EmbeddingSet, path, format: str = "binary") -> None:
    if format == "binary":
        Path(path).write_bytes(embeddings_to_bytes(emb))
    elif format == "tsv":
        Path(path).write_text(embeddings_to_tsv(emb), encoding="utf-8")
    else:
        raise ValueError(f"unknown embedding format {format!r}")


# -- trials and scores -------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str = UNKNOWN


class TrialList:
    """Ordered list of trials with unique (enroll, test) pairs."""

    def __init__(self, trials: Iterable[Trial]):
        self.trials = tuple(trials)
        self._index = {}
        for i, t in enumerate(self.trials):
            if t.label not in LABELS:
                raise DataError(f"bad label {t.label!r} for trial {i + 1}")
            key = (t.enroll_id, t.test_id)
            if key in self._index:
                raise DataError(f"duplicate trial pair {t.enroll_id} {t.test_id} at line {i + 1}")
            self._index[key] = i

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def __getitem__(self, i):
        return self.trials[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrialList):
            return NotImplemented
        return self.trials == other.trials

    def keys(self) -> list[tuple[str, str]]:
        return [(t.enroll_id, t.test_id) for t in self.trials]

    def position(self, enroll_id: str, test_id: str) -> int:
        return self._index[(enroll_id, test_id)]

    def has(self, enroll_id: str, test_id: str) -> bool:
        return (enroll_id, test_id) in self._index

    def labels_array(self) -> np.ndarray:
        """Per-trial 1 (target), 0 (nontarget) or -1 (unknown)."""
        code = {TARGET: 1, NONTARGET: 0, UNKNOWN: -1}
        return np.array([code[t.label] for t in self.trials], dtype=np.int8)

    @property
    def is_labeled(self) -> bool:
        return all(t.label != UNKNOWN for t in self.trials)


def trials_to_text(trials: TrialList) -> str:
    return "".join(f"{t.enroll_id} {t.test_id} {t.label}\n" for t in trials)


def parse_trials(text: str) -> TrialList:
    out = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        cols = line.split()
        if not cols:
            continue
        if len(cols) == 2:
            e, t = cols
            label = UNKNOWN
        elif len(cols) == 3:
            e, t, label = cols
            if label not in LABELS:
                raise FormatError(f"bad label {label!r} at line {lineno}")
        else:
            raise FormatError(f"expected 2 or 3 columns at line {lineno}")
        if (e, t) in seen:
            raise FormatError(f"duplicate trial pair {e} {t} at line {lineno}")
        seen.add((e, t))
        out.append(Trial(e, t, label))
    return TrialList(out)


def read_trials(path) -> TrialList:
    return parse_trials(Path(path).read_text(encoding="utf-8"))


def write_trials(trials: TrialList, path) -> None:
    Path(path).write_text(trials_to_text(trials), encoding="utf-8")


@dataclass(frozen=True)
class ScoreSet:
    trials: TrialList
    scores: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1).copy()
        if len(s) != len(self.trials):
            raise DataError(f"score count {len(s)} does not match {len(self.trials)} trials")
        if not np.all(np.isfinite(s)):
            bad = int(np.argwhere(~np.isfinite(s))[0, 0])
            t = self.trials[bad]
            raise DataError(f"non-finite score for trial {t.enroll_id} {t.test_id}")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return len(self.scores)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreSet):
            return NotImplemented
        return self.trials == other.trials and np.array_equal(self.scores, other.scores)

    def with_scores(self, scores) -> "ScoreSet":
        return ScoreSet(self.trials, scores)

    def labeled_split(self) -> tuple[np.ndarray, np.ndarray]:
        """Target and nontarget score arrays; raises if any label is unknown."""
        lab = self.trials.labels_array()
        if np.any(lab < 0):
            raise DataError("scores carry unknown labels; attach a labeled trial list")
        return self.scores[lab == 1], self.scores[lab == 0]

    def aligned_to(self, trials: TrialList) -> "ScoreSet":
        """Reorder to ``trials`` (by pair ids), taking labels from ``trials``."""
        if len(trials) != len(self.trials):
            raise DataError(f"score count {len(self.trials)} does not match "
                            f"{len(trials)} trials")
        idx = []
        for t in trials:
            if not self.trials.has(t.enroll_id, t.test_id):
                raise DataError(f"no score for trial {t.enroll_id} {t.test_id}")
            idx.append(self.trials.position(t.enroll_id, t.test_id))
        return ScoreSet(trials, self.scores[np.array(idx, dtype=np.int64)])


def scores_to_text(scores: ScoreSet) -> str:
    return "".join(f"{t.enroll_id} {t.test_id} {_fmt_float(s)}\n"
                   for t, s in zip(scores.trials, scores.scores))


def parse_scores(text: str, trials: TrialList | None = None) -> ScoreSet:
    entries = []
    vals = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        cols = line.split()
        if not cols:
            continue
        if len(cols) != 3:
            raise FormatError(f"expected 3 columns at line {lineno}")
        e, t, s = cols
        if (e, t) in seen:
            raise FormatError(f"duplicate trial pair {e} {t} at line {lineno}")
        seen.add((e, t))
        entries.append(Trial(e, t, UNKNOWN))
        vals.append(_parse_float(s, f"at line {lineno}"))
    out = ScoreSet(TrialList(entries), np.array(vals, dtype=np.float64))
    if trials is not None:
        out = out.aligned_to(trials)
    return out


def read_scores(path, trials: TrialList | None = None) -> ScoreSet:
    """Read a score file; with ``trials``, align to that list and take its labels."""
    return parse_scores(Path(path).read_text(encoding="utf-8"), trials)


def write_scores(scores: ScoreSet, path) -> None:
    Path(path).write_text(scores_to_text(scores), encoding="utf-8")
