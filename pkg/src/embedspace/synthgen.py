"""Synthetic embeddings drawn from the two-covariance PLDA model.

Each speaker ``s`` gets ``y_s ~ N(0, between_cov)`` and each of its
utterances is ``x = global_mean + y_s + e`` with ``e ~ N(0, within_cov)``.
An optional affine shift ``x <- A x + b`` simulates a domain mismatch.

Randomness comes from numpy's PCG64 bit generator.  Every speaker draws from
its own child stream spawned from ``SeedSequence(seed)``, so the output is
independent of generation order.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (NONTARGET, TARGET, UNKNOWN_SPEAKER, DataError, EmbeddingSet, Trial,
                   TrialList)


class ConfigError(ValueError):
    pass


def _psd_sqrt(cov: np.ndarray, name: str, strict: bool) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ConfigError(f"{name} must be a square matrix")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
        raise ConfigError(f"{name} is not symmetric")
    vals, vecs = np.linalg.eigh(cov)
    tol = 1e-10 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise ConfigError(f"{name} is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    if strict and vals.min() <= tol:
        raise ConfigError(f"{name} must be positive definite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class SynthConfig:
    dim: int
    n_speakers: int
    utts_per_speaker: int
    between_cov: np.ndarray
    within_cov: np.ndarray
    global_mean: np.ndarray | None = None
    shift_matrix: np.ndarray | None = None
    shift_offset: np.ndarray | None = None
    seed: int = 0
    prefix: str = "spk"
    dataset_id: str | None = None
    unlabeled: bool = False

    def validate(self) -> tuple[np.ndarray, np.ndarray]:
        """Check the config; returns square-root factors of the two covariances."""
        if self.dim < 1 or self.n_speakers < 1 or self.utts_per_speaker < 1:
            raise ConfigError("dim, n_speakers and utts_per_speaker must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        d = self.dim
        for name in ("between_cov", "within_cov"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (d, d):
                raise ConfigError(f"{name} must be {d}x{d}, got {m.shape}")
        if self.global_mean is not None and np.shape(self.global_mean) != (d,):
            raise ConfigError("global_mean has the wrong length")
        if self.shift_matrix is not None and np.shape(self.shift_matrix) != (d, d):
            raise ConfigError("shift_matrix must be dim x dim")
        if self.shift_offset is not None and np.shape(self.shift_offset) != (d,):
            raise ConfigError("shift_offset has the wrong length")
        return (_psd_sqrt(self.between_cov, "between_cov", strict=False),
                _psd_sqrt(self.within_cov, "within_cov", strict=True))

    @property
    def shifted(self) -> bool:
        return self.shift_matrix is not None or self.shift_offset is not None


def generate(cfg: SynthConfig) -> EmbeddingSet:
    lb, lw = cfg.validate()
    d = cfg.dim
    mean = np.zeros(d) if cfg.global_mean is None else np.asarray(cfg.global_mean, float)
    n_u = cfg.utts_per_speaker
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_speakers)
    blocks = []
    for ss in streams:
        rng = np.random.Generator(np.random.PCG64(ss))
        y = lb @ rng.standard_normal(d)
        eps = rng.standard_normal((n_u, d)) @ lw.T
        blocks.append(mean + y + eps)
    x = np.vstack(blocks)
    if cfg.shifted:
        a = np.eye(d) if cfg.shift_matrix is None else np.asarray(cfg.shift_matrix, float)
        b = np.zeros(d) if cfg.shift_offset is None else np.asarray(cfg.shift_offset, float)
        x = x @ a.T + b
    dataset = cfg.dataset_id or ("shifted" if cfg.shifted else "synth")
    width = max(4, len(str(cfg.n_speakers - 1)))
    uwidth = max(3, len(str(n_u - 1)))
    utts, spks = [], []
    for s in range(cfg.n_speakers):
        spk = f"{cfg.prefix}{s:0{width}d}"
        for u in range(n_u):
            utts.append(f"{spk}-{u:0{uwidth}d}")
            spks.append(UNKNOWN_SPEAKER if cfg.unlabeled else spk)
    return EmbeddingSet(utts, spks, [dataset] * len(utts), x, dim=d)


def _all_pairs(n: int):
    i, j = np.triu_indices(n, k=1)
    return i, j


def make_trials(emb: EmbeddingSet, n_target: int, n_nontarget: int, seed: int = 0) -> TrialList:
    """Sample distinct labeled trials (unordered utterance pairs) from a labeled set.

    Target trials are drawn from same-speaker pairs, nontarget trials from
    different-speaker pairs, both without replacement.  The enroll side is
    always the utterance that comes first in file order.
    """
    if n_target < 0 or n_nontarget < 0:
        raise DataError("trial counts must be non-negative")
    emb.require_labels("make_trials")
    _, spk = emb.speaker_groups()
    n = len(emb)
    counts = np.bincount(spk) if n else np.zeros(0, dtype=np.int64)
    avail_t = int(sum(c * (c - 1) // 2 for c in counts))
    avail_n = n * (n - 1) // 2 - avail_t
    if n_target > avail_t:
        raise DataError(f"requested {n_target} target trials but only {avail_t} exist")
    if n_nontarget > avail_n:
        raise DataError(f"requested {n_nontarget} nontarget trials but only {avail_n} exist")
    rng = np.random.Generator(np.random.PCG64(seed))

    # target pairs: enumerate within-speaker pairs (small)
    members = [np.flatnonzero(spk == k) for k in range(len(counts))]
    tgt = []
    for m in members:
        if len(m) > 1:
            a, b = _all_pairs(len(m))
            tgt.append(np.stack([m[a], m[b]], axis=1))
    tgt = np.vstack(tgt) if tgt else np.zeros((0, 2), dtype=np.int64)
    pick = rng.choice(len(tgt), size=n_target, replace=False) if n_target else []
    tgt = tgt[np.sort(pick)] if n_target else tgt[:0]

    # nontarget pairs: enumerate when small, else rejection-sample index pairs
    if avail_n <= 2_000_000:
        a, b = _all_pairs(n)
        keep = spk[a] != spk[b]
        pairs = np.stack([a[keep], b[keep]], axis=1)
        pick = rng.choice(len(pairs), size=n_nontarget, replace=False) if n_nontarget else []
        non = pairs[np.sort(pick)] if n_nontarget else pairs[:0]
    else:
        chosen = set()
        while len(chosen) < n_nontarget:
            need = n_nontarget - len(chosen)
            draw = rng.integers(0, n, size=(2 * need + 16, 2))
            for i, j in draw:
                if i == j or spk[i] == spk[j]:
                    continue
                key = (min(i, j), max(i, j))
                if key not in chosen:
                    chosen.add(key)
                    if len(chosen) == n_nontarget:
                        break
        non = np.array(sorted(chosen), dtype=np.int64).reshape(-1, 2)

    ids = emb.utt_ids
    trials = [Trial(ids[i], ids[j], TARGET) for i, j in tgt]
    trials += [Trial(ids[i], ids[j], NONTARGET) for i, j in non]
    return TrialList(trials)


# -- config files ------------------------------------------------------------

def parse_matrix(text: str, dim: int) -> np.ndarray:
    """Parse ``isotropic:<v>``, ``diag:v1,...,vd`` or rows ``a,b;c,d``."""
    text = text.strip()
    if text.startswith("isotropic:"):
        return float(text.split(":", 1)[1]) * np.eye(dim)
    if text.startswith("diag:"):
        vals = [float(v) for v in text.split(":", 1)[1].split(",")]
        if len(vals) != dim:
            raise ConfigError(f"diag matrix needs {dim} values, got {len(vals)}")
        return np.diag(vals)
    rows = [[float(v) for v in r.split(",")] for r in text.split(";") if r.strip()]
    m = np.array(rows, dtype=np.float64)
    if m.shape != (dim, dim):
        raise ConfigError(f"matrix must be {dim}x{dim}, got {m.shape}")
    return m


def _parse_vector(text: str, dim: int) -> np.ndarray:
    text = text.strip()
    if text.startswith("constant:"):
        return np.full(dim, float(text.split(":", 1)[1]))
    v = np.array([float(x) for x in text.split(",")], dtype=np.float64)
    if v.shape != (dim,):
        raise ConfigError(f"vector must have {dim} values")
    return v


CONFIG_KEYS = ("dim", "n_speakers", "utts_per_speaker", "between_cov", "within_cov",
               "global_mean", "shift_matrix", "shift_offset", "seed", "prefix",
               "dataset_id", "unlabeled")


def config_from_dict(kv: dict) -> SynthConfig:
    unknown = set(kv) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        dim = int(kv["dim"])
        n_spk = int(kv["n_speakers"])
        n_utt = int(kv["utts_per_speaker"])
    except KeyError as e:
        raise ConfigError(f"missing config key {e.args[0]}") from None
    return SynthConfig(
        dim=dim, n_speakers=n_spk, utts_per_speaker=n_utt,
        between_cov=parse_matrix(kv.get("between_cov", "isotropic:1"), dim),
        within_cov=parse_matrix(kv.get("within_cov", "isotropic:1"), dim),
        global_mean=_parse_vector(kv["global_mean"], dim) if "global_mean" in kv else None,
        shift_matrix=parse_matrix(kv["shift_matrix"], dim) if "shift_matrix" in kv else None,
        shift_offset=_parse_vector(kv["shift_offset"], dim) if "shift_offset" in kv else None,
        seed=int(kv.get("seed", 0)),
        prefix=kv.get("prefix", "spk"),
        dataset_id=kv.get("dataset_id"),
        unlabeled=kv.get("unlabeled", "false").lower() in ("1", "true", "yes"),
    )


def read_config(path) -> SynthConfig:
    """Read a flat ``key = value`` config file (``#`` starts a comment)."""
    kv = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value at line {lineno}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return config_from_dict(kv)
