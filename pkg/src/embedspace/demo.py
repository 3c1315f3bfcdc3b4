"""Synthetic domain-mismatch demo: writes embeddings, trials and a recipe."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import write_embeddings, write_trials
from .synthgen import SynthConfig, generate, make_trials

DEMO_RECIPE = """\
# out-of-domain PLDA training data, adapted to the shifted domain with CORAL
input train=train.emb indomain=indomain.emb cohort=cohort.emb enroll=eval.emb test=eval.emb trials=trials.txt
center fit=train,indomain
lda fit=train dim={lda_dim}
coral source=train target=indomain
lengthnorm
plda fit=train iters=20
asnorm2 top_k=200
calibrate prior=0.01
evaluate profile=cmn2
"""


def random_spd(rng: np.random.Generator, dim: int, lo: float, hi: float) -> np.ndarray:
    """Random SPD matrix with eigenvalues log-uniform in ``[lo, hi]``."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    vals = np.exp(rng.uniform(np.log(lo), np.log(hi), dim))
    m = (q * vals) @ q.T
    return 0.5 * (m + m.T)


def domain_configs(dim: int = 10, n_train_speakers: int = 500, seed: int = 0) -> dict:
    """Source-domain training config plus shifted in-domain, cohort and eval configs."""
    rng = np.random.default_rng(seed)
    between = random_spd(rng, dim, 0.5, 4.0)
    within = random_spd(rng, dim, 0.3, 2.0)
    mean = rng.standard_normal(dim)
    shift = random_spd(rng, dim, 0.2, 5.0)
    offset = 3.0 * rng.standard_normal(dim)
    common = dict(dim=dim, between_cov=between, within_cov=within, global_mean=mean)
    shifted = dict(common, shift_matrix=shift, shift_offset=offset, dataset_id="shifted")
    base = seed * 16
    return {
        "train": SynthConfig(n_speakers=n_train_speakers, utts_per_speaker=10, seed=base + 1,
                             prefix="tr", dataset_id="train", **common),
        "indomain": SynthConfig(n_speakers=300, utts_per_speaker=4, seed=base + 2,
                                prefix="in", unlabeled=True, **shifted),
        "cohort": SynthConfig(n_speakers=400, utts_per_speaker=1, seed=base + 3,
                              prefix="co", unlabeled=True, **shifted),
        "eval": SynthConfig(n_speakers=200, utts_per_speaker=10, seed=base + 4,
                            prefix="ev", **shifted),
    }


def write_demo(workdir, n_speakers: int = 500, seed: int = 0, dim: int = 10,
               lda_dim: int = 8, n_target: int = 2000, n_nontarget: int = 8000) -> Path:
    """Write the demo inputs into ``workdir`` and return the recipe path."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfgs = domain_configs(dim, n_speakers, seed)
    sets = {name: generate(cfg) for name, cfg in cfgs.items()}
    for name, emb in sets.items():
        write_embeddings(emb, workdir / f"{name}.emb")
    write_trials(make_trials(sets["eval"], n_target, n_nontarget, seed), workdir / "trials.txt")
    recipe = workdir / "recipe.txt"
    recipe.write_text(DEMO_RECIPE.format(lda_dim=lda_dim), encoding="utf-8")
    return recipe
