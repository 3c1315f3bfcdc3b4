"""Flat-text back-end recipes: one stage per line, ``stage key=value ...``.

Example::

    input train=train.emb indomain=unlabeled.emb cohort=cohort.emb enroll=eval.emb test=eval.emb trials=trials.txt
    center fit=train,indomain
    lda fit=train dim=8
    coral source=train target=indomain
    lengthnorm
    plda fit=train iters=20
    asnorm2 top_k=200
    calibrate prior=0.01
    evaluate profile=cmn2

Transform stages fit on one role and are applied to every loaded embedding
role unless ``apply=`` narrows it (CORAL defaults to its source role only).
Relative paths resolve against the recipe file's directory.
"""
from __future__ import annotations

import hashlib
import logging
import shlex
from dataclasses import dataclass, field
from pathlib import Path

from . import calibration, metrics, plda, scoring, transforms
from .data import EmbeddingSet, ScoreSet, read_embeddings, read_scores, read_trials, scores_to_text

log = logging.getLogger(__name__)

EMBEDDING_ROLES = ("train", "indomain", "cohort", "enroll", "test")
TRANSFORM_STAGES = ("center", "lda", "lsda", "coral", "whiten", "lengthnorm")
SCORER_STAGES = ("plda", "cosine")
STAGES = ("input",) + TRANSFORM_STAGES + SCORER_STAGES + (
    "asnorm1", "asnorm2", "calibrate", "fuse", "evaluate")


class RecipeError(ValueError):
    pass


@dataclass
class Stage:
    name: str
    params: dict
    line: int

    def get(self, key, default=None):
        return self.params.get(key, default)

    def require(self, key):
        if key not in self.params:
            raise RecipeError(f"line {self.line}: stage {self.name} needs {key}=")
        return self.params[key]


@dataclass
class Recipe:
    stages: list
    base_dir: Path = field(default_factory=Path)


def parse_recipe(text: str, base_dir=".") -> Recipe:
    stages = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = shlex.split(line)
        name, rest = toks[0], toks[1:]
        if name not in STAGES:
            raise RecipeError(f"line {lineno}: unknown stage {name!r}")
        params = {}
        for tok in rest:
            if "=" not in tok:
                raise RecipeError(f"line {lineno}: expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            params[k] = v
        stages.append(Stage(name, params, lineno))
    validate(stages)
    return Recipe(stages, Path(base_dir))


def read_recipe(path) -> Recipe:
    path = Path(path)
    return parse_recipe(path.read_text(encoding="utf-8"), path.parent)


def validate(stages: list) -> None:
    """Check stage order: inputs first, one scorer, post-scoring stages after it, evaluate last."""
    if not stages:
        raise RecipeError("empty recipe")
    scored = False
    calibrated = False
    for i, st in enumerate(stages):
        if st.name == "input" and i != 0:
            raise RecipeError(f"line {st.line}: input must be the first stage")
        elif st.name in TRANSFORM_STAGES and scored:
            raise RecipeError(f"line {st.line}: transform {st.name} after scoring")
        elif st.name in SCORER_STAGES:
            if scored:
                raise RecipeError(f"line {st.line}: more than one scorer stage")
            scored = True
        elif st.name in ("asnorm1", "asnorm2", "calibrate", "fuse") and not scored:
            raise RecipeError(f"line {st.line}: {st.name} before any scorer stage")
        elif st.name in ("asnorm1", "asnorm2") and calibrated:
            raise RecipeError(f"line {st.line}: {st.name} after calibration")
        elif st.name == "calibrate":
            calibrated = True
        elif st.name == "fuse" and not calibrated:
            raise RecipeError(f"line {st.line}: fuse needs a preceding calibrate stage")
        elif st.name == "evaluate" and i != len(stages) - 1:
            raise RecipeError(f"line {st.line}: evaluate must be the last stage")
    if stages[0].name != "input":
        raise RecipeError("recipe must start with an input stage")
    if stages[-1].name != "evaluate":
        raise RecipeError("recipe must end with an evaluate stage")
    if not scored:
        raise RecipeError("recipe has no scorer stage (plda or cosine)")


class ArtifactStore:
    """Writes content-hashed artifacts; refuses to overwrite differing files without force."""

    def __init__(self, workdir, force: bool = False):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.written = []

    def put_named(self, name: str, payload: bytes) -> Path:
        path = self.workdir / name
        if path.exists():
            if path.read_bytes() == payload:
                self.written.append(path)
                return path
            if not self.force:
                raise RecipeError(f"{path} exists with different content (use --force)")
        path.write_bytes(payload)
        self.written.append(path)
        return path

    def put(self, step: int, stage: str, ext: str, payload: bytes) -> Path:
        digest = hashlib.sha256(payload).hexdigest()[:12]
        return self.put_named(f"{step:02d}-{stage}-{digest}.{ext}", payload)


@dataclass
class RunResult:
    report: metrics.Report
    scores: ScoreSet
    artifacts: list


def _roles(value: str, available) -> list:
    if value == "all":
        return list(available)
    names = [v for v in value.split(",") if v]
    for n in names:
        if n not in available:
            raise RecipeError(f"unknown or unloaded role {n!r}")
    return names


def run_recipe(recipe: Recipe | str | Path, workdir, threads: int = 1,
               force: bool = False) -> RunResult:
    if not isinstance(recipe, Recipe):
        recipe = read_recipe(recipe)
    store = ArtifactStore(workdir, force)
    emb: dict[str, EmbeddingSet] = {}
    trials = None
    scorer = None
    scores = None
    report = None

    def role(name):
        if name not in emb:
            raise RecipeError(f"line {st.line}: role {name!r} was not loaded by the input stage")
        return emb[name]

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else recipe.base_dir / p

    for step, st in enumerate(recipe.stages):
        try:
            if st.name == "input":
                loaded = {}
                for name, p in st.params.items():
                    if name == "trials":
                        trials = read_trials(resolve(p))
                    elif name in EMBEDDING_ROLES:
                        key = str(resolve(p).resolve())
                        if key not in loaded:
                            loaded[key] = read_embeddings(resolve(p))
                        emb[name] = loaded[key]
                    else:
                        raise RecipeError(f"unknown input role {name!r}")
                for need in ("enroll", "test"):
                    if need not in emb:
                        raise RecipeError(f"input stage lacks the {need} role")
                if trials is None:
                    raise RecipeError("input stage lacks trials=")
                log.info("loaded roles: %s", ", ".join(sorted(emb)))

            elif st.name == "center":
                fit_roles = _roles(st.get("fit", "train"), emb)
                fit_set = role(fit_roles[0])
                for r in fit_roles[1:]:
                    fit_set = fit_set.concat(role(r))
                means = transforms.fit_dataset_centering(fit_set)
                store.put(step, "center", "means", means.to_text().encode())
                fallback = st.get("fallback", "global_mean")
                for r in _roles(st.get("apply", "all"), emb):
                    emb[r] = transforms.apply_centering(emb[r], means, fallback)

            elif st.name in ("lda", "lsda", "coral", "whiten"):
                if st.name == "lda":
                    t = transforms.fit_lda(role(st.get("fit", "train")), int(st.require("dim")))
                    default_apply = "all"
                elif st.name == "lsda":
                    t = transforms.fit_lsda(role(st.get("fit", "train")), int(st.require("dim")),
                                            int(st.get("k", 10)), float(st.get("alpha", 0.5)))
                    default_apply = "all"
                elif st.name == "coral":
                    src = st.get("source", "train")
                    ridge = st.get("ridge")
                    t = transforms.fit_coral(role(src), role(st.get("target", "indomain")),
                                             None if ridge is None else float(ridge))
                    default_apply = src
                else:
                    t = transforms.fit_whitening(role(st.get("fit", "indomain")),
                                                 float(st.get("ridge", 0.0)))
                    default_apply = "all"
                store.put(step, st.name, "lxf", t.to_bytes())
                for r in _roles(st.get("apply", default_apply), emb):
                    emb[r] = t.apply(emb[r])

            elif st.name == "lengthnorm":
                for r in _roles(st.get("apply", "all"), emb):
                    emb[r] = transforms.length_normalize(emb[r])

            elif st.name == "plda":
                model, lls = plda.train_plda(role(st.get("fit", "train")), int(st.get("iters", 20)))
                log.info("PLDA log-likelihood %.4f -> %.4f", lls[0], lls[-1])
                store.put(step, "plda", "plda", model.to_bytes())
                scorer = scoring.PldaScorer(model)
                scores = scoring.score_trials(trials, emb["enroll"], emb["test"], scorer, threads)
                store.put(step, "plda", "scores", scores_to_text(scores).encode())

            elif st.name == "cosine":
                scorer = scoring.CosineScorer()
                scores = scoring.score_trials(trials, emb["enroll"], emb["test"], scorer, threads)
                store.put(step, "cosine", "scores", scores_to_text(scores).encode())

            elif st.name in ("asnorm1", "asnorm2"):
                role = st.get("cohort", "cohort")
                if role not in emb:
                    raise RecipeError(f"no {role!r} role loaded for the cohort")
                top_k = st.get("top_k")
                cfg = scoring.AsNormConfig(st.name, None if top_k is None else int(top_k))
                scores = scoring.asnorm(scores, emb["enroll"], emb["test"],
                                        scoring.Cohort(emb[role], role), cfg, scorer, threads)
                store.put(step, st.name, "scores", scores_to_text(scores).encode())

            elif st.name == "calibrate":
                # fitted on the recipe's own labeled trials
                cal = calibration.fit_calibration(ScoreSet(trials, scores.scores),
                                                  float(st.get("prior", calibration.DEFAULT_PRIOR)))
                store.put(step, "calibrate", "cal", cal.to_text().encode())
                scores = calibration.apply_calibration(scores, cal)
                store.put(step, "calibrate", "scores", scores_to_text(scores).encode())

            elif st.name == "fuse":
                others = [read_scores(resolve(p), trials) for p in st.require("with").split(",")]
                scores = calibration.fuse([ScoreSet(trials, scores.scores)] + others)
                store.put(step, "fuse", "scores", scores_to_text(scores).encode())

            elif st.name == "evaluate":
                profile = st.get("profile", "cmn2")
                p_targets = [float(v) for v in st.get("p_targets", "").split(",") if v]
                params = metrics.cost_profile(profile, p_targets)
                report = metrics.evaluate(ScoreSet(trials, scores.scores), params)
                store.put_named("report.txt", (report.line() + "\n").encode())
                store.put_named("report.tsv", report.tsv().encode())
        except RecipeError:
            raise
        except (ValueError, KeyError, OSError) as e:
            raise RecipeError(f"stage {st.name} (line {st.line}): {e}") from e
        log.info("stage %s done", st.name)

    return RunResult(report, ScoreSet(trials, scores.scores), store.written)
