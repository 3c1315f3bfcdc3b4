"""Command-line entry point: ``embedspace <subcommand> ...``.

Logs go to stderr, results to stdout.  Failures exit with status 1 and a
single ``error: <command>: <message>`` line on stderr; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import calibration, encoders, metrics, plda, scoring, synthgen, transforms
from .data import (embeddings_to_bytes, embeddings_to_tsv, read_embeddings, read_scores, read_trials, write_embeddings, write_scores,
                   write_trials)
from .demo import write_demo
from .recipe import run_recipe

log = logging.getLogger("embedspace")


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("EMBEDSPACE_THREADS", "1")))
    except ValueError:
        return 1


def _check_output(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    return path


def _load_scorer(args):
    if args.scorer == "plda":
        if not args.model:
            raise ValueError("--model is required with --scorer plda")
        return scoring.PldaScorer(plda.PldaModel.load(args.model))
    return scoring.CosineScorer()


def _cost_params(args) -> metrics.CostParams:
    return metrics.cost_profile(args.cost_profile, args.p_target, args.c_miss, args.c_fa)


# -- subcommand handlers -----------------------------------------------------

def cmd_synth(args):
    if args.config:
        cfg = synthgen.read_config(args.config)
    else:
        if args.dim is None or args.speakers is None or args.utts is None:
            raise ValueError("give --config or all of --dim, --speakers, --utts")
        kv = {"dim": args.dim, "n_speakers": args.speakers, "utts_per_speaker": args.utts,
              "between_cov": args.between, "within_cov": args.within, "prefix": args.prefix,
              "unlabeled": str(args.unlabeled)}
        if args.dataset_id:
            kv["dataset_id"] = args.dataset_id
        cfg = synthgen.config_from_dict({k: str(v) for k, v in kv.items()})
    if args.seed is not None:
        cfg.seed = args.seed
    emb = synthgen.generate(cfg)
    if args.out == "-":
        payload = embeddings_to_bytes(emb) if args.format == "binary" else embeddings_to_tsv(emb).encode()
        sys.stdout.buffer.write(payload)
        sys.stdout.flush()
    else:
        write_embeddings(emb, _check_output(args.out, args.force), args.format)
    log.info("wrote %d embeddings of dim %d to %s", len(emb), emb.dim, args.out)


def cmd_make_trials(args):
    emb = read_embeddings(args.embeddings)
    trials = synthgen.make_trials(emb, args.targets, args.nontargets, args.seed)
    write_trials(trials, _check_output(args.out, args.force))
    log.info("wrote %d trials to %s", len(trials), args.out)


def _concat(paths):
    sets = [read_embeddings(p) for p in paths]
    out = sets[0]
    for s in sets[1:]:
        out = out.concat(s)
    return out


def cmd_fit_center(args):
    means = transforms.fit_dataset_centering(_concat(args.train))
    means.save(_check_output(args.out, args.force))


def cmd_fit_lda(args):
    t = transforms.fit_lda(_concat(args.train), args.dim)
    t.save(_check_output(args.out, args.force))


def cmd_fit_lsda(args):
    t = transforms.fit_lsda(_concat(args.train), args.dim, args.k_neighbors, args.alpha)
    t.save(_check_output(args.out, args.force))


def cmd_fit_coral(args):
    t = transforms.fit_coral(read_embeddings(args.source), read_embeddings(args.target), args.ridge)
    t.save(_check_output(args.out, args.force))


def cmd_fit_whiten(args):
    t = transforms.fit_whitening(_concat(args.indomain), args.ridge)
    t.save(_check_output(args.out, args.force))


def cmd_apply(args):
    emb = read_embeddings(args.input)
    if args.lengthnorm:
        out = transforms.length_normalize(emb)
    elif args.center:
        out = transforms.apply_centering(emb, transforms.DatasetMeans.load(args.center),
                                         args.fallback)
    else:
        out = transforms.LinearTransform.load(args.transform).apply(emb)
    write_embeddings(out, _check_output(args.output, args.force), args.format)


def cmd_train_plda(args):
    model, lls = plda.train_plda(_concat(args.train), args.iters)
    for i, ll in enumerate(lls):
        log.info("iter %d log-likelihood %.6f", i, ll)
    model.save(_check_output(args.out, args.force))


def _trial_sets(args):
    trials = read_trials(args.trials)
    enroll = read_embeddings(args.enroll)
    test = read_embeddings(args.test) if args.test else enroll
    return trials, enroll, test


def cmd_score(args):
    trials, enroll, test = _trial_sets(args)
    scores = scoring.score_trials(trials, enroll, test, _load_scorer(args), args.threads)
    write_scores(scores, _check_output(args.out, args.force))


def cmd_asnorm(args):
    trials, enroll, test = _trial_sets(args)
    raw = read_scores(args.scores, trials)
    cohort = scoring.Cohort(read_embeddings(args.cohort), Path(args.cohort).name)
    cfg = scoring.AsNormConfig(args.variant, args.top_k)
    out = scoring.asnorm(raw, enroll, test, cohort, cfg, _load_scorer(args), args.threads)
    write_scores(out, _check_output(args.out, args.force))


def cmd_calibrate(args):
    if args.model:
        cal = calibration.Calibration.load(args.model)
        scores = read_scores(args.scores)
    else:
        if not args.trials:
            raise ValueError("fitting a calibration needs --trials with labels")
        scores = read_scores(args.scores, read_trials(args.trials))
        cal = calibration.fit_calibration(scores, args.prior)
        cal.save(_check_output(args.out, args.force))
        print(cal.to_text(), end="")
    if args.calibrated_out:
        write_scores(calibration.apply_calibration(scores, cal),
                     _check_output(args.calibrated_out, args.force))


def cmd_fuse(args):
    if not args.already_calibrated:
        raise ValueError("fuse sums calibrated scores; confirm with --already-calibrated")
    systems = [read_scores(args.scores[0])]
    systems += [read_scores(p, systems[0].trials) for p in args.scores[1:]]
    write_scores(calibration.fuse(systems), _check_output(args.out, args.force))


def cmd_evaluate(args):
    scores = read_scores(args.scores, read_trials(args.trials))
    report = metrics.evaluate(scores, _cost_params(args))
    print(report.line())
    if args.tsv:
        Path(_check_output(args.tsv, args.force)).write_text(report.tsv(), encoding="utf-8")


def cmd_encode_check(args):
    worst = {}
    for seed in range(args.seeds):
        for name, err in encoders.check_lde_gradients(seed).items():
            worst[f"lde.{name}"] = max(worst.get(f"lde.{name}", 0.0), err)
        for name, err in encoders.check_asoftmax_gradients(seed, margin=args.margin).items():
            worst[f"asoftmax.{name}"] = max(worst.get(f"asoftmax.{name}", 0.0), err)
    ok = True
    for name in sorted(worst):
        status = "ok" if worst[name] <= args.tolerance else "FAIL"
        ok &= status == "ok"
        print(f"{name}\t{worst[name]:.3e}\t{status}")
    if not ok:
        raise ValueError(f"gradient check exceeded tolerance {args.tolerance:g}")


def cmd_run(args):
    res = run_recipe(args.recipe, args.workdir, threads=args.threads, force=args.force)
    print(res.report.line())


def cmd_demo(args):
    recipe = write_demo(args.workdir, n_speakers=args.speakers, seed=args.seed)
    print(recipe)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="suppress log output")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help="worker threads (default: $EMBEDSPACE_THREADS or 1)")

    p = argparse.ArgumentParser(prog="embedspace",
                                description="Speaker-embedding back-end toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        sp.set_defaults(func=fn)
        return sp

    fmt = dict(choices=["binary", "tsv"], default="binary")

    sp = add("synth", cmd_synth, "generate synthetic embeddings from the PLDA model")
    sp.add_argument("--config", help="flat key = value config file")
    sp.add_argument("--dim", type=int)
    sp.add_argument("--speakers", type=int)
    sp.add_argument("--utts", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--between", default="isotropic:1", help="between-speaker covariance")
    sp.add_argument("--within", default="isotropic:1", help="within-speaker covariance")
    sp.add_argument("--prefix", default="spk")
    sp.add_argument("--dataset-id")
    sp.add_argument("--unlabeled", action="store_true")
    sp.add_argument("--format", **fmt)
    sp.add_argument("--out", default="-", help="output file (default: standard output)")

    sp = add("make-trials", cmd_make_trials, "sample labeled trials from a labeled set")
    sp.add_argument("embeddings")
    sp.add_argument("--targets", type=int, required=True)
    sp.add_argument("--nontargets", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("fit-center", cmd_fit_center, "fit per-dataset means")
    sp.add_argument("train", nargs="+")
    sp.add_argument("--out", required=True)

    sp = add("fit-lda", cmd_fit_lda, "fit an LDA projection")
    sp.add_argument("train", nargs="+")
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("fit-lsda", cmd_fit_lsda, "fit an LSDA projection")
    sp.add_argument("train", nargs="+")
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--k-neighbors", type=int, default=10)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("fit-coral", cmd_fit_coral, "fit a CORAL map from source to target covariance")
    sp.add_argument("source")
    sp.add_argument("target")
    sp.add_argument("--ridge", type=float, default=None,
                    help="absolute ridge (default: 1e-3 * trace(C) / D)")
    sp.add_argument("--out", required=True)

    sp = add("fit-whiten", cmd_fit_whiten, "fit in-domain whitening")
    sp.add_argument("indomain", nargs="+")
    sp.add_argument("--ridge", type=float, default=0.0)
    sp.add_argument("--out", required=True)

    sp = add("apply", cmd_apply, "apply a transform, dataset centering or length normalization")
    sp.add_argument("input")
    sp.add_argument("output")
    what = sp.add_mutually_exclusive_group(required=True)
    what.add_argument("--transform", help="LXF1 transform file")
    what.add_argument("--center", help="dataset-means file from fit-center")
    what.add_argument("--lengthnorm", action="store_true")
    sp.add_argument("--fallback", choices=["global_mean", "error"], default="global_mean")
    sp.add_argument("--format", **fmt)

    sp = add("train-plda", cmd_train_plda, "train a two-covariance PLDA model")
    sp.add_argument("train", nargs="+")
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--out", required=True)

    def trial_args(sp):
        sp.add_argument("--trials", required=True)
        sp.add_argument("--enroll", required=True)
        sp.add_argument("--test", help="test embeddings (default: same as --enroll)")
        sp.add_argument("--scorer", choices=["cosine", "plda"], default="plda")
        sp.add_argument("--model", help="PLDA model file")

    sp = add("score", cmd_score, "score a trial list")
    trial_args(sp)
    sp.add_argument("--out", required=True)

    sp = add("asnorm", cmd_asnorm, "adaptive symmetric score normalization")
    trial_args(sp)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--variant", choices=["asnorm1", "asnorm2"], default="asnorm1")
    sp.add_argument("--top-k", type=int, default=None,
                    help="cohort subset size (default 100 for asnorm1, 200 for asnorm2)")
    sp.add_argument("--out", required=True)

    sp = add("calibrate", cmd_calibrate, "fit (or apply with --model) a score calibration")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--trials", help="labeled trials (needed for fitting)")
    sp.add_argument("--prior", type=float, default=calibration.DEFAULT_PRIOR)
    sp.add_argument("--model", help="existing calibration file to apply")
    sp.add_argument("--out", help="calibration file to write")
    sp.add_argument("--calibrated-out", help="also write calibrated scores here")

    sp = add("fuse", cmd_fuse, "equal-weight sum of calibrated score files")
    sp.add_argument("scores", nargs="+")
    sp.add_argument("--already-calibrated", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "print EER (percent), minC and actC")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--cost-profile", choices=["cmn2", "vast", "custom"], default="cmn2")
    sp.add_argument("--p-target", type=float, action="append",
                    help="operating point for the custom profile (repeatable)")
    sp.add_argument("--c-miss", type=float, default=1.0)
    sp.add_argument("--c-fa", type=float, default=1.0)
    sp.add_argument("--tsv", help="also write machine-readable metrics here")

    sp = add("encode-check", cmd_encode_check, "finite-difference check of encoder gradients")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--margin", type=int, default=4)
    sp.add_argument("--tolerance", type=float, default=1e-4)

    sp = add("run", cmd_run, "run a back-end recipe")
    sp.add_argument("recipe")
    sp.add_argument("--workdir", required=True)

    sp = add("demo", cmd_demo, "write synthetic demo data and recipe")
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--speakers", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, np.linalg.LinAlgError) as e:
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
