import subprocess
import sys

import numpy as np
import pytest

from embedspace import calibration, metrics, plda, scoring, synthgen, transforms
from embedspace.cli import main
from embedspace.data import read_embeddings, read_scores, read_trials
from embedspace.recipe import RecipeError, parse_recipe, run_recipe


@pytest.fixture
def corpus(tmp_path):
    assert main(["synth", "--dim", "6", "--speakers", "40", "--utts", "6", "--seed", "7",
                 "--between", "isotropic:3", "--out", str(tmp_path / "a.emb"), "--quiet"]) == 0
    assert main(["make-trials", str(tmp_path / "a.emb"), "--targets", "150", "--nontargets",
                 "600", "--out", str(tmp_path / "t.txt"), "--quiet"]) == 0
    return tmp_path


def test_synth_deterministic(tmp_path):
    args = ["synth", "--dim", "8", "--speakers", "50", "--utts", "10", "--seed", "7", "--quiet"]
    assert main(args + ["--out", str(tmp_path / "x.emb")]) == 0
    assert main(args + ["--out", str(tmp_path / "y.emb")]) == 0
    assert (tmp_path / "x.emb").read_bytes() == (tmp_path / "y.emb").read_bytes()
    emb = read_embeddings(tmp_path / "x.emb")
    assert len(emb) == 500 and emb.dim == 8
    cfg = synthgen.SynthConfig(dim=8, n_speakers=50, utts_per_speaker=10, between_cov=np.eye(8),
                               within_cov=np.eye(8), seed=7)
    ref = synthgen.generate(cfg)
    np.testing.assert_array_equal(emb.vectors, ref.vectors.astype(np.float32))


def test_synth_to_stdout_matches_file(tmp_path):
    args = [sys.executable, "-m", "embedspace", "synth", "--dim", "3", "--speakers", "4",
            "--utts", "2", "--seed", "1", "--quiet"]
    out = subprocess.run(args, capture_output=True, check=True).stdout
    assert main(["synth", "--dim", "3", "--speakers", "4", "--utts", "2", "--seed", "1",
                 "--quiet", "--out", str(tmp_path / "f.emb")]) == 0
    assert out == (tmp_path / "f.emb").read_bytes()


def test_unknown_flag_gives_usage(capsys):
    assert main(["evaluate", "--scores", "s", "--trials", "t", "--bogus"]) != 0
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err
    assert main(["no-such-command"]) != 0


@pytest.mark.parametrize("cmd", [None, "synth", "make-trials", "fit-center", "fit-lda",
                                 "fit-lsda", "fit-coral", "fit-whiten", "apply", "train-plda",
                                 "score", "asnorm", "calibrate", "fuse", "evaluate",
                                 "encode-check", "run", "demo"])
def test_help_renders(cmd, capsys):
    argv = ["--help"] if cmd is None else [cmd, "--help"]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert out.startswith("usage:") and "%%" not in out


def test_error_is_one_line(tmp_path, capsys):
    code = main(["evaluate", "--scores", str(tmp_path / "missing"), "--trials",
                 str(tmp_path / "missing2"), "--quiet"])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: evaluate: ")


def test_pipeline_wrapper_fidelity(corpus, capsys):
    d = corpus
    run = lambda *a: main(list(a) + ["--quiet"])
    emb = read_embeddings(d / "a.emb")
    trials = read_trials(d / "t.txt")

    assert run("fit-center", str(d / "a.emb"), "--out", str(d / "c.means")) == 0
    means = transforms.fit_dataset_centering(emb)
    assert (d / "c.means").read_text() == means.to_text()
    assert run("apply", str(d / "a.emb"), str(d / "ac.emb"), "--center", str(d / "c.means")) == 0
    centered = read_embeddings(d / "ac.emb")

    assert run("fit-lda", str(d / "ac.emb"), "--dim", "4", "--out", str(d / "l.lxf")) == 0
    assert (d / "l.lxf").read_bytes() == transforms.fit_lda(centered, 4).to_bytes()
    assert run("fit-lsda", str(d / "ac.emb"), "--dim", "3", "--k-neighbors", "5",
               "--out", str(d / "ls.lxf")) == 0
    assert (d / "ls.lxf").read_bytes() == transforms.fit_lsda(centered, 3, 5).to_bytes()
    assert run("fit-whiten", str(d / "ac.emb"), "--out", str(d / "w.lxf")) == 0
    assert (d / "w.lxf").read_bytes() == transforms.fit_whitening(centered).to_bytes()
    assert run("fit-coral", str(d / "a.emb"), str(d / "ac.emb"), "--out", str(d / "x.lxf")) == 0
    assert (d / "x.lxf").read_bytes() == transforms.fit_coral(emb, centered).to_bytes()

    assert run("apply", str(d / "ac.emb"), str(d / "al.emb"), "--transform", str(d / "l.lxf")) == 0
    assert run("apply", str(d / "al.emb"), str(d / "an.emb"), "--lengthnorm") == 0
    normed = read_embeddings(d / "an.emb")

    assert run("train-plda", str(d / "an.emb"), "--iters", "5", "--out", str(d / "m.plda")) == 0
    model, _ = plda.train_plda(normed, 5)
    assert (d / "m.plda").read_bytes() == model.to_bytes()

    assert run("score", "--trials", str(d / "t.txt"), "--enroll", str(d / "an.emb"),
               "--model", str(d / "m.plda"), "--out", str(d / "s.txt")) == 0
    raw = read_scores(d / "s.txt", trials)
    lib_raw = scoring.score_trials(trials, normed, normed, scoring.PldaScorer(model))
    assert np.array_equal(raw.scores, lib_raw.scores)

    assert run("asnorm", "--trials", str(d / "t.txt"), "--enroll", str(d / "an.emb"),
               "--model", str(d / "m.plda"), "--scores", str(d / "s.txt"), "--cohort",
               str(d / "an.emb"), "--variant", "asnorm2", "--top-k", "30",
               "--out", str(d / "sn.txt")) == 0
    lib_norm = scoring.asnorm(lib_raw, normed, normed, scoring.Cohort(normed),
                              scoring.AsNormConfig("asnorm2", 30), scoring.PldaScorer(model))
    assert np.array_equal(read_scores(d / "sn.txt", trials).scores, lib_norm.scores)

    capsys.readouterr()
    assert run("calibrate", "--scores", str(d / "sn.txt"), "--trials", str(d / "t.txt"),
               "--out", str(d / "cal.txt"), "--calibrated-out", str(d / "sc.txt")) == 0
    cal = calibration.fit_calibration(lib_norm)
    assert capsys.readouterr().out == cal.to_text()
    calibrated = calibration.apply_calibration(lib_norm, cal)
    assert np.array_equal(read_scores(d / "sc.txt", trials).scores, calibrated.scores)

    assert run("calibrate", "--scores", str(d / "sn.txt"), "--model", str(d / "cal.txt"),
               "--calibrated-out", str(d / "sc2.txt")) == 0
    assert (d / "sc2.txt").read_bytes() == (d / "sc.txt").read_bytes()

    for profile, extra in [("cmn2", []), ("vast", []), ("custom", ["--p-target", "0.2"])]:
        capsys.readouterr()
        assert run("evaluate", "--scores", str(d / "sc.txt"), "--trials", str(d / "t.txt"),
                   "--cost-profile", profile, *extra) == 0
        params = metrics.cost_profile(profile, [0.2] if extra else None)
        assert capsys.readouterr().out.strip() == metrics.evaluate(calibrated, params).line()

    assert run("evaluate", "--scores", str(d / "sc.txt"), "--trials", str(d / "t.txt"),
               "--tsv", str(d / "r.tsv")) == 0
    assert (d / "r.tsv").read_text() == metrics.evaluate(calibrated).tsv()

    assert run("fuse", str(d / "sc.txt"), str(d / "sc2.txt"), "--out", str(d / "f.txt")) == 1
    assert run("fuse", str(d / "sc.txt"), str(d / "sc2.txt"), "--already-calibrated",
               "--out", str(d / "f.txt")) == 0
    np.testing.assert_array_equal(read_scores(d / "f.txt", trials).scores, 2 * calibrated.scores)


def test_outputs_not_overwritten_without_force(corpus):
    d = corpus
    assert main(["fit-center", str(d / "a.emb"), "--out", str(d / "c.means"), "--quiet"]) == 0
    assert main(["fit-center", str(d / "a.emb"), "--out", str(d / "c.means"), "--quiet"]) == 1
    assert main(["fit-center", str(d / "a.emb"), "--out", str(d / "c.means"), "--quiet",
                 "--force"]) == 0


def test_threads_flag_and_env(corpus, monkeypatch):
    import embedspace.scoring as sc
    monkeypatch.setattr(sc, "CHUNK_ROWS", 64)
    d = corpus
    outs = []
    for i, threads in enumerate(["1", "3"]):
        assert main(["score", "--trials", str(d / "t.txt"), "--enroll", str(d / "a.emb"),
                     "--scorer", "cosine", "--threads", threads, "--quiet",
                     "--out", str(d / f"s{i}.txt")]) == 0
        outs.append((d / f"s{i}.txt").read_bytes())
    monkeypatch.setenv("EMBEDSPACE_THREADS", "4")
    assert main(["score", "--trials", str(d / "t.txt"), "--enroll", str(d / "a.emb"),
                 "--scorer", "cosine", "--quiet", "--out", str(d / "s2.txt")]) == 0
    outs.append((d / "s2.txt").read_bytes())
    assert len(set(outs)) == 1


def test_encode_check(capsys):
    assert main(["encode-check", "--seeds", "3"]) == 0
    out = capsys.readouterr().out
    assert "lde.frames" in out and "asoftmax.weights" in out
    assert main(["encode-check", "--seeds", "1", "--tolerance", "0"]) == 1


def test_logs_go_to_stderr(tmp_path, capsys):
    assert main(["synth", "--dim", "2", "--speakers", "2", "--utts", "2", "--seed", "0",
                 "--out", str(tmp_path / "s.emb")]) == 0
    cap = capsys.readouterr()
    assert cap.out == "" and "wrote 4 embeddings" in cap.err
    assert main(["synth", "--dim", "2", "--speakers", "2", "--utts", "2", "--seed", "0",
                 "--out", str(tmp_path / "s2.emb"), "--quiet"]) == 0
    assert capsys.readouterr().err == ""


# -- recipes -------------------------------------------------------------------

def test_minimal_recipe(corpus, capsys):
    d = corpus
    (d / "r.txt").write_text("input enroll=a.emb test=a.emb trials=t.txt\n"
                             "lengthnorm\ncosine\nevaluate\n")
    assert main(["run", str(d / "r.txt"), "--workdir", str(d / "work"), "--quiet"]) == 0
    line = capsys.readouterr().out.strip()
    parts = line.split(" / ")
    assert len(parts) == 3 and all(float(p) >= 0 for p in parts)
    assert (d / "work" / "report.txt").read_text().strip() == line


def test_recipe_stage_order_errors():
    with pytest.raises(RecipeError, match="before any scorer"):
        parse_recipe("input enroll=a test=a trials=t\nasnorm1\ncosine\nevaluate\n")
    with pytest.raises(RecipeError, match="more than one scorer"):
        parse_recipe("input enroll=a test=a trials=t\ncosine\nplda\nevaluate\n")
    with pytest.raises(RecipeError, match="last"):
        parse_recipe("input enroll=a test=a trials=t\ncosine\nevaluate\ncalibrate\n")
    with pytest.raises(RecipeError, match="after scoring"):
        parse_recipe("input enroll=a test=a trials=t\ncosine\nlda dim=2\nevaluate\n")
    with pytest.raises(RecipeError, match="unknown stage"):
        parse_recipe("input enroll=a test=a trials=t\nfoo\ncosine\nevaluate\n")
    with pytest.raises(RecipeError, match="no scorer"):
        parse_recipe("input enroll=a test=a trials=t\nevaluate\n")


def test_recipe_missing_role_and_stage_errors(corpus, capsys):
    d = corpus
    (d / "r.txt").write_text("input enroll=a.emb test=a.emb trials=t.txt\n"
                             "lda fit=train dim=2\ncosine\nevaluate\n")
    with pytest.raises(RecipeError, match="train"):
        run_recipe(d / "r.txt", d / "w1")
    (d / "r2.txt").write_text("input enroll=a.emb test=a.emb train=a.emb trials=t.txt\n"
                              "lda fit=train dim=99\ncosine\nevaluate\n")
    with pytest.raises(RecipeError, match="stage lda"):
        run_recipe(d / "r2.txt", d / "w2")
    assert main(["run", str(d / "r2.txt"), "--workdir", str(d / "w3"), "--quiet"]) == 1
    assert "stage lda" in capsys.readouterr().err


def test_recipe_rerun_is_byte_identical(corpus):
    d = corpus
    (d / "r.txt").write_text("input train=a.emb cohort=a.emb enroll=a.emb test=a.emb "
                             "trials=t.txt\ncenter fit=train\nlda dim=4\nlengthnorm\n"
                             "plda iters=5\nasnorm1 top_k=20\ncalibrate\nevaluate profile=vast\n")
    r1 = run_recipe(d / "r.txt", d / "w1")
    r2 = run_recipe(d / "r.txt", d / "w2", threads=3)
    names1 = sorted(p.name for p in (d / "w1").iterdir())
    names2 = sorted(p.name for p in (d / "w2").iterdir())
    assert names1 == names2
    for n in names1:
        assert (d / "w1" / n).read_bytes() == (d / "w2" / n).read_bytes()
    assert r1.report == r2.report
    # running again into the same directory reuses identical artifacts
    r3 = run_recipe(d / "r.txt", d / "w1")
    assert r3.report == r1.report


def test_recipe_refuses_to_clobber(corpus):
    d = corpus
    (d / "r.txt").write_text("input enroll=a.emb test=a.emb trials=t.txt\ncosine\nevaluate\n")
    run_recipe(d / "r.txt", d / "w")
    (d / "w" / "report.txt").write_text("stale\n")
    with pytest.raises(RecipeError, match="force"):
        run_recipe(d / "r.txt", d / "w")
    run_recipe(d / "r.txt", d / "w", force=True)
    assert (d / "w" / "report.txt").read_text() != "stale\n"
