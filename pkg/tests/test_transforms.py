import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embedspace.data import EmbeddingSet, FormatError
from embedspace.plda import PldaScoringMatrices, train_plda
from embedspace.synthgen import SynthConfig, generate
from embedspace.transforms import (DatasetMeans, LinearTransform, TransformError, apply_centering,
                                   coral_matrix, compose, fit_coral, fit_dataset_centering,
                                   fit_lda, fit_lsda, fit_whitening, length_normalize,
                                   lsda_matrices)
from conftest import make_set


def _cov(x):
    xc = x - x.mean(axis=0)
    return xc.T @ xc / len(x)


def _random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.5 * np.eye(d)


def _exact_cov_sample(rng, cov, n):
    """Sample whose biased covariance equals ``cov`` to rounding."""
    z = rng.standard_normal((n, len(cov)))
    z -= z.mean(axis=0)
    z = z @ np.linalg.inv(np.linalg.cholesky(_cov(z))).T
    return z @ np.linalg.cholesky(cov).T


# -- centering ---------------------------------------------------------------

def test_centering_single_dataset():
    emb = make_set([[1, 1], [3, 3]])
    means = fit_dataset_centering(emb)
    np.testing.assert_array_equal(means.means["d0"], [2, 2])
    out = apply_centering(make_set([[3, 3]]), means)
    np.testing.assert_array_equal(out.vectors[0], [1, 1])


def test_centering_two_datasets_and_idempotence(rng):
    x = np.vstack([rng.standard_normal((30, 2)), rng.standard_normal((40, 2)) + 5])
    emb = make_set(x, datasets=["a"] * 30 + ["b"] * 40)
    means = fit_dataset_centering(emb)
    assert sorted(means.means) == ["a", "b"]
    refit = fit_dataset_centering(apply_centering(emb, means))
    for m in refit.means.values():
        assert np.abs(m).max() < 1e-12


def test_centering_unseen_dataset():
    means = DatasetMeans({"a": np.array([0.0, 0.0]), "b": np.array([4.0, 2.0])})
    out = apply_centering(make_set([[3, 3]], datasets=["zz"]), means)
    np.testing.assert_allclose(out.vectors[0], [1, 2])
    with pytest.raises(TransformError, match="zz"):
        apply_centering(make_set([[3, 3]], datasets=["zz"]), means, fallback="error")
    assert DatasetMeans.from_text(means.to_text()).to_text() == means.to_text()


# -- LDA -----------------------------------------------------------------------

def _labeled_toy(rng, n_spk=20, per=15, d=2, sep=None):
    centers = rng.standard_normal((n_spk, d)) * (sep if sep is not None else 1.0)
    x = np.repeat(centers, per, axis=0) + rng.standard_normal((n_spk * per, d))
    return make_set(x, speakers=np.repeat(np.arange(n_spk), per))


def test_lda_leading_direction_along_separating_axis(rng):
    n_spk, per = 10, 50
    centers = np.zeros((n_spk, 2))
    centers[:, 0] = 10 * np.arange(n_spk)
    x = np.repeat(centers, per, axis=0) + rng.standard_normal((n_spk * per, 2))
    emb = make_set(x, speakers=np.repeat(np.arange(n_spk), per))
    t = fit_lda(emb, 1)
    v = t.matrix[0]
    assert abs(v[0]) / np.linalg.norm(v) > 0.99


def test_lda_spheres_within_class(rng):
    emb = _labeled_toy(rng, d=5, sep=3.0)
    t = fit_lda(emb, 3)
    y = t.apply(emb)
    _, spk = y.speaker_groups()
    means = np.array([y.vectors[spk == s].mean(axis=0) for s in range(spk.max() + 1)])
    resid = y.vectors - means[spk]
    np.testing.assert_allclose(resid.T @ resid / len(resid), np.eye(3), atol=1e-6)


def test_lda_matches_closed_form_eigenvalues(rng):
    emb = _labeled_toy(rng, d=4, sep=2.0)
    x, (_, spk) = emb.vectors, emb.speaker_groups()
    mu = x.mean(axis=0)
    sb = sum(np.sum(spk == s) * np.outer(x[spk == s].mean(0) - mu, x[spk == s].mean(0) - mu)
             for s in range(spk.max() + 1)) / len(x)
    sw = sum((x[spk == s] - x[spk == s].mean(0)).T @ (x[spk == s] - x[spk == s].mean(0))
             for s in range(spk.max() + 1)) / len(x)
    expected = np.sort(np.linalg.eigvals(np.linalg.solve(sw, sb)).real)[::-1][:2]
    t = fit_lda(emb, 2)
    got = [v @ sb @ v / (v @ sw @ v) for v in t.matrix]
    np.testing.assert_allclose(got, expected, rtol=1e-9)


def test_lda_out_dim_bound(rng):
    emb = _labeled_toy(rng, n_spk=3, d=5)
    with pytest.raises(TransformError):
        fit_lda(emb, 3)
    fit_lda(emb, 2)


def test_lda_needs_labels():
    with pytest.raises(ValueError):
        fit_lda(make_set(np.eye(3)), 1)


def test_lda_plda_scores_equivariant_under_invertible_map():
    rng = np.random.default_rng(7)
    cfg = SynthConfig(dim=6, n_speakers=50, utts_per_speaker=8, between_cov=_random_spd(rng, 6),
                      within_cov=np.eye(6), seed=3)
    emb = generate(cfg)
    m = rng.standard_normal((6, 6)) + 3 * np.eye(6)
    mapped = emb.with_vectors(emb.vectors @ m.T)

    def pipeline_scores(train):
        t = fit_lda(train, 4)
        y = t.apply(train)
        model, _ = train_plda(y, 10)
        return PldaScoringMatrices(model).pair_scores(y.vectors[:40], y.vectors[40:80])

    a = pipeline_scores(emb)
    b = pipeline_scores(mapped)
    assert np.max(np.abs(a - b)) < 1e-6


def test_lda_permutation_and_shift_invariance(rng):
    emb = _labeled_toy(rng, d=4, sep=2.0)
    perm = rng.permutation(len(emb))
    t1 = fit_lda(emb, 2)
    t2 = fit_lda(emb.subset(perm), 2)
    np.testing.assert_allclose(t1.matrix, t2.matrix, atol=1e-10)
    t3 = fit_lda(emb.with_vectors(emb.vectors + 7.0), 2)
    np.testing.assert_allclose(t1.matrix, t3.matrix, atol=1e-8)


# -- LSDA ----------------------------------------------------------------------

def _locally_separated(rng, n=300, lift=30.0):
    """Two classes a small gap apart along axis 1, with rare far outliers on that axis.

    The outliers inflate the global within-class variance along axis 1, so
    LDA prefers the overlapping axis 0.  A constant third coordinate keeps
    neighbourhoods intact under length normalization.
    """
    y = np.repeat([0, 1], n)
    x = np.column_stack([rng.normal(1.5 * y, 1.0), rng.normal(1.0 * y, 0.1)])
    out = rng.random(2 * n) < 0.05
    x[out, 1] += rng.choice([-30.0, 30.0], out.sum())
    return np.column_stack([x, np.full(2 * n, lift)]), y


def _sweep_eer(proj, labels):
    """EER by scanning every threshold; the better orientation of the projection."""
    best = 1.0
    for s in (proj.ravel(), -proj.ravel()):
        tar, non = s[labels == 0], s[labels == 1]
        rates = []
        for th in np.unique(s):
            rates.append((np.mean(tar < th), np.mean(non >= th)))
        pm, pf = np.array(rates).T
        i = np.argmin(np.abs(pm - pf))
        best = min(best, max(pm[i], pf[i]))
    return best


def _dense_lsda(x, labels, k, alpha):
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    d = ((xn[:, None, :] - xn[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    n = len(x)
    adj = np.zeros((n, n))
    for i in range(n):
        adj[i, np.argsort(d[i], kind="stable")[:k]] = 1
    adj = np.maximum(adj, adj.T)
    same = labels[:, None] == labels[None, :]
    ww, wb = adj * same, adj * ~same
    xc = x - x.mean(axis=0)
    lb = np.diag(wb.sum(1)) - wb
    obj = xc.T @ (alpha * lb + (1 - alpha) * ww) @ xc
    con = xc.T @ np.diag(ww.sum(1)) @ xc
    return obj, con


@pytest.mark.parametrize("seed", range(5))
def test_lsda_beats_lda_on_locally_separated_classes(seed):
    rng = np.random.default_rng(seed)
    x, y = _locally_separated(rng)
    emb = make_set(x, speakers=y)
    eer_lda = _sweep_eer(fit_lda(emb, 1).apply_array(x), y)
    eer_lsda = _sweep_eer(fit_lsda(emb, 1).apply_array(x), y)
    assert eer_lsda < eer_lda


def test_lsda_matrices_match_dense_oracle():
    rng = np.random.default_rng(1)
    x, y = _locally_separated(rng, n=60)
    obj, con = lsda_matrices(make_set(x, speakers=y), 7, 0.4)
    obj_ref, con_ref = _dense_lsda(x, y, 7, 0.4)
    np.testing.assert_allclose(obj, obj_ref, rtol=1e-10, atol=1e-8)
    np.testing.assert_allclose(con, con_ref, rtol=1e-10, atol=1e-8)


def _brute_lsda_terms(x, labels, a):
    """Graph terms evaluated pair by pair on a fully connected graph."""
    z = (x - x.mean(axis=0)) @ a
    n = len(x)
    between = within = con = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if labels[i] == labels[j]:
                within += z[i] * z[j]
                con += z[i] * z[i]
            else:
                between += 0.5 * (z[i] - z[j]) ** 2
    return between, within, con


@pytest.mark.parametrize("alpha", [0.0, 1.0, 0.3])
def test_lsda_objective_matches_brute_force(alpha):
    rng = np.random.default_rng(4)
    n_spk, per = 4, 6
    x = np.repeat(rng.standard_normal((n_spk, 3)) * 2, per, axis=0) + rng.standard_normal((24, 3))
    labels = np.repeat(np.arange(n_spk), per)
    emb = make_set(x, speakers=labels)
    # k = n - 1 connects every pair
    t = fit_lsda(emb, 1, k_neighbors=len(x) - 1, alpha=alpha)
    a = t.matrix[0]
    between, within, con = _brute_lsda_terms(x, labels, a)
    obj, cmat = lsda_matrices(emb, len(x) - 1, alpha)
    brute = alpha * between + (1 - alpha) * within
    assert abs(a @ obj @ a - brute) < 1e-8 * max(1.0, abs(brute))
    assert abs(a @ cmat @ a - con) < 1e-8 * max(1.0, con)
    # the fitted direction is the constrained maximizer
    best = brute / con
    for _ in range(200):
        v = rng.standard_normal(3)
        b2, w2, c2 = _brute_lsda_terms(x, labels, v)
        assert (alpha * b2 + (1 - alpha) * w2) / c2 <= best + 1e-8


def test_lsda_k_neighbors_bound(rng):
    emb = _labeled_toy(rng, n_spk=3, per=4, d=3)
    with pytest.raises(TransformError):
        fit_lsda(emb, 1, k_neighbors=len(emb))


# -- CORAL / whitening ---------------------------------------------------------

def test_coral_identity_case(rng):
    c = _random_spd(rng, 5)
    np.testing.assert_allclose(coral_matrix(c, c, ridge=0.0), np.eye(5), atol=1e-10)


def test_coral_diagonal_closed_form():
    np.testing.assert_allclose(coral_matrix(4 * np.eye(3), np.eye(3), ridge=0.0), 0.5 * np.eye(3),
                               atol=1e-14)


def test_coral_random_spd_covariance_recomputed():
    rng = np.random.default_rng(8)
    cs, ct = _random_spd(rng, 8), _random_spd(rng, 8)
    xs = _exact_cov_sample(rng, cs, 400)
    xt = _exact_cov_sample(rng, ct, 300)
    t = fit_coral(make_set(xs), make_set(xt, prefix="t"), ridge=0.0)
    assert np.linalg.norm(_cov(t.apply_array(xs)) - ct) < 1e-8


def test_coral_default_ridge_and_errors(rng):
    c = np.diag([1.0, 0.0])
    a = coral_matrix(c, c)
    assert np.all(np.isfinite(a))
    with pytest.raises(TransformError):
        coral_matrix(np.eye(2), np.eye(2), ridge=-1.0)
    with pytest.raises(TransformError):
        fit_coral(make_set(np.ones((3, 2))), make_set(np.ones((3, 3))))


def test_whitening_scalar_case():
    rng = np.random.default_rng(2)
    x = _exact_cov_sample(rng, 9 * np.eye(2), 50) + np.array([1.0, 1.0])
    t = fit_whitening(make_set(x))
    np.testing.assert_allclose(t.apply_array(np.array([4.0, 1.0])), [1.0, 0.0], atol=1e-10)


def test_whitening_gives_identity_covariance(rng):
    x = rng.standard_normal((500, 6)) @ rng.standard_normal((6, 6)) + 4
    t = fit_whitening(make_set(x))
    np.testing.assert_allclose(_cov(t.apply_array(x)), np.eye(6), atol=1e-6)


def test_whitening_after_coral_matches_target():
    rng = np.random.default_rng(12)
    src = rng.standard_normal((600, 5)) @ _random_spd(rng, 5)
    tgt = (rng.standard_normal((400, 5)) @ _random_spd(rng, 5)) + 2.0
    coral = fit_coral(make_set(src), make_set(tgt, prefix="t"), ridge=0.0)
    white = fit_whitening(make_set(tgt, prefix="t"))
    both = compose(coral, white)
    gap = np.linalg.norm(_cov(both.apply_array(src)) - _cov(white.apply_array(tgt)))
    assert gap < 1e-6


def test_length_normalize():
    out = length_normalize(make_set([[3, 4], [0, 1]]))
    np.testing.assert_allclose(out.vectors, [[0.6, 0.8], [0, 1]], atol=1e-15)
    with pytest.raises(TransformError, match="u0001"):
        length_normalize(make_set([[1, 0], [0, 0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_length_normalize_unit_norm(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((10, 4)) * 10.0 ** rng.integers(-5, 5)
    out = length_normalize(make_set(x))
    assert np.max(np.abs(np.linalg.norm(out.vectors, axis=1) - 1)) < 1e-12
    np.testing.assert_allclose(length_normalize(out).vectors, out.vectors, atol=1e-15)


# -- composition and serialization --------------------------------------------

def test_compose_identity_and_center_scale(rng):
    t = LinearTransform(rng.standard_normal((3, 4)), rng.standard_normal(3), "lda")
    c = compose(LinearTransform.identity(4), t)
    np.testing.assert_array_equal(c.matrix, t.matrix)
    np.testing.assert_array_equal(c.offset, t.offset)
    mu = np.array([1.0, -2.0])
    x = np.array([5.0, 7.0])
    cs = compose(LinearTransform.center(mu), LinearTransform.scale(2, 2.0))
    np.testing.assert_allclose(cs.apply_array(x), 2 * (x - mu))


def test_compose_chain_matches_sequential():
    rng = np.random.default_rng(3)
    dims = [6, 5, 5, 4, 3]
    chain = [LinearTransform(rng.standard_normal((dims[i + 1], dims[i])),
                             rng.standard_normal(dims[i + 1]), "lda") for i in range(4)]
    x = rng.standard_normal((100, 6))
    seq = x
    for t in chain:
        seq = t.apply_array(seq)
    total = chain[0]
    for t in chain[1:]:
        total = compose(total, t)
    got = total.apply_array(x)
    assert np.max(np.abs(got - seq) / np.maximum(np.abs(seq), 1e-300)) < 1e-10 or \
        np.max(np.abs(got - seq)) < 1e-10 * np.abs(seq).max()
    with pytest.raises(TransformError):
        compose(chain[0], chain[0])


def test_transform_serialization(tmp_path, rng):
    t = LinearTransform(rng.standard_normal((3, 5)), rng.standard_normal(3), "coral")
    t.save(tmp_path / "t.lxf")
    back = LinearTransform.load(tmp_path / "t.lxf")
    assert back.kind == "coral"
    np.testing.assert_array_equal(back.matrix, t.matrix)
    np.testing.assert_array_equal(back.offset, t.offset)
    assert (tmp_path / "t.lxf").read_bytes()[:4] == b"LXF1"
    with pytest.raises(FormatError):
        LinearTransform.from_bytes(t.to_bytes()[:-1])


def test_apply_keeps_ids(rng):
    emb = make_set(rng.standard_normal((4, 3)), speakers="abcd")
    out = LinearTransform.scale(3, 2.0).apply(emb)
    assert isinstance(out, EmbeddingSet)
    assert out.utt_ids == emb.utt_ids and out.speaker_ids == emb.speaker_ids
