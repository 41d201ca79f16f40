import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adarand import diagnostics as dg
from adarand import model
from adarand.numerics import ContractError, RngStream


def _brute_entropy(x):
    N, d = x.shape
    total = 0.0
    for i in range(N):
        for j in range(N):
            if i != j:
                total += np.log(max(np.sum((x[i] - x[j]) ** 2), dg.DIST_FLOOR))
    return d * total / (N * (N - 1))


def test_two_point_examples():
    assert dg.entropy_estimate([[0.0], [1.0]]) == 0.0
    assert dg.entropy_estimate([[0.0], [np.sqrt(np.e)]]) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_dilation_law(c):
    x = np.random.default_rng(0).normal(size=(40, 3))
    assert dg.entropy_estimate(c * x) == pytest.approx(dg.entropy_estimate(x) + 3 * np.log(c * c), rel=1e-9)


def test_matches_pair_loop():
    x = np.random.default_rng(1).normal(size=(50, 4))
    assert dg.entropy_estimate(x) == pytest.approx(_brute_entropy(x), rel=1e-10)


def test_duplicates_hit_the_floor_not_minus_infinity():
    h = dg.entropy_estimate(np.zeros((3, 2)))
    assert h == pytest.approx(2 * np.log(dg.DIST_FLOOR))


def test_subsampling_above_cap_is_deterministic():
    x = np.random.default_rng(2).normal(size=(80, 2))
    a = dg.entropy_estimate(x, n_cap=20)
    assert a == dg.entropy_estimate(x, n_cap=20)
    b = dg.entropy_estimate(x, n_cap=20, rng=RngStream(5, "data"))
    assert np.isfinite(b) and a != b


def test_entropy_needs_two_points():
    with pytest.raises(ContractError):
        dg.entropy_estimate([[1.0, 2.0]])


def test_conditional_entropy_weights_by_class_size():
    r = np.random.default_rng(3)
    x = r.normal(size=(30, 2))
    y = np.array([0] * 10 + [1] * 20)
    expected = (10 * dg.entropy_estimate(x[:10]) + 20 * dg.entropy_estimate(x[10:])) / 30
    assert dg.conditional_entropy(x, y, 2) == pytest.approx(expected, rel=1e-12)


def test_singleton_classes_are_skipped():
    x = np.random.default_rng(4).normal(size=(6, 2))
    y = [0, 0, 0, 0, 0, 1]
    assert dg.conditional_entropy(x, y, 2) == pytest.approx(dg.entropy_estimate(x[:5]))


def test_mutual_information_is_difference():
    x = np.random.default_rng(5).normal(size=(40, 3))
    y = np.arange(40) % 4
    h, hc, i = dg.mutual_information(x, y, 4)
    assert i == h - hc


def test_one_class_has_zero_information():
    x = np.random.default_rng(6).normal(size=(20, 3))
    assert dg.mutual_information(x, np.zeros(20, dtype=int), 1)[2] == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_information_is_invariant_to_label_names(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(24, 2))
    y = np.arange(24) % 3
    perm = r.permutation(3)
    assert dg.mutual_information(x, perm[y], 3)[2] == pytest.approx(dg.mutual_information(x, y, 3)[2], rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100))
def test_entropy_is_translation_invariant(seed, shift):
    x = np.random.default_rng(seed).normal(size=(15, 3))
    assert dg.entropy_estimate(x + shift) == pytest.approx(dg.entropy_estimate(x), rel=1e-6, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_grad_norm_identity(seed):
    r = np.random.default_rng(seed)
    W, g = r.normal(size=(5, 4)), r.normal(size=(7, 5))
    y = r.integers(0, 4, size=7)
    direct, identity = dg.ce_grad_norm(W, g, y)
    assert direct == pytest.approx(identity, rel=1e-9)
    # per-sample gradient from the loss itself, batch of one
    ref = np.mean([np.sum(model.ce_loss(W, g[i:i + 1], y[i:i + 1])[1] ** 2) for i in range(7)])
    assert direct == pytest.approx(ref, rel=1e-12)


def test_pca_line_in_r5_has_one_component():
    t = np.linspace(-1, 1, 11)
    direction = np.array([1.0, 2.0, 0.0, -1.0, 0.5])
    x = t[:, None] * direction + 3.0
    proj, var = dg.pca2(x)
    assert var[0] == pytest.approx(np.mean(t ** 2) * direction @ direction)
    assert var[1] <= 1e-8
    assert np.allclose(proj[:, 1], 0.0, atol=1e-8)
    # sign convention: first non-negligible loading positive
    assert proj[-1, 0] > 0


def test_pca_isotropic_plane_in_r4():
    r = np.random.default_rng(12)
    plane = r.normal(size=(4000, 2))
    plane = (plane - plane.mean(axis=0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(plane.T, bias=True))).T
    basis = np.linalg.qr(r.normal(size=(4, 2)))[0]
    proj, var = dg.pca2(plane @ basis.T)
    assert var[0] == pytest.approx(var[1], rel=1e-6)


def test_pca_projection_ignores_translation():
    x = np.random.default_rng(13).normal(size=(30, 4)) * np.array([3.0, 2.0, 1.0, 0.5])
    a, _ = dg.pca2(x)
    b, _ = dg.pca2(x + np.array([10.0, -5.0, 2.0, 7.0]))
    assert np.allclose(a, b, atol=1e-9)


def test_pca_matches_eigendecomposition():
    r = np.random.default_rng(7)
    x = r.normal(size=(200, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.2])
    proj, var = dg.pca2(x)
    xc = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / 200)
    assert np.allclose(var, vals[::-1][:2], rtol=1e-8)
    for j in range(2):
        ref = xc @ vecs[:, -1 - j]
        assert abs(abs(np.dot(ref, proj[:, j])) / (np.linalg.norm(ref) * np.linalg.norm(proj[:, j])) - 1) < 1e-8


def test_pca_handles_near_degenerate_spectrum():
    r = np.random.default_rng(8)
    x = r.normal(size=(100, 6))
    proj, var = dg.pca2(x)
    assert proj.shape == (100, 2) and var[0] >= var[1] >= 0


def test_pca_reports_non_convergence():
    x = np.random.default_rng(9).normal(size=(50, 4)) * np.array([1.0, 0.99, 0.98, 0.97])
    with pytest.raises(dg.ConvergenceError) as info:
        dg.pca2(x, tol=1e-30, max_iter=3)
    assert info.value.iterations == 3


def test_pca_shape_contract():
    with pytest.raises(ContractError):
        dg.pca2(np.zeros((2, 3)))


def test_scatter_example():
    p = np.array([[0.0, 0.0], [0.0, 2.0], [4.0, 0.0], [4.0, 2.0]])
    s = dg.scatter_ratio(p, [0, 0, 1, 1])
    # between = 4 * 2^2 = 16, within = 4 * 1 = 4
    assert s == (4.0, False)


def test_scatter_degenerate():
    s = dg.scatter_ratio([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]], [0, 0, 1])
    assert s.degenerate and s.ratio == dg.SCATTER_MAX


def test_scatter_needs_two_classes():
    with pytest.raises(ContractError):
        dg.scatter_ratio(np.ones((3, 2)), [0, 0, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.01, 100.0))
def test_scatter_is_scale_invariant(seed, c):
    p = np.random.default_rng(seed).normal(size=(12, 2))
    y = np.arange(12) % 3
    assert dg.scatter_ratio(c * p, y).ratio == pytest.approx(dg.scatter_ratio(p, y).ratio, rel=1e-9)


def test_diagnose_and_csv(tmp_path):
    r = np.random.default_rng(10)
    g = r.normal(size=(20, 3))
    y = np.arange(20) % 2
    rep = dg.diagnose(g, y, 2, head=r.normal(size=(3, 2)))
    assert rep.mean_feature_norm == pytest.approx(np.mean(np.sum(g ** 2, axis=1)))
    assert rep.mean_ce_grad_norm is not None
    assert dg.diagnose(g, y, 2).mean_ce_grad_norm is None
    proj, _ = dg.pca2(g)
    dg.write_pca_csv(tmp_path / "pca.csv", proj, y)
    lines = (tmp_path / "pca.csv").read_text().splitlines()
    assert lines[0] == "pc1,pc2,label" and len(lines) == 21
    assert float(lines[1].split(",")[0]) == proj[0, 0]


def test_shuffled_labels_lower_the_ratio():
    r = np.random.default_rng(14)
    y = np.repeat(np.arange(3), 40)
    p = r.normal(size=(120, 2)) + 4.0 * np.array([[0, 0], [1, 0], [0, 1]])[y]
    clustered = dg.scatter_ratio(p, y).ratio
    shuffled = [dg.scatter_ratio(p, r.permutation(y)).ratio for _ in range(20)]
    # the permutation baseline is about (K - 1) / (N - K)
    assert max(shuffled) < 0.2 < clustered


def test_separated_clouds_beat_one_cloud():
    r = np.random.default_rng(15)
    y = np.repeat([0, 1], 50)
    one = r.normal(size=(100, 2))
    two = r.normal(size=(100, 2)) + np.array([[0.0, 0.0], [20.0, 0.0]])[y]
    assert dg.scatter_ratio(two, y).ratio > dg.scatter_ratio(one, y).ratio


def test_identical_points_per_class_hit_the_sentinel():
    s = dg.scatter_ratio([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]], [0, 0, 1, 1])
    assert s == (dg.SCATTER_MAX, True)
