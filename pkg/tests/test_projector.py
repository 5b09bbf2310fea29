import numpy as np
import pytest
from _data import anisotropic_set, gaussian_set, geometric_set, trailing_sum
from hypothesis import given, settings
from hypothesis import strategies as st

from ipakit.errors import DegenerateRankError, DivergenceError, NonFiniteError, ShapeError
from ipakit.featureset import FeatureSet
from ipakit.matcore import make_rng
from ipakit.projector import (
    GhaState,
    Projector,
    exact_pca,
    fit_projector,
    gha_epoch,
    gha_finalize,
    gha_fit,
    gha_init,
    ipca_finalize,
    ipca_fit,
    ipca_init,
    ipca_update,
    orthonormality_defect,
    random_projector,
    reconstruction_error,
    subspace_distance,
)


def random_rotation(rng, k):
    q, _ = np.linalg.qr(rng.standard_normal((k, k)))
    return q


# -- exact PCA ------------------------------------------------------------------


def test_exact_pca_one_dimensional_data():
    x = np.array([[1.0, 0], [-1, 0], [2, 0], [-2, 0]])
    p = exact_pca(x, 1)
    np.testing.assert_array_equal(p.u, [[1.0, 0.0]])
    assert reconstruction_error(p, x) == 0.0


def test_exact_pca_full_rank_identity():
    x = anisotropic_set(1, d=6)
    p = exact_pca(x, 6)
    assert reconstruction_error(p, x) < 1e-12
    assert orthonormality_defect(p.u) < 1e-12


def test_exact_pca_trailing_eigenvalues_oracle():
    x = gaussian_set(0)
    p = exact_pca(FeatureSet(x), 3)
    # LAPACK eigvalsh is independent of the Jacobi routine used by exact_pca
    assert abs(reconstruction_error(p, x) - trailing_sum(x, 3)) <= 1e-9 * trailing_sum(x, 3)


def test_exact_pca_centered_uses_covariance():
    x = anisotropic_set(2)
    p = exact_pca(x, 3, centered=True)
    ev = np.sort(np.linalg.eigvalsh(np.cov(x.T, bias=True)))
    np.testing.assert_allclose(reconstruction_error(p, x), ev[:-3].sum(), rtol=1e-9)
    np.testing.assert_allclose(p.mean, x.mean(axis=0))


def test_exact_pca_provenance():
    fs = FeatureSet(gaussian_set(0), weight_name="layer0.w_q", layer_id=0, model_hash="abc")
    p = exact_pca(fs, 2)
    assert (p.weight_name, p.model_hash, p.seen, p.algorithm) == ("layer0.w_q", "abc", 200, "exact")


def test_exact_pca_errors():
    with pytest.raises(ShapeError):
        exact_pca(np.ones((2, 4)), 3)
    with pytest.raises(ShapeError):
        exact_pca(np.ones((10, 2)), 3)
    with pytest.raises(NonFiniteError):
        exact_pca(np.array([[1.0, np.nan], [0.0, 1.0]]), 1)


@pytest.mark.parametrize("eps", [1e-2, 1e-1])
def test_exact_pca_is_optimal_under_perturbation(eps):
    rng = make_rng(9)
    for trial in range(20):
        x = anisotropic_set(100 + trial)
        p = exact_pca(x, 3)
        base = reconstruction_error(p, x)
        q, _ = np.linalg.qr((p.u + eps * rng.standard_normal(p.u.shape)).T)
        pert = Projector(u=q.T, algorithm="random")
        assert reconstruction_error(pert, x) >= base - 1e-10


def test_reconstruction_error_rotation_invariant():
    rng = make_rng(10)
    x = anisotropic_set(3)
    p = exact_pca(x, 4)
    rot = Projector(u=random_rotation(rng, 4) @ p.u, algorithm="random")
    assert abs(reconstruction_error(rot, x) - reconstruction_error(p, x)) < 1e-10


def test_reconstruction_error_examples():
    x = anisotropic_set(4)
    zero = Projector(u=np.zeros((2, x.shape[1])), algorithm="random")
    np.testing.assert_allclose(reconstruction_error(zero, x), np.mean(np.sum(x * x, axis=1)))
    sub = make_rng(5).standard_normal((50, 2)) @ make_rng(6).standard_normal((2, 5))
    span = exact_pca(sub, 2)
    assert reconstruction_error(span, sub) < 1e-12
    with pytest.raises(ShapeError):
        reconstruction_error(span, np.ones((3, 4)))


# -- IPCA -----------------------------------------------------------------------------


def test_ipca_init_examples():
    s = ipca_init(8, 3, False)
    assert (s.rank_cap, s.seen, s.k) == (3, 0, 0)
    ipca_init(4, 4, True)
    with pytest.raises(ShapeError):
        ipca_init(2, 3, False)


def test_ipca_single_batch_equals_exact():
    x = gaussian_set(1)
    for d_h in (1, 3, 8):
        s = ipca_update(ipca_init(8, d_h), x)
        assert subspace_distance(ipca_finalize(s).u, exact_pca(x, d_h).u) < 1e-8


def test_ipca_single_batch_centered_equals_exact_centered():
    x = anisotropic_set(7)
    p = ipca_fit(x, 3, batch_size=x.shape[0], centered=True)
    q = exact_pca(x, 3, centered=True)
    assert subspace_distance(p.u, q.u) < 1e-8
    np.testing.assert_allclose(p.mean, q.mean, atol=1e-12)


def test_ipca_four_batches_close_to_exact():
    x = gaussian_set(0)
    p = ipca_fit(x, 3, batch_size=50)
    assert subspace_distance(p.u, exact_pca(x, 3).u) < 0.05
    assert p.seen == 200 and orthonormality_defect(p.u) < 1e-8


@pytest.mark.parametrize("batch", [1, 10])
def test_ipca_batch_size_robustness(batch):
    x = geometric_set(0)
    full = ipca_fit(x, 4, batch_size=x.shape[0])
    assert subspace_distance(ipca_fit(x, 4, batch_size=batch).u, full.u) < 0.05


def test_ipca_matches_sklearn_without_buffer():
    # with no extra buffer rows the update is the canonical Ross-style one
    sk = pytest.importorskip("sklearn.decomposition")
    x = anisotropic_set(8, n=240, d=9)
    ours = ipca_fit(x, 3, batch_size=40, centered=True, oversample=0)
    ref = sk.IncrementalPCA(n_components=3, batch_size=40).fit(x)
    assert subspace_distance(ours.u, ref.components_) < 1e-10
    np.testing.assert_allclose(ours.mean, ref.mean_, atol=1e-12)


def test_ipca_state_invariants():
    x = gaussian_set(2)
    s = ipca_init(8, 3)
    for i in range(0, 200, 30):
        s = ipca_update(s, x[i : i + 30])
        assert orthonormality_defect(s.components) < 1e-8
        assert np.all(np.diff(s.singular_values) <= 0)
        assert s.k <= s.keep
    assert s.seen == 200


def test_ipca_update_errors():
    s = ipca_init(4, 2)
    with pytest.raises(ShapeError):
        ipca_update(s, np.ones((3, 5)))
    with pytest.raises(ShapeError):
        ipca_update(s, np.ones((0, 4)))


def test_ipca_finalize_errors():
    s = ipca_update(ipca_init(4, 3), np.eye(4)[:2])
    with pytest.raises(ShapeError):
        ipca_finalize(s)
    rank1 = np.outer(np.arange(1.0, 11.0), [1.0, 2.0, 0.5])
    s = ipca_fit_state = ipca_init(3, 2)
    for row in rank1:
        s = ipca_update(s, row[None, :])
    with pytest.raises(DegenerateRankError):
        ipca_finalize(s)
    padded = ipca_finalize(s, complete_basis=True)
    assert padded.stats["padded_rows"] == 1 and orthonormality_defect(padded.u) < 1e-12
    assert ipca_fit_state.seen == 0


# -- GHA ------------------------------------------------------------------------------


def test_gha_zero_response():
    s = gha_epoch(GhaState(u=np.array([[1.0, 0.0]]), learning_rate=0.1),
                  np.array([[0.0, 1.0]]), [0])
    np.testing.assert_array_equal(s.u, [[1.0, 0.0]])
    assert s.epochs_done == 1


def test_gha_fixed_point():
    s = gha_epoch(GhaState(u=np.array([[1.0, 0.0]]), learning_rate=0.1),
                  np.array([[1.0, 0.0]]), [0])
    np.testing.assert_array_equal(s.u, [[1.0, 0.0]])


def test_gha_matches_hand_written_sanger_rule():
    rng = make_rng(12)
    x = rng.standard_normal((5, 4))
    u0 = rng.standard_normal((2, 4)) * 0.3
    ref = u0.copy()
    for i in [3, 1, 4, 0, 2]:
        y = ref @ x[i]
        ref = ref + 0.01 * (np.outer(y, x[i]) - np.tril(np.outer(y, y)) @ ref)
    out = gha_epoch(GhaState(u=u0, learning_rate=0.01), x, [3, 1, 4, 0, 2])
    np.testing.assert_allclose(out.u, ref, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_gha_converges(seed):
    x = gaussian_set(0)
    p = gha_fit(x, 3, 1e-3, 50, seed)
    assert subspace_distance(p.u, exact_pca(x, 3).u) < 0.1
    assert np.all(np.abs(np.linalg.norm(p.u, axis=1) - 1) < 0.05)
    assert (p.algorithm, p.centered) == ("gha", False) and not p.mean.any()


def test_gha_divergence_is_reported():
    x = gaussian_set(0) * 100
    with pytest.raises(DivergenceError):
        gha_fit(x, 3, 1.0, 3, 0)


def test_gha_errors():
    state = gha_init(3, 2, 1e-3, make_rng(0))
    with pytest.raises(ValueError):
        gha_finalize(state)
    with pytest.raises(ShapeError):
        gha_epoch(state, np.ones((4, 5)), range(4))
    with pytest.raises(ValueError):
        gha_epoch(state, np.ones((4, 3)), [0, 0, 1, 2])
    with pytest.raises(ValueError):
        gha_init(3, 2, 0.0, make_rng(0))


def test_ipca_beats_gha_on_reconstruction():
    x = gaussian_set(0)
    ipca = ipca_fit(x, 3, batch_size=50)
    for seed in range(5):
        gha = gha_fit(x, 3, 1e-3, 50, seed)
        assert reconstruction_error(ipca, x) <= reconstruction_error(gha, x) + 1e-6


# -- random baseline ---------------------------------------------------------------------


def test_random_projector():
    a = random_projector(16, 4, make_rng(3))
    b = random_projector(16, 4, make_rng(3))
    assert a.u.tobytes() == b.u.tobytes() and a.algorithm == "random"
    big = random_projector(1000, 1000, make_rng(4))
    assert abs(big.u.var() * 1000 - 1.0) < 0.05
    with pytest.raises(ShapeError):
        random_projector(4, 0, make_rng(0))
    with pytest.raises(ShapeError):
        random_projector(4, 5, make_rng(0))


def test_fit_projector_dispatch():
    x = gaussian_set(3)
    for algo in ("exact", "ipca", "gha", "random"):
        assert fit_projector(x, 2, algo).algorithm == algo
    with pytest.raises(ValueError):
        fit_projector(x, 2, "svd")


def test_projector_validation():
    with pytest.raises(ShapeError):
        Projector(u=np.ones((3, 2)), algorithm="exact")
    with pytest.raises(ValueError):
        Projector(u=np.ones((1, 2)), algorithm="exact", mean=np.ones(2))


# -- subspace distance -----------------------------------------------------------------


def test_subspace_distance_examples():
    rng = make_rng(13)
    u = rng.standard_normal((3, 7))
    assert subspace_distance(u, u) < 1e-8
    assert subspace_distance([[1.0, 0.0]], [[0.0, 1.0]]) == pytest.approx(np.pi / 2)
    assert subspace_distance(u, random_rotation(rng, 3) @ u) < 1e-8
    with pytest.raises(ShapeError):
        subspace_distance(np.array([[1.0, 0.0], [2.0, 0.0]]), np.eye(2))


def test_subspace_distance_agrees_with_arccos_definition():
    rng = make_rng(14)
    for _ in range(10):
        a, b = rng.standard_normal((2, 3, 6))
        qa, qb = np.linalg.qr(a.T)[0].T, np.linalg.qr(b.T)[0].T
        ref = np.arccos(np.clip(np.linalg.svd(qa @ qb.T, compute_uv=False).min(), -1, 1))
        assert abs(subspace_distance(a, b) - ref) < 1e-10


def test_subspace_distance_resolves_tiny_angles():
    c, s = np.cos(1e-9), np.sin(1e-9)
    assert subspace_distance([[1.0, 0.0, 0.0]], [[c, s, 0.0]]) == pytest.approx(1e-9, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32))
def test_subspace_distance_properties(k, seed):
    rng = make_rng(seed)
    a, b = rng.standard_normal((2, k, 6))
    d = subspace_distance(a, b)
    assert 0.0 <= d <= np.pi / 2 + 1e-12
    assert abs(d - subspace_distance(b, a)) < 1e-9
