import json

import numpy as np
import pytest

from lamp import evaluation as ev
from lamp import families as fam_mod
from lamp.mesher import (
    OccupancyGrid,
    VoxelGrid,
    grid_nodes,
    marching_cubes,
    sample_surface,
)

BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def oracle_chamfer(X, Y):
    # brute-force difference form, numerically independent of the dot form
    d2 = ((np.asarray(X)[:, None, :] - np.asarray(Y)[None, :, :]) ** 2).sum(axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def analytic_mesh(family_id, params, res=40):
    family = fam_mod.get_family(family_id)
    inst = fam_mod.ShapeInstance(family, params)
    pts = grid_nodes((res, res, res), BOUNDS)
    vals = fam_mod.analytic_sdf(inst, pts).astype(np.float32)
    return marching_cubes(VoxelGrid((res, res, res), BOUNDS, vals))


def analytic_cloud(family_id, params, n=512, res=40, seed=0):
    return sample_surface(analytic_mesh(family_id, params, res=res), n, seed=seed)


# ---------------------------------------------------------------- chamfer


def test_chamfer_identical_clouds_is_zero():
    X = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]])
    assert ev.chamfer(X, X) == 0.0


def test_chamfer_unit_offset_singletons():
    assert ev.chamfer([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]) == pytest.approx(2.0, abs=1e-12)


def test_chamfer_matches_bruteforce_oracle():
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(512, 3)) * 2.0
        Y = rng.normal(size=(512, 3)) * 2.0 + rng.normal(size=3)
        got = ev.chamfer(X, Y)
        want = oracle_chamfer(X, Y)
        assert abs(got - want) < 1e-9 * max(1.0, want)


def test_chamfer_symmetric_and_nonnegative():
    rng = np.random.default_rng(7)
    for _ in range(5):
        X = rng.normal(size=(64, 3))
        Y = rng.normal(size=(48, 3))
        assert ev.chamfer(X, Y) == ev.chamfer(Y, X) >= 0.0
    # permuting a cloud leaves it equal as a set
    assert ev.chamfer(X, X[::-1]) < 1e-12


def test_chamfer_rejects_empty_and_misshaped():
    with pytest.raises(ev.MetricError):
        ev.chamfer(np.zeros((0, 3)), np.zeros((4, 3)))
    with pytest.raises(ev.MetricError):
        ev.chamfer(np.zeros((4, 2)), np.zeros((4, 3)))


# ---------------------------------------------------------------- iou


def _grid_from_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    return OccupancyGrid(resolution=mask.shape[::-1], bounds=BOUNDS,
                         occupied=mask.reshape(-1))


def test_iou_identical_and_disjoint():
    rng = np.random.default_rng(3)
    mask = rng.random((4, 4, 4)) > 0.5
    A = _grid_from_mask(mask)
    assert ev.iou(A, A) == 1.0
    disj = _grid_from_mask(~mask)
    inter = np.logical_and(mask, ~mask).sum()
    assert inter == 0
    assert ev.iou(A, disj) == 0.0


def test_iou_nested_boxes_counting_oracle():
    inner = np.zeros((4, 4, 4), dtype=bool)
    inner[1:3, 1:3, 1:3] = True  # 8 voxels
    outer = np.ones((4, 4, 4), dtype=bool)  # 64 voxels
    assert inner.sum() == 8 and outer.sum() == 64
    assert ev.iou(_grid_from_mask(inner), _grid_from_mask(outer)) == 8 / 64


def test_iou_both_empty_is_one_and_growth_is_monotone():
    empty = _grid_from_mask(np.zeros((3, 3, 3), dtype=bool))
    assert ev.iou(empty, empty) == 1.0
    base = np.zeros((3, 3, 3), dtype=bool)
    base[0, 0, 0] = True
    ref = np.ones((3, 3, 3), dtype=bool)
    grown = base.copy()
    grown[1, 1, 1] = True  # extra voxel inside the reference
    assert ev.iou(_grid_from_mask(grown), _grid_from_mask(ref)) > ev.iou(
        _grid_from_mask(base), _grid_from_mask(ref)
    )


def test_iou_shape_mismatch_rejected():
    A = _grid_from_mask(np.zeros((3, 3, 3), dtype=bool))
    B = _grid_from_mask(np.zeros((4, 4, 4), dtype=bool))
    with pytest.raises(ev.MetricError):
        ev.iou(A, B)


# ---------------------------------------------------------------- mmd


def test_mmd_identical_singletons():
    # coordinates exact in binary so self-distance is exactly zero
    cloud = np.array([[0.0, 0.5, 1.0], [2.0, -0.25, 0.75], [-1.5, 3.0, 0.125]])
    assert ev.mmd([cloud], [cloud]) == 0.0


def test_mmd_picks_minimum_reference():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(32, 3))
    r1 = rng.normal(size=(32, 3))
    r2 = g + 0.01
    want = min(ev.chamfer(g, r1), ev.chamfer(g, r2))
    assert ev.mmd([g], [r1, r2]) == want


def test_mmd_matches_double_loop_oracle():
    rng = np.random.default_rng(5)
    gen = [rng.normal(size=(32, 3)) for _ in range(10)]
    ref = [rng.normal(size=(32, 3)) for _ in range(10)]
    want = np.mean([min(oracle_chamfer(g, r) for r in ref) for g in gen])
    assert ev.mmd(gen, ref) == pytest.approx(float(want), abs=1e-9)


def test_mmd_empty_sets_rejected():
    cloud = np.zeros((4, 3))
    with pytest.raises(ev.MetricError):
        ev.mmd([], [cloud])
    with pytest.raises(ev.MetricError):
        ev.mmd([cloud], [])


# ------------------------------------------------------- regression scores


def test_regression_perfect_predictions():
    t = np.array([0.3, -1.2, 4.0, 2.5])
    out = ev.regression_scores(t, t)
    assert out == {"mae": 0.0, "r2": 1.0}


def test_regression_mean_prediction_zero_r2():
    t = np.array([1.0, 2.0, 3.0, 10.0])
    out = ev.regression_scores(t, np.full(4, t.mean()))
    assert out["r2"] == pytest.approx(0.0, abs=1e-15)


def test_regression_hand_case():
    # worked by hand: |errs| = .1 .1 .2 .2 0 so MAE = .12;
    # SS_res = .01+.01+.04+.04 = .10, SS_tot = 4+1+0+1+4 = 10, R2 = .99
    t = [1.0, 2.0, 3.0, 4.0, 5.0]
    p = [1.1, 1.9, 3.2, 3.8, 5.0]
    out = ev.regression_scores(t, p)
    assert out["mae"] == pytest.approx(0.12, abs=1e-12)
    assert out["r2"] == pytest.approx(0.99, abs=1e-12)


def test_regression_error_paths():
    with pytest.raises(ev.MetricError):
        ev.regression_scores([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])  # constant targets
    with pytest.raises(ev.MetricError):
        ev.regression_scores([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ev.MetricError):
        ev.regression_scores([1.0], [1.0])


# ---------------------------------------------------------------- mds


def _pairwise(coords):
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def test_mds_equilateral_triangle():
    D = np.ones((3, 3)) - np.eye(3)
    coords = ev.mds_embed(D)
    assert coords.shape == (3, 2)
    got = _pairwise(coords)
    assert np.abs(got - D).max() < 1e-6


def test_mds_reconstructs_planar_configuration():
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(7, 2)) * 1.5
    D = _pairwise(pts)
    coords = ev.mds_embed(D)
    assert np.abs(_pairwise(coords) - D).max() < 1e-6


def test_mds_single_point():
    assert np.array_equal(ev.mds_embed(np.zeros((1, 1))), np.zeros((1, 2)))


def test_mds_all_zero_distances_warns_degenerate():
    with pytest.warns(ev.DegenerateEmbeddingWarning):
        coords = ev.mds_embed(np.zeros((3, 3)))
    assert np.allclose(coords, 0.0)


def test_mds_input_validation():
    with pytest.raises(ev.MetricError):
        ev.mds_embed(np.zeros((2, 3)))
    bad_diag = np.ones((3, 3))
    with pytest.raises(ev.MetricError):
        ev.mds_embed(bad_diag)
    asym = np.zeros((3, 3))
    asym[0, 1] = 1.0
    with pytest.raises(ev.MetricError):
        ev.mds_embed(asym)


# ---------------------------------------------------------------- encoder


def test_embedding_deterministic_and_seed_sensitive():
    cloud = np.random.default_rng(2).normal(size=(128, 3))
    e1 = ev.embed_cloud(cloud, encoder_seed=0)
    e2 = ev.embed_cloud(cloud, encoder_seed=0)
    assert e1.shape == (256,) and np.array_equal(e1, e2)
    assert not np.array_equal(e1, ev.embed_cloud(cloud, encoder_seed=1))


def test_embedding_permutation_and_duplication_invariant():
    rng = np.random.default_rng(4)
    cloud = rng.normal(size=(100, 3))
    perm = cloud[rng.permutation(100)]
    dup = np.concatenate([cloud, cloud[:37]])
    base = ev.embed_cloud(cloud)
    assert np.array_equal(base, ev.embed_cloud(perm))
    assert np.array_equal(base, ev.embed_cloud(dup))


def test_embedding_separates_distinct_shapes():
    """Distinct shapes must differ by far more than the resampling noise floor."""
    for enc_seed in (0, 1, 2):
        ball = analytic_cloud("ellipsoid", [0.5, 0.5, 0.5], seed=10)
        ball2 = analytic_cloud("ellipsoid", [0.5, 0.5, 0.5], seed=11)
        slab = analytic_cloud("ellipsoid", [0.8, 0.55, 0.2], seed=12)
        e_ball = ev.embed_cloud(ball, enc_seed)
        noise = np.linalg.norm(e_ball - ev.embed_cloud(ball2, enc_seed))
        signal = np.linalg.norm(e_ball - ev.embed_cloud(slab, enc_seed))
        assert signal > 10.0 * noise


# ---------------------------------------------------------------- lasso


def test_lasso_zero_lambda_reduces_to_ols():
    rng = np.random.default_rng(12)
    X0 = rng.normal(size=(60, 8))
    Q, _ = np.linalg.qr(X0 - X0.mean(axis=0))  # orthonormal, zero-mean columns
    y = rng.normal(size=60)
    beta, b0 = ev.lasso_fit(Q, y, 0.0)
    beta_ols = Q.T @ (y - y.mean())
    assert np.abs(beta - beta_ols).max() < 1e-6
    assert abs(b0 - y.mean()) < 1e-6


def test_lasso_soft_threshold_kills_coefficient():
    rng = np.random.default_rng(13)
    x = rng.normal(size=40)
    x = (x - x.mean()) / x.std()  # col_sq = 1
    y = rng.normal(size=40)
    lam_kill = abs(x @ (y - y.mean())) / 40
    for lam in (lam_kill, 1.5 * lam_kill):
        beta, b0 = ev.lasso_fit(x[:, None], y, lam)
        assert beta[0] == 0.0
        assert b0 == pytest.approx(y.mean())


def test_lasso_noiseless_synthetic_heldout_r2():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(200, 40))
    beta_true = np.zeros(40)
    beta_true[[2, 7, 11, 23, 35]] = [2.0, -3.0, 1.5, 0.8, -1.2]
    y = X @ beta_true + 1.0
    lam = ev._cv_lambda_ranking(X[:150], y[:150])[0]
    beta, b0 = ev.lasso_fit(X[:150], y[:150], lam)
    pred = X[150:] @ beta + b0
    assert ev.regression_scores(y[150:], pred)["r2"] > 0.999


def test_lasso_nonconvergence_raises(monkeypatch):
    monkeypatch.setattr(ev, "LASSO_MAX_SWEEPS", 1)
    rng = np.random.default_rng(15)
    base = rng.normal(size=(30, 1))
    X = np.hstack([base, base + rng.normal(size=(30, 1)) * 0.01])
    y = rng.normal(size=30)
    with pytest.raises(ev.FitError, match="lambda"):
        ev.lasso_fit(X, y, 0.0)


# ---------------------------------------------------------------- surrogate


@pytest.fixture(scope="module")
def ellipsoid_training_set():
    family = fam_mod.get_family("ellipsoid")
    lo, hi = np.asarray(family.bounds).T
    rng = np.random.default_rng(21)
    P = lo + rng.random((26, 3)) * (hi - lo)
    clouds = [
        analytic_cloud("ellipsoid", P[i], n=512, seed=100 + i) for i in range(len(P))
    ]
    return clouds, P


def test_fit_surrogate_recovers_params(ellipsoid_training_set):
    clouds, P = ellipsoid_training_set
    # lambda large enough for coordinate descent to settle with p >> n
    model = ev.fit_surrogate(clouds, P, lam=3e-2, n_sample_points=512)
    assert model.d_out == 3
    assert model.train_r2.min() > 0.95
    # held-out shapes the fit never saw
    family = fam_mod.get_family("ellipsoid")
    rng = np.random.default_rng(22)
    lo, hi = np.asarray(family.bounds).T
    held = lo + rng.random((4, 3)) * (hi - lo)
    errs = []
    for i, p in enumerate(held):
        mesh = analytic_mesh("ellipsoid", p)
        pred = model.predict(mesh, seed=200 + i)
        errs.append(np.abs(pred - p))
    assert np.mean(errs) < 0.05


def test_surrogate_json_round_trip(ellipsoid_training_set):
    clouds, P = ellipsoid_training_set
    model = ev.fit_surrogate(clouds[:20], P[:20], lam=3e-2, n_sample_points=512)
    clone = ev.SurrogateModel.from_json(model.to_json())
    for name in ("coefs", "intercepts", "lambdas", "train_r2",
                 "feat_mean", "feat_std", "target_mean", "target_std"):
        assert np.array_equal(getattr(model, name), getattr(clone, name)), name
    assert clone.encoder_seed == model.encoder_seed
    assert clone.n_sample_points == model.n_sample_points
    emb = np.random.default_rng(30).normal(size=256)
    assert np.array_equal(model.predict_embedding(emb), clone.predict_embedding(emb))
    json.loads(model.to_json())  # stays plain JSON


def test_fit_surrogate_input_validation():
    cloud = np.zeros((8, 3))
    with pytest.raises(ev.FitError, match="20"):
        ev.fit_surrogate([cloud] * 5, np.zeros((5, 2)), lam=1e-2)
    with pytest.raises(ev.FitError):
        ev.fit_surrogate([cloud] * 21, np.zeros((20, 2)), lam=1e-2)
