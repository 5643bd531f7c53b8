import numpy as np
import pytest

from dst2r.model import predict_batch
from dst2r.simulation import (
    SimSpec,
    gen_coefficients,
    gen_predictors,
    gen_responses,
    generate_dataset,
    load_dataset,
    make_scenario,
    save_dataset,
)


def test_scenarios_match_published_settings():
    s = make_scenario("3d3d")
    assert (s.predictor_dims, s.response_dims, s.rank, s.sparsity, s.n_samples) == \
        ((8, 8, 8), (4, 4, 4), 2, 0.2, 1000)
    s = make_scenario("3d2d")
    assert (s.predictor_dims, s.response_dims, s.rank) == ((8, 8, 8), (4, 4), 5)
    s = make_scenario("2d2d-sweep")
    assert (s.predictor_dims, s.response_dims, s.sparsity) == ((16, 16), (4, 4), 0.5)


def test_scenario_scaling_and_errors():
    s = make_scenario("3d3d", scale=0.5, seed=3)
    assert s.predictor_dims == (4, 4, 4) and s.response_dims == (2, 2, 2)
    assert s.n_samples == 500 and s.seed == 3
    with pytest.raises(ValueError):
        make_scenario("4d4d")


def test_spec_validation():
    with pytest.raises(ValueError):
        SimSpec((2,), (2,), sparsity=1.5)
    with pytest.raises(ValueError):
        SimSpec((), (2,))
    with pytest.raises(ValueError):
        SimSpec((2,), (2,), noise_sd=-1)


def test_sparsity_zero_gives_dense_factors():
    model = gen_coefficients(SimSpec((5, 4), (3,), rank=3, sparsity=0.0),
                             np.random.default_rng(0))
    assert all(np.count_nonzero(f.beta) == f.mode_extent
               for c in model.components for f in c.factors)


def test_zero_count_follows_floor_rule():
    # sparsity 0.5 on extent 8 -> exactly 4 zeros; extent 5 -> floor(2.5) = 2
    model = gen_coefficients(SimSpec((8, 5), (8,), rank=4, sparsity=0.5),
                             np.random.default_rng(1))
    for c in model.components:
        counts = [f.mode_extent - np.count_nonzero(f.beta) for f in c.factors]
        assert counts == [4, 2, 4]
        assert all(f.is_normalized for f in c.factors)


def test_full_sparsity_is_rejected():
    with pytest.raises(ValueError):
        gen_coefficients(SimSpec((2,), (2,), sparsity=1.0), np.random.default_rng(0))


def test_predictors_are_fair_bits():
    spec = SimSpec((10, 10), (2,), n_samples=1000)
    X = gen_predictors(spec, np.random.default_rng(2))
    assert set(np.unique(X)) <= {0.0, 1.0}
    assert abs(X.mean() - 0.5) <= 0.01


def test_noise_variance():
    spec = SimSpec((3,), (10, 10), rank=1, n_samples=1000, noise_sd=0.3)
    rng = np.random.default_rng(3)
    model = gen_coefficients(spec, rng)
    X = gen_predictors(spec, rng)
    Y = gen_responses(X, model, spec.noise_sd, rng)
    resid = Y - predict_batch(X, model)
    assert abs(resid.var() / 0.09 - 1.0) <= 0.03


def test_zero_noise_gives_exact_predictions():
    ds = generate_dataset(SimSpec((3, 2), (2,), n_samples=20, noise_sd=0.0))
    assert np.array_equal(ds.Y, predict_batch(ds.X, ds.true_model))


def test_same_seed_same_dataset():
    spec = SimSpec((3, 3), (2, 2), n_samples=30, seed=11)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y) and a.true_model == b.true_model
    c = generate_dataset(SimSpec((3, 3), (2, 2), n_samples=30, seed=12))
    assert not np.array_equal(a.Y, c.Y)


def test_dataset_directory_roundtrip(tmp_path):
    ds = generate_dataset(SimSpec((3, 2), (2,), n_samples=7, seed=4))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.Y, ds.Y)
    assert back.true_model == ds.true_model and back.spec == ds.spec
    assert len(ds.xs) == 7 and ds.ys[0].shape == (2,)
