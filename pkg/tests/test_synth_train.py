from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafe.bench import BenchConfig, BenchmarkDiverged, run_benchmark, synthetic_infidelity_perturbation
from cafe.nn import Linear
from cafe.synth import SynthConfig, SyntheticDataset, generate
from cafe.train import AdamW, TrainConfig, TrainingDivergence, fit, train


# --- data generation -------------------------------------------------------------


def test_no_cancellation_when_l_is_zero():
    ds = generate(SynthConfig(D=3, l=0.0, n_samples=500))
    assert not ds.C.any()
    np.testing.assert_allclose(ds.y, ds.X @ ds.w, atol=1e-12)
    np.testing.assert_array_equal(ds.truth[:, 3:], 0.0)


def test_full_cancellation_when_l_is_one():
    ds = generate(SynthConfig(D=3, l=1.0, n_samples=500))
    assert ds.C.all()
    np.testing.assert_array_equal(ds.y, 0.0)


def test_cancellation_rate_within_three_sigma():
    l, n, D = 0.3, 10_000, 2
    ds = generate(SynthConfig(D=D, l=l, n_samples=n, seed=5))
    sigma = np.sqrt(l * (1 - l) / (n * D))
    assert abs(ds.C.mean() - l) <= 3 * sigma


@given(seed=st.integers(0, 10_000), D=st.integers(1, 5), l=st.floats(0, 1))
@settings(max_examples=30)
def test_truth_sums_to_label(seed, D, l):
    ds = generate(SynthConfig(D=D, l=l, n_samples=50, seed=seed))
    np.testing.assert_allclose(ds.truth.sum(axis=1), ds.y, rtol=0, atol=1e-12 * max(1.0, np.abs(ds.y).max()))
    assert ds.truth.shape == (50, 2 * D)


def test_weights_in_range_and_determinism():
    cfg = SynthConfig(D=4, weight_range=(0.5, 2.0), n_samples=20, seed=9)
    a, b = generate(cfg), generate(cfg)
    assert np.all((a.w >= 0.5) & (a.w <= 2.0))
    np.testing.assert_array_equal(a.features(), b.features())
    assert not np.array_equal(a.X, generate(SynthConfig(D=4, n_samples=20, seed=10)).X)


@pytest.mark.parametrize(
    "kwargs",
    [{"D": 0}, {"l": 1.5}, {"s": 0.0}, {"weight_range": (2.0, 1.0)}, {"n_samples": 0}, {"split": (0.5, 0.5, 0.5)}],
)
def test_synth_config_validation(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


def test_split_sizes():
    sp = generate(SynthConfig(n_samples=100)).split_indices()
    assert [len(sp[k]) for k in ("train", "val", "test")] == [60, 20, 20]


def test_csv_round_trip(tmp_path):
    ds = generate(SynthConfig(D=2, n_samples=30, seed=2))
    sidecar = ds.to_csv(tmp_path / "data.csv")
    assert sidecar.exists()
    back = SyntheticDataset.from_csv(tmp_path / "data.csv", w=ds.w)
    np.testing.assert_array_equal(back.features(), ds.features())
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.truth, ds.truth)


# --- training --------------------------------------------------------------------


def test_adamw_step_matches_formula():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    opt.step([g])
    # first step: m_hat = g, v_hat = g^2
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)
    opt.step([g])
    m = 0.9 * 0.1 * g + 0.1 * g
    v = 0.999 * 0.001 * g * g + 0.001 * g * g
    expected = expected * (1 - 0.001) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)


def test_constant_zero_labels_are_learned():
    ds = generate(SynthConfig(D=2, l=1.0, n_samples=400))
    _, rep = train(ds, TrainConfig(hidden_dims=(8,), epochs=40, learning_rate=1e-2))
    assert rep.test_rmse <= 1e-2


def test_linear_model_recovers_least_squares_weights():
    ds = generate(SynthConfig(D=3, l=0.0, n_samples=1000, seed=3))
    F = ds.features()[:, :3]
    oracle, *_ = np.linalg.lstsq(F, ds.y, rcond=None)
    np.testing.assert_allclose(oracle, ds.w, rtol=1e-10)
    net, _ = fit(F, ds.y, TrainConfig(hidden_dims=(), epochs=200, learning_rate=5e-2, weight_decay=0.0), np.random.default_rng(0))
    np.testing.assert_allclose(net.layers[0].weights[:, 0], oracle, rtol=0.05)


def test_divergence_names_the_epoch():
    ds = generate(SynthConfig(D=2, n_samples=200))
    with pytest.raises(TrainingDivergence) as info:
        train(ds, TrainConfig(hidden_dims=(4,), epochs=5, learning_rate=1e300))
    assert info.value.epoch == 0
    assert "epoch 0" in str(info.value)
    assert info.value.report.diverged_at == 0


def test_restarts_keep_best_validation():
    ds = generate(SynthConfig(D=2, n_samples=300))
    _, rep = train(ds, TrainConfig(hidden_dims=(4,), epochs=3, n_restarts=3))
    assert len(rep.val_rmse) == 3
    assert rep.best_restart == int(np.argmin(rep.val_rmse))


def test_bias_free_training_keeps_zero_biases():
    ds = generate(SynthConfig(D=2, n_samples=200))
    net, _ = train(ds, TrainConfig(hidden_dims=(6,), epochs=3, use_bias=False))
    assert all(np.all(L.bias == 0) for L in net.layers if isinstance(L, Linear))


@pytest.mark.parametrize(
    "kwargs", [{"hidden_dims": (0,)}, {"epochs": 0}, {"learning_rate": 0.0}, {"weight_decay": -1.0}, {"batch_size": -1}]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# --- benchmark -------------------------------------------------------------------


SMALL = SynthConfig(D=2, n_samples=300)
QUICK = TrainConfig(hidden_dims=(8,), epochs=5)


def test_single_method_benchmark():
    rep = run_benchmark(SMALL, QUICK, BenchConfig(methods=("gi",), seeds=(0, 1)))
    assert {r.method for r in rep.records} == {"model", "gi"}
    assert rep.meta["completed_seeds"] == [0, 1]
    assert rep.find("gi", "rmse").std > 0


def test_cafe_at_zero_matches_gradient_input_on_bias_free_relu():
    rep = run_benchmark(
        SMALL, TrainConfig(hidden_dims=(8, 8), epochs=5, use_bias=False), BenchConfig(methods=("cafe", "gi"), c_values=(0.0,), seeds=(0,))
    )
    assert rep.find("cafe", "rmse", 0.0).mean == pytest.approx(rep.find("gi", "rmse").mean, abs=1e-9)


def test_infidelity_needs_perturbation():
    with pytest.raises(ValueError):
        run_benchmark(SMALL, QUICK, BenchConfig(methods=("gi",), metrics=("infidelity",)))


def test_infidelity_benchmark_runs():
    bench = BenchConfig(methods=("gi",), seeds=(0,), metrics=("rmse", "infidelity"), n_eval=10,
                        perturb=synthetic_infidelity_perturbation(2, n=5))
    rep = run_benchmark(SMALL, QUICK, bench)
    assert rep.find("gi", "infidelity").mean >= 0


def test_divergence_keeps_partial_report():
    bad = TrainConfig(hidden_dims=(8,), epochs=5, learning_rate=1e300)
    with pytest.raises(BenchmarkDiverged) as info:
        run_benchmark(SMALL, bad, BenchConfig(methods=("gi",), seeds=(0,)))
    rep = info.value.report
    assert rep.meta["diverged"]["seed"] == 0
    assert rep.meta["completed_seeds"] == []


def test_unknown_method_or_metric():
    with pytest.raises(ValueError):
        BenchConfig(methods=("nope",))
    with pytest.raises(ValueError):
        BenchConfig(metrics=("accuracy",))
