"""
測試解耦評估指標
"""

import sys
import os
sys.path.append(os.path.dirname(__file__))

import numpy as np
import pandas as pd
import pytest

from disentanglement_metrics import (
    SCORE_COLUMNS, CodeFactorMatrix, MiEstimatorConfig, ScoreConfig, analytic_gaussian_mi,
    beta_vae_metric, dci, dci_from_importance, discrete_entropy, discrete_mi, discretize_codes,
    dv_mi_estimate, episodic_accuracy, factor_vae_metric, mig, prototype_probabilities,
    rsa_labels, rsa_matrix, score_row, write_score_report,
)
from synthgen import make_dataset, sample_gaussian_pair

FAST = ScoreConfig(eval_train=500, eval_test=300, eval_batch=64, seed=0)
CHANCE = ScoreConfig(eval_train=2000, eval_test=2000, eval_batch=64, seed=1)


@pytest.fixture(scope='module')
def grid():
    return make_dataset(seed=0).grid


def _noise(rows: int, units: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(rows, units))


# ========== 互資訊 ==========

def test_analytic_gaussian_mi():
    assert analytic_gaussian_mi(0.0) == 0.0
    assert analytic_gaussian_mi(-0.9) == analytic_gaussian_mi(0.9)
    assert analytic_gaussian_mi(0.9) == pytest.approx(0.8304, abs=1e-4)
    with pytest.raises(ValueError):
        analytic_gaussian_mi(1.0)


def test_discrete_mi_oracles():
    assert discrete_mi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert discrete_mi([0, 1, 0, 1], [0, 1, 0, 1]) == pytest.approx(np.log(2.0))
    a = [0] * 5 + [1] * 5
    b = [0, 0, 0, 0, 1, 0, 1, 1, 1, 1]
    assert discrete_mi(a, b) == pytest.approx(0.1928, abs=1e-4)


def test_discrete_mi_length_mismatch():
    with pytest.raises(ValueError):
        discrete_mi([0, 1], [0, 1, 1])


def test_discrete_entropy():
    assert discrete_entropy([0, 1, 2, 3]) == pytest.approx(np.log(4.0))


def test_discretize_codes():
    codes = np.column_stack([np.arange(100.0), np.zeros(100), np.repeat([0.0, 1.0], 50)])
    binned = discretize_codes(codes, bins=10)
    assert sorted(np.unique(binned[:, 0])) == list(range(10))
    assert np.all(binned[:, 1] == 0)
    assert sorted(np.unique(binned[:, 2])) == [0, 1]


def test_dv_estimate_small_budget_is_deterministic():
    pair = sample_gaussian_pair(0.5, 400, seed=0)
    config = MiEstimatorConfig(hidden=(8,), steps=50, batch=100, min_samples=100, seed=3)
    a = dv_mi_estimate(pair[:, :1], pair[:, 1:], config)
    b = dv_mi_estimate(pair[:, :1], pair[:, 1:], config)
    assert np.isfinite(a) and a == b


def test_dv_estimate_moving_average_variant_runs():
    pair = sample_gaussian_pair(0.5, 400, seed=0)
    config = MiEstimatorConfig(hidden=(8,), steps=50, batch=100, min_samples=100, ema_decay=0.9)
    assert np.isfinite(dv_mi_estimate(pair[:, 0], pair[:, 1], config))


def test_dv_estimate_rejects_small_samples():
    with pytest.raises(ValueError):
        dv_mi_estimate(np.zeros((10, 1)), np.zeros((10, 1)))


@pytest.mark.slow
@pytest.mark.parametrize('rho, oracle, seed', [(0.0, 0.0, 1), (0.5, 0.1438, 5), (0.9, 0.8304, 2)])
def test_dv_estimate_matches_gaussian_oracle(rho, oracle, seed):
    assert analytic_gaussian_mi(rho) == pytest.approx(oracle, abs=1e-4)
    pair = sample_gaussian_pair(rho, 10_000, seed=seed)
    estimate = dv_mi_estimate(pair[:, :1], pair[:, 1:])
    assert estimate == pytest.approx(oracle, abs=0.15)
    assert estimate <= analytic_gaussian_mi(rho) + 0.15


@pytest.mark.slow
@pytest.mark.parametrize('rho', [-0.5, 0.3, 0.7])
def test_dv_estimate_stays_below_oracle(rho):
    pair = sample_gaussian_pair(rho, 10_000, seed=11)
    config = MiEstimatorConfig(ema_decay=0.99)
    assert dv_mi_estimate(pair[:, :1], pair[:, 1:], config) <= analytic_gaussian_mi(rho) + 0.15


@pytest.mark.slow
def test_dv_estimate_one_hot_symbols():
    rng = np.random.default_rng(4)
    symbols = rng.integers(4, size=10_000)
    y = np.eye(4)[symbols] + 1e-3 * rng.normal(size=(10_000, 4))
    assert dv_mi_estimate(symbols[:, None].astype(float), y) == pytest.approx(np.log(4.0), abs=0.2)


# ========== MIG ==========

def test_mig_exact_copy_is_one(grid):
    assert mig(CodeFactorMatrix(grid.astype(float), grid)) == pytest.approx(1.0, abs=1e-6)


def test_mig_independent_codes_near_zero(grid):
    assert mig(CodeFactorMatrix(_noise(len(grid), 4), grid)) == pytest.approx(0.0, abs=0.05)


def test_mig_duplicated_unit_has_no_gap(grid):
    shape = grid[:, :1]
    codes = np.hstack([shape, shape]).astype(float)
    assert mig(CodeFactorMatrix(codes, shape)) == pytest.approx(0.0, abs=1e-9)


def test_code_factor_matrix_validation():
    with pytest.raises(ValueError):
        CodeFactorMatrix(np.zeros((3, 2)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        CodeFactorMatrix(np.zeros((3, 2)), np.zeros((3, 1)))


# ========== FactorVAE / β-VAE ==========

def test_factor_vae_perfect_code(grid):
    assert factor_vae_metric(CodeFactorMatrix(grid.astype(float), grid), FAST) == pytest.approx(1.0)


def test_factor_vae_noise_is_chance(grid):
    score = factor_vae_metric(CodeFactorMatrix(_noise(len(grid), 4), grid), CHANCE)
    assert score == pytest.approx(0.25, abs=0.05)


def test_factor_vae_single_factor_copy(grid):
    codes = np.hstack([grid[:, :1].astype(float), _noise(len(grid), 3)])
    assert factor_vae_metric(CodeFactorMatrix(codes, grid), FAST, factors=[0]) == pytest.approx(1.0)


def test_beta_vae_perfect_code(grid):
    assert beta_vae_metric(CodeFactorMatrix(grid.astype(float), grid), FAST) == pytest.approx(1.0)


def test_beta_vae_noise_is_chance(grid):
    score = beta_vae_metric(CodeFactorMatrix(_noise(len(grid), 4), grid), CHANCE)
    assert score == pytest.approx(0.25, abs=0.05)


def test_beta_vae_needs_two_factors(grid):
    cf = CodeFactorMatrix(grid.astype(float), grid)
    with pytest.raises(ValueError):
        beta_vae_metric(cf, FAST, factors=[2])
    with pytest.raises(ValueError):
        beta_vae_metric(cf, FAST, factors=[1, 1])
    with pytest.raises(ValueError):
        beta_vae_metric(CodeFactorMatrix(grid[:, :1].astype(float), grid[:, :1]), FAST)


def test_beta_vae_is_deterministic(grid):
    cf = CodeFactorMatrix(_noise(len(grid), 4, seed=2), grid)
    assert beta_vae_metric(cf, FAST) == beta_vae_metric(cf, FAST)


# ========== DCI ==========

def test_dci_identity_and_uniform_importance():
    assert dci_from_importance(np.eye(4)) == pytest.approx((1.0, 1.0))
    assert dci_from_importance(np.ones((4, 4)) / 4) == pytest.approx((0.0, 0.0), abs=1e-12)
    with pytest.raises(ValueError):
        dci_from_importance(np.zeros((2, 2)))


def test_dci_perfect_copy(grid):
    d, c, i = dci(CodeFactorMatrix(grid.astype(float), grid))
    assert d == pytest.approx(1.0) and c == pytest.approx(1.0)
    assert i == pytest.approx(1.0)


# ========== RSA ==========

def test_rsa_reference_values():
    v = np.array([1.0, 0.0, -1.0])
    w = np.array([-1.0, 2.0, -1.0])
    matrix = rsa_matrix([v, -v, w], ['v', 'neg_v', 'w'])
    assert matrix.loc['v', 'v'] == 1.0
    assert matrix.loc['v', 'neg_v'] == pytest.approx(-1.0)
    assert matrix.loc['v', 'w'] == pytest.approx(0.0, abs=1e-12)
    assert np.array_equal(matrix.to_numpy(), matrix.to_numpy().T)


def test_rsa_rejects_constant_unit():
    with pytest.raises(ValueError):
        rsa_matrix([np.ones(3), np.arange(3.0)])


def test_rsa_labels():
    labels = rsa_labels(2, 1)
    assert labels == ['z_0', 'z_1', 'f0_0', 'f0_1', 'f1_0', 'f1_1']


# ========== Few-shot ==========

def test_prototype_probabilities_zero_distance():
    prototypes = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]])
    probs = prototype_probabilities(prototypes[1], prototypes)
    assert int(np.argmax(probs)) == 1
    assert probs.sum() == pytest.approx(1.0)


def test_episodic_accuracy_separated_clusters():
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(9), 20)
    centers = rng.normal(size=(9, 4)) * 10.0
    features = centers[labels] + 0.1 * rng.normal(size=(len(labels), 4))
    assert episodic_accuracy(features, labels, 3, 1, 1000, seed=0) == 1.0


def test_episodic_accuracy_noise_is_chance():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(9), 20)
    features = rng.normal(size=(len(labels), 4))
    assert episodic_accuracy(features, labels, 3, 1, 1000, seed=0) == pytest.approx(1 / 3, abs=0.05)


# ========== 報告 ==========

def test_score_report(tmp_path):
    rows = [score_row('mig_fden', 0.5, 900, 7, 'abc'), score_row('fvm_fden', 0.75, 900, 7, 'abc')]
    path = str(tmp_path / 'scores.csv')
    write_score_report(rows, path)
    df = pd.read_csv(path)
    assert list(df.columns) == SCORE_COLUMNS
    assert df['value'].tolist() == [0.5, 0.75]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v', '-rA']))
