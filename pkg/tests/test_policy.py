import numpy as np
import pytest

from qfc import scenarios
from qfc.policy import CemConfig, cem_train, evaluate_population, evaluate_policy, n_weights


@pytest.fixture(scope="module")
def small_qho():
    return scenarios.build("qho", {"n_fock": 12, "alpha": 0.8})


FAST = dict(population=8, elite_fraction=0.25, episode_steps=40, init_std=0.5)


def test_cem_config_validation():
    with pytest.raises(ValueError):
        CemConfig(population=4)
    with pytest.raises(ValueError):
        CemConfig(population=8, elite_fraction=0.1)
    with pytest.raises(ValueError):
        CemConfig(elite_fraction=0.0)
    with pytest.raises(ValueError):
        CemConfig(init_std=0.0)
    assert CemConfig(population=10, elite_fraction=0.25).n_elite == 3


def test_zero_generations_returns_initial_mean(small_qho):
    init = np.arange(5, dtype=float) * 0.1
    res = cem_train(small_qho, CemConfig(generations=0, **FAST), init_mean=init)
    np.testing.assert_array_equal(res.best_weights, init)
    assert res.curve == []
    with pytest.raises(ValueError):
        cem_train(small_qho, CemConfig(generations=0, **FAST), init_mean=np.zeros(3))


def test_full_elite_fraction_gives_population_mean(small_qho):
    cem = CemConfig(generations=1, **{**FAST, "elite_fraction": 1.0})
    res = cem_train(small_qho, cem)
    rng = np.random.default_rng(np.random.SeedSequence([cem.seed, 0]))
    pop = cem.init_std * rng.standard_normal((cem.population, n_weights(small_qho)))
    np.testing.assert_allclose(res.mean, pop.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(res.std, np.maximum(pop.std(axis=0), cem.std_floor), atol=1e-14)


def test_training_is_reproducible_and_monotone(small_qho):
    cem = CemConfig(generations=3, **FAST)
    a = cem_train(small_qho, cem)
    b = cem_train(small_qho, cem)
    np.testing.assert_array_equal(a.best_weights, b.best_weights)
    assert a.curve == b.curve
    best = [c[2] for c in a.curve]
    assert all(x <= y for x, y in zip(best, best[1:]))
    assert a.best_fidelity == best[-1]
    assert all(0.0 <= c[1] <= 1 + 1e-9 for c in a.curve)


def test_std_floor(small_qho):
    cem = CemConfig(generations=2, **{**FAST, "init_std": 1e-8})
    res = cem_train(small_qho, cem)
    assert np.all(res.std >= 1e-3)


def test_evaluate_policy_from_ground_state():
    n = 30
    spec = scenarios.build("qho", {"initial": [1] + [0] * (n - 1)})
    res = evaluate_policy(np.zeros(5), spec, CemConfig(episode_steps=200), seed=0)
    # measurement back-action slowly spreads the vacuum, nothing else moves it
    assert res.mean_fidelity >= 0.95
    assert not res.aborted
    again = evaluate_policy(np.zeros(5), spec, CemConfig(episode_steps=200), seed=0)
    assert again.mean_fidelity == res.mean_fidelity


def test_zero_policy_is_worse_than_damping_on_quartic():
    spec = scenarios.build("quartic", {"n_fock": 30})
    zero = evaluate_policy(np.zeros(5), spec, seed=0)
    damping = evaluate_policy(np.array([-1.0, 0, 0, 0, 0]), spec, seed=0)
    assert zero.mean_fidelity < damping.mean_fidelity


def test_population_scores_match_single_evaluations(small_qho):
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 5)) * 0.5
    mean, final, aborted = evaluate_population(W, small_qho, [4, 5], episode_steps=40)
    for w, m in zip(W, mean):
        single, _, _ = evaluate_population(w[None], small_qho, [4, 5], episode_steps=40)
        assert single[0] == pytest.approx(m, abs=1e-12)
    assert not aborted.any() and np.all(final <= 1 + 1e-9)


def test_policy_needs_a_target():
    with pytest.raises(ValueError):
        evaluate_population(np.zeros((1, 4)), scenarios.build("qubit"), [0])
