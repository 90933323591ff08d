"""Tests for per-round client sampling."""

import numpy as np
import pytest
from pydantic import ValidationError

from src.sampling import SamplingPolicy, sample_clients


def test_fixed_size_sorted_distinct():
    policy = SamplingPolicy(size=10, seed=3)
    for k in range(50):
        picked = sample_clients(policy, 100, k)
        assert picked.size == 10
        assert np.unique(picked).size == 10
        assert np.all(np.diff(picked) > 0)


def test_full_participation():
    picked = sample_clients(SamplingPolicy(size=5), 5, 0)
    assert picked.tolist() == [0, 1, 2, 3, 4]


def test_pure_function_of_seed_and_round():
    policy = SamplingPolicy(size=4, seed=11)
    assert np.array_equal(sample_clients(policy, 20, 7), sample_clients(policy, 20, 7))
    assert not all(
        np.array_equal(sample_clients(policy, 20, 7), sample_clients(policy, 20, k))
        for k in range(8, 12)
    )


def test_bernoulli_never_empty():
    policy = SamplingPolicy(mode="bernoulli", probs=[0.01] * 3, seed=0)
    for k in range(20):
        assert sample_clients(policy, 3, k).size >= 1


def test_bernoulli_requires_probs():
    with pytest.raises(ValidationError):
        SamplingPolicy(mode="bernoulli")


def test_bernoulli_probability_range():
    with pytest.raises(ValidationError):
        SamplingPolicy(mode="bernoulli", probs=[0.5, 0.0])


def test_size_above_client_count():
    with pytest.raises(ValueError):
        SamplingPolicy(size=6).validate_for(5)


def test_inclusion_probabilities():
    assert np.allclose(SamplingPolicy(size=10).inclusion_probabilities(100), 0.1)


@pytest.mark.slow
def test_fixed_size_fairness():
    policy = SamplingPolicy(size=10, seed=0)
    counts = np.zeros(100)
    rounds = 10_000
    for k in range(rounds):
        counts[sample_clients(policy, 100, k)] += 1
    freq = counts / rounds
    assert freq.min() >= 0.085
    assert freq.max() <= 0.115
