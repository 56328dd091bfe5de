from __future__ import annotations

import numpy as np
import pytest

from facmech.domain import Dataset, DistributionSpec, ProblemSetting, generate_dataset


def make_dataset(n=5, k=1, r=50, m=3, weights=None, distribution=None, epsilon=0.0, seed=0):
    setting = ProblemSetting(
        n=n, k=k,
        weights=tuple(weights) if weights else (1.0,) * n,
        distribution=distribution or DistributionSpec.uniform(),
        epsilon=epsilon, r=r, m=m)
    return generate_dataset(setting, seed)


def manual_dataset(peaks, misreports, k=1, weights=None, epsilon=0.0):
    """Dataset from explicit peak/misreport arrays (for hand-traced cases)."""
    peaks = np.asarray(peaks, dtype=np.float64)
    misreports = np.asarray(misreports, dtype=np.float64)
    r, n = peaks.shape
    setting = ProblemSetting(
        n=n, k=k,
        weights=tuple(weights) if weights else (1.0,) * n,
        distribution=DistributionSpec.uniform(),
        epsilon=epsilon, r=r, m=misreports.shape[2])
    ds = Dataset(setting=setting, seed=0, peaks=peaks, misreports=misreports)
    ds.validate()
    return ds


@pytest.fixture
def counterexample_dataset():
    """Six-agent instance where the split-median rule is manipulable.

    Agent 2 (true peak 10/13) gains by reporting 11.5/13; every other
    agent's single misreport just repeats its own peak.
    """
    peaks = [[0.0, 1 / 13, 10 / 13, 11 / 13, 12 / 13, 1.0]]
    mis = [[[p] for p in peaks[0]]]
    mis[0][2] = [11.5 / 13]
    return manual_dataset(peaks, mis, k=2, weights=(5, 5, 5, 1, 1, 1))
