"""Seeded synthetic weights and activations for tests, sweeps and demos."""
from __future__ import annotations

import numpy as np

from .matrix import ColumnScaling


def _gen(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def geometric_spectrum(m: int, n: int, ratio: float, seed: int, top: float = 10.0) -> np.ndarray:
    """Random singular vectors with singular values ``top * ratio**i``."""
    g = _gen(seed)
    k = min(m, n)
    left, _ = np.linalg.qr(g.standard_normal((m, k)))
    right, _ = np.linalg.qr(g.standard_normal((n, k)))
    return (left * (top * ratio ** np.arange(k))) @ right.T


def planted(
    m: int = 64,
    n: int = 48,
    rank: int = 8,
    spike_density: float = 0.05,
    noise: float = 0.01,
    seed: int = 0,
    spike_scale: float = 3.0,
) -> np.ndarray:
    """Rank-``rank`` signal plus sparse spikes plus dense Gaussian noise.

    The low-rank signal has unit average entry magnitude; spikes are
    ``spike_scale`` times larger.
    """
    g = _gen(seed)
    signal = g.standard_normal((m, rank)) @ g.standard_normal((rank, n)) / np.sqrt(rank)
    spikes = np.zeros((m, n))
    count = int(round(spike_density * m * n))
    where = g.choice(m * n, size=count, replace=False)
    spikes.flat[where] = spike_scale * g.standard_normal(count) + spike_scale * np.sign(
        g.standard_normal(count)
    )
    return signal + spikes + noise * g.standard_normal((m, n))


def lognormal_norms(channels: int, sigma: float, seed: int) -> ColumnScaling:
    g = _gen(seed)
    return ColumnScaling(g.lognormal(0.0, sigma, channels))


def lognormal_activations(channels: int, samples: int, sigma: float, seed: int) -> np.ndarray:
    """Activations laid out samples x channels with log-normal channel scales."""
    g = _gen(seed)
    scales = g.lognormal(0.0, sigma, channels)
    return g.standard_normal((samples, channels)) * scales[None, :]


def lognormal_salience_instance(
    m: int,
    n: int,
    sigma: float,
    seed: int,
    rank: int = 4,
    structure_share: float = 0.3,
) -> tuple[np.ndarray, ColumnScaling]:
    """Weights whose unit-scaled salience is log-normal(0, ``sigma``) noise over
    a dense rank-``rank`` component holding ``structure_share`` of the energy.

    Magnitudes of the noise part are log-normal with parameter ``sigma / 2``
    so that their squares (the salience) carry ``sigma``. Without the dense
    component a low-rank part has nothing to capture and pure pruning wins.
    """
    if not 0.0 <= structure_share < 1.0:
        raise ValueError("structure_share must lie in [0, 1)")
    g = _gen(seed)
    heavy = g.lognormal(0.0, sigma / 2.0, (m, n)) * np.sign(g.standard_normal((m, n)))
    structure = g.standard_normal((m, rank)) @ g.standard_normal((rank, n))
    if structure_share > 0:
        structure *= np.sqrt(
            structure_share / (1.0 - structure_share) * np.sum(heavy**2) / np.sum(structure**2)
        )
    else:
        structure[:] = 0.0
    return structure + heavy, ColumnScaling.unit(n)
