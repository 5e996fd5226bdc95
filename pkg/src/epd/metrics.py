"""Best-of-K displacement errors and multimodality coverage."""

from __future__ import annotations

import numpy as np


class HorizonMismatch(ValueError):
    pass


def displacement(samples, truth) -> np.ndarray:
    """Per-sample, per-step Euclidean error, (K, T)."""
    samples = np.asarray(samples, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if samples.ndim == 2:
        samples = samples[None]
    if samples.ndim != 3 or samples.shape[-1] != 2 or truth.shape != (truth.shape[0], 2):
        raise ValueError(f"expected samples (K, T, 2) and truth (T, 2), got {samples.shape} and {truth.shape}")
    if samples.shape[1] != truth.shape[0]:
        raise HorizonMismatch(f"samples cover {samples.shape[1]} steps, truth {truth.shape[0]}")
    if samples.shape[0] < 1:
        raise ValueError("need at least one sample")
    return np.sqrt(((samples - truth[None]) ** 2).sum(axis=-1))


def ade_fde(samples, truth, joint: bool = False) -> tuple[float, float]:
    """(minADE, minFDE) over the K samples.

    By default the two minima are taken independently; ``joint=True`` reports
    both errors of the single sample with the lowest ADE.
    """
    err = displacement(samples, truth)
    # accumulate steps in order so results do not depend on numpy's pairwise summation
    total = err[:, 0].copy()
    for t in range(1, err.shape[1]):
        total += err[:, t]
    ade = total / err.shape[1]
    fde = err[:, -1]
    if joint:
        best = int(np.argmin(ade))
        return float(ade[best]), float(fde[best])
    return float(ade.min()), float(fde.min())


def mode_coverage(samples, endpoints, radius: float) -> bool:
    """True if every endpoint in ``endpoints`` (M, 2) has a sample endpoint within ``radius``."""
    final = np.asarray(samples, dtype=float)[:, -1, :]
    d = np.linalg.norm(final[:, None, :] - np.asarray(endpoints, dtype=float)[None], axis=-1)
    return bool(np.all(d.min(axis=0) <= radius))
