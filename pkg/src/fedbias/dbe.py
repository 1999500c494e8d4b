"""Domain bias eliminator state: personalized translation and mean regularization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError, StateError
from .nn import FeatureExtractor, forward_features


def _vector(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{name} contains non-finite values")
    return v


@dataclass
class PrbmState:
    """Client-local trainable translation added to every representation."""

    bias: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> PrbmState:
        return cls(np.zeros(dim))

    def copy(self) -> PrbmState:
        return PrbmState(self.bias.copy())


@dataclass
class RunningMean:
    value: np.ndarray
    initialized: bool = False

    @classmethod
    def empty(cls, dim: int) -> RunningMean:
        return cls(np.zeros(dim), False)


@dataclass(frozen=True)
class GlobalMean:
    value: np.ndarray

    def __post_init__(self):
        v = _vector(self.value, "global mean").copy()
        v.setflags(write=False)
        object.__setattr__(self, "value", v)


def prbm_translate(zg, prbm: PrbmState) -> np.ndarray:
    zg = np.asarray(zg, dtype=np.float64)
    if zg.ndim != 2 or zg.shape[1] != prbm.bias.shape[0]:
        raise ShapeError(f"cannot translate shape {zg.shape} by a {prbm.bias.shape[0]}-vector")
    return zg + prbm.bias


def update_running_mean(state: RunningMean, batch_mean, momentum: float) -> RunningMean:
    """Moving-average step. The first call after a reset takes ``batch_mean`` verbatim."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError("momentum must lie in [0, 1]", key="momentum")
    new = _vector(batch_mean, "batch mean")
    if new.shape != state.value.shape:
        raise ShapeError(f"batch mean has length {new.size}, running mean {state.value.size}")
    if not state.initialized:
        return RunningMean(new.copy(), True)
    return RunningMean((1.0 - momentum) * state.value + momentum * new, True)


def mr_loss(running: RunningMean, global_mean: GlobalMean) -> float:
    if not running.initialized:
        raise StateError("running mean has not seen a batch this round")
    if running.value.shape != global_mean.value.shape:
        raise ShapeError("running and global means differ in length")
    return float(np.mean((running.value - global_mean.value) ** 2))


def compute_client_mean(extractor: FeatureExtractor, features) -> np.ndarray:
    """Exact mean representation over a full local dataset."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("cannot compute a mean over an empty dataset")
    return forward_features(extractor, x).mean(axis=0)


def aggregate_global_mean(means: Iterable[tuple[np.ndarray, int]]) -> GlobalMean:
    """Sample-count weighted average of client means."""
    means = list(means)
    if not means:
        raise ConfigError("no client means to aggregate", key="clients")
    counts = np.array([n for _, n in means], dtype=np.float64)
    if np.any(counts <= 0):
        raise ConfigError("client sample counts must be positive", key="n")
    stacked = np.stack([_vector(m, "client mean") for m, _ in means])
    weights = counts / counts.sum()
    return GlobalMean(weights @ stacked)


def perturb_client_mean(mean, scale: float, coef: float, rng: np.random.Generator) -> np.ndarray:
    """Return ``mean + coef * eps`` with ``eps ~ N(0, scale^2)`` per dimension."""
    if scale < 0:
        raise ConfigError("noise scale must be non-negative", key="noise_scale")
    if not 0.0 <= coef <= 1.0:
        raise ConfigError("perturbation coefficient must lie in [0, 1]", key="noise_coef")
    mean = _vector(mean, "client mean")
    noise = rng.normal(0.0, 1.0, size=mean.shape) * scale
    return mean + coef * noise
