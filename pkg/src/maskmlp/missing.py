"""Missing-data handling policies and the masking operators.

Four fill policies feed models: zeros, training means, the -1 indicator,
and the -1 sentinel used by masked pre-training. ``mask_augment`` creates
the corrupted second view for self-supervision by hiding a fresh random
quarter of the observed cells on every call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError

SENTINEL = -1.0

FILL_ZEROS = "zeros"
FILL_MEAN = "mean"
FILL_INDICATOR = "indicator"
FILL_MASK_PRETRAIN = "mask_pretrain"
FILL_KINDS = (FILL_ZEROS, FILL_MEAN, FILL_INDICATOR, FILL_MASK_PRETRAIN)

CORRUPT_SENTINEL = "sentinel"
CORRUPT_MARGINAL = "marginal_sample"


@dataclass
class FillPolicy:
    """How missing cells are presented to a model."""

    kind: str
    means: np.ndarray | None = None  # per-feature training means, 'mean' only

    def __post_init__(self) -> None:
        if self.kind not in FILL_KINDS:
            raise ConfigError(f"unknown fill policy {self.kind!r}")


def fit_mean_policy(scaled_values: np.ndarray, observed: np.ndarray,
                    train_rows: np.ndarray) -> FillPolicy:
    """Mean policy with per-feature means over observed training cells only."""
    v = scaled_values[train_rows]
    o = observed[train_rows]
    d = v.shape[1]
    means = np.zeros(d)
    for j in range(d):
        col = o[:, j]
        if col.any():
            means[j] = v[col, j].mean()
    return FillPolicy(FILL_MEAN, means)


def materialize(policy: FillPolicy, row: np.ndarray, observed_mask: np.ndarray) -> np.ndarray:
    """Model-input vector for one scaled row: observed cells pass through,
    missing cells get the policy's fill value."""
    return materialize_matrix(policy, np.atleast_2d(row), np.atleast_2d(observed_mask))[0]


def materialize_matrix(policy: FillPolicy, values: np.ndarray,
                       observed: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=np.float64, copy=True)
    missing = ~np.asarray(observed, dtype=bool)
    if policy.kind == FILL_ZEROS:
        out[missing] = 0.0
    elif policy.kind == FILL_MEAN:
        if policy.means is None:
            raise StateError("mean policy used before fitting training means")
        out[missing] = np.broadcast_to(policy.means, out.shape)[missing]
    else:  # indicator and mask_pretrain share the sentinel
        out[missing] = SENTINEL
    return out


@dataclass
class MaskSpec:
    """Mask-augmentation settings plus the seed stream that drives it."""

    mask_rate: float = 0.25
    corruption: str = CORRUPT_SENTINEL
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    # observed training values per feature; required for marginal sampling
    marginals: list[np.ndarray] | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.mask_rate < 1.0):
            raise ConfigError(f"mask_rate must be in [0, 1), got {self.mask_rate}")
        if self.corruption not in (CORRUPT_SENTINEL, CORRUPT_MARGINAL):
            raise ConfigError(f"unknown corruption mode {self.corruption!r}")


def fit_marginals(scaled_values: np.ndarray, observed: np.ndarray,
                  train_rows: np.ndarray) -> list[np.ndarray]:
    """Pools of observed training values per feature, for marginal corruption."""
    v = scaled_values[train_rows]
    o = observed[train_rows]
    return [np.sort(v[o[:, j], j]) for j in range(v.shape[1])]


def mask_augment(vector: np.ndarray, observed_mask: np.ndarray,
                 spec: MaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt one materialized row; returns (masked vector, missing-after mask).

    Exactly ``floor(mask_rate * n_observed)`` observed positions (at least one
    when anything is observed and the rate is positive) are drawn uniformly
    without replacement. Originally missing positions are never touched, so
    the missing set only grows.
    """
    masked, missing_after = mask_augment_matrix(
        np.atleast_2d(vector), np.atleast_2d(observed_mask), spec
    )
    return masked[0], missing_after[0]


def mask_augment_matrix(vectors: np.ndarray, observed: np.ndarray,
                        spec: MaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Batch mask augmentation; one independent uniform draw per row."""
    x = np.array(vectors, dtype=np.float64, copy=True)
    obs = np.asarray(observed, dtype=bool)
    n, d = x.shape

    n_obs = obs.sum(axis=1)
    counts = np.floor(spec.mask_rate * n_obs).astype(np.int64)
    if spec.mask_rate > 0.0:
        counts = np.maximum(counts, (n_obs >= 1).astype(np.int64))

    # Uniform-without-replacement per row: rank random keys among observed
    # positions and take the lowest `counts` of them.
    keys = spec.rng.random((n, d))
    keys[~obs] = np.inf
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    new_mask = ranks < counts[:, None]

    if spec.corruption == CORRUPT_SENTINEL:
        x[new_mask] = SENTINEL
    else:
        if spec.marginals is None:
            raise StateError("marginal corruption used before fitting marginals")
        for j in range(d):
            rows = np.flatnonzero(new_mask[:, j])
            if rows.size == 0:
                continue
            pool = spec.marginals[j]
            if pool.size == 0:
                x[rows, j] = SENTINEL
                continue
            x[rows, j] = pool[spec.rng.integers(0, pool.size, size=rows.size)]

    missing_after = (~obs) | new_mask
    return x, missing_after
