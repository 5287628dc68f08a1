"""Generic merging strategies: weighted averaging and delta-weighted merging.

All elementwise arithmetic widens to float32, accumulates in float64, and
rounds once to float32 before casting to the output dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_f32, validate_compat
from .delta import DeltaVector, _check_delta_compat
from .errors import ConfigError

_WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class MergeWeights:
    """Per-model merge weights; all positive."""

    weights: dict[str, float]

    def __post_init__(self):
        for model_id, w in self.weights.items():
            if not w > 0.0:
                raise ConfigError(f"weight for model {model_id!r} must be > 0, got {w}")

    def require_convex(self) -> None:
        total = sum(self.weights.values())
        if abs(total - 1.0) > _WEIGHT_SUM_TOL:
            raise ConfigError(f"weights must sum to 1 for averaging, got {total!r}")

    def ordered(self, model_ids: list[str]) -> list[float]:
        missing = [m for m in model_ids if m not in self.weights]
        if missing:
            raise ConfigError(f"missing weights for models {missing}")
        return [self.weights[m] for m in model_ids]


def weighted_average_merge(
    models: dict[str, Checkpoint], w: MergeWeights
) -> Checkpoint:
    """Elementwise sum of w_m * theta_m with the weights summing to 1."""
    if not models:
        raise ConfigError("nothing to merge")
    w.require_convex()
    ids = list(models)
    weights = w.ordered(ids)
    first = models[ids[0]]
    for other_id in ids[1:]:
        validate_compat(first, models[other_id])
    arrays = {}
    for name in first.names:
        acc = np.zeros(first.record(name).shape, dtype=np.float64)
        for model_id, weight in zip(ids, weights):
            acc += float(weight) * models[model_id].as_f32(name).astype(np.float64)
        arrays[name] = acc.astype(np.float32)
    return checkpoint_from_f32(arrays, like=first, metadata={})


def delta_weighted_merge(
    base: Checkpoint, deltas: list[DeltaVector], w: MergeWeights
) -> Checkpoint:
    """theta_F + sum of w_m * delta_m."""
    weights = w.ordered([dv.provenance or str(i) for i, dv in enumerate(deltas)])
    for dv in deltas:
        _check_delta_compat(base, dv)
    arrays = {}
    for name in base.names:
        acc = base.as_f32(name).astype(np.float64)
        for dv, weight in zip(deltas, weights):
            acc += float(weight) * dv.deltas[name].astype(np.float64)
        arrays[name] = acc.astype(np.float32)
    return checkpoint_from_f32(arrays, like=base, metadata={})


def assemble_final(
    base: Checkpoint, delta_a: DeltaVector, delta_b: DeltaVector
) -> Checkpoint:
    """theta_F + delta_A + delta_B with implicit unit weights."""
    weights = MergeWeights(
        {delta_a.provenance or "0": 1.0, delta_b.provenance or "1": 1.0}
    )
    return delta_weighted_merge(base, [delta_a, delta_b], weights)
