"""Built-in merge functions behind a uniform registry.

A merge function maps (task vectors, spec) to a single merged delta map.
All built-ins work tensor by tensor, which the sweep engine relies on for
streaming: merging a sub-map equals the sub-map of the full merge.
Registered extensions must preserve that property to stream correctly.

Elementwise arithmetic accumulates in float64 and rounds once to float32
per element, so results are independent of chunking and thread count and
can be checked bit-for-bit against a scalar reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .rng import stream_key, uniform01
from .store import TensorMap, require_compatible
from .vectors import TaskVector

__all__ = [
    "MergeSpec",
    "MergeFn",
    "task_arithmetic",
    "dare",
    "ties",
    "breadcrumbs",
    "magmax",
    "registry_lookup",
    "register_merge",
    "available_methods",
    "default_lambda_range",
    "sweep_base_kernel",
]

MergeFn = Callable[[Sequence[TaskVector], "MergeSpec"], TensorMap]

# Hyperparameters each built-in accepts; anything else is rejected up front.
_METHOD_PARAMS = {
    "task_arithmetic": frozenset(),
    "dare": frozenset({"drop_rate"}),
    "ties": frozenset({"keep_fraction"}),
    "breadcrumbs": frozenset({"beta", "gamma"}),
    "magmax": frozenset(),
}


@dataclass(frozen=True)
class MergeSpec:
    """Merge-method identifier plus its hyperparameters.

    lam is the scaling factor applied to the merged delta; seed drives
    the per-element dropout of ``dare`` and is ignored elsewhere.
    """

    method: str
    lam: float = 1.0
    params: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lambda must be a positive finite scalar, got {self.lam}")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        allowed = _METHOD_PARAMS.get(self.method)
        if allowed is not None:
            unknown = sorted(set(self.params) - allowed)
            if unknown:
                raise ValueError(f"{self.method} does not accept parameter(s): {', '.join(unknown)}")
        if self.method == "dare":
            p = self._require("drop_rate")
            if not 0 <= p < 1:
                raise ValueError(f"drop_rate must be in [0, 1), got {p}")
        elif self.method == "ties":
            k = self._require("keep_fraction")
            if not 0 < k <= 1:
                raise ValueError(f"keep_fraction must be in (0, 1], got {k}")
        elif self.method == "breadcrumbs":
            beta, gamma = self._require("beta"), self._require("gamma")
            if not (0 <= beta < 1 and 0 <= gamma < 1 and beta + gamma < 1):
                raise ValueError(
                    f"beta and gamma must each be in [0, 1) with beta + gamma < 1, "
                    f"got beta={beta} gamma={gamma}"
                )

    def _require(self, key: str) -> float:
        if key not in self.params:
            raise ValueError(f"{self.method} requires parameter {key!r}")
        value = float(self.params[key])
        if not math.isfinite(value):
            raise ValueError(f"{key} must be finite, got {value}")
        return value

    def with_lambda(self, lam: float) -> "MergeSpec":
        return replace(self, lam=lam)

    def to_json_dict(self) -> dict:
        return {"method": self.method, "lambda": self.lam, "params": dict(self.params), "seed": self.seed}


def _check_deltas(deltas: Sequence[TaskVector]) -> None:
    if not deltas:
        raise ValueError("merge needs at least one task vector")
    for pos, tv in enumerate(deltas[1:], start=2):
        require_compatible(deltas[0].delta, tv.delta, label=f"task vector {pos}")


def _accumulate(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum, float64 accumulation in task order."""
    acc = np.zeros(parts[0].shape, dtype=np.float64)
    for part in parts:
        acc = acc + part.astype(np.float64)
    return acc


# A base kernel computes the factor-free part of a merge for one tensor,
# from (tensor name, per-task flat float32 slices, task indices, spec),
# in float64. The merged tensor at factor lam is (lam * base) rounded to
# float32, so a sweep evaluates the expensive part once and rescales.


def _ta_base(name: str, flats: list[np.ndarray], indices: Sequence[int], spec: MergeSpec) -> np.ndarray:
    return _accumulate(flats)


def _dare_base(name: str, flats: list[np.ndarray], indices: Sequence[int], spec: MergeSpec) -> np.ndarray:
    p = spec._require("drop_rate")
    inv_keep = 1.0 / (1.0 - p)
    masked = []
    for index, flat in zip(indices, flats):
        draws = uniform01(stream_key(spec.seed, name, lane=index), flat.size)
        masked.append(
            np.where(draws >= p, flat.astype(np.float64) * inv_keep, 0.0).astype(np.float32)
        )
    return _accumulate(masked)


def _per_tensor_scaled(deltas: Sequence[TaskVector], spec: MergeSpec, base_kernel) -> TensorMap:
    _check_deltas(deltas)
    indices = [tv.index for tv in deltas]
    out = {}
    for name, tensor in deltas[0].delta.items():
        flats = [tv.delta.array(name).ravel() for tv in deltas]
        base = base_kernel(name, flats, indices, spec)
        out[name] = (spec.lam * base).astype(np.float32).reshape(tensor.shape)
    return TensorMap(out)


def task_arithmetic(deltas: Sequence[TaskVector], spec: MergeSpec) -> TensorMap:
    """lam * sum of the task vectors."""
    return _per_tensor_scaled(deltas, spec, _ta_base)


def dare(deltas: Sequence[TaskVector], spec: MergeSpec) -> TensorMap:
    """Per-element Bernoulli dropout with 1/(1-p) rescaling, then the scaled sum.

    Each task vector is masked independently; draws come from
    (seed, task index, tensor name, element index), so masks do not
    depend on execution order.
    """
    return _per_tensor_scaled(deltas, spec, _dare_base)


def _trim_count(fraction: float, size: int) -> int:
    # ceil(fraction * size), snapping float noise from decimal fractions
    # to the intended integer; at least one survivor for non-empty tensors.
    if size == 0:
        return 0
    return min(size, max(1, math.ceil(fraction * size - 1e-9)))


def _ties_base(name: str, flats: list[np.ndarray], indices: Sequence[int], spec: MergeSpec) -> np.ndarray:
    k = spec._require("keep_fraction")
    keep = _trim_count(k, flats[0].size)
    trimmed = []
    for flat in flats:
        order = np.argsort(-np.abs(flat), kind="stable")
        mask = np.zeros(flat.size, dtype=bool)
        mask[order[:keep]] = True
        trimmed.append(np.where(mask, flat, np.float32(0.0)))

    elected = np.sign(_accumulate(trimmed))

    agree_sum = np.zeros(flats[0].size, dtype=np.float64)
    agree_count = np.zeros(flats[0].size, dtype=np.int64)
    for values in trimmed:
        agrees = np.sign(values.astype(np.float64)) == elected
        agree_sum = agree_sum + np.where(agrees, values.astype(np.float64), 0.0)
        agree_count = agree_count + agrees
    return np.divide(
        agree_sum,
        agree_count,
        out=np.zeros_like(agree_sum),
        where=agree_count > 0,
    )


def ties(deltas: Sequence[TaskVector], spec: MergeSpec) -> TensorMap:
    """Trim to the top-k fraction by magnitude, elect a sign, merge agreeing values.

    Per tensor: each task vector keeps its ceil(k*n) largest-magnitude
    elements (ties keep the lower flat index). The elected sign per
    element is the sign of the sum of trimmed values. The output is the
    mean of trimmed values matching the elected sign, scaled by lam.
    """
    return _per_tensor_scaled(deltas, spec, _ties_base)


def _breadcrumbs_base(name: str, flats: list[np.ndarray], indices: Sequence[int], spec: MergeSpec) -> np.ndarray:
    beta, gamma = spec._require("beta"), spec._require("gamma")
    size = flats[0].size
    n_small = int(math.floor(beta * size + 1e-9))
    n_large = int(math.floor(gamma * size + 1e-9))
    masked = []
    for flat in flats:
        order = np.argsort(np.abs(flat), kind="stable")
        mask = np.ones(size, dtype=bool)
        if n_small:
            mask[order[:n_small]] = False
        if n_large:
            mask[order[size - n_large :]] = False
        masked.append(np.where(mask, flat, np.float32(0.0)))
    return _accumulate(masked)


def breadcrumbs(deltas: Sequence[TaskVector], spec: MergeSpec) -> TensorMap:
    """Mask out the smallest and largest magnitudes, then the scaled sum.

    Per task vector and tensor, floor(beta*n) smallest-magnitude and
    floor(gamma*n) largest-magnitude elements are zeroed. Magnitude ties
    drop the lower flat index first on the small side and the higher flat
    index first on the large side.
    """
    return _per_tensor_scaled(deltas, spec, _breadcrumbs_base)


def _magmax_base(name: str, flats: list[np.ndarray], indices: Sequence[int], spec: MergeSpec) -> np.ndarray:
    stack = np.stack(flats)
    winner = np.argmax(np.abs(stack), axis=0)
    return stack[winner, np.arange(stack.shape[1])].astype(np.float64)


def magmax(deltas: Sequence[TaskVector], spec: MergeSpec) -> TensorMap:
    """Per element, lam times the delta whose magnitude is largest.

    Magnitude ties select the smallest task index.
    """
    return _per_tensor_scaled(deltas, spec, _magmax_base)


_REGISTRY: dict[str, MergeFn] = {}
_LAMBDA_RANGES: dict[str, tuple[float, float]] = {}

# Keyed by function object, so a name re-registered with a custom
# implementation never inherits a built-in's shortcut.
_SWEEP_BASES = {
    task_arithmetic: _ta_base,
    dare: _dare_base,
    ties: _ties_base,
    breadcrumbs: _breadcrumbs_base,
    magmax: _magmax_base,
}


def sweep_base_kernel(merge_fn: MergeFn):
    """The factor-free per-tensor kernel behind a merge function, if any.

    Sweeps use it to evaluate the merge once per tensor and rescale per
    factor; functions without one are called in full at every factor.
    """
    return _SWEEP_BASES.get(merge_fn)


def register_merge(name: str, fn: MergeFn, lambda_range: tuple[float, float] | None = None) -> None:
    """Register a merge function; extensions plug in through here."""
    _REGISTRY[name] = fn
    if lambda_range is not None:
        _LAMBDA_RANGES[name] = lambda_range


def registry_lookup(name: str) -> MergeFn:
    if name not in _REGISTRY:
        raise ValueError(
            f"unknown merge method {name!r}; available: {', '.join(available_methods())}"
        )
    return _REGISTRY[name]


def available_methods() -> list[str]:
    return sorted(_REGISTRY)


def default_lambda_range(name: str) -> tuple[float, float] | None:
    """The registered default scaling-factor range, if any."""
    return _LAMBDA_RANGES.get(name)


register_merge("task_arithmetic", task_arithmetic, lambda_range=(0.1, 1.0))
register_merge("dare", dare, lambda_range=(0.1, 1.0))
register_merge("ties", ties, lambda_range=(0.1, 1.5))
register_merge("breadcrumbs", breadcrumbs, lambda_range=(0.1, 1.0))
register_merge("magmax", magmax, lambda_range=(0.1, 1.0))
