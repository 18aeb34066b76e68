"""Activation profiling, keyed taboo rules, the training penalty and the detector.

Two key families are supported:

* :class:`MaxPercentileKey` - per selected layer, any activation ``a >= alpha_l``
  is taboo, where ``alpha_l`` is a nearest-rank percentile of the profiled
  per-sample layer maxima.
* :class:`IntervalKey` - per selected layer, any activation outside a finite
  union of closed intervals is taboo.

Detection uses the literal indicator.  Training uses a hinge surrogate
(distance past the threshold, or distance to the nearest allowed interval)
because the indicator has no useful gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from . import tensor as T


class UnboundKeyError(RuntimeError):
    """A max-percentile key was used before its thresholds were resolved."""


@dataclass(frozen=True)
class ActivationProfile:
    """Per layer, the vector of per-sample maxima of the post-ReLU activations."""

    maxima: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.maxima:
            raise ValueError("profile has no layers")
        n = len(self.maxima[0])
        for layer, m in enumerate(self.maxima):
            if m.ndim != 1 or len(m) != n:
                raise ValueError(f"layer {layer} holds {m.shape}, expected ({n},)")
            if n and m.min() < 0:
                raise ValueError(f"layer {layer} has a negative maximum; not post-ReLU data")

    @property
    def num_layers(self) -> int:
        return len(self.maxima)

    @property
    def num_samples(self) -> int:
        return len(self.maxima[0])


def profile(model, images: np.ndarray, batch_size: int = 1000) -> ActivationProfile:
    """Scalar maximum of every instrumentation point for every sample, in order."""
    if len(images) == 0:
        raise ValueError("cannot profile an empty dataset")
    per_layer = [[] for _ in range(model.num_instrumentation_points)]
    for start in range(0, len(images), batch_size):
        _, acts = model.run(images[start : start + batch_size], batch_size)
        for bucket, a in zip(per_layer, acts):
            bucket.append(a.reshape(len(a), -1).max(axis=1))
    return ActivationProfile(tuple(np.concatenate(b) for b in per_layer))


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """``sorted(values)[ceil(percentile/100 * N) - 1]`` with exact rank arithmetic."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("percentile of an empty vector")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    rank = math.ceil(Fraction(repr(float(percentile))) * values.size / 100)
    return float(np.partition(values, rank - 1)[rank - 1])


def bind_thresholds(prof: ActivationProfile, percentile: float) -> np.ndarray:
    """Per-layer thresholds: the nearest-rank percentile of each layer's maxima."""
    if prof.num_samples == 0:
        raise ValueError("cannot bind thresholds to an empty profile")
    return np.array([nearest_rank(m, percentile) for m in prof.maxima], dtype=np.float64)


# ---------------------------------------------------------------------------
# keys


@dataclass(frozen=True)
class MaxPercentileKey:
    percentile: float
    layers: tuple[int, ...]
    thresholds: tuple[float, ...] | None = None

    kind = "max-percentile"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("layer selector must not be empty")
        if len(set(self.layers)) != len(self.layers) or min(self.layers) < 0:
            raise ValueError(f"invalid layer selector {self.layers}")
        if not 0 < self.percentile <= 100:
            raise ValueError(f"percentile must lie in (0, 100], got {self.percentile}")
        if self.thresholds is not None:
            if len(self.thresholds) != len(self.layers):
                raise ValueError("need one threshold per selected layer")
            if any(not a > 0 for a in self.thresholds):
                raise ValueError(f"thresholds must be positive, got {self.thresholds}")

    @property
    def bound(self) -> bool:
        return self.thresholds is not None

    def bind(self, prof: ActivationProfile) -> "MaxPercentileKey":
        if max(self.layers) >= prof.num_layers:
            raise ValueError(f"selector {self.layers} exceeds profiled layers ({prof.num_layers})")
        alphas = bind_thresholds(prof, self.percentile)
        return MaxPercentileKey(
            self.percentile, self.layers, tuple(float(alphas[l]) for l in self.layers)
        )

    def with_thresholds(self, thresholds) -> "MaxPercentileKey":
        return MaxPercentileKey(self.percentile, self.layers, tuple(float(a) for a in thresholds))


@dataclass(frozen=True)
class IntervalKey:
    layers: tuple[int, ...]
    intervals: tuple[tuple[tuple[float, float], ...], ...]

    kind = "interval-set"
    bound = True

    def __post_init__(self):
        if not self.layers:
            raise ValueError("layer selector must not be empty")
        if len(set(self.layers)) != len(self.layers) or min(self.layers) < 0:
            raise ValueError(f"invalid layer selector {self.layers}")
        if len(self.intervals) != len(self.layers):
            raise ValueError("need one interval set per selected layer")
        for layer, ivs in zip(self.layers, self.intervals):
            if not ivs:
                raise ValueError(f"layer {layer} has no allowed interval")
            prev_hi = -math.inf
            for lo, hi in ivs:
                if not lo <= hi:
                    raise ValueError(f"layer {layer}: empty interval [{lo}, {hi}]")
                if lo <= prev_hi:
                    raise ValueError(f"layer {layer}: intervals overlap or are unsorted")
                prev_hi = hi


TabooKey = Union[MaxPercentileKey, IntervalKey]


def make_key_f1(num_layers: int = 3, percentile: float = 1.0, prof: ActivationProfile | None = None):
    """Max-percentile key on every layer; bound when a profile is supplied."""
    key = MaxPercentileKey(float(percentile), tuple(range(num_layers)))
    return key.bind(prof) if prof is not None else key


def make_key_f2() -> IntervalKey:
    """Activations of the first layer restricted to [0, 1] (zero stays allowed)."""
    return IntervalKey((0,), (((0.0, 1.0),),))


def make_key_f3(num_layers: int = 3) -> IntervalKey:
    """Activations of every layer restricted to [0,1] u [2,3] u [4,5]."""
    ivs = ((0.0, 1.0), (2.0, 3.0), (4.0, 5.0))
    return IntervalKey(tuple(range(num_layers)), tuple(ivs for _ in range(num_layers)))


def tighten(key, margin: float):
    """Copy of ``key`` whose allowed region is shrunk by ``margin`` of its extent.

    Used only for the training penalty, so that retrained activations settle
    inside the allowed region rather than on its edge.  A threshold ``alpha``
    becomes ``alpha * (1 - margin)``; each interval loses ``margin * width``
    at both ends, except that a lower bound of zero stays put.
    """
    if not 0 <= margin < 0.5:
        raise ValueError(f"margin must lie in [0, 0.5), got {margin}")
    _require_bound(key)
    if margin == 0:
        return key
    if key.kind == "max-percentile":
        return key.with_thresholds([a * (1 - margin) for a in key.thresholds])
    shrunk = []
    for ivs in key.intervals:
        layer = []
        for lo, hi in ivs:
            d = margin * (hi - lo)
            layer.append((lo if lo == 0 else lo + d, hi - d))
        shrunk.append(tuple(layer))
    return IntervalKey(key.layers, tuple(shrunk))


def _require_bound(key) -> None:
    if not key.bound:
        raise UnboundKeyError("key thresholds are unresolved; bind it to a profile first")


def _split_intervals(ivs):
    los = np.array([lo for lo, _ in ivs], dtype=np.float64)
    his = np.array([hi for _, hi in ivs], dtype=np.float64)
    return los, his


def outside_intervals(values: np.ndarray, ivs) -> np.ndarray:
    """Boolean mask of values lying outside every closed interval."""
    los, his = _split_intervals(ivs)
    idx = np.searchsorted(los, values, side="right") - 1
    safe = np.clip(idx, 0, None)
    inside = (idx >= 0) & (values <= his[safe])
    return ~inside


def interval_distance(values: np.ndarray, ivs) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the nearest allowed interval and its derivative w.r.t. the value."""
    v = values.astype(np.float64)
    los, his = _split_intervals(ivs)
    idx = np.searchsorted(los, v, side="right") - 1
    left_hi = np.where(idx >= 0, his[np.clip(idx, 0, None)], -np.inf)
    nxt = idx + 1
    right_lo = np.where(nxt < len(los), los[np.clip(nxt, None, len(los) - 1)], np.inf)
    d_left = np.where(v > left_hi, v - left_hi, 0.0)  # past the interval we sit to the right of
    d_right = right_lo - v  # up to the next interval; positive by construction
    outside = v > left_hi
    use_left = d_left <= d_right
    dist = np.where(outside, np.where(use_left, d_left, d_right), 0.0)
    slope = np.where(outside, np.where(use_left, 1.0, -1.0), 0.0)
    return dist, slope


def _layer_rule(key, slot: int):
    if isinstance(key, MaxPercentileKey):
        return ("threshold", key.thresholds[slot])
    return ("intervals", key.intervals[slot])


def layer_violations(values: np.ndarray, key, slot: int) -> np.ndarray:
    """Per-sample violation counts of a batch ``values`` (N, ...) for selector slot ``slot``."""
    kind, rule = _layer_rule(key, slot)
    flat = values.reshape(len(values), -1)
    if kind == "threshold":
        mask = flat >= rule
    else:
        mask = outside_intervals(flat, rule)
    return mask.sum(axis=1)


def violation_counts(activations: Sequence[np.ndarray], key) -> np.ndarray:
    """(N, L) matrix of per-sample, per-instrumentation-point violation counts."""
    _require_bound(key)
    n = len(activations[0])
    counts = np.zeros((n, len(activations)), dtype=np.int64)
    for slot, layer in enumerate(key.layers):
        if layer >= len(activations):
            raise ValueError(f"key selects layer {layer}; model has {len(activations)}")
        counts[:, layer] = layer_violations(activations[layer], key, slot)
    return counts


def violation_count(activations: Sequence[np.ndarray], key) -> int:
    """Number of taboo activations for a single sample (per-layer arrays, no batch axis)."""
    return int(violation_counts([np.asarray(a)[None] for a in activations], key).sum())


def penalty_values(activations: Sequence[np.ndarray], key) -> np.ndarray:
    """Per-sample hinge penalty of a batch, without building a graph."""
    _require_bound(key)
    total = np.zeros(len(activations[0]), dtype=np.float64)
    for slot, layer in enumerate(key.layers):
        kind, rule = _layer_rule(key, slot)
        flat = activations[layer].reshape(len(activations[layer]), -1).astype(np.float64)
        if kind == "threshold":
            total += np.maximum(flat - rule, 0.0).sum(axis=1)
        else:
            total += interval_distance(flat, rule)[0].sum(axis=1)
    return total


def _interval_penalty(x: T.Node, ivs) -> T.Node:
    dist, slope = interval_distance(x.value, ivs)
    dtype = x.value.dtype
    total = np.asarray(dist.sum(), dtype=dtype)
    slope = slope.astype(dtype)

    def back(g):
        return (slope * g,)

    return x.graph.record("interval_penalty", total, (x,), back)


def taboo_penalty(activations: Sequence[T.Node], key) -> T.Node:
    """Differentiable penalty summed over the batch and all selected positions."""
    _require_bound(key)
    terms = []
    for slot, layer in enumerate(key.layers):
        kind, rule = _layer_rule(key, slot)
        a = activations[layer]
        if kind == "threshold":
            terms.append(T.sum_(T.relu(T.shift(a, -rule))))
        else:
            terms.append(_interval_penalty(a, rule))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def combined_loss(activations, logits: T.Node, labels, key, alarm_rate: float):
    """Mean cross-entropy plus ``alarm_rate`` times the batch-summed taboo penalty.

    Returns ``(loss, cross_entropy, penalty)`` nodes; ``penalty`` is None when
    the alarm rate is zero.
    """
    if alarm_rate < 0:
        raise ValueError(f"alarm rate must be non-negative, got {alarm_rate}")
    ce = T.softmax_cross_entropy(logits, labels)
    if alarm_rate == 0:
        return ce, ce, None
    pen = taboo_penalty(activations, key)
    return T.add(ce, T.scale(pen, alarm_rate)), ce, pen


@dataclass(frozen=True)
class DetectionReport:
    counts: np.ndarray  # (N, L) violations per instrumentation point

    @property
    def total(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def verdicts(self) -> np.ndarray:
        return self.total > 0

    @property
    def aggregate(self) -> int:
        return int(self.counts.sum())


def detect_activations(activations: Sequence[np.ndarray], key) -> DetectionReport:
    return DetectionReport(violation_counts(activations, key))


def detect(model, images: np.ndarray, key, batch_size: int = 1000) -> DetectionReport:
    """One forward pass per batch; a sample is flagged iff it breaks any taboo."""
    images = np.asarray(images, dtype=T.DTYPE)
    if images.ndim == len(model.input_shape):
        images = images[None]
    if tuple(images.shape[1:]) != model.input_shape:
        raise T.ShapeError(f"model expects {model.input_shape} inputs, got {images.shape[1:]}")
    _require_bound(key)
    counts = []
    for start in range(0, len(images), batch_size):
        _, acts = model.run(images[start : start + batch_size], batch_size)
        counts.append(violation_counts(acts, key))
    return DetectionReport(np.concatenate(counts))


def detection_rate(model, images: np.ndarray, key, batch_size: int = 1000) -> float:
    return float(detect(model, images, key, batch_size).verdicts.mean())
