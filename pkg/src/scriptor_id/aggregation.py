"""Fuse the local features of an n-tuple into one global feature vector.

All three methods pool over the union of the ``n * L * L`` positions of the
tuple. Positions are ordered lexicographically by (member, i, j); that order
decides ties.

Values are sorted per dimension (descending) and averaged with the running
mean ``m_k = m_{k-1} + (v_k - m_{k-1}) / k``. Since ``v_k <= m_{k-1}``, each
rounded update can only move the mean down, so in floating point

* the result does not depend on member order, down to the last bit
  (a zero result is always +0.0);
* the top-K mean is non-increasing in K, hence AA <= KMA(K) <= MA exactly;
* KMA(1) is MA and KMA(n*L*L) is AA, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

AVERAGE = "AA"
MAX = "MA"
K_MAX = "KMA"
METHODS = (AVERAGE, MAX, K_MAX)


@dataclass
class GlobalFeature:
    values: np.ndarray
    method: str
    k: int | None = None

    @property
    def depth(self) -> int:
        return self.values.shape[0]


@dataclass
class AggregationContext:
    """Which positions contributed to each dimension.

    ``mask[p, d]`` marks position ``p`` (flattened member, i, j) as a
    contributor to dimension ``d``; each contributor carries weight
    ``1 / count[d]``.
    """

    mask: np.ndarray
    count: np.ndarray
    locals_shape: tuple

    def weights(self) -> np.ndarray:
        return self.mask / self.count

    def weight_mass(self) -> np.ndarray:
        return self.mask.sum(axis=0) / self.count


def stack_locals(locals_) -> np.ndarray:
    """Stack a tuple of local feature maps into one ``(n, L, L, D)`` array."""
    if isinstance(locals_, np.ndarray):
        arr = locals_
        if arr.ndim == 3:
            arr = arr[None]
    else:
        maps = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in locals_]
        if not maps:
            raise ShapeError("cannot aggregate an empty tuple")
        first = maps[0].shape
        for m in maps:
            if m.shape != first:
                raise ShapeError(f"tuple members differ in shape: {first} vs {m.shape}")
        arr = np.stack(maps)
    if arr.ndim != 4 or arr.shape[1] != arr.shape[2] or arr.shape[0] < 1:
        raise ShapeError(f"expected local maps of shape (n, L, L, D), got {arr.shape}")
    return np.asarray(arr, dtype=np.float64)


def _positions(locals_):
    arr = stack_locals(locals_)
    return arr.reshape(-1, arr.shape[-1]), arr.shape


def _descending(flat: np.ndarray):
    order = np.argsort(-flat, axis=0, kind="stable")
    return order, np.take_along_axis(flat, order, axis=0)


def _top_mean(ordered: np.ndarray, k: int) -> np.ndarray:
    mean = ordered[0].copy()
    for i in range(1, k):
        mean += (ordered[i] - mean) / (i + 1)
    # -0.0 and +0.0 tie in the sort, so which one leads depends on member order
    return mean + 0.0


def _select(order: np.ndarray, k: int) -> np.ndarray:
    mask = np.zeros(order.shape, dtype=bool)
    np.put_along_axis(mask, order[:k], True, axis=0)
    return mask


def aggregate_aa(locals_):
    flat, shape = _positions(locals_)
    _, ordered = _descending(flat)
    n_pos = flat.shape[0]
    values = _top_mean(ordered, n_pos)
    ctx = AggregationContext(np.ones(flat.shape, dtype=bool), np.full(flat.shape[1], n_pos), shape)
    return GlobalFeature(values, AVERAGE), ctx


def aggregate_ma(locals_):
    flat, shape = _positions(locals_)
    order, ordered = _descending(flat)
    ctx = AggregationContext(_select(order, 1), np.ones(flat.shape[1], dtype=np.int64), shape)
    return GlobalFeature(_top_mean(ordered, 1), MAX), ctx


def aggregate_kma(locals_, k: int):
    flat, shape = _positions(locals_)
    n_pos = flat.shape[0]
    if not 1 <= k <= n_pos:
        raise ParameterError(f"K={k} outside [1, {n_pos}] for this tuple")
    order, ordered = _descending(flat)
    values = _top_mean(ordered, k)
    ctx = AggregationContext(_select(order, k), np.full(flat.shape[1], k), shape)
    return GlobalFeature(values, K_MAX, k), ctx


def aggregate(locals_, method: str = AVERAGE, k: int | None = None):
    if method == AVERAGE:
        return aggregate_aa(locals_)
    if method == MAX:
        return aggregate_ma(locals_)
    if method == K_MAX:
        if k is None:
            raise ParameterError("KMA needs K")
        return aggregate_kma(locals_, k)
    raise ParameterError(f"unknown aggregation {method!r}; expected one of {METHODS}")


def aggregation_backward(ctx: AggregationContext, d_global: np.ndarray) -> np.ndarray:
    """Route ``d_global`` back onto the ``(n, L, L, D)`` local maps."""
    d_global = np.asarray(d_global, dtype=np.float64)
    if d_global.shape != (ctx.mask.shape[1],):
        raise ShapeError(f"d_global shape {d_global.shape} != ({ctx.mask.shape[1]},)")
    d_flat = np.where(ctx.mask, d_global / ctx.count, 0.0)
    return d_flat.reshape(ctx.locals_shape)
