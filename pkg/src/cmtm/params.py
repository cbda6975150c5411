"""Helpers for walking nested dataclasses of :class:`Tensor` parameters."""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterator, Tuple

import numpy as np

from .tensor import Tensor


def named_tensors(obj, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor in a parameter tree.

    Dataclass fields are visited in declaration order, lists by index, so the
    ordering is stable and doubles as the checkpoint ordering.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, _join(prefix, str(i)))


def map_tensors(obj, fn: Callable[[str, Tensor], Tensor], prefix: str = ""):
    """Structural copy of ``obj`` with every tensor replaced by ``fn(name, tensor)``."""
    if isinstance(obj, Tensor):
        return fn(prefix, obj)
    if dataclasses.is_dataclass(obj):
        changes = {
            f.name: map_tensors(getattr(obj, f.name), fn, _join(prefix, f.name))
            for f in dataclasses.fields(obj)
        }
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [map_tensors(v, fn, _join(prefix, str(i))) for i, v in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(map_tensors(v, fn, _join(prefix, str(i))) for i, v in enumerate(obj))
    return obj


def clone(obj, dtype=None):
    """Deep copy of a parameter tree, optionally cast to another precision."""

    def copy(_, t):
        data = t.data.astype(dtype) if dtype is not None else t.data.copy()
        return Tensor(data, requires_grad=t.requires_grad, dtype=data.dtype)

    return map_tensors(obj, copy)


def state_dict(obj) -> dict:
    return {name: t.data for name, t in named_tensors(obj)}


def load_state(obj, arrays: dict):
    """Copy of ``obj`` whose tensors take their values from ``arrays`` by name."""

    def fill(name, t):
        return Tensor(np.array(arrays[name]), requires_grad=t.requires_grad, dtype=t.dtype)

    return map_tensors(obj, fill)


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
