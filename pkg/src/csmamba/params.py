"""Parameter creation and traversal helpers.

Parameters live in plain dataclasses.  Each one is drawn from an RNG stream
named after its dotted path, so initial values do not depend on creation order.
"""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .tensor import Rng, Tensor


def normal(name: str, shape, std: float, seed: int, dtype) -> Tensor:
    data = Rng(seed, name).normal(shape) * std
    return Tensor(data.astype(dtype), requires_grad=True)


def constant(shape, value: float, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def iter_named(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor reachable from ``obj``.

    Walks dataclass fields and list/tuple items; a tensor reachable through
    several paths (shared weights) is reported once, under its first name.
    """
    seen: set[int] = set()

    def walk(o, path):
        if isinstance(o, Tensor):
            if id(o) not in seen:
                seen.add(id(o))
                yield path, o
        elif dataclasses.is_dataclass(o) and not isinstance(o, type):
            for f in dataclasses.fields(o):
                yield from walk(getattr(o, f.name), f"{path}.{f.name}" if path else f.name)
        elif isinstance(o, (list, tuple)):
            for i, item in enumerate(o):
                yield from walk(item, f"{path}.{i}" if path else str(i))

    yield from walk(obj, prefix)


def parameters(obj) -> list[Tensor]:
    return [t for _, t in iter_named(obj)]


def count(obj) -> int:
    return sum(t.size for _, t in iter_named(obj))
