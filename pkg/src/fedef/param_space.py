"""Grouped flat parameter vectors.

Every quantity that lives in model space (weights, gradients, local updates,
error accumulators, server residuals) is a :class:`ParamVector`: a float64
array tagged with the :class:`GroupLayout` that splits it into blocks, e.g.
one block per network layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .errors import NumericInputError, StructuralError


@dataclass(frozen=True)
class GroupLayout:
    group_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.group_sizes)
        if len(sizes) == 0:
            raise StructuralError("layout needs at least one group")
        if any(s < 1 for s in sizes):
            raise StructuralError(f"group sizes must be positive, got {sizes}")
        object.__setattr__(self, "group_sizes", sizes)

    @classmethod
    def single(cls, d: int) -> "GroupLayout":
        return cls((d,))

    @property
    def d(self) -> int:
        return sum(self.group_sizes)

    @property
    def num_groups(self) -> int:
        return len(self.group_sizes)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        """Start index of each group, plus the total length at the end."""
        out = [0]
        for s in self.group_sizes:
            out.append(out[-1] + s)
        return tuple(out)

    def slices(self) -> Iterator[slice]:
        off = self.offsets
        for i in range(self.num_groups):
            yield slice(off[i], off[i + 1])


@dataclass(frozen=True, eq=False)
class ParamVector:
    layout: GroupLayout
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.shape[0] != self.layout.d:
            raise StructuralError(
                f"values have length {v.shape[0]}, layout expects {self.layout.d}"
            )
        if not np.isfinite(v).all():
            raise NumericInputError("ParamVector entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, layout: GroupLayout) -> "ParamVector":
        return cls(layout, np.zeros(layout.d))

    @classmethod
    def of(cls, values: Sequence[float], groups: Sequence[int] | None = None) -> "ParamVector":
        """Convenience constructor; a single group unless ``groups`` is given."""
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        layout = GroupLayout(tuple(groups)) if groups is not None else GroupLayout.single(arr.size)
        return cls(layout, arr)

    def __len__(self) -> int:
        return self.layout.d

    def __add__(self, other: "ParamVector") -> "ParamVector":
        _check_same_layout(self, other)
        return ParamVector(self.layout, self.values + other.values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        _check_same_layout(self, other)
        return ParamVector(self.layout, self.values - other.values)

    def __mul__(self, a: float) -> "ParamVector":
        return ParamVector(self.layout, float(a) * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(self.layout, -self.values)

    def groups(self) -> Iterator[np.ndarray]:
        for sl in self.layout.slices():
            yield self.values[sl]

    def identical(self, other: "ParamVector") -> bool:
        """Bitwise equality (layout and every float)."""
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"ParamVector(groups={list(self.layout.group_sizes)}, values={self.values.tolist()})"


def _check_same_layout(x: ParamVector, y: ParamVector) -> None:
    if x.layout != y.layout:
        raise StructuralError(
            f"layout mismatch: {x.layout.group_sizes} vs {y.layout.group_sizes}"
        )


def add_scaled(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``y + a * x`` elementwise."""
    _check_same_layout(x, y)
    return ParamVector(y.layout, y.values + float(a) * x.values)


def sq_norm(x: ParamVector) -> float:
    v = x.values
    return float(np.dot(v, v))


def group_l1_norms(x: ParamVector) -> list[float]:
    return [float(np.abs(g).sum()) for g in x.groups()]


def group_sq_norms(x: ParamVector) -> list[float]:
    return [float(np.dot(g, g)) for g in x.groups()]


def mean_of(vectors: Sequence[ParamVector]) -> ParamVector:
    """Arithmetic mean, summed in the order given."""
    if not vectors:
        raise StructuralError("mean of an empty collection")
    acc = np.zeros(vectors[0].layout.d)
    for v in vectors:
        _check_same_layout(vectors[0], v)
        acc = acc + v.values
    return ParamVector(vectors[0].layout, acc / len(vectors))
