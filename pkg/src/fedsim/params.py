"""Flat parameter vectors with a named layer layout.

Every model and strategy exchanges parameters as one contiguous float64
vector. The :class:`LayerLayout` records which slice belongs to which layer so
that weight-sharing strategies can split a vector into a shared and a personal
part and put it back together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DivergenceError, DomainError, StructuralError


@dataclass(frozen=True)
class LayerLayout:
    """Ordered ``(name, (start, stop))`` entries covering ``[0, dim)``."""

    entries: tuple[tuple[str, tuple[int, int]], ...]

    def __post_init__(self):
        entries = tuple((str(name), (int(span[0]), int(span[1]))) for name, span in self.entries)
        object.__setattr__(self, "entries", entries)
        names = [name for name, _ in entries]
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate layer names in layout: {names}")
        pos = 0
        for name, (start, stop) in entries:
            if start != pos or stop < start:
                raise StructuralError(f"layer {name!r} span {(start, stop)} is not contiguous from {pos}")
            pos = stop

    @classmethod
    def from_sizes(cls, sizes: Iterable[tuple[str, int]]) -> "LayerLayout":
        entries = []
        pos = 0
        for name, size in sizes:
            entries.append((name, (pos, pos + int(size))))
            pos += int(size)
        return cls(tuple(entries))

    @property
    def dim(self) -> int:
        return self.entries[-1][1][1] if self.entries else 0

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def span(self, name: str) -> tuple[int, int]:
        for layer, span in self.entries:
            if layer == name:
                return span
        raise StructuralError(f"unknown layer {name!r}; layout has {self.names}")

    def boundary_index(self, boundary_layer: str | None) -> int:
        """Index one past the end of ``boundary_layer`` (0 for ``None``)."""
        if boundary_layer is None:
            return 0
        return self.span(boundary_layer)[1]


class ParamVector:
    """Immutable float64 vector tied to a :class:`LayerLayout`.

    Non-finite entries are rejected at construction.
    """

    __slots__ = ("_values", "layout")

    def __init__(self, values, layout: LayerLayout | None = None):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if layout is None:
            layout = LayerLayout.from_sizes([("layer0", arr.size)])
        if arr.size != layout.dim:
            raise StructuralError(f"vector length {arr.size} does not match layout dim {layout.dim}")
        if not np.all(np.isfinite(arr)):
            raise DivergenceError("parameter vector contains non-finite values")
        arr.setflags(write=False)
        self._values = arr
        self.layout = layout

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dim(self) -> int:
        return self._values.size

    def __len__(self) -> int:
        return self._values.size

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._values
        return self._values.astype(dtype)

    def __repr__(self) -> str:
        return f"ParamVector({self._values.tolist()!r}, layers={self.layout.names})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self._values, other._values)

    __hash__ = None

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def layer(self, name: str) -> np.ndarray:
        start, stop = self.layout.span(name)
        return self._values[start:stop]

    def norm(self) -> float:
        return float(np.linalg.norm(self._values))

    def _binary(self, other, op):
        if isinstance(other, ParamVector):
            _check_layouts([self, other])
            other = other._values
        return ParamVector(op(self._values, other), self.layout)

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar):
        return self._binary(scalar, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return ParamVector(-self._values, self.layout)


def _check_layouts(vectors: Sequence) -> None:
    layouts = {v.layout for v in vectors if isinstance(v, ParamVector)}
    if len(layouts) > 1:
        raise StructuralError("parameter vectors have different layouts")
    sizes = {np.asarray(v).size for v in vectors}
    if len(sizes) > 1:
        raise StructuralError(f"parameter vectors have different lengths: {sorted(sizes)}")


def weighted_average(vectors: Sequence, weights: Sequence[float], ids: Sequence[int] | None = None):
    """Return ``sum(w_k * v_k) / sum(w_k)``.

    Terms are accumulated in ascending input index, or ascending ``ids`` when
    given, so results do not depend on the order clients finished in. Returns a
    :class:`ParamVector` when the inputs are ParamVectors, else an ndarray.
    """
    if len(vectors) == 0:
        raise StructuralError("weighted_average needs at least one vector")
    if len(vectors) != len(weights):
        raise StructuralError("vectors and weights differ in length")
    _check_layouts(vectors)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite and nonnegative")
    order = range(len(vectors)) if ids is None else np.argsort(np.asarray(ids), kind="stable")
    total = 0.0
    acc = np.zeros(np.asarray(vectors[0]).size)
    for k in order:
        acc += w[k] * np.asarray(vectors[k], dtype=np.float64)
        total += w[k]
    if total <= 0:
        raise DomainError("weights sum to zero")
    out = acc / total
    if isinstance(vectors[0], ParamVector):
        return ParamVector(out, vectors[0].layout)
    return out


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors."""
    _check_layouts([a, b])
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise DomainError("cosine similarity of a zero vector (degenerate client update)")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def split(v: ParamVector, boundary_layer: str | None) -> tuple[np.ndarray, np.ndarray]:
    """Split into (base, top); base covers every layer up to and including the boundary.

    ``boundary_layer=None`` gives an empty base.
    """
    cut = v.layout.boundary_index(boundary_layer)
    values = np.asarray(v)
    return values[:cut].copy(), values[cut:].copy()


def merge(base, top, layout: LayerLayout) -> ParamVector:
    """Inverse of :func:`split`."""
    base = np.asarray(base, dtype=np.float64).reshape(-1)
    top = np.asarray(top, dtype=np.float64).reshape(-1)
    if base.size + top.size != layout.dim:
        raise StructuralError(f"base ({base.size}) + top ({top.size}) != layout dim {layout.dim}")
    return ParamVector(np.concatenate([base, top]), layout)
