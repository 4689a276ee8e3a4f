"""Factor hypercube data model.

A :class:`FactorSpace` is an ordered list of integer axes. Every combination of
levels is one cell of the grid, addressed by a combination index in row-major
order (last axis fastest).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class InvalidFactorError(ValueError):
    """A factor vector does not fit its space."""


class UnknownPresetError(KeyError):
    pass


@dataclass(frozen=True)
class FactorAxis:
    name: str
    cardinality: int
    ordered: bool = True

    def __post_init__(self):
        if int(self.cardinality) < 1:
            raise ValueError(f"axis {self.name!r}: cardinality must be >= 1, got {self.cardinality}")


@dataclass(frozen=True)
class FactorSpace:
    axes: tuple[FactorAxis, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        if not self.axes:
            raise ValueError("a factor space needs at least one axis")
        names = [a.name for a in self.axes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate axis names in {names}")

    @classmethod
    def from_cardinalities(cls, cardinalities: Sequence[int], names: Sequence[str] | None = None,
                           ordered: Sequence[bool] | None = None, name: str = "") -> "FactorSpace":
        names = names or [f"f{i}" for i in range(len(cardinalities))]
        ordered = ordered if ordered is not None else [c > 2 for c in cardinalities]
        return cls(tuple(FactorAxis(n, int(c), bool(o)) for n, c, o in zip(names, cardinalities, ordered)), name)

    @property
    def n_factors(self) -> int:
        return len(self.axes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.axes)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(a.cardinality for a in self.axes)

    @property
    def total(self) -> int:
        return int(np.prod(self.cardinalities, dtype=np.int64))

    @cached_property
    def strides(self) -> np.ndarray:
        cards = np.asarray(self.cardinalities, dtype=np.int64)
        return np.concatenate([np.cumprod(cards[::-1])[::-1][1:], [1]]).astype(np.int64)

    def axis_index(self, axis: int | str) -> int:
        if isinstance(axis, str):
            try:
                return self.names.index(axis)
            except ValueError:
                raise KeyError(f"no axis named {axis!r} in {self.names}") from None
        return int(axis)

    def _check(self, levels: Sequence[int]) -> None:
        if len(levels) != self.n_factors:
            raise InvalidFactorError(f"expected {self.n_factors} levels, got {len(levels)}")
        for axis, level in zip(self.axes, levels):
            if not 0 <= level < axis.cardinality:
                raise InvalidFactorError(
                    f"axis {axis.name!r}: level {level} outside [0, {axis.cardinality - 1}]")

    def index_of(self, levels: Sequence[int]) -> int:
        self._check(levels)
        return int(sum(int(l) * int(s) for l, s in zip(levels, self.strides)))

    def combination_of(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.total:
            raise IndexError(f"combination index {index} outside [0, {self.total - 1}]")
        out = []
        for stride, card in zip(self.strides, self.cardinalities):
            out.append(int(index // stride) % card)
        return tuple(out)

    def indices_of(self, levels: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`index_of` over rows of an integer matrix."""
        levels = np.asarray(levels, dtype=np.int64)
        cards = np.asarray(self.cardinalities)
        if levels.ndim != 2 or levels.shape[1] != self.n_factors:
            raise InvalidFactorError(f"expected shape (n, {self.n_factors}), got {levels.shape}")
        bad = (levels < 0) | (levels >= cards)
        if bad.any():
            col = int(np.argwhere(bad)[0, 1])
            raise InvalidFactorError(f"axis {self.names[col]!r}: level out of range")
        return levels @ self.strides

    def combinations_of(self, indices: np.ndarray | Iterable[int] | None = None) -> np.ndarray:
        """Factor levels for many indices, shape (n, n_factors). ``None`` means the full grid."""
        if indices is None:
            indices = np.arange(self.total, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.total):
            raise IndexError(f"combination index outside [0, {self.total - 1}]")
        cards = np.asarray(self.cardinalities, dtype=np.int64)
        return (indices[:, None] // self.strides[None, :]) % cards[None, :]

    def normalize(self, levels) -> np.ndarray:
        """Map levels to [0, 1] by dividing by (cardinality - 1); single-level axes map to 0.

        Accepts one factor vector or a matrix of them.
        """
        arr = np.asarray(levels)
        if arr.ndim == 1:
            self._check(list(arr))
        denom = np.maximum(np.asarray(self.cardinalities, dtype=np.float64) - 1.0, 1.0)
        return arr.astype(np.float64) / denom

    def normalized_factors(self, indices=None) -> np.ndarray:
        return self.normalize(self.combinations_of(indices))

    def variance_per_factor(self) -> np.ndarray:
        """Population variance of each normalized axis over the complete grid.

        Every level occurs equally often on a full grid, so the per-axis variance
        only depends on that axis' cardinality: (c^2 - 1) / (12 (c - 1)^2).
        """
        c = np.asarray(self.cardinalities, dtype=np.float64)
        out = np.zeros_like(c)
        many = c > 1
        out[many] = (c[many] ** 2 - 1.0) / (12.0 * (c[many] - 1.0) ** 2)
        return out

    def describe(self) -> dict:
        return {"name": self.name,
                "axes": [{"name": a.name, "cardinality": a.cardinality, "ordered": a.ordered}
                         for a in self.axes]}

    @classmethod
    def from_description(cls, desc: dict) -> "FactorSpace":
        return cls(tuple(FactorAxis(a["name"], int(a["cardinality"]), bool(a["ordered"]))
                         for a in desc["axes"]), desc.get("name", ""))

    def fingerprint(self) -> str:
        """Stable hash of the axis layout; the space name is not part of it."""
        payload = json.dumps(self.describe()["axes"], sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _space(name: str, spec: list[tuple[str, int, bool]]) -> FactorSpace:
    return FactorSpace(tuple(FactorAxis(n, c, o) for n, c, o in spec), name)


# 2-valued and categorical axes are never split.
PRESETS: dict[str, FactorSpace] = {
    "dsprites": _space("dsprites", [
        ("shape", 3, False), ("scale", 6, True), ("orientation", 40, True),
        ("x-position", 32, True), ("y-position", 32, True)]),
    "dsprites-inj": _space("dsprites-inj", [
        ("shape", 3, False), ("scale", 6, True), ("orientation", 10, True),
        ("x-position", 32, True), ("y-position", 32, True)]),
    "dsprites-ci": _space("dsprites-ci", [
        ("shape", 3, False), ("scale", 6, True), ("orientation", 10, True),
        ("x-position", 16, True), ("y-position", 16, True)]),
    "dsprites-tiny": _space("dsprites-tiny", [
        ("shape", 3, False), ("scale", 4, True), ("orientation", 5, True),
        ("x-position", 8, True), ("y-position", 8, True)]),
    "shapes3d": _space("shapes3d", [
        ("floor color", 10, True), ("wall color", 10, True), ("object color", 10, True),
        ("object size", 8, True), ("object type", 4, False), ("azimuth", 15, True)]),
    "mpi3d": _space("mpi3d", [
        ("color", 6, True), ("shape", 6, False), ("size", 2, False), ("height", 3, True),
        ("background color", 3, True), ("x-axis", 40, True), ("y-axis", 40, True)]),
    "celebglow": _space("celebglow", [
        ("person", 1000, False), ("smile", 6, True), ("blond", 6, True), ("age", 6, True)]),
}


def get_preset(name: str) -> FactorSpace:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise UnknownPresetError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
