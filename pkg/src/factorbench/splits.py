"""Train/test partitions of a factor grid.

Four modes are supported. ``random`` draws an IID subset. The structured modes
are all driven by per-axis sets of *exclusive* levels:

* interpolation / extrapolation: a cell is in TRAIN iff none of its levels is
  exclusive, so every exclusive level is unseen during training.
* composition: the rule is mirrored. TEST is the corner box of cells with no
  exclusive level at all, TRAIN is the union of the exclusive slabs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .factors import FactorSpace

MODES = ("random", "composition", "interpolation", "extrapolation")
STRUCTURED = MODES[1:]


class SplitError(ValueError):
    pass


class DegenerateSplitError(SplitError):
    pass


class UnsupportedModeError(SplitError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    mode: str
    exclusive_sets: tuple[frozenset[int], ...] = ()
    train_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise SplitError(f"unknown split mode {self.mode!r}; choose from {MODES}")
        object.__setattr__(self, "exclusive_sets",
                           tuple(frozenset(int(v) for v in s) for s in self.exclusive_sets))

    def to_dict(self) -> dict:
        return {"mode": self.mode,
                "exclusive_sets": [sorted(s) for s in self.exclusive_sets],
                "train_fraction": self.train_fraction,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(d["mode"], tuple(frozenset(s) for s in d.get("exclusive_sets", ())),
                   d.get("train_fraction"), int(d.get("seed", 0)))


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    space: FactorSpace
    spec: SplitSpec
    membership: np.ndarray = field(repr=False)  # True = train

    @property
    def counts(self) -> tuple[int, int]:
        n_train = int(self.membership.sum())
        return n_train, self.membership.size - n_train

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.membership)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.membership)


@dataclass(frozen=True, eq=False)
class OodSubset:
    axis: int
    name: str
    indices: np.ndarray = field(repr=False)


def make_random_split(space: FactorSpace, train_fraction: float, seed: int) -> SplitAssignment:
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    total = space.total
    n_train = int(math.floor(train_fraction * total + 0.5))
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = rng.permutation(total)[:n_train]
    membership = np.zeros(total, dtype=bool)
    membership[chosen] = True
    spec = SplitSpec("random", tuple(frozenset() for _ in space.axes), train_fraction, seed)
    return SplitAssignment(space, spec, membership)


def _exclusive_masks(space: FactorSpace, spec: SplitSpec) -> list[np.ndarray]:
    masks = []
    for axis, levels in zip(space.axes, spec.exclusive_sets):
        m = np.zeros(axis.cardinality, dtype=bool)
        m[sorted(levels)] = True
        masks.append(m)
    return masks


def _hits_per_cell(space: FactorSpace, spec: SplitSpec) -> np.ndarray:
    """Number of axes whose level is exclusive, for every cell in index order."""
    shape = space.cardinalities
    hits = np.zeros(shape, dtype=np.int8)
    for i, m in enumerate(_exclusive_masks(space, spec)):
        view = [1] * len(shape)
        view[i] = shape[i]
        hits += m.reshape(view).astype(np.int8)
    return hits.reshape(-1)


def validate_spec(space: FactorSpace, spec: SplitSpec) -> None:
    if spec.mode == "random":
        if spec.train_fraction is None or not 0.0 < spec.train_fraction < 1.0:
            raise SplitError("random split needs train_fraction in (0, 1)")
        return
    if len(spec.exclusive_sets) != space.n_factors:
        raise SplitError(f"expected {space.n_factors} exclusive sets, got {len(spec.exclusive_sets)}")
    if not any(spec.exclusive_sets):
        raise DegenerateSplitError("all exclusive sets are empty; the split would be degenerate")
    if spec.mode == "composition" and sum(1 for s in spec.exclusive_sets if s) < 2:
        # one slab alone leaves the other levels of that axis unseen in training
        raise DegenerateSplitError("composition needs exclusive sets on at least two axes")
    for axis, levels in zip(space.axes, spec.exclusive_sets):
        if not levels:
            continue
        if not axis.ordered:
            raise SplitError(f"axis {axis.name!r} is unordered and cannot be split")
        if min(levels) < 0 or max(levels) >= axis.cardinality:
            raise SplitError(f"axis {axis.name!r}: exclusive levels outside [0, {axis.cardinality - 1}]")
        if len(levels) >= axis.cardinality:
            raise DegenerateSplitError(f"axis {axis.name!r}: every level is exclusive")
        block = set(range(min(levels), max(levels) + 1)) == set(levels)
        if spec.mode == "extrapolation" and not (block and max(levels) == axis.cardinality - 1):
            raise SplitError(f"axis {axis.name!r}: extrapolation needs a contiguous top-of-range block")
        if spec.mode == "composition" and not (block and min(levels) == 0):
            raise SplitError(f"axis {axis.name!r}: composition needs a contiguous bottom-of-range block")


def make_structured_split(space: FactorSpace, spec: SplitSpec) -> SplitAssignment:
    if spec.mode == "random":
        raise SplitError("use make_random_split for random splits")
    validate_spec(space, spec)
    hits = _hits_per_cell(space, spec)
    if spec.mode == "composition":
        membership = hits > 0
    else:
        membership = hits == 0
    return SplitAssignment(space, spec, membership)


def make_split(space: FactorSpace, spec: SplitSpec) -> SplitAssignment:
    if spec.mode == "random":
        return make_random_split(space, spec.train_fraction, spec.seed)
    return make_structured_split(space, spec)


# Verbatim per-dataset exclusive sets. dsprites-inj reuses the dSprites sets with
# the orientation axis mapped from 40 to 10 levels at the same held-out ratio.
_TABLES: dict[str, dict[str, dict[str, Sequence[int]]]] = {
    "dsprites": {
        "interpolation": {"scale": [1, 4], "orientation": [2, 7, 12, 17, 22, 27, 32, 37],
                          "x-position": [2, 7, 11, 15, 20, 24, 29],
                          "y-position": [2, 7, 11, 15, 20, 24, 29]},
        "extrapolation": {"scale": [4, 5], "orientation": range(32, 40),
                          "x-position": range(25, 32), "y-position": range(25, 32)},
        "composition": {"orientation": [0, 1, 2, 3], "x-position": [0, 1, 2],
                        "y-position": [0, 1, 2]},
    },
    "dsprites-inj": {
        "interpolation": {"scale": [1, 4], "orientation": [2, 7],
                          "x-position": [2, 7, 11, 15, 20, 24, 29],
                          "y-position": [2, 7, 11, 15, 20, 24, 29]},
        "extrapolation": {"scale": [4, 5], "orientation": [8, 9],
                          "x-position": range(25, 32), "y-position": range(25, 32)},
        "composition": {"orientation": [0], "x-position": [0, 1, 2], "y-position": [0, 1, 2]},
    },
    "shapes3d": {
        "interpolation": {"floor color": [2, 7], "wall color": [2, 7], "object color": [2, 7],
                          "object size": [2, 5], "azimuth": [2, 7, 12]},
        "extrapolation": {"floor color": [8, 9], "wall color": [8, 9], "object color": [8, 9],
                          "object size": [6, 7], "azimuth": [12, 13, 14]},
        "composition": {"floor color": [0], "wall color": [0], "object color": [0], "azimuth": [0]},
    },
    "mpi3d": {
        "interpolation": {"color": [3], "height": [1], "background color": [1],
                          "x-axis": [5, 15, 24, 34], "y-axis": [5, 15, 24, 34]},
        "extrapolation": {"color": [5], "height": [2], "background color": [2],
                          "x-axis": range(36, 40), "y-axis": range(36, 40)},
        "composition": {"x-axis": range(6), "y-axis": range(6)},
    },
    "celebglow": {
        "interpolation": {"smile": [1, 4], "blond": [1, 4], "age": [1, 4]},
        "extrapolation": {"smile": [4, 5], "blond": [4, 5], "age": [4, 5]},
    },
}

TARGET_RANGE = (0.25, 0.35)


def _eligible(space: FactorSpace) -> list[int]:
    return [i for i, a in enumerate(space.axes) if a.ordered and a.cardinality > 2]


def _levels_for(mode: str, card: int, k: int) -> list[int]:
    if k <= 0:
        return []
    if mode == "extrapolation":
        return list(range(card - k, card))
    if mode == "composition":
        return list(range(k))
    # interpolation: k interior levels, evenly spread
    interior = np.linspace(1, card - 2, k + 2)[1:-1] if k < card - 2 else np.arange(1, card - 1)
    return sorted({int(round(v)) for v in interior})


def _train_fraction(mode: str, space: FactorSpace, sizes: dict[int, int]) -> float:
    keep = 1.0
    for i, k in sizes.items():
        keep *= (space.cardinalities[i] - k) / space.cardinalities[i]
    return 1.0 - keep if mode == "composition" else keep


def _generic_sets(space: FactorSpace, mode: str) -> tuple[frozenset[int], ...]:
    axes = _eligible(space)
    if not axes:
        raise SplitError(f"space {space.name or '<anonymous>'} has no splittable axis "
                         "(all categorical or with cardinality <= 2)")
    sets: dict[int, list[int]] = {}
    for i in axes:
        c = space.cardinalities[i]
        if mode == "extrapolation":
            sets[i] = list(range(c - math.ceil(0.2 * c), c)) if c > 3 else [c - 1]
        elif mode == "interpolation":
            sets[i] = [v for v in range(2, c - 1, 5)] or ([1] if c > 2 else [])
        else:
            sets[i] = list(range(math.ceil(0.15 * c)))
    sizes = {i: len(s) for i, s in sets.items()}
    limits = {i: (space.cardinalities[i] - 2 if mode == "interpolation" else space.cardinalities[i] - 1)
              for i in axes}
    lo, hi = TARGET_RANGE
    target = 0.5 * (lo + hi)
    frac = _train_fraction(mode, space, sizes)
    rescaled = False
    # greedy one-level moves toward the target band; bounded by the total number of levels
    for _ in range(sum(space.cardinalities)):
        if lo <= frac <= hi:
            break
        best = None
        for i in axes:
            for step in (-1, 1):
                k = sizes[i] + step
                if not 0 <= k <= limits[i]:
                    continue
                trial = dict(sizes)
                trial[i] = k
                if not any(trial.values()):
                    continue
                f = _train_fraction(mode, space, trial)
                if best is None or abs(f - target) < abs(best[0] - target) \
                        or (abs(f - target) == abs(best[0] - target) and (i, step) < best[1:]):
                    best = (f, i, step)
        if best is None or abs(best[0] - target) >= abs(frac - target):
            break
        frac, i, step = best
        sizes[i] += step
        rescaled = True
    out = [frozenset() for _ in space.axes]
    for i in axes:
        k = sizes[i]
        if rescaled or mode != "interpolation":
            out[i] = frozenset(_levels_for(mode, space.cardinalities[i], k))
        else:
            out[i] = frozenset(sets[i])
    return tuple(out)


def default_split_spec(space: FactorSpace, mode: str, seed: int = 0,
                       train_fraction: float = 0.3) -> SplitSpec:
    """Exclusive sets for ``mode``: verbatim tables for the known presets, a sized rule otherwise."""
    if mode == "random":
        return SplitSpec("random", tuple(frozenset() for _ in space.axes), train_fraction, seed)
    if mode not in STRUCTURED:
        raise SplitError(f"unknown split mode {mode!r}")
    table = _TABLES.get(space.name)
    if table is not None:
        if mode not in table:
            raise UnsupportedModeError(f"preset {space.name!r} defines no {mode} split")
        sets = table[mode]
        unknown = set(sets) - set(space.names)
        if unknown:
            raise SplitError(f"table axes {sorted(unknown)} not in space {space.names}")
        return SplitSpec(mode, tuple(frozenset(sets.get(n, ())) for n in space.names), None, seed)
    return SplitSpec(mode, _generic_sets(space, mode), None, seed)


def single_ood_subsets(space: FactorSpace, assignment: SplitAssignment) -> list[OodSubset]:
    """Test cells where exactly one axis takes a never-trained level, one subset per split axis."""
    spec = assignment.spec
    if spec.mode not in ("interpolation", "extrapolation"):
        raise UnsupportedModeError(
            f"single-OOD subsets are only defined for interpolation/extrapolation, not {spec.mode}")
    hits = _hits_per_cell(space, spec)
    only_one = np.flatnonzero(hits == 1)
    levels = space.combinations_of(only_one)
    masks = _exclusive_masks(space, spec)
    out = []
    for i, (axis, s) in enumerate(zip(space.axes, spec.exclusive_sets)):
        if not s:
            continue
        sel = masks[i][levels[:, i]]
        out.append(OodSubset(i, axis.name, only_one[sel]))
    return out


def split_stats(space: FactorSpace, assignment: SplitAssignment) -> dict:
    n_train, n_test = assignment.counts
    total = n_train + n_test
    seen = []
    train = assignment.train_indices
    for i, axis in enumerate(space.axes):
        if train.size == 0:
            seen.append(set())
            continue
        lv = (train // space.strides[i]) % axis.cardinality
        present = np.bincount(lv, minlength=axis.cardinality) > 0
        seen.append(set(np.flatnonzero(present).tolist()))
    return {"mode": assignment.spec.mode,
            "train_count": n_train, "test_count": n_test, "total": total,
            "train_fraction": n_train / total, "test_fraction": n_test / total,
            "seen_levels": seen}


def format_stats(space: FactorSpace, stats: dict) -> str:
    lines = [f"space:          {space.name or '<anonymous>'} ({space.total} cells)",
             f"mode:           {stats['mode']}",
             f"train:          {stats['train_count']} ({stats['train_fraction']:.3f})",
             f"test:           {stats['test_count']} ({stats['test_fraction']:.3f})"]
    for axis, seen in zip(space.axes, stats["seen_levels"]):
        lines.append(f"  {axis.name:<18} seen {len(seen)}/{axis.cardinality} levels")
    return "\n".join(lines)


# Sidecar: b"FVS1", u32 header length, UTF-8 JSON header, packed membership bitmap
# (little bit order, index 0 in the lowest bit of byte 0).
SPLIT_MAGIC = b"FVS1"


def save_split(assignment: SplitAssignment, path) -> None:
    header = json.dumps({"version": 1,
                         "space_fingerprint": assignment.space.fingerprint(),
                         "space": assignment.space.describe(),
                         "spec": assignment.spec.to_dict(),
                         "n": int(assignment.membership.size)},
                        sort_keys=True, separators=(",", ":")).encode()
    bits = np.packbits(assignment.membership, bitorder="little")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(SPLIT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(bits.tobytes())
    tmp.replace(path)


def load_split(path, space: FactorSpace | None = None) -> SplitAssignment:
    raw = Path(path).read_bytes()
    if raw[:4] != SPLIT_MAGIC:
        raise SplitError(f"{path}: not a split sidecar (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen])
    stored = FactorSpace.from_description(header["space"])
    if space is not None and space.fingerprint() != header["space_fingerprint"]:
        raise SplitError(f"{path}: split was made for a different factor space")
    n = header["n"]
    payload = np.frombuffer(raw[8 + hlen:], dtype=np.uint8)
    if payload.size != (n + 7) // 8:
        raise SplitError(f"{path}: bitmap has {payload.size} bytes, expected {(n + 7) // 8}")
    membership = np.unpackbits(payload, bitorder="little")[:n].astype(bool)
    return SplitAssignment(space or stored, SplitSpec.from_dict(header["spec"]), membership)
