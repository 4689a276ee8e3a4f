"""Systematic OOD benchmark harness for factor-of-variation image datasets."""

from .factors import FactorAxis, FactorSpace, PRESETS, get_preset
from .splits import (SplitAssignment, SplitSpec, default_split_spec, make_random_split,
                     make_split, make_structured_split, single_ood_subsets, split_stats)

__all__ = [
    "FactorAxis", "FactorSpace", "PRESETS", "get_preset",
    "SplitAssignment", "SplitSpec", "default_split_spec", "make_random_split", "make_split",
    "make_structured_split", "single_ood_subsets", "split_stats",
]
__version__ = "0.1.0"
