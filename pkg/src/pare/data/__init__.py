"""Synthetic phantom generation and dataset files."""

from .io import (DatasetFormatError, assign_splits, read_dataset, read_manifest, read_sample,
                 write_dataset, write_sample)
from .phantom import (PhantomError, PhantomSpec, VolumeSample, generate_dataset, generate_phantom,
                      oracle_features, sample_rng)

__all__ = [
    "DatasetFormatError", "PhantomError", "PhantomSpec", "VolumeSample", "assign_splits",
    "generate_dataset", "generate_phantom", "oracle_features", "read_dataset", "read_manifest",
    "read_sample", "sample_rng", "write_dataset", "write_sample",
]
