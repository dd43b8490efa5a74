"""Python bindings for the esparse N:M pruning toolkit."""

from ._core import (
    FormatError,
    IoError,
    PackedWeight,
    PruneResult,
    ShapeError,
    ValidationError,
    channel_shuffle,
    channel_stats,
    load_packed,
    metric,
    nm_mask,
    pack,
    prune_layer,
    read_tensor,
    retained_objective,
    synth_layer,
    write_tensor,
)

__all__ = [
    "FormatError",
    "IoError",
    "PackedWeight",
    "PruneResult",
    "ShapeError",
    "ValidationError",
    "channel_shuffle",
    "channel_stats",
    "load_packed",
    "metric",
    "nm_mask",
    "pack",
    "prune_layer",
    "read_tensor",
    "retained_objective",
    "synth_layer",
    "write_tensor",
]
