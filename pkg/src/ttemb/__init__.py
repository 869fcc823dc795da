"""Tensor-train compressed embedding tables with reuse-aware kernels.

Subpackages by concern:

    tt_core   -- table layout, index arithmetic, reconstruction, serialization
    lookup    -- forward lookups with prefix-reuse buffering and op counters
    backward  -- gradient aggregation, core gradients, fused SGD updates
    reorder   -- frequency/community driven index relabeling
    model     -- small DLRM-style classifier built on the tables
    pipeline  -- deterministic pipelined parameter-server training simulator
    data      -- synthetic dataset generation and CSV handling
    cli       -- command line front end (gen-data, train, reorder,
                 bench-lookup, report)
"""

from . import tt_core, lookup, backward, reorder, data, model, pipeline

__all__ = [
    "tt_core",
    "lookup",
    "backward",
    "reorder",
    "data",
    "model",
    "pipeline",
]
