"""Segmentation of articulated voxel sequences into protrusions.

Each frame is mapped by locally linear embedding, where limbs become
branches; branch ends seed a hypergraph clustering, and carried-over seed
points keep cluster identities consistent across frames.
"""

from .clustering import ClusterLabeling, SeedSet
from .data import AprioriSegmentation, SubsampleParams, VoxelFrame, VoxelSequence, load_sequence, save_sequence
from .temporal import PipelineParams, SequenceResult, segment_sequence

__version__ = "0.1.0"

__all__ = [
    "AprioriSegmentation", "ClusterLabeling", "PipelineParams", "SeedSet", "SequenceResult", "SubsampleParams",
    "VoxelFrame", "VoxelSequence", "load_sequence", "save_sequence", "segment_sequence",
]
