"""Quadtree generating networks at toy scale: label quadtrees, sparse convolutions,
a coarse-to-fine segmentation model and its training loop."""

from .errors import (
    BoundsError,
    ClassRangeError,
    ConfigError,
    FormatError,
    InputError,
    IoError,
    ModeError,
    QgnError,
    ShapeError,
    StructureError,
    VerificationError,
)
from .maskio import Mask, gen_synthetic, read_mask, write_mask
from .model import QgnConfig, Scheme, assemble, forward, init_model, load_checkpoint, predict, save_checkpoint
from .quadtree import TPyramid, Quadtree, build_t_pyramid, quadtree_decode, quadtree_encode, sparsity_stats

__version__ = "0.1.0"
