"""pvlm: a desk-scale pyramid vision-language model, built from scratch.

Masked-image + masked-token + pair-matching pre-training over a four-stage
pyramid encoder, with its own tape-based autodiff, a synthetic product
dataset, and a retrieval/recognition evaluation harness.
"""

from .autodiff import Tape, Tensor, precision
from .config import RunConfig, StageConfig
from .data import ProductDataset, SyntheticSpec, generate_synthetic, load_manifest
from .model import PretrainModel
from .text import TokenSequence, Vocab, apply_mlm_mask, build_vocab, encode
from .vision import MaskPlan, apply_mask, make_mask_plan, normalize

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "precision",
    "RunConfig", "StageConfig",
    "ProductDataset", "SyntheticSpec", "generate_synthetic", "load_manifest",
    "PretrainModel",
    "TokenSequence", "Vocab", "apply_mlm_mask", "build_vocab", "encode",
    "MaskPlan", "apply_mask", "make_mask_plan", "normalize",
    "__version__",
]
