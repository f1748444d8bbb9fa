"""Full pre-training model: encoder plus the three objective heads."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .config import RunConfig
from .encoder import PyramidEncoder
from .heads import MatchHead, MlmHead, ReconDecoder
from .modules import Module
from .seeding import derive_rng
from .text import TokenSequence


class PretrainModel(Module):
    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        self.encoder = PyramidEncoder(cfg, vocab_size, rng)
        self.decoder = ReconDecoder(cfg.stage_dims, rng)
        self.match = MatchHead(cfg.stage_dims[-1], rng)
        self.mlm = MlmHead(cfg.stage_dims[-1], vocab_size, rng)
        self.cfg = cfg

    @classmethod
    def create(cls, cfg: RunConfig, vocab_size: int) -> "PretrainModel":
        return cls(cfg, vocab_size, derive_rng(cfg.seed, "model-init"))

    def forward(self, image: np.ndarray, seq: TokenSequence, capture=None):
        """Run the encoder on one (image, caption) pair.

        ``image`` is a channel-first float array in [0, 1]; returns the
        per-stage language and vision states.
        """
        return self.encoder.forward(Tensor(image), seq.ids, seq.valid,
                                    capture=capture)

    def match_probability(self, image: np.ndarray, seq: TokenSequence) -> float:
        """Positive-class matching probability for one pair, no masking."""
        lang_states, _ = self.forward(image, seq)
        probs = self.match(lang_states[-1])
        return float(probs.data[1])

    def reconstruct(self, masked_image: np.ndarray, seq: TokenSequence) -> np.ndarray:
        _, vision_states = self.forward(masked_image, seq)
        return self.decoder(vision_states).data
