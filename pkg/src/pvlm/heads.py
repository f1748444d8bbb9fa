"""Objective heads: pixel reconstruction, pair matching, masked-token
prediction, and the weighted total loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .modules import Linear, Module, PatchConv

PROB_FLOOR = 1e-7  # probabilities clamped to [PROB_FLOOR, 1 - PROB_FLOOR]


class ReconDecoder(Module):
    """Four-level up-path over the pyramid vision states.

    Starts at the coarsest state, alternates 2x nearest upsampling with
    concat+conv fusion of the matching finer state, then finishes with a 4x
    upsample, a 3-channel projection, and a sigmoid so the output lives on
    the input pixel grid in [0, 1].
    """

    def __init__(self, dims, rng):
        d1, d2, d3, d4 = dims
        self.fuse3 = PatchConv(d4 + d3, d3, 1, rng)
        self.fuse2 = PatchConv(d3 + d2, d2, 1, rng)
        self.fuse1 = PatchConv(d2 + d1, d1, 1, rng)
        self.project = PatchConv(d1, 3, 1, rng)

    def __call__(self, vision_states) -> Tensor:
        v1, v2, v3, v4 = vision_states
        x = ad.upsample2x(v4)
        x = ad.gelu(self.fuse3(ad.concat([x, v3], axis=0)))
        x = ad.upsample2x(x)
        x = ad.gelu(self.fuse2(ad.concat([x, v2], axis=0)))
        x = ad.upsample2x(x)
        x = ad.gelu(self.fuse1(ad.concat([x, v1], axis=0)))
        x = ad.upsample2x(ad.upsample2x(x))
        return ad.sigmoid(self.project(x))


def reconstruction_loss(pred: Tensor, target: np.ndarray,
                        pixel_mask: np.ndarray | None = None) -> Tensor:
    """Mean smooth-L1 between reconstruction and the unmasked image.

    By default the mean runs over every pixel of every channel; passing a
    boolean (H, W) ``pixel_mask`` restricts it to the masked units.
    """
    target_t = Tensor(np.asarray(target, dtype=pred.data.dtype))
    per_pixel = ad.smooth_l1(pred, target_t)
    if pixel_mask is None:
        return ad.tmean(per_pixel)
    idx = np.nonzero(np.broadcast_to(pixel_mask[None], pred.shape).ravel())[0]
    if idx.size == 0:
        return Tensor(np.zeros(()))
    return ad.tmean(ad.take_rows(ad.flatten(per_pixel), idx))


class MatchHead(Module):
    """Two-class probability for (image, caption) agreement, read off the
    position-0 language embedding of the last stage."""

    def __init__(self, dim: int, rng):
        self.fc = Linear(dim, 2, rng)

    def __call__(self, lang_state: Tensor) -> Tensor:
        cls_row = ad.slice_rows(lang_state, 0, 1)
        return ad.reshape(ad.softmax(self.fc(cls_row)), (2,))


def match_loss(probs: Tensor, label: int) -> Tensor:
    """Binary cross-entropy on the positive-class probability, clamped
    before the log so saturated predictions stay finite."""
    p1 = ad.take_rows(probs, [1])
    p = p1 if label else ad.sub(Tensor(np.ones(1, dtype=probs.data.dtype)), p1)
    return ad.neg(ad.tmean(ad.log(ad.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))))


class MlmHead(Module):
    """Shared projection from the last language state to vocabulary logits."""

    def __init__(self, dim: int, vocab_size: int, rng):
        self.fc = Linear(dim, vocab_size, rng)

    def logits_at(self, lang_state: Tensor, positions: np.ndarray) -> Tensor:
        return self.fc(ad.take_rows(lang_state, positions))


def masked_token_loss(head: MlmHead, lang_state: Tensor,
                      positions: np.ndarray, labels: np.ndarray) -> Tensor:
    """Cross-entropy at the masked positions; 0 when nothing was masked."""
    if positions.size == 0:
        return Tensor(np.zeros(()))
    return ad.cross_entropy(head.logits_at(lang_state, positions), labels)


class CategoryHead(Module):
    def __init__(self, dim: int, n_classes: int, rng):
        self.fc = Linear(dim, n_classes, rng)

    def __call__(self, lang_state: Tensor) -> Tensor:
        return self.fc(ad.slice_rows(lang_state, 0, 1))


class NonFiniteLossError(RuntimeError):
    """A loss term came out NaN/Inf; carries the offending term name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite {term} loss: {value}")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossBreakdown:
    mir: float
    itm: float
    mlm: float
    total: float
    weights: tuple


def total_loss(mir: Tensor, itm: Tensor, mlm: Tensor,
               weights=(10.0, 1.0, 1.0)):
    """Weighted sum of the three objectives.

    Returns the combined scalar tensor plus a float breakdown. Raises
    NonFiniteLossError naming the first non-finite term.
    """
    for name, t in (("mir", mir), ("itm", itm), ("mlm", mlm)):
        v = float(t.data)
        if not np.isfinite(v):
            raise NonFiniteLossError(name, v)
    w1, w2, w3 = (float(w) for w in weights)
    combined = ad.add(ad.add(ad.scale(mir, w1), ad.scale(itm, w2)),
                      ad.scale(mlm, w3))
    breakdown = LossBreakdown(
        mir=float(mir.data), itm=float(itm.data), mlm=float(mlm.data),
        total=float(combined.data), weights=(w1, w2, w3))
    return combined, breakdown
