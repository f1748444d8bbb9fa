"""Downstream evaluation: retrieval candidate sets and recall@K, category
recognition metrics, and masked-reconstruction dumps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig
from .data import ProductDataset
from .model import PretrainModel
from .seeding import derive_rng
from .text import Vocab, encode
from .training import ImageStore
from .vision import apply_mask, denormalize, make_mask_plan

DIRECTIONS = ("TIR", "ITR")  # rank texts per image query / images per text query


@dataclass
class Candidate:
    record_id: str
    image_path: str | None
    caption: str | None


@dataclass
class CandidateSet:
    """One positive pair plus same-sub-category mismatches, pre-shuffled.

    For TIR the query is the image and the candidates vary the caption;
    for ITR the query is the caption and the candidates vary the image.
    """

    direction: str
    query_image: str | None
    query_caption: str | None
    candidates: list
    positive_index: int
    sub_category: str


def build_candidate_sets(dataset: ProductDataset, direction: str,
                         n_neg: int = 100, rng: np.random.Generator | None = None,
                         per_product: bool = False, limit: int | None = None):
    """One candidate set per image-text pair (or per product).

    Negatives come from other products in the same sub-category; when a
    sub-category cannot supply ``n_neg`` of them the set shrinks with a
    warning. Candidates are shuffled once here under the caller's rng, which
    fixes the score-tie ordering downstream.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    rng = rng or np.random.default_rng(0)
    groups = dataset.by_sub_category()
    sets = []
    queries = ([(rec, rec.image_paths[0]) for rec in dataset.records]
               if per_product else dataset.pairs())
    if limit is not None:
        queries = queries[:limit]
    shrunk = set()
    for rec, path in queries:
        pool = [r for r in groups[rec.sub_id] if r.product_id != rec.product_id]
        take = min(n_neg, len(pool))
        if take < n_neg and rec.sub_category not in shrunk:
            warnings.warn(f"sub-category {rec.sub_category!r} has only {len(pool)} "
                          f"other products; shrinking negatives to {take}")
            shrunk.add(rec.sub_category)
        neg_records = [pool[i] for i in rng.choice(len(pool), size=take,
                                                   replace=False)]
        if direction == "TIR":
            cands = [Candidate(rec.product_id, None, rec.caption)]
            cands += [Candidate(r.product_id, None, r.caption) for r in neg_records]
        else:
            cands = [Candidate(rec.product_id, path, None)]
            cands += [Candidate(r.product_id,
                                r.image_paths[int(rng.integers(len(r.image_paths)))],
                                None)
                      for r in neg_records]
        order = rng.permutation(len(cands))
        shuffled = [cands[i] for i in order]
        positive_index = int(np.nonzero(order == 0)[0][0])
        sets.append(CandidateSet(direction, path if direction == "TIR" else None,
                                 rec.caption if direction == "ITR" else None,
                                 shuffled, positive_index, rec.sub_category))
    return sets


def score_candidates(model: PretrainModel, cset: CandidateSet, vocab: Vocab,
                     cfg: RunConfig, store: ImageStore) -> np.ndarray:
    """Matching-head positive-class probability per candidate pair.

    Full inputs, no masking: the zero-shot retrieval protocol.
    """
    scores = np.empty(len(cset.candidates))
    if cset.direction == "TIR":
        image = store.get(cset.query_image)
        for i, cand in enumerate(cset.candidates):
            seq = encode(cand.caption, vocab, cfg.length)
            scores[i] = model.match_probability(image, seq)
    else:
        seq = encode(cset.query_caption, vocab, cfg.length)
        for i, cand in enumerate(cset.candidates):
            scores[i] = model.match_probability(store.get(cand.image_path), seq)
    return scores


def rank_of_positive(scores: np.ndarray, positive_index: int) -> int:
    """1-based rank under descending score, ties broken by candidate order."""
    if not 0 <= positive_index < len(scores):
        raise IndexError(f"positive index {positive_index} out of range")
    order = np.argsort(-scores, kind="stable")
    return int(np.nonzero(order == positive_index)[0][0]) + 1


@dataclass(frozen=True)
class RetrievalReport:
    r1: float
    r5: float
    r10: float
    n_sets: int

    @property
    def sum_r(self) -> float:
        return (self.r1 + self.r5 + self.r10) * 100.0

    def as_csv(self) -> str:
        return ("r1,r5,r10,sum_r,n_sets\n"
                f"{self.r1:.6f},{self.r5:.6f},{self.r10:.6f},"
                f"{self.sum_r:.4f},{self.n_sets}\n")


def recall_report(ranks, ks=(1, 5, 10)) -> RetrievalReport:
    ranks = np.asarray(list(ranks))
    hits = {k: float((ranks <= k).mean()) for k in ks}
    return RetrievalReport(hits[1], hits[5], hits[10], len(ranks))


def evaluate_retrieval(model: PretrainModel, dataset: ProductDataset,
                       vocab: Vocab, cfg: RunConfig, direction: str,
                       n_neg: int = 100, seed_tag: str = "retrieval",
                       limit: int | None = None) -> RetrievalReport:
    rng = derive_rng(cfg.seed, seed_tag, direction)
    sets = build_candidate_sets(dataset, direction, n_neg, rng, limit=limit)
    store = ImageStore(dataset)
    ranks = [rank_of_positive(score_candidates(model, cs, vocab, cfg, store),
                              cs.positive_index)
             for cs in sets]
    return recall_report(ranks)


# ---------------------------------------------------------------------------
# recognition metrics


@dataclass(frozen=True)
class RecognitionReport:
    accuracy: float
    macro_f: float
    per_class_f1: tuple

    @property
    def sum_c(self) -> float:
        return (self.accuracy + self.macro_f) * 100.0

    def as_csv(self) -> str:
        return ("accuracy,macro_f,sum_c\n"
                f"{self.accuracy:.6f},{self.macro_f:.6f},{self.sum_c:.4f}\n")


def category_metrics(preds, labels, n_classes: int) -> RecognitionReport:
    """Accuracy and macro F1 over all ``n_classes`` (absent classes score 0)."""
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("label outside [0, n_classes)")
    accuracy = float((preds == labels).mean()) if labels.size else 0.0
    f1s = []
    for c in range(n_classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall)
                   if precision + recall else 0.0)
    return RecognitionReport(accuracy, float(np.mean(f1s)), tuple(f1s))


# ---------------------------------------------------------------------------
# reconstruction dumps


def mig_dump(model: PretrainModel, dataset: ProductDataset, vocab: Vocab,
             cfg: RunConfig, out_dir, ratio: float | None = None,
             alpha: int | None = None, seed_tag: str = "mig",
             limit: int | None = None) -> Path:
    """Write masked/recon/gt PNG triptychs plus a per-image loss CSV.

    Returns the CSV path; rows are (pair id, smooth-L1 of the
    reconstruction against the original).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ratio = cfg.mask_ratio_vision if ratio is None else ratio
    alpha = cfg.alpha if alpha is None else alpha
    rng = derive_rng(cfg.seed, seed_tag)
    store = ImageStore(dataset)
    pairs = dataset.pairs()
    if limit is not None:
        pairs = pairs[:limit]
    rows = []
    for i, (rec, path) in enumerate(pairs):
        img = store.get(path)
        plan = make_mask_plan(img.shape[1], img.shape[2], cfg.patch, alpha,
                              ratio, cfg.mask_style, rng)
        masked = apply_mask(img, plan, cfg.mask_fill)
        seq = encode(rec.caption, vocab, cfg.length)
        recon = model.reconstruct(masked, seq)
        d = np.abs(recon.astype(np.float64) - img)
        score = float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).mean())
        pair_id = f"{rec.product_id}_{i:04d}"
        for tag, arr in (("masked", masked), ("recon", recon), ("gt", img)):
            Image.fromarray(denormalize(arr)).save(out_dir / f"{pair_id}_{tag}.png")
        rows.append(f"{pair_id},{score:.8f}")
    csv_path = out_dir / "recon_scores.csv"
    csv_path.write_text("id,smooth_l1\n" + "\n".join(rows) + "\n",
                        encoding="utf-8")
    return csv_path
