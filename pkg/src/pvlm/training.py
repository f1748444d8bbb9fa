"""Pre-training and fine-tuning loops: batch assembly with mismatched-pair
sampling, AdamW with decoupled decay, cosine schedule, checkpointing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import ProductDataset
from .heads import (CategoryHead, LossBreakdown, NonFiniteLossError,
                    masked_token_loss, match_loss, reconstruction_loss,
                    total_loss)
from .model import PretrainModel
from .seeding import derive_rng
from .text import TokenSequence, Vocab, apply_mlm_mask, build_vocab, encode
from .vision import apply_mask, make_mask_plan, normalize


class ImageStore:
    """Loads and normalizes images once; keyed by manifest-relative path."""

    def __init__(self, dataset: ProductDataset):
        self.dataset = dataset
        self._cache = {}

    def get(self, path) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = normalize(self.dataset.load_image(path))
        return self._cache[path]


@dataclass
class PretrainSample:
    image: np.ndarray        # masked input, channel-first
    target: np.ndarray       # original image the decoder must reproduce
    pixel_mask: np.ndarray   # boolean H x W map of zeroed units
    seq: TokenSequence
    label: int               # 1 = caption belongs to the image's product


@dataclass
class PretrainBatch:
    samples: list

    @property
    def negative_fraction(self) -> float:
        return sum(1 for s in self.samples if s.label == 0) / len(self.samples)


def make_pretrain_batch(dataset: ProductDataset, vocab: Vocab, store: ImageStore,
                        cfg: RunConfig, size: int,
                        rng: np.random.Generator) -> PretrainBatch:
    """Assemble one batch.

    For each slot: draw a product and one of its views; with probability
    ``cfg.neg_prob`` swap in a caption from a different product (label 0);
    apply the vision mask and the token mask.
    """
    if cfg.neg_prob > 0 and len(dataset) < 2:
        raise ValueError("need at least 2 products to form mismatched pairs")
    samples = []
    for _ in range(size):
        rec = dataset.records[int(rng.integers(len(dataset)))]
        view = rec.image_paths[int(rng.integers(len(rec.image_paths)))]
        label = 1
        caption_rec = rec
        if rng.random() < cfg.neg_prob:
            label = 0
            while caption_rec.product_id == rec.product_id:
                caption_rec = dataset.records[int(rng.integers(len(dataset)))]
        img = store.get(view)
        plan = make_mask_plan(img.shape[1], img.shape[2], cfg.patch, cfg.alpha,
                              cfg.mask_ratio_vision, cfg.mask_style, rng)
        masked = apply_mask(img, plan, cfg.mask_fill)
        seq = encode(caption_rec.caption, vocab, cfg.length)
        seq = apply_mlm_mask(seq, vocab, cfg.mask_ratio_text, rng)
        samples.append(PretrainSample(masked, img,
                                      plan.pixel_mask(img.shape[1], img.shape[2]),
                                      seq, label))
    return PretrainBatch(samples)


def cosine_lr(step: int, total_steps: int, base: float = 2.5e-3,
              warmup_steps: int = 0) -> float:
    """Linear warmup to ``base``, then cosine decay to zero at total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def step(self, lr: float, clip_norm: float = 0.0):
        """One update; consumes and clears the parameter gradients."""
        rescale = 1.0
        if clip_norm > 0:
            norm = self.grad_norm()
            if norm > clip_norm:
                rescale = clip_norm / (norm + 1e-12)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if rescale != 1.0:
                g = g * rescale
            m = self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


def _mean_terms(terms: list) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(terms))


def pretrain_step(model: PretrainModel, batch: PretrainBatch, opt: AdamW,
                  cfg: RunConfig, lr: float) -> LossBreakdown:
    """Forward all three objectives, backprop the weighted total, update.

    Reconstruction and masked-token losses are computed on matched pairs
    only unless ``cfg.losses_on_negatives`` is set. A non-finite loss raises
    before any parameter is touched.
    """
    with Tape() as tape:
        itm_terms, recon_terms = [], []
        mlm_rows, mlm_labels = [], []
        for s in batch.samples:
            lang_states, vision_states = model.forward(s.image, s.seq)
            probs = model.match(lang_states[-1])
            itm_terms.append(match_loss(probs, s.label))
            if s.label == 1 or cfg.losses_on_negatives:
                recon = model.decoder(vision_states)
                mask = s.pixel_mask if cfg.recon_masked_only else None
                recon_terms.append(reconstruction_loss(recon, s.target, mask))
                if s.seq.masked_positions.size:
                    mlm_rows.append(model.mlm.logits_at(lang_states[-1],
                                                        s.seq.masked_positions))
                    mlm_labels.append(s.seq.mlm_labels[s.seq.masked_positions])
        itm = _mean_terms(itm_terms)
        mir = _mean_terms(recon_terms) if recon_terms else Tensor(np.zeros(()))
        if mlm_rows:
            mlm = ad.cross_entropy(ad.concat(mlm_rows, axis=0),
                                   np.concatenate(mlm_labels))
        else:
            mlm = Tensor(np.zeros(()))
        total, breakdown = total_loss(mir, itm, mlm, cfg.loss_weights)
    tape.backward(total)
    opt.step(lr, cfg.clip_norm)
    return breakdown


CSV_HEADER = "step,lr,mir,itm,mlm,total"


def pretrain(cfg: RunConfig, dataset: ProductDataset, run_dir,
             init_weights=None, log_every: int = 0) -> dict:
    """Full pre-training run; writes config, vocab, metrics CSV, checkpoints.

    Returns a summary dict with the artifact paths and the loss history.
    """
    errs = cfg.validate()
    if errs:
        raise ValueError("invalid config: " + "; ".join(errs))
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.txt")

    vocab = build_vocab([r.caption for r in dataset.records], cfg.vocab_size)
    vocab.save(run_dir / "vocab.txt")
    model = PretrainModel.create(cfg, len(vocab))
    if init_weights:
        from .checkpoint import load_into
        loaded, missing, unexpected, _ = load_into(model, init_weights, strict=False)
        print(f"loaded {len(loaded)} entries from {init_weights}; "
              f"{len(missing)} missing, {len(unexpected)} unexpected")

    opt = AdamW(dict(model.named_parameters()), cfg.beta1, cfg.beta2,
                cfg.adam_eps, cfg.weight_decay)
    store = ImageStore(dataset)
    rng = derive_rng(cfg.seed, "batches")
    warmup = int(round(cfg.warmup_frac * cfg.steps))
    header = {"config": cfg.to_dict(), "vocab_size": len(vocab)}

    history = []
    incidents = []
    csv_path = run_dir / "metrics.csv"
    with open(csv_path, "w", encoding="utf-8") as csv:
        csv.write(CSV_HEADER + "\n")
        for step in range(cfg.steps):
            lr = cosine_lr(step, cfg.steps, cfg.lr, warmup)
            batch = make_pretrain_batch(dataset, vocab, store, cfg,
                                        cfg.batch_size, rng)
            try:
                bd = pretrain_step(model, batch, opt, cfg, lr)
            except NonFiniteLossError as e:
                incidents.append(f"step {step}: {e}")
                continue
            history.append(bd)
            csv.write(f"{step},{lr:.10g},{bd.mir:.10g},{bd.itm:.10g},"
                      f"{bd.mlm:.10g},{bd.total:.10g}\n")
            if log_every and (step + 1) % log_every == 0:
                print(f"step {step + 1}/{cfg.steps} lr {lr:.2e} "
                      f"total {bd.total:.4f} (mir {bd.mir:.4f} "
                      f"itm {bd.itm:.4f} mlm {bd.mlm:.4f})")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(run_dir / f"step_{step + 1:06d}.ckpt",
                                dict(model.named_parameters()), header)
    if incidents:
        (run_dir / "incidents.log").write_text("\n".join(incidents) + "\n",
                                               encoding="utf-8")
    final = run_dir / "final.ckpt"
    save_checkpoint(final, dict(model.named_parameters()), header)
    return {"model": model, "vocab": vocab, "checkpoint": final,
            "metrics_csv": csv_path, "history": history,
            "incidents": incidents, "run_dir": run_dir}


def evaluate_pretrain_accuracy(model: PretrainModel, dataset: ProductDataset,
                               vocab: Vocab, cfg: RunConfig,
                               n_batches: int = 8, seed_tag: str = "train-eval") -> dict:
    """Matching and masked-token accuracy on freshly drawn training batches."""
    store = ImageStore(dataset)
    rng = derive_rng(cfg.seed, seed_tag)
    itm_hits = itm_total = tok_hits = tok_total = 0
    for _ in range(n_batches):
        batch = make_pretrain_batch(dataset, vocab, store, cfg,
                                    cfg.batch_size, rng)
        for s in batch.samples:
            lang_states, _ = model.forward(s.image, s.seq)
            p1 = float(model.match(lang_states[-1]).data[1])
            itm_hits += int((p1 >= 0.5) == bool(s.label))
            itm_total += 1
            if s.label == 1 and s.seq.masked_positions.size:
                logits = model.mlm.logits_at(lang_states[-1],
                                             s.seq.masked_positions).data
                preds = logits.argmax(axis=1)
                labels = s.seq.mlm_labels[s.seq.masked_positions]
                tok_hits += int((preds == labels).sum())
                tok_total += int(labels.size)
    return {"itm_accuracy": itm_hits / max(itm_total, 1),
            "mlm_accuracy": tok_hits / max(tok_total, 1),
            "n_itm": itm_total, "n_mlm_tokens": tok_total}


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_category(model: PretrainModel, dataset: ProductDataset,
                      vocab: Vocab, cfg: RunConfig, granularity: str,
                      steps: int = 200, batch_size: int = 8,
                      lr: float | None = None, frozen_encoder: bool = False,
                      log_every: int = 0) -> CategoryHead:
    """Attach a linear category head on the [CLS] state and train it.

    ``granularity`` picks main or sub category labels. Inputs are unmasked.
    With ``frozen_encoder`` only the head parameters are updated; otherwise
    the encoder trains end to end with it.
    """
    if granularity not in ("main", "sub"):
        raise ValueError(f"granularity must be 'main' or 'sub', got {granularity!r}")
    n_classes = dataset.n_main if granularity == "main" else dataset.n_sub
    if n_classes < 2:
        raise ValueError("need at least 2 category classes to fine-tune")
    head = CategoryHead(cfg.stage_dims[-1],
                        n_classes, derive_rng(cfg.seed, "head", granularity))
    trainable = {f"head_{granularity}.{k}": p for k, p in head.named_parameters()}
    if not frozen_encoder:
        trainable.update(dict(model.encoder.named_parameters()))
    opt = AdamW(trainable, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    store = ImageStore(dataset)
    rng = derive_rng(cfg.seed, "finetune", granularity)
    pairs = dataset.pairs()
    base_lr = cfg.lr if lr is None else lr
    for step in range(steps):
        step_lr = cosine_lr(step, steps, base_lr, 0)
        idx = rng.integers(len(pairs), size=batch_size)
        with Tape() as tape:
            rows, labels = [], []
            for i in idx:
                rec, path = pairs[int(i)]
                seq = encode(rec.caption, vocab, cfg.length)
                lang_states, _ = model.forward(store.get(path), seq)
                rows.append(head(lang_states[-1]))
                labels.append(rec.main_id if granularity == "main" else rec.sub_id)
            loss = ad.cross_entropy(ad.concat(rows, axis=0), np.array(labels))
        tape.backward(loss)
        opt.step(step_lr, cfg.clip_norm)
        if log_every and (step + 1) % log_every == 0:
            print(f"finetune[{granularity}] step {step + 1}/{steps} "
                  f"loss {float(loss.data):.4f}")
    return head


def category_predictions(model: PretrainModel, head: CategoryHead,
                         dataset: ProductDataset, vocab: Vocab,
                         cfg: RunConfig, granularity: str):
    """(predictions, labels) over every image-caption pair, unmasked inputs."""
    store = ImageStore(dataset)
    preds, labels = [], []
    for rec, path in dataset.pairs():
        seq = encode(rec.caption, vocab, cfg.length)
        lang_states, _ = model.forward(store.get(path), seq)
        preds.append(int(head(lang_states[-1]).data.argmax()))
        labels.append(rec.main_id if granularity == "main" else rec.sub_id)
    return np.array(preds), np.array(labels)
