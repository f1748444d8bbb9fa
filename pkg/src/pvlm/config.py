"""Run configuration: one dataclass holding every tunable of the system.

The defaults are the published full-scale settings; ``RunConfig.toy()``
gives the scaled-down variant used by the fast checks. Configs round-trip
through a key=value text file and are embedded in checkpoints and reports
for provenance. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


def _f(default, help_text: str):
    return field(default=default, metadata={"help": help_text})


@dataclass
class StageConfig:
    """Per-stage encoder hyperparameters."""

    layers: int        # transformer layers in this stage
    dim: int           # hidden size
    reduction: int     # cumulative spatial downsampling of the vision grid
    kernel: int        # patch-embedding conv kernel (== stride)
    stride: int        # patch-embedding conv stride
    sr: int            # key/value spatial-reduction factor inside attention
    heads: int
    mlp_ratio: int


@dataclass
class RunConfig:
    # geometry
    image_size: int = _f(256, "input image height/width in pixels")
    patch: int = _f(4, "base patch size P")
    length: int = _f(128, "unified token sequence length L")
    vocab_size: int = _f(2000, "max vocabulary size incl. reserved tokens")

    # encoder stages
    stage_layers: tuple = _f((2, 2, 2, 2), "transformer layers per stage")
    stage_dims: tuple = _f((64, 128, 320, 512), "hidden size per stage")
    stage_kernels: tuple = _f((4, 2, 2, 2), "patch-embed conv kernel per stage")
    stage_strides: tuple = _f((4, 2, 2, 2), "patch-embed conv stride per stage")
    sr_ratios: tuple = _f((8, 4, 2, 1), "attention key/value reduction per stage")
    heads: tuple = _f((1, 2, 5, 8), "attention heads per stage")
    mlp_ratios: tuple = _f((4, 4, 4, 4), "MLP hidden multiplier per stage")
    pad_attention_mask: bool = _f(True, "mask [PAD] tokens out of attention keys")

    # masking
    alpha: int = _f(4, "masking-unit size factor (unit edge = alpha*patch)")
    mask_ratio_vision: float = _f(0.5, "fraction of masking units zeroed")
    mask_ratio_text: float = _f(0.15, "per-token masking probability")
    mask_style: str = _f("random-grid", "random-grid | grid | stroke | center")
    mask_fill: float = _f(1e-6, "pixel value written into masked units")

    # objectives
    loss_weights: tuple = _f((10.0, 1.0, 1.0), "weights for (recon, match, mlm)")
    recon_masked_only: bool = _f(False, "score reconstruction on masked pixels only")
    losses_on_negatives: bool = _f(False, "include mismatched pairs in recon/mlm losses")

    # optimization
    lr: float = _f(2.5e-3, "peak learning rate")
    weight_decay: float = _f(1e-4, "decoupled weight decay")
    beta1: float = _f(0.9, "first-moment decay")
    beta2: float = _f(0.999, "second-moment decay")
    adam_eps: float = _f(1e-8, "optimizer denominator epsilon")
    clip_norm: float = _f(1.0, "global gradient-norm clip; 0 disables")
    warmup_frac: float = _f(0.02, "fraction of steps spent in linear warmup")
    batch_size: int = _f(16, "samples per optimizer step")
    steps: int = _f(500, "total optimizer steps")
    neg_prob: float = _f(0.5, "probability a slot gets a mismatched caption")
    checkpoint_every: int = _f(0, "periodic checkpoint interval; 0 = final only")

    # bookkeeping
    seed: int = _f(0, "root seed; all randomness derives from it")
    data_dir: str = _f("", "dataset directory containing manifest.tsv")

    def stages(self) -> list[StageConfig]:
        reduction = 1
        out = []
        for k in range(4):
            reduction *= self.stage_strides[k]
            out.append(StageConfig(
                layers=self.stage_layers[k],
                dim=self.stage_dims[k],
                reduction=reduction,
                kernel=self.stage_kernels[k],
                stride=self.stage_strides[k],
                sr=self.sr_ratios[k],
                heads=self.heads[k],
                mlp_ratio=self.mlp_ratios[k],
            ))
        return out

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-test configuration: 32px images, narrow stages, short captions."""
        base = dict(
            image_size=32,
            length=16,
            vocab_size=200,
            stage_dims=(8, 16, 24, 32),
            heads=(1, 2, 4, 8),
            mlp_ratios=(2, 2, 2, 2),
        )
        base.update(overrides)
        return cls(**base)

    # -- validation ---------------------------------------------------------

    def validate(self) -> list[str]:
        """Return a list of config problems; empty means usable."""
        errs = []
        tuples = (self.stage_layers, self.stage_dims, self.stage_kernels,
                  self.stage_strides, self.sr_ratios, self.heads, self.mlp_ratios)
        if any(len(t) != 4 for t in tuples):
            errs.append("all per-stage tuples must have exactly 4 entries")
            return errs
        if any(k != s for k, s in zip(self.stage_kernels, self.stage_strides)):
            errs.append("patch-embed kernels must equal strides")
        unit = self.alpha * self.patch
        if unit <= 0 or (self.image_size * self.image_size) % (unit * unit):
            errs.append(f"image_size {self.image_size} not divisible into "
                        f"(alpha*patch)^2 = {unit}x{unit} units")
        if not 0.0 <= self.mask_ratio_vision <= 1.0:
            errs.append("mask_ratio_vision outside [0, 1]")
        if not 0.0 <= self.mask_ratio_text <= 1.0:
            errs.append("mask_ratio_text outside [0, 1]")
        if self.mask_style not in ("random-grid", "grid", "stroke", "center"):
            errs.append(f"unknown mask_style {self.mask_style!r}")
        grid = self.image_size
        for k, st in enumerate(self.stages()):
            if grid % st.stride:
                errs.append(f"stage {k + 1}: grid {grid} not divisible by stride {st.stride}")
                break
            grid //= st.stride
            if st.dim % st.heads:
                errs.append(f"stage {k + 1}: width {st.dim} not divisible by {st.heads} heads")
            if grid % st.sr:
                errs.append(f"stage {k + 1}: grid {grid} not divisible by sr {st.sr}")
        if self.vocab_size < 5:
            errs.append("vocab_size must be at least 5")
        if self.length < 2:
            errs.append("length must be at least 2")
        if not 0.0 <= self.neg_prob <= 1.0:
            errs.append("neg_prob outside [0, 1]")
        return errs

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f_ in fields(self):
            v = getattr(self, f_.name)
            out[f_.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f_.name: f_ for f_ in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for name, value in d.items():
            default = known[name].default
            if isinstance(default, tuple):
                kwargs[name] = tuple(type(default[0])(x) for x in value)
            else:
                kwargs[name] = type(default)(value)
        return cls(**kwargs)

    def save(self, path):
        lines = []
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f_.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg = cfg.with_override(key, value)
        return cfg

    def with_override(self, key: str, raw: str) -> "RunConfig":
        """Apply one textual key=value override, with type coercion."""
        known = {f_.name: f_ for f_ in fields(self)}
        if key not in known:
            raise KeyError(f"unknown config key: {key}")
        current = getattr(self, key)
        if isinstance(current, tuple):
            elem = type(known[key].default[0])
            value = tuple(elem(_parse_scalar(x)) for x in raw.split(","))
        elif isinstance(current, bool):
            value = _parse_bool(raw)
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        return dataclasses.replace(self, **{key: value})


def _parse_scalar(x: str):
    x = x.strip()
    try:
        return int(x)
    except ValueError:
        return float(x)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def config_help_lines() -> list[str]:
    """One line per config key: name, default, description."""
    cfg = RunConfig()
    out = []
    for f_ in fields(RunConfig):
        v = getattr(cfg, f_.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out.append(f"  {f_.name:<20} {str(v):<22} {f_.metadata['help']}")
    return out
