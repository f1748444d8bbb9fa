"""Image normalization and the grid masking system.

Masking operates on square units of (alpha * patch) pixels that tile the
image disjointly, so the achieved pixel ratio is exactly |phi| / Q. Unit
indices are 1-based and stored sorted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

STYLES = ("random-grid", "grid", "stroke", "center")


def normalize(raw: np.ndarray) -> np.ndarray:
    """8-bit H x W x 3 image -> channel-first float image in [0, 1]."""
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"normalize: expected H x W x 3, got {raw.shape}")
    return (raw.astype(np.float32) / 255.0).transpose(2, 0, 1)


def denormalize(img: np.ndarray) -> np.ndarray:
    """Channel-first float image in [0, 1] -> 8-bit H x W x 3."""
    clipped = np.clip(img, 0.0, 1.0)
    return np.round(clipped.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    """A selected set of masking units over one image size.

    ``phi`` is a sorted array of 1-based unit indices in row-major unit
    order; ``q_total`` is the unit count Q = H*W / (alpha*patch)^2.
    """

    alpha: int
    patch: int
    q_total: int
    grid: tuple          # (rows, cols) of the unit grid
    phi: np.ndarray
    ratio_requested: float
    style: str

    @property
    def unit_edge(self) -> int:
        return self.alpha * self.patch

    @property
    def ratio_achieved(self) -> float:
        return len(self.phi) / self.q_total

    def unit_mask(self) -> np.ndarray:
        """Boolean (rows, cols) array, True on selected units."""
        flat = np.zeros(self.q_total, dtype=bool)
        flat[self.phi - 1] = True
        return flat.reshape(self.grid)

    def pixel_mask(self, h: int, w: int) -> np.ndarray:
        rows, cols = self.grid
        edge = self.unit_edge
        if (rows * edge, cols * edge) != (h, w):
            raise ValueError(f"plan built for {rows * edge}x{cols * edge}, image is {h}x{w}")
        return np.kron(self.unit_mask(), np.ones((edge, edge), dtype=bool))

    def save(self, path):
        header = f"{self.alpha} {self.patch} {self.q_total} {self.style}"
        body = "\n".join(str(int(q)) for q in self.phi)
        Path(path).write_text(header + ("\n" + body if body else "") + "\n",
                              encoding="utf-8")


def load_plan(path, ratio_requested: float = 0.0) -> MaskPlan:
    lines = Path(path).read_text(encoding="utf-8").split()
    alpha, patch, q_total = int(lines[0]), int(lines[1]), int(lines[2])
    style = lines[3]
    phi = np.array(sorted(int(x) for x in lines[4:]), dtype=np.int64)
    side = int(round(np.sqrt(q_total)))
    return MaskPlan(alpha, patch, q_total, (side, side), phi, ratio_requested, style)


def make_mask_plan(h: int, w: int, patch: int = 4, alpha: int = 4,
                   ratio: float = 0.5, style: str = "random-grid",
                   rng: np.random.Generator | None = None) -> MaskPlan:
    """Select masking units covering ~``ratio`` of the image.

    random-grid draws round(ratio*Q) distinct units uniformly; grid takes
    the first round(ratio*Q) units in checkerboard traversal order (exactly
    the alternating pattern at ratio 0.5); stroke grows a connected
    random-walk band; center places the largest centered square whose area
    does not exceed ratio*Q (it may undershoot, see ratio_achieved).
    """
    edge = alpha * patch
    if edge <= 0 or h % edge or w % edge:
        raise ValueError(f"image {h}x{w} not divisible into {edge}x{edge} units")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    if style not in STYLES:
        raise ValueError(f"unknown mask style {style!r}; choose from {STYLES}")
    rows, cols = h // edge, w // edge
    q = rows * cols
    budget = _round_half_up(ratio * q)

    if style == "random-grid":
        if rng is None:
            raise ValueError("random-grid style needs an rng")
        chosen = rng.choice(q, size=budget, replace=False)
    elif style == "grid":
        order = sorted(range(q), key=lambda i: ((i // cols + i % cols) % 2,
                                                i // cols, i % cols))
        chosen = np.array(order[:budget], dtype=np.int64)
    elif style == "stroke":
        if rng is None:
            raise ValueError("stroke style needs an rng")
        chosen = _stroke_walk(rows, cols, budget, rng)
    else:  # center
        side = int(np.floor(np.sqrt(ratio * q)))
        side = min(side, rows, cols)
        r0, c0 = (rows - side) // 2, (cols - side) // 2
        rr, cc = np.meshgrid(np.arange(r0, r0 + side), np.arange(c0, c0 + side),
                             indexing="ij")
        chosen = (rr * cols + cc).ravel()

    phi = np.sort(chosen.astype(np.int64)) + 1
    return MaskPlan(alpha, patch, q, (rows, cols), phi, ratio, style)


def _stroke_walk(rows: int, cols: int, budget: int,
                 rng: np.random.Generator) -> np.ndarray:
    """4-connected self-avoiding walk; jumps back to the band when stuck."""
    if budget == 0:
        return np.empty(0, dtype=np.int64)
    selected = np.zeros((rows, cols), dtype=bool)
    r, c = int(rng.integers(rows)), int(rng.integers(cols))
    selected[r, c] = True
    count = 1
    while count < budget:
        nbrs = [(r + dr, c + dc)
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                if 0 <= r + dr < rows and 0 <= c + dc < cols
                and not selected[r + dr, c + dc]]
        if not nbrs:
            frontier = [(i, j) for i in range(rows) for j in range(cols)
                        if selected[i, j] and any(
                            0 <= i + dr < rows and 0 <= j + dc < cols
                            and not selected[i + dr, j + dc]
                            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)))]
            if not frontier:
                break  # every unit already selected
            r, c = frontier[int(rng.integers(len(frontier)))]
            continue
        r, c = nbrs[int(rng.integers(len(nbrs)))]
        selected[r, c] = True
        count += 1
    return np.nonzero(selected.ravel())[0]


def apply_mask(img: np.ndarray, plan: MaskPlan, fill: float = 1e-6) -> np.ndarray:
    """Write ``fill`` into every selected unit; other pixels are bit-identical."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"apply_mask: expected 3 x H x W, got {img.shape}")
    _, h, w = img.shape
    mask = plan.pixel_mask(h, w)
    out = img.copy()
    out[:, mask] = np.asarray(fill, dtype=img.dtype)
    return out
