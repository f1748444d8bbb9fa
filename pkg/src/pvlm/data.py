"""Dataset handling: tab-separated manifest ingestion and a synthetic
product generator.

The synthetic products are colored, patterned shapes whose captions are a
deterministic function of the rendered attributes, so matching and
retrieval genuinely require aligning caption words with pixels (a color
word in the caption corresponds to the dominant shape color, and so on).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import derive_rng

MANIFEST_NAME = "manifest.tsv"


@dataclass
class ProductRecord:
    product_id: str
    image_paths: list
    caption: str
    main_category: str
    sub_category: str
    main_id: int = -1
    sub_id: int = -1


@dataclass
class ProductDataset:
    root: Path
    records: list
    main_names: list
    sub_names: list
    sub_to_main: dict

    def __len__(self):
        return len(self.records)

    @property
    def n_main(self):
        return len(self.main_names)

    @property
    def n_sub(self):
        return len(self.sub_names)

    def pairs(self):
        """Every (record, image_path) combination, in manifest order."""
        return [(rec, p) for rec in self.records for p in rec.image_paths]

    def by_sub_category(self) -> dict:
        groups = {}
        for rec in self.records:
            groups.setdefault(rec.sub_id, []).append(rec)
        return groups

    def load_image(self, path) -> np.ndarray:
        """PNG -> 8-bit H x W x 3 array."""
        with Image.open(self.root / path) as im:
            return np.asarray(im.convert("RGB"))


def load_manifest(path) -> ProductDataset:
    """Parse and validate a product manifest.

    Each line: product_id, comma-joined image paths, caption, main
    category, sub category, tab-separated. Image paths are checked for
    existence relative to the manifest directory, and every sub-category
    must map to a single main-category.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    sub_to_main = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, "
                             f"got {len(parts)}")
        pid, img_field, caption, main_cat, sub_cat = parts
        image_paths = [p for p in img_field.split(",") if p]
        if not image_paths:
            raise ValueError(f"{path}:{lineno}: product {pid} has no images")
        for p in image_paths:
            if not (root / p).exists():
                raise ValueError(f"{path}:{lineno}: dangling image path {p}")
        if sub_cat in sub_to_main and sub_to_main[sub_cat] != main_cat:
            raise ValueError(f"{path}:{lineno}: sub-category {sub_cat!r} appears "
                             f"under both {sub_to_main[sub_cat]!r} and {main_cat!r}")
        sub_to_main[sub_cat] = main_cat
        records.append(ProductRecord(pid, image_paths, caption, main_cat, sub_cat))
    if not records:
        raise ValueError(f"{path}: no records")
    main_names = sorted({r.main_category for r in records})
    sub_names = sorted(sub_to_main)
    main_index = {n: i for i, n in enumerate(main_names)}
    sub_index = {n: i for i, n in enumerate(sub_names)}
    for r in records:
        r.main_id = main_index[r.main_category]
        r.sub_id = sub_index[r.sub_category]
    return ProductDataset(root, records, main_names, sub_names, sub_to_main)


# ---------------------------------------------------------------------------
# synthetic generator

COLOR_RGB = {
    "red": (200, 40, 40), "green": (40, 170, 60), "blue": (40, 70, 200),
    "yellow": (220, 200, 40), "magenta": (190, 40, 170), "cyan": (40, 190, 190),
    "orange": (230, 130, 30), "purple": (120, 40, 170), "teal": (20, 130, 130),
    "pink": (240, 130, 170), "black": (25, 25, 25), "white": (250, 250, 250),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Attribute axes for the generator.

    Main category is the shape kind, sub category is shape x pattern, and
    the caption is a fixed template over the attribute words.
    """

    shapes: tuple = ("square", "circle", "triangle", "diamond")
    colors: tuple = ("red", "green", "blue", "yellow", "magenta", "cyan")
    patterns: tuple = ("solid", "striped", "dotted", "checker")
    accents: tuple = ("orange", "purple", "teal", "pink", "black", "white")

    def capacity(self) -> int:
        return (len(self.shapes) * len(self.colors) * len(self.patterns)
                * len(self.accents))

    def caption(self, shape, color, pattern, accent) -> str:
        return f"{pattern} {color} {shape} with {accent} trim"


def bundled_spec() -> SyntheticSpec:
    """Spec for the bundled 64-product set.

    A single pattern keeps each sub-category large enough to supply 20
    same-sub-category retrieval negatives at 64 products.
    """
    return SyntheticSpec(shapes=("square", "circle", "triangle"),
                         patterns=("solid",))


BUNDLED_SEED = 7
BUNDLED_PRODUCTS = 64


def _shape_masks(shape: str, size: int, cx: float, cy: float, half: float):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        dist = np.maximum(np.abs(dx), np.abs(dy))
    elif shape == "circle":
        dist = np.sqrt(dx * dx + dy * dy)
    elif shape == "diamond":
        dist = np.abs(dx) + np.abs(dy)
    elif shape == "triangle":
        # upward triangle: below the apex, inside the two slanted sides
        inside = (dy > -half) & (np.abs(dx) <= (dy + half) * 0.65) & (dy < half)
        border_w = max(2.0, size * 0.06)
        core = (dy > -half + border_w) & \
               (np.abs(dx) <= (dy + half - border_w) * 0.65) & \
               (dy < half - border_w)
        return inside, core
    else:
        raise ValueError(f"unknown shape {shape!r}")
    border_w = max(2.0, size * 0.06)
    return dist <= half, dist <= half - border_w


def render_view(shape: str, color: str, pattern: str, accent: str,
                size: int, rng: np.random.Generator) -> np.ndarray:
    """One 8-bit view: colored patterned shape with an accent border."""
    img = np.full((size, size, 3), 235, dtype=np.uint8)
    scale = rng.uniform(0.75, 0.95)
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    half = size * 0.34 * scale
    outer, core = _shape_masks(shape, size, cx, cy, half)
    base = np.array(COLOR_RGB[color], dtype=np.uint8)
    img[outer] = COLOR_RGB[accent]   # border ring first
    img[core] = base
    if pattern != "solid":
        dark = (base.astype(np.int64) * 0.45).astype(np.uint8)
        yy, xx = np.mgrid[0:size, 0:size]
        period = max(2, size // 8)
        if pattern == "striped":
            tex = (yy // (period // 2 or 1)) % 2 == 0
        elif pattern == "dotted":
            tex = ((yy % period) < period // 3) & ((xx % period) < period // 3)
        else:  # checker
            tex = ((yy // period) + (xx // period)) % 2 == 0
        img[core & tex] = dark
    return img


def generate_synthetic(out_dir, n_products: int, image_size: int,
                       spec: SyntheticSpec | None = None, seed: int = 0,
                       max_views: int = 3):
    """Render a synthetic product dataset and write its manifest.

    Attribute tuples are assigned round-robin over shape kinds so category
    sizes stay balanced; everything is a pure function of ``seed``.
    Returns the loaded dataset.
    """
    spec = spec or SyntheticSpec()
    if n_products > spec.capacity():
        raise ValueError(f"n_products {n_products} exceeds the "
                         f"{spec.capacity()} distinct attribute tuples")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    per_shape = []
    for s_i, shape in enumerate(spec.shapes):
        combos = [(shape, c, p, a)
                  for c in spec.colors for p in spec.patterns for a in spec.accents]
        order = derive_rng(seed, "tuples", s_i).permutation(len(combos))
        per_shape.append([combos[i] for i in order])
    chosen = []
    round_i = 0
    while len(chosen) < n_products:
        for bucket in per_shape:
            if round_i < len(bucket) and len(chosen) < n_products:
                chosen.append(bucket[round_i])
        round_i += 1

    lines = []
    for idx, (shape, color, pattern, accent) in enumerate(chosen):
        rng = derive_rng(seed, "product", idx)
        n_views = int(rng.integers(1, max_views + 1))
        paths = []
        for v in range(n_views):
            arr = render_view(shape, color, pattern, accent, image_size, rng)
            rel = f"images/p{idx:04d}_v{v}.png"
            Image.fromarray(arr).save(out_dir / rel)
            paths.append(rel)
        caption = spec.caption(shape, color, pattern, accent)
        lines.append("\t".join([f"p{idx:04d}", ",".join(paths), caption,
                                shape, f"{shape}-{pattern}"]))
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return load_manifest(manifest)


def make_bundled_dataset(out_dir, image_size: int = 32) -> ProductDataset:
    """The fixed 64-product set used by the fast end-to-end checks."""
    return generate_synthetic(out_dir, BUNDLED_PRODUCTS, image_size,
                              spec=bundled_spec(), seed=BUNDLED_SEED)
