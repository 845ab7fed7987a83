"""Synthetic multi-label shapes, two-view augmentation, patch masks, manifests.

Images are stored as 8-bit RGB (``uint8``) and handed out as float64 in
[0, 1].  Keeping the synthetic set in 8-bit means exporting it to PNG and
loading it back through a manifest reproduces the same pixels.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError
from .rng import stream

SHAPES = ("circle", "square", "triangle", "cross")
PALETTE = (
    ("red", (0.92, 0.12, 0.10)),
    ("green", (0.10, 0.78, 0.15)),
    ("blue", (0.12, 0.30, 0.95)),
    ("yellow", (0.95, 0.88, 0.10)),
    ("magenta", (0.88, 0.18, 0.85)),
    ("cyan", (0.10, 0.85, 0.88)),
)
MAX_CLASSES = len(SHAPES) * len(PALETTE)


def class_name(c):
    return f"{PALETTE[c // len(SHAPES)][0]}-{SHAPES[c % len(SHAPES)]}"


@dataclass
class SyntheticSpec:
    num_images: int = 2000
    image_size: int = 64
    num_classes: int = 8
    min_shapes: int = 1
    max_shapes: int = 4
    seed: int = 0

    def validate(self):
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise ConfigError(
                f"num_classes={self.num_classes} exceeds the {MAX_CLASSES} "
                "available shape/color archetypes")
        if self.num_images < 0 or self.image_size < 8:
            raise ConfigError("num_images must be >= 0 and image_size >= 8")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 1 <= min_shapes <= max_shapes")

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    """Images (``n x H x W x 3`` uint8) with ``n x C`` {0,1} label rows."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def image(self, i):
        return self.images[i].astype(np.float64) / 255.0

    def __getitem__(self, i):
        return self.image(i), self.labels[i]

    @property
    def image_size(self):
        return self.images.shape[1] if len(self.images) else 0


def _draw_shape(canvas, kind, cy, cx, r, color):
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        inside = dy * dy + dx * dx <= r * r
    elif kind == "square":
        s = 0.85 * r
        inside = (np.abs(dx) <= s) & (np.abs(dy) <= s)
    elif kind == "triangle":
        # apex up, base at cy + 0.75 r
        height = 1.75 * r
        frac = (dy + r) / height
        inside = (frac >= 0) & (frac <= 1) & (np.abs(dx) <= frac * r)
    else:
        w = r / 3.0
        inside = (((np.abs(dx) <= r) & (np.abs(dy) <= w))
                  | ((np.abs(dy) <= r) & (np.abs(dx) <= w)))
    canvas[inside] = color


def render_image(rng, spec):
    """Render one image and its label vector from ``rng``."""
    size = spec.image_size
    base = rng.uniform(0.25, 0.55)
    tint = rng.uniform(-0.05, 0.05, size=3)
    canvas = np.clip(base + tint + rng.normal(0.0, 0.03, size=(size, size, 3)), 0, 1)
    label = np.zeros(spec.num_classes)
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n):
        c = int(rng.integers(spec.num_classes))
        r = rng.uniform(0.12, 0.22) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        color = np.clip(np.array(PALETTE[c // len(SHAPES)][1]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
        _draw_shape(canvas, SHAPES[c % len(SHAPES)], cy, cx, r, color)
        label[c] = 1.0
    return np.round(canvas * 255.0).astype(np.uint8), label


def generate_shapes_dataset(spec):
    """Deterministic synthetic multi-label dataset; image ``i`` depends on ``(seed, i)`` only."""
    spec.validate()
    images = np.zeros((spec.num_images, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    labels = np.zeros((spec.num_images, spec.num_classes))
    for i in range(spec.num_images):
        images[i], labels[i] = render_image(stream(spec.seed, "data", i), spec)
    return Dataset(images, labels, spec.num_classes)


# -- masking ------------------------------------------------------------------

@dataclass
class MaskSpec:
    """Boolean patch grid; ``True`` marks a patch replaced by the mask token."""

    grid: np.ndarray
    ratio: float

    @property
    def count(self):
        return int(self.grid.sum())

    def pixel_mask(self, patch_size):
        return np.kron(self.grid, np.ones((patch_size, patch_size), dtype=bool))


def masked_count(ratio, n):
    return int(math.floor(ratio * n + 0.5))


def mask_patches(ratio, grid_dims, rng):
    """Mask exactly ``round(ratio * N)`` patches chosen uniformly at random."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    gh, gw = grid_dims
    n = gh * gw
    flat = np.zeros(n, dtype=bool)
    flat[rng.permutation(n)[:masked_count(ratio, n)]] = True
    return MaskSpec(flat.reshape(gh, gw), ratio)


# -- augmentation ---------------------------------------------------------------

@dataclass
class ViewParams:
    side: float
    top: float
    left: float
    flip: bool
    brightness: float
    contrast: float
    rotation: int

    @classmethod
    def identity(cls, size):
        return cls(float(size), 0.0, 0.0, False, 1.0, 1.0, 0)


def sample_view_params(rng, size):
    scale = rng.uniform(0.4, 1.0)
    side = math.sqrt(scale) * size
    top, left = rng.uniform(0.0, size - side, size=2)
    return ViewParams(
        side=side,
        top=float(top),
        left=float(left),
        flip=bool(rng.random() < 0.5),
        brightness=float(rng.uniform(0.8, 1.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
        rotation=int(rng.integers(4)),
    )


def resized_crop(image, top, left, side, out_size):
    """Bilinear resample of the square ``side`` window at (top, left)."""
    h, w = image.shape[:2]
    step = side / out_size
    ys = top + (np.arange(out_size) + 0.5) * step - 0.5
    xs = left + (np.arange(out_size) + 0.5) * step - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top_row = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom_row = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top_row * (1 - wy) + bottom_row * wy


def apply_view(image, params, out_size=None):
    out_size = out_size or image.shape[0]
    view = resized_crop(image, params.top, params.left, params.side, out_size)
    if params.flip:
        view = view[:, ::-1]
    view = view * params.brightness
    view = view * params.contrast + view.mean() * (1.0 - params.contrast)
    view = np.rot90(view, params.rotation)
    return np.ascontiguousarray(np.clip(view, 0.0, 1.0))


@dataclass
class AugmentedPair:
    view_t: np.ndarray
    view_s: np.ndarray
    target: np.ndarray
    mask_t: MaskSpec


def augment_views(image, rng, target=None, mask_ratio=0.6, patch_size=32, mask_rng=None):
    """Two independently augmented views of ``image`` plus the MIM mask for ``view_t``."""
    size = image.shape[0]
    view_t = apply_view(image, sample_view_params(rng, size))
    view_s = apply_view(image, sample_view_params(rng, size))
    grid = (size // patch_size, image.shape[1] // patch_size)
    mask = mask_patches(mask_ratio, grid, mask_rng if mask_rng is not None else rng)
    return AugmentedPair(view_t, view_s, target, mask)


@dataclass
class Batch:
    view_t: np.ndarray
    view_s: np.ndarray
    targets: np.ndarray
    masks: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def make_pair(dataset, index, seed, epoch, mask_ratio, patch_size):
    image, target = dataset[index]
    return augment_views(
        image, stream(seed, "augment", epoch, index), target,
        mask_ratio=mask_ratio, patch_size=patch_size,
        mask_rng=stream(seed, "mask", epoch, index))


def make_batch(dataset, indices, seed, epoch, mask_ratio, patch_size, pool=None):
    """Assemble the augmented batch for ``indices``; order is fixed by ``indices``."""
    def one(i):
        return make_pair(dataset, i, seed, epoch, mask_ratio, patch_size)

    pairs = list(pool.map(one, indices)) if pool is not None else [one(i) for i in indices]
    return Batch(
        view_t=np.stack([p.view_t for p in pairs]),
        view_s=np.stack([p.view_s for p in pairs]),
        targets=np.stack([p.target for p in pairs]),
        masks=np.stack([p.mask_t.grid for p in pairs]),
        indices=np.asarray(indices),
    )


def worker_pool(num_workers):
    return ThreadPoolExecutor(num_workers) if num_workers and num_workers > 1 else None


# -- manifests ------------------------------------------------------------------

def parse_manifest(text, num_classes):
    """Parse manifest text into ``[(lineno, path, [class indices])]``."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        path = fields[0]
        if not path:
            raise ManifestError("empty image path", lineno)
        try:
            classes = [int(f, 10) for f in fields[1:]]
        except ValueError:
            raise ManifestError(f"unparsable class index in {line!r}", lineno) from None
        for c in classes:
            if not 0 <= c < num_classes:
                raise ManifestError(
                    f"class index {c} outside [0, {num_classes})", lineno)
        rows.append((lineno, path, classes))
    return rows


def load_image(path, image_size):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def load_manifest_dataset(root, manifest, num_classes=8, image_size=64):
    """Load images listed in ``manifest`` (paths relative to ``root``)."""
    with open(manifest, encoding="utf-8") as fh:
        rows = parse_manifest(fh.read(), num_classes)
    images = np.zeros((len(rows), image_size, image_size, 3), dtype=np.uint8)
    labels = np.zeros((len(rows), num_classes))
    paths = []
    for i, (lineno, rel, classes) in enumerate(rows):
        full = os.path.join(root, rel)
        if not os.path.isfile(full):
            raise ManifestError(f"missing image file {full}", lineno)
        try:
            images[i] = load_image(full, image_size)
        except OSError as exc:
            raise ManifestError(f"cannot decode {full}: {exc}", lineno) from None
        labels[i, classes] = 1.0
        paths.append(rel)
    return Dataset(images, labels, num_classes, paths)


def export_dataset(dataset, out_dir, manifest_name="manifest.txt"):
    """Write lossless PNGs under ``out_dir/images`` and a matching manifest."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        rel = f"images/{i:05d}.png"
        Image.fromarray(dataset.images[i]).save(os.path.join(out_dir, rel))
        classes = np.flatnonzero(dataset.labels[i])
        lines.append(",".join([rel] + [str(c) for c in classes]))
    path = os.path.join(out_dir, manifest_name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return path
