"""Procedural attribute images for desk-scale runs, plus image-folder ingestion.

Synthetic layout for an ``S x S`` image:

* the top ``S // 4`` rows form the colour band; each exclusive attribute
  group paints its active member's palette colour there (background grey
  when no member is on);
* the remaining rows are split into equal vertical strips, one per
  non-colour attribute. A ``shape`` attribute draws a white square inside
  its strip; a ``brightness`` attribute lifts the whole strip.

Decision rule used by :func:`decode_synthetic`:

* colour group: nearest palette entry (or background grey) to the band's
  mean RGB;
* shape: on iff at least half a square's area of strip pixels has
  channel-mean intensity above 0.25;
* brightness: on iff the strip's mean intensity exceeds the background
  level plus half the offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .labelspace import AttributeSchema, Encoding, Label

BACKGROUND = -0.4
SHAPE_VALUE = 0.9
BRIGHT_OFFSET = 0.6

PALETTE = (
    (0.9, -0.8, -0.8),   # red
    (-0.8, -0.8, 0.9),   # blue
    (0.9, 0.8, -0.8),    # yellow
    (-0.8, 0.9, -0.8),   # green
    (0.9, -0.8, 0.9),    # magenta
    (-0.8, 0.9, 0.9),    # cyan
    (0.9, 0.9, 0.9),     # white
    (-1.0, -1.0, -1.0),  # black
)


class DataError(Exception):
    pass


class MissingFile(DataError):
    pass


class MalformedAttributeLine(DataError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class UnknownAttributeName(DataError):
    pass


class ImageTooSmall(DataError):
    pass


@dataclass
class SyntheticSpec:
    schema: AttributeSchema
    image_size: int = 32
    attribute_renderers: Dict[int, str] = field(default_factory=dict)
    noise_amplitude: float = 0.1
    jitter: int = 2

    def __post_init__(self):
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")
        if not self.attribute_renderers:
            grouped = {i for g in self.schema.exclusive_groups for i in g}
            kinds = iter(["shape", "brightness"] * self.schema.n_attr)
            self.attribute_renderers = {
                i: "colour" if i in grouped else next(kinds) for i in range(self.schema.n_attr)}
        if len(self.attribute_renderers) != self.schema.n_attr:
            raise ValueError("every attribute needs a renderer")
        for i, kind in self.attribute_renderers.items():
            if kind not in ("colour", "shape", "brightness"):
                raise ValueError(f"unknown renderer {kind!r}")
            grouped = any(i in g for g in self.schema.exclusive_groups)
            if (kind == "colour") != grouped:
                raise ValueError("colour renderers are exactly the exclusive-group attributes")
        for g in self.schema.exclusive_groups:
            if len(g) > len(PALETTE):
                raise ValueError("exclusive group larger than the palette")

    @property
    def band_rows(self) -> int:
        return self.image_size // 4

    def strips(self) -> List[int]:
        return [i for i in range(self.schema.n_attr) if self.attribute_renderers[i] != "colour"]

    def region(self, attr: int) -> Tuple[slice, slice]:
        """Rows/cols owned by ``attr`` (the whole band for colour attributes)."""
        S = self.image_size
        if self.attribute_renderers[attr] == "colour":
            groups = self.schema.exclusive_groups
            g = next(j for j, grp in enumerate(groups) if attr in grp)
            edges = np.linspace(0, self.band_rows, len(groups) + 1).astype(int)
            return slice(edges[g], edges[g + 1]), slice(0, S)
        strips = self.strips()
        edges = np.linspace(0, S, len(strips) + 1).astype(int)
        j = strips.index(attr)
        return slice(self.band_rows, S), slice(edges[j], edges[j + 1])

    @property
    def square_side(self) -> int:
        return max(2, self.image_size // 4)


def synthetic_schema(n_colours: int = 3, n_binary: int = 2) -> AttributeSchema:
    names = [f"colour{i}" for i in range(n_colours)]
    names += [("shape", "bright")[i % 2] + (str(i // 2) if i >= 2 else "") for i in range(n_binary)]
    groups = (tuple(range(n_colours)),) if n_colours > 1 else ()
    return AttributeSchema(tuple(names), exclusive_groups=groups)


def synthetic8_schema() -> AttributeSchema:
    """Two band colours (exactly one on), a square and a brightness flag: 8 classes."""
    return synthetic_schema(n_colours=2, n_binary=2)


def all_classes(schema: AttributeSchema, require_colour: bool = True) -> List[Label]:
    """Every label valid under ``schema``; with ``require_colour`` each group has one member on."""
    out = []
    for code in range(2 ** schema.n_attr):
        bits = tuple((code >> (schema.n_attr - 1 - i)) & 1 for i in range(schema.n_attr))
        ok = True
        for g in schema.exclusive_groups:
            on = sum(bits[i] for i in g)
            if on > 1 or ((require_colour or schema.encoding is Encoding.ONE_HOT) and on != 1):
                ok = False
        if ok:
            out.append(bits)
    return out


def render_synthetic(label: Sequence[int], spec: SyntheticSpec,
                     rng: np.random.Generator) -> np.ndarray:
    """Render one ``[3, S, S]`` float32 image in [-1, 1].

    The rng is consumed identically for every label, so two labels rendered
    from equal rng states differ only inside the regions of differing bits.
    """
    bits = spec.schema.validate(label)
    S = spec.image_size
    a = spec.noise_amplitude
    # fixed draw order: jitter per strip, tint, pixel noise
    strips = spec.strips()
    jit = rng.integers(-spec.jitter, spec.jitter + 1, size=(len(strips), 2)) if spec.jitter else \
        np.zeros((len(strips), 2), dtype=int)
    tint = rng.uniform(-a, a, size=3)
    noise = rng.normal(0.0, a / 2, size=(3, S, S)) if a > 0 else np.zeros((3, S, S))
    if a == 0:
        jit = np.zeros_like(jit)

    img = np.full((3, S, S), BACKGROUND, dtype=np.float64) + tint[:, None, None]
    for g in spec.schema.exclusive_groups:
        on = [i for i in g if bits[i]]
        if on:
            rows, cols = spec.region(on[0])
            colour = np.asarray(PALETTE[list(g).index(on[0])])
            img[:, rows, cols] = colour[:, None, None]
    side = spec.square_side
    for j, attr in enumerate(strips):
        if not bits[attr]:
            continue
        rows, cols = spec.region(attr)
        if spec.attribute_renderers[attr] == "brightness":
            img[:, rows, cols] += BRIGHT_OFFSET
        else:
            h = rows.stop - rows.start
            w = cols.stop - cols.start
            r0 = rows.start + (h - side) // 2 + int(jit[j, 0])
            c0 = cols.start + (w - side) // 2 + int(jit[j, 1])
            r0 = min(max(r0, rows.start), rows.stop - side)
            c0 = min(max(c0, cols.start), cols.stop - side)
            img[:, r0:r0 + side, c0:c0 + side] = SHAPE_VALUE
    img += noise
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def decode_synthetic(image: np.ndarray, spec: SyntheticSpec) -> Label:
    """Recover the label of a synthetic image with the documented decision rule."""
    image = np.asarray(image, dtype=np.float64)
    bits = [0] * spec.schema.n_attr
    for g in spec.schema.exclusive_groups:
        rows, cols = spec.region(g[0])
        mean = image[:, rows, cols].mean(axis=(1, 2))
        candidates = [np.full(3, BACKGROUND)] + [np.asarray(PALETTE[k]) for k in range(len(g))]
        best = int(np.argmin([np.sum((mean - c) ** 2) for c in candidates]))
        if best > 0:
            bits[g[best - 1]] = 1
    side = spec.square_side
    for attr in spec.strips():
        rows, cols = spec.region(attr)
        patch = image[:, rows, cols].mean(axis=0)
        if spec.attribute_renderers[attr] == "brightness":
            bits[attr] = int(patch.mean() > BACKGROUND + BRIGHT_OFFSET / 2)
        else:
            bits[attr] = int((patch > 0.25).sum() >= side * side / 2)
    return tuple(bits)


def make_synthetic_dataset(spec: SyntheticSpec, classes: Sequence[Label], n: int, seed: int,
                           balanced: bool = True):
    """``n`` rendered images with labels drawn from ``classes``.

    Returns ``(images [n,3,S,S] float32, labels list)``. Balanced mode cycles
    through the classes and then shuffles.
    """
    rng = np.random.default_rng(seed)
    classes = [tuple(c) for c in classes]
    if balanced:
        idx = np.arange(n) % len(classes)
        rng.shuffle(idx)
    else:
        idx = rng.integers(0, len(classes), size=n)
    labels = [classes[i] for i in idx]
    images = np.stack([render_synthetic(y, spec, rng) for y in labels]) if n else \
        np.zeros((0, 3, spec.image_size, spec.image_size), np.float32)
    return images, labels


# ---- real image folders -------------------------------------------------

def load_image_folder(image_dir, attribute_file, schema: AttributeSchema):
    """Records ``(path, label)`` for every image listed in ``attribute_file``."""
    from .labelspace import read_attribute_file

    image_dir = Path(image_dir)
    if not Path(attribute_file).exists():
        raise MissingFile(str(attribute_file))
    records = []
    for name, bits in read_attribute_file(attribute_file, schema):
        path = image_dir / name
        if not path.exists():
            raise MissingFile(str(path))
        records.append((str(path), bits))
    return records


def _to_chw(image) -> np.ndarray:
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        return arr.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("float images must be [3, H, W] in [-1, 1]")
    return arr.astype(np.float64)


def preprocess(image, crop_size: int, out_size: int) -> np.ndarray:
    """Centre-crop to ``crop_size``, bilinear resize to ``out_size``, map to [-1, 1].

    Accepts a PIL image, an ``HxWx3`` uint8 array, or a float ``[3, H, W]``
    array already in [-1, 1].
    """
    chw = _to_chw(image)
    _, H, W = chw.shape
    if crop_size > min(H, W):
        raise ImageTooSmall(f"{H}x{W} image cannot be cropped to {crop_size}")
    top = (H - crop_size) // 2
    left = (W - crop_size) // 2
    chw = chw[:, top:top + crop_size, left:left + crop_size]
    if out_size != crop_size:
        t = torch.from_numpy(np.ascontiguousarray(chw))[None]
        t = F.interpolate(t, size=(out_size, out_size), mode="bilinear",
                          align_corners=False, antialias=out_size < crop_size)
        chw = t[0].numpy()
    return np.clip(chw, -1.0, 1.0).astype(np.float32)


def random_flip(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontally flip each image of a ``[B,3,H,W]`` batch with probability 1/2."""
    flips = rng.random(len(batch)) < 0.5
    out = batch.copy()
    out[flips] = out[flips][..., ::-1]
    return out


class ArrayImageSource:
    """Integer image refs indexing an in-memory ``[N,3,H,W]`` array."""

    def __init__(self, images: np.ndarray):
        self.images = np.asarray(images, dtype=np.float32)

    def get(self, refs) -> np.ndarray:
        return self.images[np.asarray(refs, dtype=np.int64)]


class FolderImageSource:
    """Path refs decoded and preprocessed on demand, with an in-memory cache."""

    def __init__(self, crop_size: int, out_size: int, cache: bool = True):
        self.crop_size = crop_size
        self.out_size = out_size
        self._cache: Optional[dict] = {} if cache else None

    def _load(self, path) -> np.ndarray:
        if self._cache is not None and path in self._cache:
            return self._cache[path]
        if not Path(path).exists():
            raise MissingFile(str(path))
        with Image.open(path) as im:
            arr = preprocess(im, self.crop_size, self.out_size)
        if self._cache is not None:
            self._cache[path] = arr
        return arr

    def get(self, refs) -> np.ndarray:
        return np.stack([self._load(r) for r in refs])


# ---- PNG output -----------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` in [-1,1] to ``HxWx3`` uint8."""
    arr = np.clip((np.asarray(image) + 1.0) * 127.5, 0, 255)
    return np.rint(arr).astype(np.uint8).transpose(1, 2, 0)


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def tile_grid(tiles: np.ndarray, pad: int = 2) -> np.ndarray:
    """Arrange ``[rows, cols, 3, H, W]`` tiles into a single ``[3, H', W']`` image."""
    rows, cols, c, h, w = tiles.shape
    out = np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.float32)
    for r in range(rows):
        for k in range(cols):
            y = pad + r * (h + pad)
            x = pad + k * (w + pad)
            out[:, y:y + h, x:x + w] = tiles[r, k]
    return out
