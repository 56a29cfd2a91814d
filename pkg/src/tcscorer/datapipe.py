"""Slide preprocessing: tissue detection, annotation consolidation, patches.

The pipeline goes raster slide -> tissue mask (Otsu + morphology) ->
consolidated per-pixel labels from two raters -> labeled / unlabeled
patch grids ready for training.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .models import N_CLASSES, ClassLabel

NO_LABEL = -1
DEFAULT_MICRONS_PER_PIXEL = 0.198

# 13-pixel disk approximation of radius 2, the structuring element for
# both morphology passes
_DY, _DX = np.mgrid[-2:3, -2:3]
DISK2 = (_DX * _DX + _DY * _DY) <= 4
del _DY, _DX


@dataclass
class Slide:
    """8-bit RGB raster with identity and physical resolution."""

    id: str
    pixels: np.ndarray
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(
                f"slide pixels must be HxWx3, got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def grayscale(self):
        """Integer mean of the channels, floor-rounded into [0, 255]."""
        s = self.pixels.astype(np.uint16).sum(axis=2)
        return (s // 3).astype(np.uint8)

    def save_png(self, path):
        Image.fromarray(self.pixels, "RGB").save(path, format="PNG")

    @classmethod
    def load_png(cls, path, slide_id=None,
                 microns_per_pixel=DEFAULT_MICRONS_PER_PIXEL):
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if slide_id is None:
            slide_id = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
        return cls(id=slide_id, pixels=pixels,
                   microns_per_pixel=microns_per_pixel)


@dataclass
class Region:
    """One annotated polygon with its class."""

    polygon: np.ndarray
    label: ClassLabel

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64)
        if self.polygon.ndim != 2 or self.polygon.shape[1] != 2 \
                or self.polygon.shape[0] < 3:
            raise ShapeError(
                f"polygon must be (>=3, 2) vertices, got {self.polygon.shape}")
        self.label = ClassLabel(self.label)
        if self.label == ClassLabel.NON_TISSUE:
            raise ConfigError(
                "NON_TISSUE is derived from the tissue mask, never annotated")


@dataclass
class AnnotationSet:
    """All regions one rater drew on one slide."""

    slide_id: str
    rater_id: str
    regions: list = field(default_factory=list)

    def save_json(self, path):
        doc = {
            "slide_id": self.slide_id,
            "rater_id": self.rater_id,
            "regions": [
                {"label": int(r.label), "polygon": r.polygon.tolist()}
                for r in self.regions
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        regions = [Region(polygon=np.asarray(r["polygon"], dtype=np.float64),
                          label=ClassLabel(int(r["label"])))
                   for r in doc["regions"]]
        return cls(slide_id=doc["slide_id"], rater_id=doc["rater_id"],
                   regions=regions)


@dataclass
class TissueMask:
    """Boolean tissue-vs-background raster matching a slide's extent."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ShapeError(f"tissue mask must be 2-D, got {self.mask.shape}")

    @property
    def height(self):
        return self.mask.shape[0]

    @property
    def width(self):
        return self.mask.shape[1]

    def coverage(self):
        return float(self.mask.mean())


def otsu_threshold(histogram):
    """Threshold maximizing between-class variance of a 256-bin histogram.

    The returned t is the first intensity of the upper class (split
    [0..t-1] vs [t..255]), so ``intensity < t`` selects the lower class;
    ties break toward the smallest t. Splits leaving one class empty are
    not candidates, and a single-spike histogram returns the spike
    intensity itself.
    """
    h = np.asarray(histogram, dtype=np.float64)
    if h.shape != (256,):
        raise ShapeError(f"histogram must have 256 bins, got {h.shape}")
    if h.sum() <= 0:
        raise ConfigError("otsu_threshold: histogram is empty")
    nonzero = np.nonzero(h)[0]
    if nonzero.size == 1:
        return int(nonzero[0])
    levels = np.arange(256, dtype=np.float64)
    cw = np.cumsum(h)
    cm = np.cumsum(h * levels)
    w0 = cw[:-1]                   # mass below t, for t = 1..255
    m0 = cm[:-1]
    w1 = cw[-1] - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, m0 / np.where(w0 > 0, w0, 1.0), 0.0)
    mu1 = np.where(valid, (cm[-1] - m0) / np.where(w1 > 0, w1, 1.0), 0.0)
    var_between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    return int(np.argmax(var_between)) + 1


def tissue_mask(slide):
    """Dark-pixel mask cleaned by opening then closing with a 2 px disk."""
    gray = slide.grayscale()
    if gray.max() == gray.min():
        return TissueMask(np.zeros(gray.shape, dtype=bool))
    hist = np.bincount(gray.ravel(), minlength=256)[:256]
    t = otsu_threshold(hist)
    raw = gray < t
    opened = ndimage.binary_opening(raw, structure=DISK2)
    closed = ndimage.binary_closing(opened, structure=DISK2)
    return TissueMask(closed)


def _fill_polygon(target, polygon, value):
    """Paint a polygon onto a raster: even-odd rule at pixel centers.

    A pixel (x, y) belongs to the polygon when its center
    (x + 0.5, y + 0.5) is inside. Crossing intervals are half-open
    [enter, exit) so abutting polygons never double-claim a center.
    """
    h, w = target.shape
    ys = polygon[:, 1]
    y_lo = max(0, int(math.floor(ys.min() - 0.5)))
    y_hi = min(h - 1, int(math.ceil(ys.max())))
    edges = np.stack([polygon, np.roll(polygon, -1, axis=0)], axis=1)
    for y in range(y_lo, y_hi + 1):
        cy = y + 0.5
        xs = []
        for (x1, y1), (x2, y2) in edges:
            if (y1 > cy) != (y2 > cy):
                xs.append(x1 + (cy - y1) * (x2 - x1) / (y2 - y1))
        if not xs:
            continue
        xs.sort()
        for k in range(0, len(xs) - 1, 2):
            # centers with enter <= x + 0.5 < exit
            j0 = max(0, int(math.ceil(xs[k] - 0.5)))
            j1 = min(w - 1, int(math.ceil(xs[k + 1] - 0.5)) - 1)
            if j0 <= j1:
                target[y, j0:j1 + 1] = value


def label_raster(annotations, height, width):
    """Rasterize one rater's regions; later regions overwrite earlier."""
    out = np.full((height, width), NO_LABEL, dtype=np.int16)
    for region in annotations.regions:
        _fill_polygon(out, region.polygon, int(region.label))
    return out


def consolidate_annotations(a, b, height, width, accept_single_rater=False):
    """Per-pixel labels both raters agree on; disagreements become NO_LABEL.

    With ``accept_single_rater`` a pixel annotated by exactly one rater
    keeps that rater's label instead of being discarded.
    """
    if a.slide_id != b.slide_id:
        raise ConfigError(
            f"annotation sets are for different slides: "
            f"{a.slide_id!r} vs {b.slide_id!r}")
    ra = label_raster(a, height, width)
    rb = label_raster(b, height, width)
    out = np.where((ra == rb) & (ra != NO_LABEL), ra, NO_LABEL)
    if accept_single_rater:
        only_a = (ra != NO_LABEL) & (rb == NO_LABEL)
        only_b = (rb != NO_LABEL) & (ra == NO_LABEL)
        out = np.where(only_a, ra, out)
        out = np.where(only_b, rb, out)
    return out.astype(np.int16)


def apply_non_tissue(labels, tissue):
    """Force pixels outside the tissue mask to the NON_TISSUE class."""
    if labels.shape != tissue.mask.shape:
        raise ShapeError(
            f"label raster {labels.shape} does not match "
            f"tissue mask {tissue.mask.shape}")
    out = labels.astype(np.int16, copy=True)
    out[~tissue.mask] = int(ClassLabel.NON_TISSUE)
    return out


@dataclass
class PatchSet:
    """Fixed-size patches cut from slides, optionally labeled."""

    kind: str
    size: int
    slide_ids: list
    coords: np.ndarray
    pixels: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("labeled", "unlabeled"):
            raise ConfigError(f"PatchSet kind must be labeled|unlabeled, "
                              f"got {self.kind!r}")
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 2)
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        n = self.coords.shape[0]
        expect = (n, self.size, self.size, 3)
        if self.pixels.shape != expect:
            raise ShapeError(
                f"patch pixels shape {self.pixels.shape}, expected {expect}")
        if len(self.slide_ids) != n:
            raise ShapeError(f"{len(self.slide_ids)} slide ids for {n} patches")
        if self.kind == "labeled":
            if self.labels is None:
                raise ConfigError("labeled PatchSet requires labels")
            self.labels = np.asarray(self.labels, dtype=np.int16).reshape(-1)
            if self.labels.shape[0] != n:
                raise ShapeError(f"{self.labels.shape[0]} labels for {n} patches")
        elif self.labels is not None:
            raise ConfigError("unlabeled PatchSet must not carry labels")

    def __len__(self):
        return self.coords.shape[0]

    @classmethod
    def empty(cls, kind, size):
        return cls(kind=kind, size=size, slide_ids=[],
                   coords=np.zeros((0, 2), np.int32),
                   pixels=np.zeros((0, size, size, 3), np.uint8),
                   labels=np.zeros(0, np.int16) if kind == "labeled" else None)

    @classmethod
    def merge(cls, sets):
        sets = list(sets)
        if not sets:
            raise ConfigError("PatchSet.merge needs at least one set")
        kind = sets[0].kind
        size = sets[0].size
        for s in sets[1:]:
            if s.kind != kind or s.size != size:
                raise ConfigError("cannot merge PatchSets of differing "
                                  "kind or size")
        ids = [sid for s in sets for sid in s.slide_ids]
        coords = np.concatenate([s.coords for s in sets], axis=0)
        pixels = np.concatenate([s.pixels for s in sets], axis=0)
        labels = None
        if kind == "labeled":
            labels = np.concatenate([s.labels for s in sets], axis=0)
        return cls(kind=kind, size=size, slide_ids=ids, coords=coords,
                   pixels=pixels, labels=labels)

    def take(self, indices):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return PatchSet(
            kind=self.kind, size=self.size,
            slide_ids=[self.slide_ids[i] for i in idx],
            coords=self.coords[idx], pixels=self.pixels[idx],
            labels=self.labels[idx] if self.labels is not None else None)

    def save(self, manifest_path):
        """Manifest CSV plus a raw-pixel sidecar blob in manifest order."""
        blob_path = _blob_path(manifest_path)
        with open(manifest_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["slide_id", "x", "y", "size", "label"])
            for i, sid in enumerate(self.slide_ids):
                label = int(self.labels[i]) if self.labels is not None \
                    else NO_LABEL
                writer.writerow([sid, int(self.coords[i, 0]),
                                 int(self.coords[i, 1]), self.size, label])
        with open(blob_path, "wb") as fh:
            fh.write(self.pixels.tobytes())

    @classmethod
    def load(cls, manifest_path):
        blob_path = _blob_path(manifest_path)
        with open(manifest_path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["slide_id", "x", "y", "size", "label"]:
            raise ConfigError(f"{manifest_path}: not a PatchSet manifest")
        body = [r for r in rows[1:] if r]
        if body:
            sizes = {int(r[3]) for r in body}
            if len(sizes) != 1:
                raise ConfigError(f"{manifest_path}: mixed patch sizes {sizes}")
            size = sizes.pop()
        else:
            size = 0
        labels = np.array([int(r[4]) for r in body], dtype=np.int16)
        kind = "unlabeled" if body and (labels == NO_LABEL).all() else "labeled"
        if not body:
            kind = "labeled"
        raw = np.fromfile(blob_path, dtype=np.uint8)
        pixels = raw.reshape(len(body), size, size, 3) if body else \
            np.zeros((0, size, size, 3), np.uint8)
        return cls(
            kind=kind, size=size,
            slide_ids=[r[0] for r in body],
            coords=np.array([[int(r[1]), int(r[2])] for r in body],
                            dtype=np.int32).reshape(-1, 2),
            pixels=pixels,
            labels=labels if kind == "labeled" else None)


def _blob_path(manifest_path):
    p = str(manifest_path)
    return (p[:-4] if p.endswith(".csv") else p) + ".blob"


def grid_positions(extent, patch_size, stride):
    """Anchor-at-zero grid: floor((extent - patch)/stride) + 1 positions."""
    if patch_size > extent:
        return np.zeros(0, dtype=np.int32)
    n = (extent - patch_size) // stride + 1
    return (np.arange(n, dtype=np.int32) * stride)


def _integral(counts):
    ii = np.zeros((counts.shape[0] + 1, counts.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(counts, axis=0), axis=1, out=ii[1:, 1:])
    return ii


def _patch_pixels(slide, ys, xs, size):
    windows = np.lib.stride_tricks.sliding_window_view(
        slide.pixels, (size, size), axis=(0, 1))
    sel = windows[ys[:, None], xs[None, :]]          # (ny, nx, 3, s, s)
    n = sel.shape[0] * sel.shape[1]
    return np.ascontiguousarray(
        sel.reshape(n, 3, size, size).transpose(0, 2, 3, 1))


def extract_labeled_patches(slide, labels, patch_size, stride=20, purity=1.0):
    """Grid patches whose pixels are (near-)uniformly one class.

    A patch at (x, y) is emitted with label L when at least
    ``purity * patch_size**2`` of its pixels carry consolidated label L.
    NO_LABEL pixels never count toward any class.
    """
    if not 0.9 <= purity <= 1.0:
        raise ConfigError(f"purity must lie in [0.9, 1.0], got {purity}")
    if labels.shape != (slide.height, slide.width):
        raise ShapeError(
            f"label raster {labels.shape} does not match slide "
            f"{(slide.height, slide.width)}")
    ys = grid_positions(slide.height, patch_size, stride)
    xs = grid_positions(slide.width, patch_size, stride)
    if ys.size == 0 or xs.size == 0:
        return PatchSet.empty("labeled", patch_size)
    need = purity * patch_size * patch_size
    best_count = np.zeros((ys.size, xs.size), dtype=np.int64)
    best_class = np.full((ys.size, xs.size), NO_LABEL, dtype=np.int16)
    for c in range(N_CLASSES):
        ii = _integral(labels == c)
        sums = (ii[ys[:, None] + patch_size, xs[None, :] + patch_size]
                - ii[ys[:, None], xs[None, :] + patch_size]
                - ii[ys[:, None] + patch_size, xs[None, :]]
                + ii[ys[:, None], xs[None, :]])
        better = sums > best_count
        best_count = np.where(better, sums, best_count)
        best_class = np.where(better, np.int16(c), best_class)
    keep = best_count >= need
    if not keep.any():
        return PatchSet.empty("labeled", patch_size)
    rows, cols = np.nonzero(keep)
    pixels = _patch_pixels(slide, ys, xs, patch_size).reshape(
        ys.size, xs.size, patch_size, patch_size, 3)[rows, cols]
    coords = np.stack([xs[cols], ys[rows]], axis=1)
    return PatchSet(
        kind="labeled", size=patch_size,
        slide_ids=[slide.id] * rows.size,
        coords=coords, pixels=np.ascontiguousarray(pixels),
        labels=best_class[rows, cols])


def extract_unlabeled_patches(slide, tissue, patch_size, stride=60,
                              min_tissue=0.5):
    """Grid patches with at least ``min_tissue`` tissue coverage."""
    if tissue.mask.shape != (slide.height, slide.width):
        raise ShapeError(
            f"tissue mask {tissue.mask.shape} does not match slide "
            f"{(slide.height, slide.width)}")
    ys = grid_positions(slide.height, patch_size, stride)
    xs = grid_positions(slide.width, patch_size, stride)
    if ys.size == 0 or xs.size == 0:
        return PatchSet.empty("unlabeled", patch_size)
    ii = _integral(tissue.mask)
    sums = (ii[ys[:, None] + patch_size, xs[None, :] + patch_size]
            - ii[ys[:, None], xs[None, :] + patch_size]
            - ii[ys[:, None] + patch_size, xs[None, :]]
            + ii[ys[:, None], xs[None, :]])
    keep = sums >= min_tissue * patch_size * patch_size
    if not keep.any():
        return PatchSet.empty("unlabeled", patch_size)
    rows, cols = np.nonzero(keep)
    pixels = _patch_pixels(slide, ys, xs, patch_size).reshape(
        ys.size, xs.size, patch_size, patch_size, 3)[rows, cols]
    coords = np.stack([xs[cols], ys[rows]], axis=1)
    return PatchSet(
        kind="unlabeled", size=patch_size,
        slide_ids=[slide.id] * rows.size,
        coords=coords, pixels=np.ascontiguousarray(pixels))


def augment_rot90(patches):
    """Four-fold rotation augmentation; labels follow their patches."""
    if patches.pixels.shape[1] != patches.pixels.shape[2]:
        raise ShapeError("augment_rot90 requires square patches")
    rotations = [np.rot90(patches.pixels, k, axes=(1, 2)) for k in range(4)]
    pixels = np.ascontiguousarray(np.concatenate(rotations, axis=0))
    labels = None
    if patches.labels is not None:
        labels = np.tile(patches.labels, 4)
    return PatchSet(
        kind=patches.kind, size=patches.size,
        slide_ids=list(patches.slide_ids) * 4,
        coords=np.tile(patches.coords, (4, 1)),
        pixels=pixels, labels=labels)


def scale_stride(stride, reference_patch=128, patch_size=32):
    """Rescale the paper's 128 px strides to another patch size."""
    scaled = stride * patch_size / reference_patch
    out = max(1, int(round(scaled)))
    return out
