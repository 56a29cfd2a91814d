"""Seeded synthetic stained-slide generator with exact ground truth.

Each slide is a bright background, a smoothed-noise tissue blob, and a
nearest-seed (grown-region) partition of the tissue into class regions.
Classes render as stain-like textures that deliberately share palette
components (brown appears in three classes, blue in two, pink in three)
so mean color alone cannot separate them; the discriminating signal is
the pattern. Two simulated raters re-annotate every region with small
boundary offsets, and three simulated visual scores jitter the true TC
value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import Voronoi, cKDTree

from .datapipe import NO_LABEL, AnnotationSet, Region, Slide
from .errors import ConfigError, NoTumorDetected
from .models import N_CLASSES, ClassLabel
from .stats import ScoreTable

BACKGROUND_LEVEL = 235
MIN_EXTENT = 128          # four default patches per axis

# Tissue-class palette; several classes share components on purpose.
# Hues are saturated but channel means sit in a narrow 130-175 band, so
# the stained-vs-pale texture contrast never rivals the tissue-vs-235
# background contrast that Otsu has to find.
_BROWN_DARK = (196, 120, 76)
_BROWN_MID = (196, 144, 104)
_BLUE_DARK = (96, 120, 200)
_PINK_BASE = (192, 152, 166)
_PINK_FIBER = (176, 120, 146)
_PALE_POS = (196, 170, 148)
_PALE_NEG = (172, 162, 190)
_NECRO_BASE = (178, 166, 170)
_GRAY_MOTTLE = (148, 144, 150)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for one synthetic slide (or a cohort template)."""

    seed: int = 0
    width: int = 256
    height: int = 256
    target_tc: float = 30.0
    class_mix: tuple | None = None
    texture_scale: float = 1.0
    rater_noise_sd: float = 5.0

    def __post_init__(self):
        if self.width < MIN_EXTENT or self.height < MIN_EXTENT:
            raise ConfigError(
                f"slide extents must be >= {MIN_EXTENT}, got "
                f"{self.width}x{self.height}")
        if not 0.0 <= self.target_tc <= 100.0:
            raise ConfigError(f"target_tc must be in [0, 100], "
                              f"got {self.target_tc}")
        if self.texture_scale <= 0:
            raise ConfigError("texture_scale must be positive")
        if self.rater_noise_sd < 0:
            raise ConfigError("rater_noise_sd must be nonnegative")
        if self.class_mix is not None:
            mix = np.asarray(self.class_mix, dtype=np.float64)
            if mix.shape != (N_CLASSES,):
                raise ConfigError(
                    f"class_mix needs {N_CLASSES} weights, got {mix.shape}")
            if (mix < 0).any():
                raise ConfigError("class_mix weights must be nonnegative")
            if abs(float(mix.sum()) - 1.0) > 1e-6:
                raise ConfigError("class_mix must sum to 1")
            if mix[int(ClassLabel.NON_TISSUE)] >= 1.0:
                raise ConfigError("class_mix leaves zero tissue")
            object.__setattr__(self, "class_mix", tuple(float(v) for v in mix))

    def effective_mix(self):
        """Final 8-class pixel-share targets.

        The NON_TISSUE entry is the background share (1 - tissue
        coverage); the TC(+)/TC(-) split inside the tumor share is
        re-balanced to hit target_tc.
        """
        if self.class_mix is None:
            mix = np.array([0.20, 0.20, 0.05, 0.05, 0.05, 0.07, 0.13, 0.25])
        else:
            mix = np.asarray(self.class_mix, dtype=np.float64).copy()
        tumor = mix[int(ClassLabel.TC_POS)] + mix[int(ClassLabel.TC_NEG)]
        if tumor <= 0:
            raise ConfigError(
                "class_mix allots no tumor area; the TC score would be "
                "undefined")
        frac = self.target_tc / 100.0
        mix[int(ClassLabel.TC_POS)] = tumor * frac
        mix[int(ClassLabel.TC_NEG)] = tumor * (1.0 - frac)
        return mix

    def to_dict(self):
        return {
            "seed": int(self.seed), "width": self.width, "height": self.height,
            "target_tc": float(self.target_tc),
            "class_mix": None if self.class_mix is None
            else list(self.class_mix),
            "texture_scale": float(self.texture_scale),
            "rater_noise_sd": float(self.rater_noise_sd),
        }

    @classmethod
    def from_dict(cls, doc):
        mix = doc.get("class_mix")
        return cls(seed=int(doc.get("seed", 0)),
                   width=int(doc.get("width", 256)),
                   height=int(doc.get("height", 256)),
                   target_tc=float(doc.get("target_tc", 30.0)),
                   class_mix=None if mix is None else tuple(mix),
                   texture_scale=float(doc.get("texture_scale", 1.0)),
                   rater_noise_sd=float(doc.get("rater_noise_sd", 5.0)))


@dataclass
class GroundTruth:
    """Per-pixel class mask plus the scores derived from it."""

    mask: np.ndarray
    true_tc: float
    rater_scores: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int16)
        self.rater_scores = np.asarray(self.rater_scores, dtype=np.float64)


@dataclass
class CohortItem:
    slide: Slide
    truth: GroundTruth
    annotations: tuple
    config: SynthConfig


def tc_from_mask(mask):
    """Percent TC(+) area among tumor pixels of a class mask."""
    pos = int((mask == int(ClassLabel.TC_POS)).sum())
    neg = int((mask == int(ClassLabel.TC_NEG)).sum())
    if pos + neg == 0:
        raise NoTumorDetected("class mask contains no tumor pixels")
    return 100.0 * pos / (pos + neg)


def save_mask_png(mask, path):
    Image.fromarray(np.asarray(mask, dtype=np.uint8), "L").save(
        path, format="PNG")


def load_mask_png(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.int16)


def _stream(cfg, tag):
    return np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, tag])


def _value_noise(rng, height, width, cells):
    """Smooth scalar field in [0,1] from a bicubic-upsampled random grid."""
    cells = max(2, int(cells))
    grid = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, height)
    xs = np.linspace(0.0, cells, width)
    coords = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=0)
    out = ndimage.map_coordinates(grid, coords, order=3, mode="reflect")
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _jittered_grid_points(rng, height, width, spacing, jitter=0.3):
    ny = max(1, int(round(height / spacing)))
    nx = max(1, int(round(width / spacing)))
    cy = (np.arange(ny) + 0.5) * (height / ny)
    cx = (np.arange(nx) + 0.5) * (width / nx)
    pts = np.stack(np.meshgrid(cx, cy), axis=-1).reshape(-1, 2)
    pts += rng.uniform(-jitter, jitter, pts.shape) * \
        np.array([width / nx, height / ny])
    return pts


def _dot_field(rng, height, width, spacing):
    """Distance to the nearest of a jittered lattice of points."""
    pts = _jittered_grid_points(rng, height, width, spacing, jitter=0.35)
    raster = np.ones((height, width), dtype=bool)
    iy = np.clip(np.round(pts[:, 1] - 0.5).astype(int), 0, height - 1)
    ix = np.clip(np.round(pts[:, 0] - 0.5).astype(int), 0, width - 1)
    raster[iy, ix] = False
    return ndimage.distance_transform_edt(raster)


def _voronoi_cells(points, height, width):
    """Bounded Voronoi polygons via mirror reflection across each edge."""
    pts = np.asarray(points, dtype=np.float64)
    mirrors = [pts * np.array([-1.0, 1.0]),
               pts * np.array([1.0, -1.0]),
               np.stack([2.0 * width - pts[:, 0], pts[:, 1]], axis=1),
               np.stack([pts[:, 0], 2.0 * height - pts[:, 1]], axis=1)]
    vor = Voronoi(np.vstack([pts] + mirrors))
    polys = []
    for i in range(pts.shape[0]):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or not region:
            raise ConfigError("unbounded interior Voronoi cell; "
                              "seed layout degenerate")
        verts = vor.vertices[region]
        center = verts.mean(axis=0)
        order = np.argsort(np.arctan2(verts[:, 1] - center[1],
                                      verts[:, 0] - center[0]))
        polys.append(verts[order])
    return polys


def _signed_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _offset_convex(poly, radius):
    """Dilate (radius > 0) or erode (< 0) a convex polygon by |radius|."""
    p = poly if _signed_area(poly) > 0 else poly[::-1]
    d = np.roll(p, -1, axis=0) - p
    lengths = np.hypot(d[:, 0], d[:, 1])
    if (lengths < 1e-9).any():
        return None
    # outward normal of each directed edge for a shoelace-positive polygon
    normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / lengths[:, None]
    anchors = p + normals * radius
    out = np.empty_like(p)
    k = p.shape[0]
    for i in range(k):
        a = anchors[i - 1]
        b = anchors[i]
        da = d[i - 1]
        db = d[i]
        denom = da[0] * db[1] - da[1] * db[0]
        if abs(denom) < 1e-12:
            return None
        t = ((b[0] - a[0]) * db[1] - (b[1] - a[1]) * db[0]) / denom
        out[i] = a + t * da
    if not np.isfinite(out).all() or _signed_area(out) <= 1.0:
        return None
    return out


def _assign_classes(rng, cell_tissue_px, mix, target_tc):
    """Greedy largest-deficit class assignment with a TC-ratio repair pass."""
    tissue_mix = mix[:int(ClassLabel.NON_TISSUE)].copy()
    total_tissue = float(sum(cell_tissue_px))
    if total_tissue <= 0 or tissue_mix.sum() <= 0:
        raise ConfigError("configuration produces zero tissue area")
    targets = tissue_mix / tissue_mix.sum() * total_tissue
    order = np.argsort(-np.asarray(cell_tissue_px))
    assigned = np.zeros(len(tissue_mix), dtype=np.float64)
    labels = np.zeros(len(cell_tissue_px), dtype=np.int16)
    for idx in order:
        deficit = targets - assigned
        c = int(np.argmax(deficit))
        labels[idx] = c
        assigned[c] += cell_tissue_px[idx]

    pos_c, neg_c = int(ClassLabel.TC_POS), int(ClassLabel.TC_NEG)

    def tc_of(lab):
        pos = sum(px for px, l in zip(cell_tissue_px, lab) if l == pos_c)
        neg = sum(px for px, l in zip(cell_tissue_px, lab) if l == neg_c)
        return 100.0 * pos / (pos + neg) if pos + neg else 0.0

    # flip whole tumor cells between TC(+) and TC(-) while that reduces
    # the gap to the requested score
    for _ in range(len(labels)):
        err = tc_of(labels) - target_tc
        best_gain, best_i = 0.0, -1
        for i, lab in enumerate(labels):
            if lab not in (pos_c, neg_c) or cell_tissue_px[i] == 0:
                continue
            trial = labels.copy()
            trial[i] = neg_c if lab == pos_c else pos_c
            gain = abs(err) - abs(tc_of(trial) - target_tc)
            if gain > best_gain + 1e-12:
                best_gain, best_i = gain, i
        if best_i < 0:
            break
        labels[best_i] = neg_c if labels[best_i] == pos_c else pos_c
    return labels


def _blend(img, where, color):
    img[where] = np.asarray(color, dtype=np.float32)


def _render_textures(cfg, class_mask, tissue):
    """Paint the stain-like texture for every class region."""
    h, w = class_mask.shape
    ts = cfg.texture_scale
    rng = _stream(cfg, 4)
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = BACKGROUND_LEVEL
    img += rng.normal(0.0, 2.0, (h, w, 1)).astype(np.float32)

    def mask_of(c):
        return (class_mask == int(c)) & tissue

    m = mask_of(ClassLabel.TC_POS)
    if m.any():
        _blend(img, m, _PALE_POS)
        rings = _dot_field(rng, h, w, 9.0 * ts)
        _blend(img, m & (np.abs(rings - 3.4 * ts) < 1.2 * ts), _BROWN_DARK)
    m = mask_of(ClassLabel.TC_NEG)
    if m.any():
        _blend(img, m, _PALE_NEG)
        nuclei = _dot_field(rng, h, w, 9.0 * ts)
        _blend(img, m & (nuclei < 2.7 * ts), _BLUE_DARK)
    m = mask_of(ClassLabel.LYMPH_POS)
    if m.any():
        _blend(img, m, _PINK_BASE)
        dots = _dot_field(rng, h, w, 5.5 * ts)
        _blend(img, m & (dots < 1.8 * ts), _BROWN_DARK)
    m = mask_of(ClassLabel.LYMPH_NEG)
    if m.any():
        _blend(img, m, _PINK_BASE)
        dots = _dot_field(rng, h, w, 5.5 * ts)
        _blend(img, m & (dots < 1.8 * ts), _BLUE_DARK)
    m = mask_of(ClassLabel.MACROPHAGE)
    if m.any():
        _blend(img, m, _PALE_POS)
        blobs = _value_noise(rng, h, w, max(3, int(h / (10 * ts))))
        _blend(img, m & (blobs > 0.55), _BROWN_MID)
    m = mask_of(ClassLabel.NECROSIS)
    if m.any():
        _blend(img, m, _NECRO_BASE)
        mottle = _value_noise(rng, h, w, max(3, int(h / (7 * ts))))
        _blend(img, m & (mottle > 0.5), _GRAY_MOTTLE)
    m = mask_of(ClassLabel.STROMA)
    if m.any():
        _blend(img, m, _PINK_BASE)
        theta = rng.uniform(0.0, math.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        warp = _value_noise(rng, h, w, max(3, int(h / (16 * ts)))) * 5.0
        phase = (xx * math.cos(theta) + yy * math.sin(theta)) \
            * (2.0 * math.pi / (6.0 * ts)) + warp
        _blend(img, m & (np.sin(phase) > 0.25), _PINK_FIBER)

    img += rng.normal(0.0, 2.5, (h, w, 1)).astype(np.float32)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_slide(cfg, slide_id=None):
    """One synthetic slide with ground truth and two rater annotations."""
    h, w = cfg.height, cfg.width
    mix = cfg.effective_mix()
    sid = slide_id or f"synth_{cfg.seed:08x}"

    # tissue blob: thresholded smooth noise at the exact background share
    noise = _value_noise(_stream(cfg, 1), h, w, max(3, int(min(h, w) / 64)))
    bg_share = mix[int(ClassLabel.NON_TISSUE)]
    tissue = noise >= np.quantile(noise, bg_share)
    if not tissue.any():
        raise ConfigError("configuration produces zero tissue area")

    # grown-region partition: every pixel joins its nearest seed point
    rng_cells = _stream(cfg, 2)
    spacing = 48.0 * math.sqrt(cfg.texture_scale)
    seeds = _jittered_grid_points(rng_cells, h, w, spacing, jitter=0.3)
    polys = _voronoi_cells(seeds, h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    centers = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)
    cell_of = cKDTree(seeds).query(centers)[1].reshape(h, w)

    counts = np.bincount(cell_of[tissue].ravel(), minlength=len(seeds))
    cell_labels = _assign_classes(_stream(cfg, 3), counts.tolist(), mix,
                                  cfg.target_tc)

    class_mask = np.full((h, w), int(ClassLabel.NON_TISSUE), dtype=np.int16)
    class_mask[tissue] = cell_labels[cell_of[tissue]]

    try:
        true_tc = tc_from_mask(class_mask)
    except NoTumorDetected as exc:
        raise ConfigError(f"infeasible configuration: {exc}") from exc

    slide = Slide(id=sid, pixels=_render_textures(cfg, class_mask, tissue))

    annotations = []
    rng_rater = _stream(cfg, 5)
    for rater in ("rater_1", "rater_2"):
        regions = []
        for i, poly in enumerate(polys):
            if counts[i] == 0:
                continue
            radius = float(rng_rater.uniform(0.5, 2.0))
            sign = 1.0 if rng_rater.random() < 0.5 else -1.0
            jittered = _offset_convex(poly, sign * radius)
            if jittered is None:
                jittered = _offset_convex(poly, 0.5 * sign * radius)
            if jittered is None:
                jittered = poly
            regions.append(Region(polygon=jittered,
                                  label=ClassLabel(int(cell_labels[i]))))
        annotations.append(AnnotationSet(slide_id=sid, rater_id=rater,
                                         regions=regions))

    rng_scores = _stream(cfg, 6)
    scores = np.clip(true_tc + rng_scores.normal(0.0, cfg.rater_noise_sd, 3),
                     0.0, 100.0)
    truth = GroundTruth(mask=class_mask, true_tc=true_tc, rater_scores=scores)
    return CohortItem(slide=slide, truth=truth,
                      annotations=tuple(annotations), config=cfg)


def generate_cohort(n, template, tc_range=(0.0, 100.0)):
    """n slides with target TC values stratified across ``tc_range``."""
    if n < 1:
        raise ConfigError(f"cohort size must be >= 1, got {n}")
    lo, hi = float(tc_range[0]), float(tc_range[1])
    if not 0.0 <= lo <= hi <= 100.0:
        raise ConfigError(f"invalid tc_range {tc_range}")
    if n == 1:
        targets = np.array([(lo + hi) / 2.0])
    else:
        targets = np.linspace(lo, hi, n)
    rng = np.random.default_rng([template.seed & 0xFFFFFFFFFFFFFFFF, 99])
    targets = targets[rng.permutation(n)]
    items = []
    for i, t in enumerate(targets):
        cfg = replace(template, seed=(template.seed * 100003 + i + 1)
                      & 0x7FFFFFFFFFFFFFFF, target_tc=float(t))
        items.append(generate_slide(cfg, slide_id=f"synth_{i:03d}"))
    table = ScoreTable(
        slide_ids=[it.slide.id for it in items],
        columns={
            "TC_1": [it.truth.rater_scores[0] for it in items],
            "TC_2": [it.truth.rater_scores[1] for it in items],
            "TC_3": [it.truth.rater_scores[2] for it in items],
            "true_tc": [it.truth.true_tc for it in items],
        })
    return items, table
