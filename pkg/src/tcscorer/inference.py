"""Whole-slide sliding-window prediction and TC scoring.

Overlapping windows vote a class distribution into every pixel of their
footprint; votes are averaged, tissue left uncovered at the margins
inherits the nearest covered pixel's distribution, and everything
outside the tissue mask is pinned to NON_TISSUE.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .datapipe import grid_positions
from .errors import NoTumorDetected, ShapeError
from .models import N_CLASSES, ClassLabel


@dataclass
class ProbabilityMap:
    """Per-pixel class posteriors with their accumulation bookkeeping."""

    probs: np.ndarray        # (H, W, class_count) float32, normalized
    counts: np.ndarray       # (H, W) votes per pixel before normalization
    tissue: np.ndarray       # bool mask the prediction was restricted to
    empty: bool = False      # no window qualified (e.g. no tissue)

    @property
    def height(self):
        return self.probs.shape[0]

    @property
    def width(self):
        return self.probs.shape[1]


@dataclass(frozen=True)
class TCScore:
    """Eq.-style pixel-ratio TC score in percent."""

    value: float
    tc_pos_pixels: int
    tc_neg_pixels: int


def predict_slide(slide, tissue, classify, window, stride, batch_size=256):
    """Sliding-window class posteriors over one slide.

    ``classify`` maps a (N, window, window, 3) uint8 patch stack to
    (N, class_count) probability rows. Windows on the anchor-zero grid
    qualify when at least half their pixels are tissue.
    """
    h, w = slide.height, slide.width
    if tissue.mask.shape != (h, w):
        raise ShapeError(f"tissue mask {tissue.mask.shape} does not match "
                         f"slide {(h, w)}")
    probs = np.zeros((h, w, N_CLASSES), dtype=np.float32)
    counts = np.zeros((h, w), dtype=np.int32)

    ys = grid_positions(h, window, stride)
    xs = grid_positions(w, window, stride)
    ii = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(tissue.mask, axis=0), axis=1, out=ii[1:, 1:])
    need = 0.5 * window * window
    origins = [(y, x) for y in ys for x in xs
               if (ii[y + window, x + window] - ii[y, x + window]
                   - ii[y + window, x] + ii[y, x]) >= need]

    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        stack = np.stack([slide.pixels[y:y + window, x:x + window]
                          for y, x in chunk])
        dists = np.asarray(classify(stack), dtype=np.float32)
        if dists.shape != (len(chunk), N_CLASSES):
            raise ShapeError(f"classifier returned {dists.shape}, expected "
                             f"{(len(chunk), N_CLASSES)}")
        for (y, x), dist in zip(chunk, dists):
            probs[y:y + window, x:x + window] += dist
            counts[y:y + window, x:x + window] += 1

    covered = counts > 0
    if covered.any():
        probs[covered] /= counts[covered, None]
        # margin fill: uncovered tissue inherits the nearest covered
        # pixel's distribution
        uncovered_tissue = tissue.mask & ~covered
        if uncovered_tissue.any():
            idx = ndimage.distance_transform_edt(
                ~covered, return_distances=False, return_indices=True)
            src_y = idx[0][uncovered_tissue]
            src_x = idx[1][uncovered_tissue]
            probs[uncovered_tissue] = probs[src_y, src_x]
        empty = False
    else:
        empty = True

    outside = ~tissue.mask
    probs[outside] = 0.0
    probs[outside, int(ClassLabel.NON_TISSUE)] = 1.0
    if empty:
        # nothing was classified: mark all tissue unknown-as-non-tissue
        probs[tissue.mask] = 0.0
        probs[tissue.mask, int(ClassLabel.NON_TISSUE)] = 1.0
    return ProbabilityMap(probs=probs, counts=counts, tissue=tissue.mask,
                          empty=empty)


def class_map(prob_map):
    """Per-pixel argmax labels; ties break to the lowest class index."""
    return np.argmax(prob_map.probs, axis=2).astype(np.int16)


def tc_score(labels):
    """Percent of tumor pixels that are TC(+)."""
    pos = int((labels == int(ClassLabel.TC_POS)).sum())
    neg = int((labels == int(ClassLabel.TC_NEG)).sum())
    if pos + neg == 0:
        raise NoTumorDetected("no TC(+) or TC(-) pixels in the class map")
    return TCScore(value=100.0 * pos / (pos + neg),
                   tc_pos_pixels=pos, tc_neg_pixels=neg)


def overlay_png(prob_map, path):
    """RGB probability overlay: red TC(+), green TC(-), blue everything else."""
    p = prob_map.probs
    other = p.sum(axis=2) - p[:, :, int(ClassLabel.TC_POS)] \
        - p[:, :, int(ClassLabel.TC_NEG)]
    rgb = np.stack([p[:, :, int(ClassLabel.TC_POS)],
                    p[:, :, int(ClassLabel.TC_NEG)],
                    np.clip(other, 0.0, 1.0)], axis=2)
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, "RGB").save(path, format="PNG")


def write_scores_csv(rows, path):
    """rows: iterable of (slide_id, TCScore or None for no-tumor slides)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "score", "pos_px", "neg_px"])
        for slide_id, score in rows:
            if score is None:
                writer.writerow([slide_id, "", 0, 0])
            else:
                writer.writerow([slide_id, repr(score.value),
                                 score.tc_pos_pixels, score.tc_neg_pixels])


def read_scores_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["slide_id", "score", "pos_px", "neg_px"]:
        raise ShapeError(f"{path}: not a scores CSV")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        score = None
        if row[1] != "":
            score = TCScore(value=float(row[1]), tc_pos_pixels=int(row[2]),
                            tc_neg_pixels=int(row[3]))
        out.append((row[0], score))
    return out
