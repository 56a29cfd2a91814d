"""Command-line pipeline: synthesize cohorts, train, predict, score and
run the agreement analyses.

Heavy modules (numpy and everything built on it) are imported inside the
command handlers so that --threads can pin the BLAS thread pools before
the first numpy import; --threads 1 makes every command bitwise
reproducible for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, asdict

from .errors import ConfigError

LOG = logging.getLogger("tcscorer")

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

ARCH_CHOICES = ("fs-vgg", "ae-ssl", "acgan")

# desk-scale default iteration budgets when the config does not pin one
DEFAULT_ITERATIONS = {"fs-vgg": 5000, "ae-ssl": 5000, "acgan": 10000}

DEFAULT_CURVE_THRESHOLDS = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0,
                            15.0, 20.0, 30.0, 50.0, 100.0)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class CohortSpec:
    """Slide counts for the synthetic protocol: train/val/unseen."""

    n_slides: int = 30
    train_slides: int = 15
    val_slides: int = 5
    tc_range: tuple = (5.0, 95.0)

    def __post_init__(self):
        if self.n_slides < 1:
            raise ConfigError(f"n_slides must be >= 1, got {self.n_slides}")
        if self.train_slides < 1 or self.val_slides < 1:
            raise ConfigError("train_slides and val_slides must be >= 1")
        if self.train_slides + self.val_slides > self.n_slides:
            raise ConfigError(
                f"train+val slides ({self.train_slides}+{self.val_slides}) "
                f"exceed the cohort size {self.n_slides}")
        self.tc_range = (float(self.tc_range[0]), float(self.tc_range[1]))


@dataclass
class DataSpec:
    """Patch-extraction knobs; strides are at the 128 px reference scale."""

    labeled_stride: int = 20
    unlabeled_stride: int = 60
    infer_stride: int = 32
    purity: float = 1.0
    min_tissue: float = 0.5
    label_fraction: float = 1.0
    accept_single_rater: bool = False
    augment: bool = False

    def __post_init__(self):
        for name in ("labeled_stride", "unlabeled_stride", "infer_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction must be in (0, 1], got "
                              f"{self.label_fraction}")


@dataclass
class RunConfig:
    """Typed view of the JSON run configuration."""

    arch: object
    train: object
    synth: object
    cohort: CohortSpec
    data: DataSpec
    explicit: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "cohort": asdict(self.cohort),
            "data": asdict(self.data),
        }

    def iterations_for(self, arch_name):
        if "iterations" in self.explicit.get("train", {}):
            return self.train.iterations
        return DEFAULT_ITERATIONS[arch_name]


def _section(raw, name, factory):
    doc = raw.get(name, {})
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    try:
        return factory(**doc)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from exc


def load_run_config(path=None, seed=None):
    """Parse and validate the JSON config; unknown keys are rejected."""
    from . import models, synthslide, training

    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
    known = {"arch", "train", "synth", "cohort", "data"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; "
                          f"expected a subset of {sorted(known)}")
    synth_doc = dict(raw.get("synth", {}))
    if "class_mix" in synth_doc and synth_doc["class_mix"] is not None:
        synth_doc["class_mix"] = tuple(synth_doc["class_mix"])
    raw_for_synth = dict(raw)
    raw_for_synth["synth"] = synth_doc
    cfg = RunConfig(
        arch=_section(raw, "arch", models.ArchConfig),
        train=_section(raw, "train", training.TrainConfig),
        synth=_section(raw_for_synth, "synth", synthslide.SynthConfig),
        cohort=_section(raw, "cohort", CohortSpec),
        data=_section(raw, "data", DataSpec),
        explicit=raw,
    )
    if seed is not None:
        import dataclasses

        cfg.train.seed = int(seed)
        cfg.synth = dataclasses.replace(cfg.synth, seed=int(seed))
    return cfg


# ---------------------------------------------------------------------------
# output plumbing


@contextlib.contextmanager
def _atomic(path):
    """Write to a sibling temp file, then rename into place."""
    tmp = f"{path}.tmp"
    yield tmp
    os.replace(tmp, path)


def _write_json(path, doc):
    with _atomic(path) as tmp:
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _echo_config(out_dir, command, flags, cfg=None, extra=None):
    doc = {"command": command, "flags": flags}
    if cfg is not None:
        doc["config"] = cfg.to_dict()
    if extra:
        doc.update(extra)
    _write_json(os.path.join(out_dir, "config.json"), doc)


def _out_dir(args):
    out = args.out
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# cohort IO and patch pools


class CohortOnDisk:
    """Reader for the directory layout cmd_synth writes."""

    def __init__(self, root):
        from .stats import ScoreTable

        self.root = root
        scores = os.path.join(root, "scores.csv")
        if not os.path.exists(scores):
            raise ConfigError(f"{root}: no scores.csv; not a cohort "
                              f"directory")
        self.table = ScoreTable.load_csv(scores)
        self.ids = list(self.table.slide_ids)

    def slide(self, sid):
        from .datapipe import Slide

        return Slide.load_png(os.path.join(self.root, "slides",
                                           f"{sid}.png"), slide_id=sid)

    def mask(self, sid):
        from . import synthslide

        return synthslide.load_mask_png(
            os.path.join(self.root, "masks", f"{sid}_mask.png"))

    def annotations(self, sid):
        from .datapipe import AnnotationSet

        return tuple(
            AnnotationSet.load_json(os.path.join(
                self.root, "annotations", f"{sid}_{rater}.json"))
            for rater in ("rater_1", "rater_2"))

    def split(self, cohort_spec):
        n_train = cohort_spec.train_slides
        n_val = cohort_spec.val_slides
        return (self.ids[:n_train], self.ids[n_train:n_train + n_val],
                self.ids[n_train + n_val:])


def _slide_patches(cohort, sid, cfg):
    """Labeled and unlabeled grid patches for one slide."""
    from . import datapipe as dp

    slide = cohort.slide(sid)
    tissue = dp.tissue_mask(slide)
    a, b = cohort.annotations(sid)
    labels = dp.apply_non_tissue(
        dp.consolidate_annotations(
            a, b, slide.height, slide.width,
            accept_single_rater=cfg.data.accept_single_rater),
        tissue)
    patch = cfg.arch.patch_size
    labeled = dp.extract_labeled_patches(
        slide, labels, patch,
        stride=dp.scale_stride(cfg.data.labeled_stride, patch_size=patch),
        purity=cfg.data.purity)
    unlabeled = dp.extract_unlabeled_patches(
        slide, tissue, patch,
        stride=dp.scale_stride(cfg.data.unlabeled_stride, patch_size=patch),
        min_tissue=cfg.data.min_tissue)
    return labeled, unlabeled


def _subsample_labels(patches, fraction, seed):
    """Keep a per-class fraction of the labels (at least one per class)."""
    import numpy as np

    if fraction >= 1.0:
        return patches
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 7])
    keep = []
    for cls in np.unique(patches.labels):
        idx = np.nonzero(patches.labels == cls)[0]
        k = max(1, int(round(fraction * idx.size)))
        keep.append(rng.choice(idx, size=k, replace=False))
    order = np.sort(np.concatenate(keep))
    return patches.take(order)


def build_pools(cohort, cfg, train_ids, val_ids):
    """Training pools plus the validation set used for model selection."""
    from .datapipe import PatchSet, augment_rot90

    labeled_parts, unlabeled_parts, val_parts = [], [], []
    for sid in train_ids:
        lab, unl = _slide_patches(cohort, sid, cfg)
        labeled_parts.append(lab)
        unlabeled_parts.append(unl)
        LOG.info("pool %s: %d labeled, %d unlabeled", sid, len(lab),
                 len(unl))
    for sid in val_ids:
        lab, _ = _slide_patches(cohort, sid, cfg)
        val_parts.append(lab)
    labeled = PatchSet.merge(labeled_parts)
    unlabeled = PatchSet.merge(unlabeled_parts)
    val = PatchSet.merge(val_parts)
    labeled = _subsample_labels(labeled, cfg.data.label_fraction,
                                cfg.train.seed)
    if cfg.data.augment:
        labeled = augment_rot90(labeled)
    LOG.info("pools: %d labeled / %d unlabeled train patches, %d val",
             len(labeled), len(unlabeled), len(val))
    return labeled, unlabeled, val


# ---------------------------------------------------------------------------
# training / prediction plumbing shared by cmd_train and cmd_compare


def _train_arch(arch_name, cfg, labeled, unlabeled, val, out_dir):
    """Run one architecture's loop; write checkpoint, trace and samples."""
    import dataclasses

    from . import models, training

    iterations = cfg.iterations_for(arch_name)
    if arch_name == "fs-vgg":
        tcfg = dataclasses.replace(
            cfg.train,
            labeled_batch=cfg.train.labeled_batch + cfg.train.unlabeled_batch,
            unlabeled_batch=0, iterations=iterations)
        result = training.train_fs(models.FsVgg(cfg.arch), labeled, val,
                                   tcfg)
        kind = "fs_vgg"
    elif arch_name == "ae-ssl":
        tcfg = dataclasses.replace(cfg.train, iterations=iterations)
        result = training.train_ae_ssl(models.Autoencoder(cfg.arch), labeled,
                                       unlabeled, val, tcfg)
        kind = "autoencoder"
    elif arch_name == "acgan":
        tcfg = dataclasses.replace(cfg.train, iterations=iterations)
        sample_dir = os.path.join(out_dir, "samples")
        result = training.train_acgan(
            models.Generator(cfg.arch), models.Discriminator(cfg.arch),
            labeled, unlabeled, val, tcfg, sample_dir=sample_dir)
        kind = "discriminator"
    else:
        raise ConfigError(f"unknown architecture {arch_name!r}")

    with _atomic(os.path.join(out_dir, "trace.csv")) as tmp:
        training.write_trace_csv(result.trace, tmp)
    training.save_trained(
        os.path.join(out_dir, "model.ckpt"), result.best.store, cfg.arch,
        kind, result.best.iteration, result.best.test_accuracy)
    if result.generator is not None:
        training.save_trained(
            os.path.join(out_dir, "generator.ckpt"),
            result.generator.store, cfg.arch, "generator",
            result.generator.iteration, None)
    LOG.info("%s: best val accuracy %.4f at iteration %d", arch_name,
             result.best.test_accuracy, result.best.iteration)
    return result, tcfg


def _predict_scores(cohort, slide_ids, loaded_or_pair, cfg):
    """TC score per slide from sliding-window prediction; NaN if no tumor."""
    import math

    from . import datapipe as dp, inference
    from .errors import NoTumorDetected

    model, store = loaded_or_pair
    classify = model.patch_classifier(store)
    patch = cfg.arch.patch_size
    stride = dp.scale_stride(cfg.data.infer_stride, patch_size=patch)
    out = []
    for sid in slide_ids:
        slide = cohort.slide(sid)
        tissue = dp.tissue_mask(slide)
        pm = inference.predict_slide(slide, tissue, classify, patch, stride)
        labels = inference.class_map(pm)
        try:
            score = inference.tc_score(labels)
            out.append(score.value)
        except NoTumorDetected:
            LOG.warning("%s: no tumor pixels predicted; score undefined",
                        sid)
            out.append(math.nan)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from . import synthslide

    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    for sub in ("slides", "masks", "annotations"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    items, table = synthslide.generate_cohort(
        cfg.cohort.n_slides, cfg.synth, cfg.cohort.tc_range)
    for item in items:
        sid = item.slide.id
        with _atomic(os.path.join(out, "slides", f"{sid}.png")) as tmp:
            item.slide.save_png(tmp)
        with _atomic(os.path.join(out, "masks", f"{sid}_mask.png")) as tmp:
            synthslide.save_mask_png(item.truth.mask, tmp)
        for ann in item.annotations:
            name = f"{sid}_{ann.rater_id}.json"
            with _atomic(os.path.join(out, "annotations", name)) as tmp:
                ann.save_json(tmp)
        LOG.info("synthesized %s: true TC %.2f", sid, item.truth.true_tc)
    with _atomic(os.path.join(out, "scores.csv")) as tmp:
        table.save_csv(tmp)
    _echo_config(out, "synth", _flags(args), cfg)
    print(f"wrote {len(items)} slides to {out}")
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    cohort = CohortOnDisk(args.data)
    train_ids, val_ids, unseen = cohort.split(cfg.cohort)
    labeled, unlabeled, val = build_pools(cohort, cfg, train_ids, val_ids)
    result, tcfg = _train_arch(args.arch, cfg, labeled, unlabeled, val, out)
    _echo_config(out, "train", _flags(args), cfg, extra={
        "resolved_train": tcfg.to_dict(),
        "split": {"train": train_ids, "val": val_ids, "unseen": unseen},
    })
    print(f"best val accuracy {result.best.test_accuracy:.4f} at iteration "
          f"{result.best.iteration}; checkpoint in {out}")
    return 0


def cmd_predict(args):
    from . import datapipe as dp, inference, synthslide, training
    from PIL import Image
    import numpy as np

    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    loaded = training.load_trained(args.checkpoint)
    if loaded.kind == "generator":
        raise ConfigError("generator checkpoints cannot classify patches")
    slide = dp.Slide.load_png(args.slide)
    tissue = dp.tissue_mask(slide)
    classify = loaded.model.patch_classifier(loaded.store)
    patch = loaded.arch.patch_size
    stride = dp.scale_stride(cfg.data.infer_stride, patch_size=patch)
    pm = inference.predict_slide(slide, tissue, classify, patch, stride)
    labels = inference.class_map(pm)
    sid = slide.id
    with _atomic(os.path.join(out, f"{sid}_tissue.png")) as tmp:
        Image.fromarray(tissue.mask.astype(np.uint8) * 255, "L").save(
            tmp, format="PNG")
    with _atomic(os.path.join(out, f"{sid}_overlay.png")) as tmp:
        inference.overlay_png(pm, tmp)
    with _atomic(os.path.join(out, f"{sid}_classmap.png")) as tmp:
        synthslide.save_mask_png(labels, tmp)
    _echo_config(out, "predict", _flags(args), cfg, extra={
        "checkpoint": {"kind": loaded.kind, "iteration": loaded.iteration,
                       "test_accuracy": loaded.test_accuracy},
        "window": patch, "stride": stride, "empty": bool(pm.empty),
    })
    print(f"wrote overlay and class map for {sid} to {out}")
    return 0


def _map_slide_id(path):
    stem = os.path.basename(path).rsplit(".", 1)[0]
    for suffix in ("_classmap", "_mask"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def cmd_score(args):
    from . import inference, synthslide
    from .errors import NoTumorDetected

    out = _out_dir(args)
    rows = []
    for path in args.maps:
        labels = synthslide.load_mask_png(path)
        sid = _map_slide_id(path)
        try:
            rows.append((sid, inference.tc_score(labels)))
        except NoTumorDetected:
            LOG.warning("%s: no tumor pixels; score undefined", sid)
            rows.append((sid, None))
    with _atomic(os.path.join(out, "scores.csv")) as tmp:
        inference.write_scores_csv(rows, tmp)
    _echo_config(out, "score", _flags(args))
    print(f"scored {len(rows)} class maps into {out}/scores.csv")
    return 0


def cmd_concord(args):
    from . import stats
    from .errors import UndefinedStatisticError

    out = _out_dir(args)
    table = stats.ScoreTable.load_csv(args.scores)
    reference = table.column(args.reference)
    candidates = [c for c in table.columns if c != args.reference]
    report = {}
    csv_rows = []
    for name in candidates:
        col = table.column(name)
        cells = {}
        try:
            conc = stats.concordance(col, reference)
            cells.update(lcc=conc.lcc, pcc=conc.pcc, mae=conc.mae, n=conc.n)
        except UndefinedStatisticError as exc:
            LOG.warning("concordance %s vs %s undefined: %s", name,
                        args.reference, exc)
        try:
            agree = stats.status_agreement(
                col, reference, cutoff=args.cutoff,
                reference_name=args.reference)
            cells.update(opa=agree.opa, npa=agree.npa, ppa=agree.ppa)
        except UndefinedStatisticError as exc:
            LOG.warning("agreement %s vs %s undefined: %s", name,
                        args.reference, exc)
        report[name] = cells
        csv_rows.append([name] + [cells.get(k) for k in
                                  ("lcc", "pcc", "mae", "opa", "npa", "ppa")])

    matrix = {}
    for a in table.columns:
        matrix[a] = {}
        for b in table.columns:
            if a == b:
                matrix[a][b] = 1.0
                continue
            try:
                matrix[a][b] = stats.lin_ccc(table.column(a),
                                             table.column(b))
            except UndefinedStatisticError:
                matrix[a][b] = None

    loo = None
    if len(table.columns) >= 4:
        entries = stats.leave_one_out_analysis(
            {k: table.column(k) for k in table.columns}, cutoff=args.cutoff)
        loo = [{
            "column": e.column,
            "lcc": e.concordance.lcc, "pcc": e.concordance.pcc,
            "mae": e.concordance.mae,
            **({"opa": e.agreement.opa, "npa": e.agreement.npa,
                "ppa": e.agreement.ppa} if e.agreement else {}),
        } for e in entries]

    _write_json(os.path.join(out, "concord.json"), {
        "reference": args.reference, "cutoff": args.cutoff,
        "candidates": report, "lcc_matrix": matrix, "leave_one_out": loo,
    })
    import csv as _csv

    with _atomic(os.path.join(out, "concord.csv")) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["candidate", "lcc", "pcc", "mae", "opa", "npa",
                        "ppa"])
            for row in csv_rows:
                w.writerow([row[0]] + ["" if v is None else repr(float(v))
                                       for v in row[1:]])
    _echo_config(out, "concord", _flags(args))
    print(f"wrote concordance report for {len(candidates)} candidates "
          f"to {out}")
    return 0


def cmd_curves(args):
    from . import stats

    out = _out_dir(args)
    table = stats.ScoreTable.load_csv(args.scores)
    raters = [r.strip() for r in args.raters.split(",") if r.strip()]
    rater_cols = [table.column(r) for r in raters]
    candidate = table.column(args.candidate)
    delta = stats.rater_variability(rater_cols)
    reference = stats.median_consolidate(rater_cols)
    thresholds = ([float(t) for t in args.thresholds.split(",")]
                  if args.thresholds else list(DEFAULT_CURVE_THRESHOLDS))
    points = stats.filtered_concordance_curve(
        candidate, reference, delta, thresholds, cutoff=args.cutoff)
    with _atomic(os.path.join(out, "curves.csv")) as tmp:
        stats.curve_rows_to_csv(points, tmp)
    _echo_config(out, "curves", _flags(args))
    print(f"wrote {len(points)} curve points to {out}/curves.csv")
    return 0


def cmd_compare(args):
    import csv as _csv

    import numpy as np

    from . import stats, training
    from .errors import UndefinedStatisticError

    cfg = load_run_config(args.config, args.seed)
    if args.label_fraction is not None:
        cfg.data.label_fraction = float(args.label_fraction)
    elif "label_fraction" not in cfg.explicit.get("data", {}):
        cfg.data.label_fraction = 0.1
    out = _out_dir(args)
    cohort = CohortOnDisk(args.data)
    train_ids, val_ids, unseen = cohort.split(cfg.cohort)
    if not unseen:
        raise ConfigError("comparison needs held-out slides; the cohort "
                          "is fully consumed by train+val")
    labeled, unlabeled, val = build_pools(cohort, cfg, train_ids, val_ids)

    true_tc = [float(cohort.table.column("true_tc")[cohort.ids.index(s)])
               for s in unseen]
    score_columns = {}
    metric_rows = []
    for arch_name in ARCH_CHOICES:
        sub = os.path.join(out, arch_name.replace("-", "_"))
        os.makedirs(sub, exist_ok=True)
        result, tcfg = _train_arch(arch_name, cfg, labeled, unlabeled, val,
                                   sub)
        loaded = training.load_trained(os.path.join(sub, "model.ckpt"))
        scores = _predict_scores(cohort, unseen, (loaded.model,
                                                  loaded.store), cfg)
        score_columns[arch_name] = scores
        vals = np.asarray(scores, dtype=np.float64)
        keep = np.isfinite(vals)
        cells = {}
        if keep.sum() >= 2:
            try:
                ref = np.asarray(true_tc)[keep]
                conc = stats.concordance(vals[keep], ref)
                cells = {"lcc": conc.lcc, "pcc": conc.pcc, "mae": conc.mae}
            except UndefinedStatisticError as exc:
                LOG.warning("%s: concordance undefined: %s", arch_name, exc)
        metric_rows.append((arch_name, cells))
        LOG.info("%s: %s", arch_name,
                 {k: round(v, 4) for k, v in cells.items()})

    with _atomic(os.path.join(out, "compare.csv")) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["arch", "lcc", "pcc", "mae"])
            for arch_name, cells in metric_rows:
                w.writerow([arch_name] +
                           ["" if cells.get(k) is None
                            else repr(float(cells[k]))
                            for k in ("lcc", "pcc", "mae")])
    with _atomic(os.path.join(out, "compare_scores.csv")) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["slide_id", "true_tc", *ARCH_CHOICES])
            for i, sid in enumerate(unseen):
                w.writerow([sid, repr(true_tc[i])] +
                           [repr(float(score_columns[a][i]))
                            for a in ARCH_CHOICES])
    ordering = sorted(
        (r for r in metric_rows if "lcc" in r[1]),
        key=lambda r: r[1]["lcc"], reverse=True)
    order_names = [r[0] for r in ordering]
    _echo_config(out, "compare", _flags(args), cfg, extra={
        "split": {"train": train_ids, "val": val_ids, "unseen": unseen},
        "ordering_by_lcc": order_names,
    })
    print(f"architecture ordering by Lcc: {', '.join(order_names)}")
    print(f"wrote comparison data to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _flags(args):
    doc = {}
    for key, value in vars(args).items():
        if key == "func" or value is None:
            continue
        if isinstance(value, (list, tuple)):
            doc[key] = [str(v) for v in value]
        else:
            doc[key] = value if isinstance(value, (int, float, bool)) \
                else str(value)
    return doc


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tcscorer",
        description="Synthetic-slide TC scoring pipeline: cohort synthesis, "
                    "semi-supervised training, sliding-window inference and "
                    "agreement statistics.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads (1 = bitwise "
                             "deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", default=None,
                           help="JSON run configuration")
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seeds")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                       help="cap BLAS/OpenMP threads (1 = bitwise "
                            "deterministic)")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one architecture on a cohort")
    common(p)
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--arch", required=True, choices=ARCH_CHOICES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sliding-window prediction for one "
                                       "slide")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide", required=True, help="slide PNG")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("score", help="TC scores from class-map PNGs")
    common(p, config=False)
    p.add_argument("maps", nargs="+", help="class-map or ground-truth mask "
                                           "PNGs")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("concord", help="concordance and agreement vs a "
                                       "reference column")
    common(p, config=False)
    p.add_argument("--scores", required=True, help="score table CSV")
    p.add_argument("--reference", required=True, help="reference column")
    p.add_argument("--cutoff", type=float, default=25.0)
    p.set_defaults(func=cmd_concord)

    p = sub.add_parser("curves", help="variability-filtered concordance "
                                      "curves")
    common(p, config=False)
    p.add_argument("--scores", required=True, help="score table CSV")
    p.add_argument("--candidate", default="TC_cnn")
    p.add_argument("--raters", default="TC_1,TC_2,TC_3",
                   help="comma-separated rater columns")
    p.add_argument("--thresholds", default=None,
                   help="comma-separated variability thresholds")
    p.add_argument("--cutoff", type=float, default=25.0)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("compare", help="train all three architectures on "
                                       "identical patches and score the "
                                       "held-out slides")
    common(p)
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--label-fraction", type=float, default=None,
                   help="fraction of labeled patches retained "
                        "(default 0.1)")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in THREAD_ENV_VARS:
            os.environ[var] = str(args.threads)
    level = os.environ.get("TC_SCORER_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FloatingPointError, OSError,
            KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
