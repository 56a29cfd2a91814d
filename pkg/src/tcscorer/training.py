"""Training loops: fully-supervised, autoencoder semi-supervised, and the
adversarial alternating scheme, with accuracy-based model selection.

All randomness comes from named streams derived from the config seed
(init / labeled sampling / unlabeled sampling / noise / fake classes /
preview), so two runs with the same config produce bitwise-identical
traces and checkpoints, and loops that share a stream draw identical
batches regardless of what the other streams are used for.
"""

from __future__ import annotations

import contextlib
import csv
import math
import os
import warnings
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from PIL import Image

from . import engine as E
from .errors import (
    CheckpointFormatError,
    ConfigError,
    NonFiniteError,
    TrainingDiverged,
)
from .models import (
    ArchConfig,
    Autoencoder,
    Discriminator,
    FsVgg,
    Generator,
    N_CLASSES,
    images_to_input,
    one_hot,
    output_to_images,
)

_MASK64 = 0xFFFFFFFFFFFFFFFF

TRACE_FIELDS = ("iteration", "L_S", "L_C", "recon", "d_objective",
                "g_objective", "test_accuracy")


@dataclass
class TrainConfig:
    """Hyperparameters shared by all three loops."""

    labeled_batch: int = 32
    unlabeled_batch: int = 32
    iterations: int = 10000
    eval_every: int = 500
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999

    def __post_init__(self):
        if self.labeled_batch < 1:
            raise ConfigError(f"labeled_batch must be positive, got "
                              f"{self.labeled_batch}")
        if self.unlabeled_batch < 0:
            raise ConfigError(f"unlabeled_batch must be >= 0, got "
                              f"{self.unlabeled_batch}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got "
                              f"{self.iterations}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be positive, got "
                              f"{self.eval_every}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossBundle:
    """One trace row; fields not produced by a loop stay None."""

    iteration: int
    l_s: Optional[float] = None
    l_c: Optional[float] = None
    recon: Optional[float] = None
    d_objective: Optional[float] = None
    g_objective: Optional[float] = None
    test_accuracy: Optional[float] = None


@dataclass
class Checkpoint:
    """Parameter snapshot plus the evaluation that selected it."""

    store: E.ParamStore
    iteration: int
    test_accuracy: Optional[float]


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    trace: list = field(default_factory=list)
    batches: list = field(default_factory=list)   # (it, n_lab, n_unl, n_fake)
    generator: Optional[Checkpoint] = None


class _Streams:
    """Independent per-purpose generators spawned from one seed."""

    def __init__(self, seed):
        base = int(seed) & _MASK64
        self.init = np.random.default_rng([base, 0])
        self.labeled = np.random.default_rng([base, 1])
        self.unlabeled = np.random.default_rng([base, 2])
        self.noise = np.random.default_rng([base, 3])
        self.classes = np.random.default_rng([base, 4])
        self.preview = np.random.default_rng([base, 5])


def _require_labeled(patches, name):
    if len(patches) == 0:
        raise ConfigError(f"{name} patch set is empty")
    if patches.labels is None:
        raise ConfigError(f"{name} patch set has no labels")


def _require_unlabeled(patches):
    if len(patches) == 0:
        raise ConfigError("unlabeled patch set is empty")


def evaluate_accuracy(classify, patches, batch_size=256):
    """Fraction of patches whose argmax class matches the label."""
    n = len(patches.slide_ids)
    if n == 0:
        raise ConfigError("test patch set is empty")
    hits = 0
    for start in range(0, n, batch_size):
        probs = classify(patches.pixels[start:start + batch_size])
        pred = np.argmax(probs, axis=1)
        hits += int((pred == patches.labels[start:start + batch_size]).sum())
    return hits / n


def _finite(iteration, **values):
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDiverged(
                iteration, f"{name} became non-finite ({v}) at iteration "
                f"{iteration}")


class _Selector:
    """Argmax-accuracy tracking; ties keep the earliest evaluation."""

    def __init__(self):
        self.best = None

    def observe(self, store, iteration, accuracy):
        if self.best is None or accuracy > self.best.test_accuracy:
            self.best = Checkpoint(store.copy(), iteration, accuracy)


@contextlib.contextmanager
def _diverges_at(iteration):
    """Surface mid-iteration non-finite values as a divergence abort."""
    try:
        yield
    except NonFiniteError as exc:
        raise TrainingDiverged(
            iteration, f"non-finite values at iteration {iteration}: {exc}"
        ) from exc


def train_fs(model, labeled, test, cfg):
    """Cross-entropy over labeled batches; best-accuracy checkpoint wins."""
    _require_labeled(labeled, "labeled")
    _require_labeled(test, "test")
    if cfg.unlabeled_batch != 0:
        raise ConfigError("fully-supervised mode requires unlabeled_batch=0")
    present = np.unique(labeled.labels)
    if len(present) < N_CLASSES:
        warnings.warn(f"labeled set covers only {len(present)} of "
                      f"{N_CLASSES} classes", stacklevel=2)

    streams = _Streams(cfg.seed)
    store = model.init_params(streams.init)
    classify = model.patch_classifier(store)
    selector = _Selector()
    trace, batches = [], []
    n = len(labeled.slide_ids)

    acc0 = evaluate_accuracy(classify, test)
    trace.append(LossBundle(iteration=0, test_accuracy=acc0))
    selector.observe(store, 0, acc0)

    for it in range(1, cfg.iterations + 1):
        idx = streams.labeled.integers(0, n, cfg.labeled_batch)
        x = images_to_input(labeled.pixels[idx])
        with _diverges_at(it):
            loss = E.categorical_cross_entropy(
                model.classify_logits(store, x, train=True),
                labeled.labels[idx])
            value = float(loss.data)
            _finite(it, loss=value)
            loss.backward()
        E.adam_step(store, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

        row = LossBundle(iteration=it, l_c=value, d_objective=value)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            row.test_accuracy = evaluate_accuracy(classify, test)
            selector.observe(store, it, row.test_accuracy)
        trace.append(row)
        batches.append((it, cfg.labeled_batch, 0, 0))

    final = Checkpoint(store.copy(), cfg.iterations, trace[-1].test_accuracy)
    return TrainResult(best=selector.best, final=final, trace=trace,
                       batches=batches)


def train_ae_ssl(model, labeled, unlabeled, test, cfg, recon_weight=1.0):
    """Classification loss on a labeled batch plus weighted reconstruction
    loss on the labeled+unlabeled batch.

    The classification pass runs on the labeled batch alone so that
    recon_weight=0 optimizes exactly the fully-supervised objective on
    the same batch schedule.
    """
    _require_labeled(labeled, "labeled")
    _require_unlabeled(unlabeled)
    _require_labeled(test, "test")
    if cfg.unlabeled_batch < 1:
        raise ConfigError("semi-supervised mode requires unlabeled_batch>=1")

    streams = _Streams(cfg.seed)
    store = model.init_params(streams.init)
    encoder = model.classifier_view()
    classify = model.patch_classifier(store)
    selector = _Selector()
    trace, batches = [], []
    n_lab = len(labeled.slide_ids)
    n_unl = len(unlabeled.slide_ids)

    acc0 = evaluate_accuracy(classify, test)
    trace.append(LossBundle(iteration=0, test_accuracy=acc0))
    selector.observe(store, 0, acc0)

    for it in range(1, cfg.iterations + 1):
        idx_l = streams.labeled.integers(0, n_lab, cfg.labeled_batch)
        idx_u = streams.unlabeled.integers(0, n_unl, cfg.unlabeled_batch)
        x_lab = images_to_input(labeled.pixels[idx_l])
        x_full = images_to_input(
            np.concatenate([labeled.pixels[idx_l], unlabeled.pixels[idx_u]]))
        with _diverges_at(it):
            ce = E.categorical_cross_entropy(
                model.classify_logits(store, x_lab, train=True),
                labeled.labels[idx_l])
            recon = model.decode(
                store, encoder.encode(store, x_full, train=True), train=True)
            mse = E.mean_squared_error(recon, x_full)
            loss = E.add(ce, E.mul(mse, recon_weight))
            ce_v, mse_v = float(ce.data), float(mse.data)
            _finite(it, classification=ce_v, reconstruction=mse_v)
            loss.backward()
        E.adam_step(store, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

        row = LossBundle(iteration=it, l_c=ce_v, recon=mse_v,
                         d_objective=float(loss.data))
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            row.test_accuracy = evaluate_accuracy(classify, test)
            selector.observe(store, it, row.test_accuracy)
        trace.append(row)
        batches.append((it, cfg.labeled_batch, cfg.unlabeled_batch, 0))

    final = Checkpoint(store.copy(), cfg.iterations, trace[-1].test_accuracy)
    return TrainResult(best=selector.best, final=final, trace=trace,
                       batches=batches)


def train_acgan(gen, dis, labeled, unlabeled, test, cfg,
                update_generator=True, sample_dir=None):
    """Alternating updates: one discriminator step on reals+fakes, then one
    generator step on fresh fakes against the frozen discriminator.

    The discriminator minimizes source cross-entropy over the whole batch
    plus class cross-entropy on labeled reals and all fakes; the generator
    minimizes source-realness plus class cross-entropy on its conditioning
    labels. Returns the accuracy-selected discriminator and the final
    generator.
    """
    _require_labeled(labeled, "labeled")
    _require_unlabeled(unlabeled)
    _require_labeled(test, "test")
    if cfg.unlabeled_batch < 1:
        raise ConfigError("adversarial mode requires unlabeled_batch>=1")

    streams = _Streams(cfg.seed)
    gstore = gen.init_params(streams.init)
    dstore = dis.init_params(streams.init)
    classify = dis.patch_classifier(dstore)
    selector = _Selector()
    trace, batches = [], []
    n_lab = len(labeled.slide_ids)
    n_unl = len(unlabeled.slide_ids)
    n_real = cfg.labeled_batch + cfg.unlabeled_batch
    n_fake = n_real
    noise_dim = gen.cfg.noise_dim
    src_target = np.concatenate([np.ones(n_real, np.float32),
                                 np.zeros(n_fake, np.float32)])[:, None]
    g_target = np.ones((n_fake, 1), np.float32)

    acc0 = evaluate_accuracy(classify, test)
    trace.append(LossBundle(iteration=0, test_accuracy=acc0))
    selector.observe(dstore, 0, acc0)
    if sample_dir is not None:
        os.makedirs(sample_dir, exist_ok=True)
        _emit_mosaic(gen, gstore, streams.preview, sample_dir, 0)

    for it in range(1, cfg.iterations + 1):
        # discriminator step
        idx_l = streams.labeled.integers(0, n_lab, cfg.labeled_batch)
        idx_u = streams.unlabeled.integers(0, n_unl, cfg.unlabeled_batch)
        reals = images_to_input(
            np.concatenate([labeled.pixels[idx_l], unlabeled.pixels[idx_u]]))
        z = streams.noise.standard_normal((n_fake, noise_dim)).astype(
            np.float32)
        fake_cls = streams.classes.integers(0, N_CLASSES, n_fake)
        with _diverges_at(it):
            with E.no_grad():
                fakes = gen.forward(gstore, z, one_hot(fake_cls), train=True)
            batch = E.concat([E.Tensor(reals), E.Tensor(fakes.data)])
            src, logits = dis.forward(dstore, batch, train=True,
                                      update_sn=True)
            l_s = E.binary_cross_entropy(src, src_target)
            cls_rows = E.concat(
                [E.slice_rows(logits, 0, cfg.labeled_batch),
                 E.slice_rows(logits, n_real, n_real + n_fake)])
            cls_target = np.concatenate(
                [labeled.labels[idx_l].astype(np.int64), fake_cls])
            l_c = E.categorical_cross_entropy(cls_rows, cls_target)
            d_loss = E.add(l_s, l_c)
            ls_v, lc_v = float(l_s.data), float(l_c.data)
            _finite(it, source=ls_v, classification=lc_v)
            d_loss.backward()
        E.adam_step(dstore, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

        # generator step against the frozen discriminator, fresh fakes
        flags = {name: dstore[name].requires_grad for name in dstore.names()}
        for name in flags:
            dstore[name].requires_grad = False
        z2 = streams.noise.standard_normal((n_fake, noise_dim)).astype(
            np.float32)
        cls2 = streams.classes.integers(0, N_CLASSES, n_fake)
        g_ctx = contextlib.nullcontext() if update_generator else E.no_grad()
        with _diverges_at(it):
            with g_ctx:
                fakes2 = gen.forward(gstore, z2, one_hot(cls2), train=True)
                src2, logits2 = dis.forward(dstore, fakes2, train=True,
                                            update_sn=False)
                g_loss = E.add(E.binary_cross_entropy(src2, g_target),
                               E.categorical_cross_entropy(logits2, cls2))
            g_v = float(g_loss.data)
            _finite(it, generator=g_v)
            if update_generator:
                g_loss.backward()
        if update_generator:
            E.adam_step(gstore, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        for name, flag in flags.items():
            dstore[name].requires_grad = flag

        row = LossBundle(iteration=it, l_s=ls_v, l_c=lc_v,
                         d_objective=float(d_loss.data), g_objective=g_v)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            row.test_accuracy = evaluate_accuracy(classify, test)
            selector.observe(dstore, it, row.test_accuracy)
            if sample_dir is not None:
                _emit_mosaic(gen, gstore, streams.preview, sample_dir, it)
        trace.append(row)
        batches.append((it, cfg.labeled_batch, cfg.unlabeled_batch, n_fake))

    final = Checkpoint(dstore.copy(), cfg.iterations,
                       trace[-1].test_accuracy)
    g_final = Checkpoint(gstore.copy(), cfg.iterations, None)
    return TrainResult(best=selector.best, final=final, trace=trace,
                       batches=batches, generator=g_final)


def sample_mosaic(gen, gstore, rng, per_class=8):
    """uint8 grid of generated patches: one row per conditioning class."""
    p = gen.cfg.patch_size
    rows = []
    for c in range(N_CLASSES):
        z = rng.standard_normal((per_class, gen.cfg.noise_dim)).astype(
            np.float32)
        with E.no_grad():
            out = gen.forward(gstore, z, one_hot(np.full(per_class, c)),
                              train=False)
        imgs = output_to_images(out.data)
        rows.append(np.concatenate(list(imgs), axis=1))
    mosaic = np.concatenate(rows, axis=0)
    assert mosaic.shape == (N_CLASSES * p, per_class * p, 3)
    return mosaic


def _emit_mosaic(gen, gstore, rng, sample_dir, iteration):
    img = sample_mosaic(gen, gstore, rng)
    Image.fromarray(img, "RGB").save(
        os.path.join(sample_dir, f"samples_{iteration:06d}.png"),
        format="PNG")


# ---------------------------------------------------------------------------
# trace CSV and trained-model files


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for row in trace:
            writer.writerow([
                row.iteration,
                *("" if v is None else repr(float(v))
                  for v in (row.l_s, row.l_c, row.recon, row.d_objective,
                            row.g_objective, row.test_accuracy)),
            ])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRACE_FIELDS:
        raise CheckpointFormatError(f"{path}: not a loss trace CSV")
    out = []
    for cells in rows[1:]:
        if not cells:
            continue
        vals = [None if c == "" else float(c) for c in cells[1:7]]
        out.append(LossBundle(int(cells[0]), *vals))
    return out


_KIND_FACTORIES = {
    "fs_vgg": FsVgg,
    "autoencoder": Autoencoder,
    "discriminator": Discriminator,
    "generator": Generator,
}


@dataclass
class LoadedModel:
    kind: str
    arch: ArchConfig
    model: object
    store: E.ParamStore
    iteration: int
    test_accuracy: Optional[float]


def save_trained(path, store, arch, kind, iteration, test_accuracy):
    """Checkpoint a trained model with enough metadata to rebuild it."""
    if kind not in _KIND_FACTORIES:
        raise ConfigError(f"unknown model kind {kind!r}")
    E.save_checkpoint(path, store, metadata={
        "model": kind,
        "arch": arch.to_dict(),
        "iteration": int(iteration),
        "test_accuracy": None if test_accuracy is None
        else float(test_accuracy),
    })


def load_trained(path):
    """Rebuild (architecture, parameters) from a checkpoint file."""
    arrays, meta = E.load_checkpoint(path)
    if meta is None or "model" not in meta or "arch" not in meta:
        raise CheckpointFormatError(f"{path}: missing model metadata")
    kind = meta["model"]
    if kind not in _KIND_FACTORIES:
        raise CheckpointFormatError(f"{path}: unknown model kind {kind!r}")
    arch = ArchConfig.from_dict(meta["arch"])
    model = _KIND_FACTORIES[kind](arch)
    store = model.init_params(np.random.default_rng(0))
    expected = set(store.names())
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise CheckpointFormatError(
            f"{path}: parameter names do not match the {kind!r} "
            f"architecture (missing {missing}, unexpected {extra})")
    store.load_arrays(arrays)
    return LoadedModel(kind=kind, arch=arch, model=model, store=store,
                       iteration=int(meta["iteration"]),
                       test_accuracy=meta["test_accuracy"])
