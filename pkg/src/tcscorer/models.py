"""Network architectures for region detection on stained-tissue patches.

All models share one parameter convention: a flat ParamStore with dot-path
names, float32 data, trainable weights plus non-trainable state (batch-norm
running statistics, spectral u vectors) side by side so a checkpoint
captures everything a forward pass needs.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .errors import ConfigError, ShapeError


class ClassLabel(enum.IntEnum):
    """Patch classes. Index order is load-bearing: it is the network output
    order, the class-mask encoding, and the scoring convention (tumor
    classes first)."""

    TC_POS = 0
    TC_NEG = 1
    LYMPH_POS = 2
    LYMPH_NEG = 3
    MACROPHAGE = 4
    NECROSIS = 5
    STROMA = 6
    NON_TISSUE = 7


N_CLASSES = len(ClassLabel)


@dataclass
class ArchConfig:
    patch_size: int = 32
    base_channels: int = 32
    noise_dim: int = 100
    class_count: int = N_CLASSES

    def __post_init__(self):
        if self.patch_size not in (32, 64, 128):
            raise ConfigError(f"patch_size must be 32, 64 or 128, got {self.patch_size}")
        if self.patch_size % 8 != 0:
            raise ConfigError(f"patch_size must be a multiple of 8, got {self.patch_size}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        if self.noise_dim < 1:
            raise ConfigError(f"noise_dim must be positive, got {self.noise_dim}")
        if self.class_count != N_CLASSES:
            raise ConfigError(
                f"class_count must be {N_CLASSES}, got {self.class_count}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GeneratorInput:
    """One latent draw: noise vector plus a one-hot class conditioning row."""

    z: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float32)
        self.c = np.asarray(self.c, dtype=np.float32)
        if self.z.ndim != 1:
            raise ShapeError(f"GeneratorInput.z must be a vector, got {self.z.shape}")
        if self.c.shape != (N_CLASSES,):
            raise ShapeError(
                f"GeneratorInput.c must have length {N_CLASSES}, got {self.c.shape}"
            )
        if not (np.count_nonzero(self.c) == 1 and self.c.max() == 1.0):
            raise ShapeError("GeneratorInput.c must be one-hot")


@dataclass
class DiscriminatorOutput:
    """Real/fake probability plus class distribution for one image."""

    source_prob: float
    class_probs: np.ndarray


def one_hot(indices, n_classes=N_CLASSES):
    indices = np.asarray(indices, dtype=np.int64)
    return np.eye(n_classes, dtype=np.float32)[indices]


def images_to_input(pixels):
    """uint8 (N, H, W, 3) patches -> float32 NCHW in [-1, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    x = arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def output_to_images(x):
    """float32 NCHW in [-1, 1] -> uint8 (N, H, W, 3)."""
    arr = np.clip((np.asarray(x) + 1.0) * 127.5, 0, 255)
    return arr.transpose(0, 2, 3, 1).round().astype(np.uint8)


# ---------------------------------------------------------------------------
# parameter initialization helpers

RELU_GAIN = float(np.sqrt(2.0))


def _uniform_init(rng, shape, fan_in, gain):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _add_conv(store, rng, name, out_ch, in_ch, k, gain):
    store.add(f"{name}.w", _uniform_init(rng, (out_ch, in_ch, k, k), in_ch * k * k, gain))
    store.add(f"{name}.b", np.zeros(out_ch, np.float32))


def _add_deconv(store, rng, name, in_ch, out_ch, k, gain):
    # Transposed-conv weight layout is (in, out, k, k); each output pixel
    # receives k^2/stride^2 contributions per input channel.
    store.add(f"{name}.w", _uniform_init(rng, (in_ch, out_ch, k, k), in_ch * k * k, gain))
    store.add(f"{name}.b", np.zeros(out_ch, np.float32))


def _add_linear(store, rng, name, in_f, out_f, gain):
    store.add(f"{name}.w", _uniform_init(rng, (in_f, out_f), in_f, gain))
    store.add(f"{name}.b", np.zeros(out_f, np.float32))


def _add_bn(store, name, ch):
    store.add(f"{name}.gamma", np.ones(ch, np.float32))
    store.add(f"{name}.beta", np.zeros(ch, np.float32))
    store.add(f"{name}.rmean", np.zeros(ch, np.float32), trainable=False)
    store.add(f"{name}.rvar", np.ones(ch, np.float32), trainable=False)


def _bn(store, name, x, train):
    return E.batch_norm(
        x,
        store[f"{name}.gamma"],
        store[f"{name}.beta"],
        store[f"{name}.rmean"].data,
        store[f"{name}.rvar"].data,
        train,
    )


def _conv(store, name, x, stride, padding):
    return E.conv2d(x, store[f"{name}.w"], stride, padding, bias=store[f"{name}.b"])


def _deconv(store, name, x, stride, padding):
    return E.conv2d_transpose(
        x, store[f"{name}.w"], stride, padding, bias=store[f"{name}.b"]
    )


def _linear(store, name, x):
    return E.add_row_bias(E.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


# ---------------------------------------------------------------------------
# generator


class Generator:
    """Projects noise + class conditioning to a 3-channel patch in [-1, 1].

    Linear projection to a 4x4 map, three stride-2 transposed-conv blocks
    (kernel 4, batch norm, relu), then a 1x1 conv with tanh.
    """

    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg
        b = cfg.base_channels
        self.start = cfg.patch_size // 8
        self.channels = [4 * b, 2 * b, b, b]

    def init_params(self, rng, store=None):
        store = store if store is not None else E.ParamStore()
        cfg = self.cfg
        _add_linear(
            store,
            rng,
            "g.proj",
            cfg.noise_dim + cfg.class_count,
            self.channels[0] * self.start * self.start,
            RELU_GAIN,
        )
        for i in range(3):
            _add_deconv(store, rng, f"g.up{i + 1}", self.channels[i], self.channels[i + 1], 4, RELU_GAIN)
            _add_bn(store, f"g.up{i + 1}.bn", self.channels[i + 1])
        _add_conv(store, rng, "g.out", 3, self.channels[3], 1, 1.0)
        return store

    def forward(self, store, z, c, train):
        """z (N, noise_dim), c one-hot (N, class_count) -> (N, 3, p, p)."""
        z = E.as_tensor(z)
        c = E.as_tensor(c)
        h = _linear(store, "g.proj", E.concat([z, c], axis=1))
        n = h.shape[0]
        h = E.reshape(h, (n, self.channels[0], self.start, self.start))
        for i in range(3):
            h = _deconv(store, f"g.up{i + 1}", h, 2, 1)
            h = _bn(store, f"g.up{i + 1}.bn", h, train)
            h = E.relu(h)
        h = _conv(store, "g.out", h, 1, 0)
        return E.tanh(h)


# ---------------------------------------------------------------------------
# discriminator


class Discriminator:
    """Shared trunk of spectral-normalized stride-2 convs feeding a
    real/fake head and a class head off a global average pool."""

    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg
        b = cfg.base_channels
        self.channels = [3, b, 2 * b, 4 * b]

    def init_params(self, rng, store=None):
        store = store if store is not None else E.ParamStore()
        for i in range(3):
            _add_conv(store, rng, f"d.conv{i + 1}", self.channels[i + 1], self.channels[i], 4, RELU_GAIN)
            u = rng.standard_normal(self.channels[i + 1]).astype(np.float32)
            u /= np.linalg.norm(u)
            store.add(f"d.conv{i + 1}.u", u, trainable=False)
        feat = self.channels[3]
        _add_linear(store, rng, "d.src", feat, 1, 1.0)
        _add_linear(store, rng, "d.cls", feat, self.cfg.class_count, 1.0)
        return store

    def trunk(self, store, x, train, update_sn):
        h = E.as_tensor(x)
        for i in range(3):
            name = f"d.conv{i + 1}"
            state = E.SpectralState.attached(store[f"{name}.u"].data)
            w = E.spectral_normalize(store[f"{name}.w"], state, update=update_sn)
            h = E.conv2d(h, w, 2, 1, bias=store[f"{name}.b"])
            h = E.leaky_relu(h, 0.2)
        return E.mean_axes(h, (2, 3))  # global average pool -> (N, 4b)

    def forward(self, store, x, train, update_sn=None):
        """-> (source_prob (N, 1), class_logits (N, class_count))."""
        if update_sn is None:
            update_sn = train
        feat = self.trunk(store, x, train, update_sn)
        src = E.sigmoid(_linear(store, "d.src", feat))
        cls = _linear(store, "d.cls", feat)
        return src, cls

    def classify_logits(self, store, x, train):
        _, cls = self.forward(store, x, train, update_sn=train)
        return cls

    def patch_classifier(self, store):
        """uint8 patches -> class probability rows, eval mode, no tape."""

        def classify(pixels):
            with E.no_grad():
                x = images_to_input(pixels)
                _, logits = self.forward(store, x, train=False, update_sn=False)
                return E.softmax(logits, axis=1).data

        return classify


# ---------------------------------------------------------------------------
# fully-convolutional VGG-style classifier


class FsVgg:
    """Three blocks of [3x3 conv + BN + relu, twice, then stride-2 conv],
    then a valid conv over the remaining grid and a 1x1 conv head.

    Fully convolutional: a patch-sized input yields a 1x1 grid of class
    logits; larger inputs yield larger grids with total stride 8.  All
    padding is applied once, on the first conv; every later conv is
    valid.  Per-layer same-padding would break sliding-window
    equivalence (interior activations bleed past the patch border and
    re-enter, which zero padding on a lone patch cannot reproduce), so
    the net is exactly valid-net-after-zero-pad and a patch-sized
    forward equals the matching grid cell of any larger forward.
    """

    # One-sided input margin: encoder receptive field 36 at stride 8,
    # so (36 - 8) / 2 independent of patch_size.
    ENCODE_PAD = 14

    def __init__(self, cfg: ArchConfig, prefix="c"):
        self.cfg = cfg
        self.prefix = prefix
        b = cfg.base_channels
        self.blocks = [b, 2 * b, 4 * b]
        self.head_kernel = cfg.patch_size // 8

    def init_params(self, rng, store=None):
        store = store if store is not None else E.ParamStore()
        self.init_encoder(store, rng)
        self.init_head(store, rng)
        return store

    def init_encoder(self, store, rng):
        p = self.prefix
        in_ch = 3
        for i, ch in enumerate(self.blocks, start=1):
            _add_conv(store, rng, f"{p}.b{i}.conv1", ch, in_ch, 3, RELU_GAIN)
            _add_bn(store, f"{p}.b{i}.conv1.bn", ch)
            _add_conv(store, rng, f"{p}.b{i}.conv2", ch, ch, 3, RELU_GAIN)
            _add_bn(store, f"{p}.b{i}.conv2.bn", ch)
            _add_conv(store, rng, f"{p}.b{i}.down", ch, ch, 2, RELU_GAIN)
            _add_bn(store, f"{p}.b{i}.down.bn", ch)
            in_ch = ch

    def init_head(self, store, rng):
        p = self.prefix
        feat = self.blocks[-1]
        _add_conv(store, rng, f"{p}.head.fc", feat, feat, self.head_kernel, RELU_GAIN)
        _add_conv(store, rng, f"{p}.head.out", self.cfg.class_count, feat, 1, 1.0)

    def encode(self, store, x, train):
        p = self.prefix
        h = E.as_tensor(x)
        for i in range(1, 4):
            pad = self.ENCODE_PAD if i == 1 else 0
            h = _conv(store, f"{p}.b{i}.conv1", h, 1, pad)
            h = E.relu(_bn(store, f"{p}.b{i}.conv1.bn", h, train))
            h = _conv(store, f"{p}.b{i}.conv2", h, 1, 0)
            h = E.relu(_bn(store, f"{p}.b{i}.conv2.bn", h, train))
            h = _conv(store, f"{p}.b{i}.down", h, 2, 0)
            h = E.relu(_bn(store, f"{p}.b{i}.down.bn", h, train))
        return h

    def head(self, store, h, train):
        p = self.prefix
        h = E.relu(_conv(store, f"{p}.head.fc", h, 1, 0))
        return _conv(store, f"{p}.head.out", h, 1, 0)

    def forward(self, store, x, train):
        """-> class logit grid (N, class_count, gh, gw)."""
        return self.head(store, self.encode(store, x, train), train)

    def classify_logits(self, store, x, train):
        """Patch-sized inputs only: logits (N, class_count) off the 1x1 grid."""
        grid = self.forward(store, x, train)
        n, k, gh, gw = grid.shape
        if (gh, gw) != (1, 1):
            raise ShapeError(
                f"classify_logits: input produced a {gh}x{gw} grid; "
                "use forward() for oversized inputs"
            )
        return E.reshape(grid, (n, k))

    def patch_classifier(self, store):
        def classify(pixels):
            with E.no_grad():
                x = images_to_input(pixels)
                logits = self.classify_logits(store, x, train=False)
                return E.softmax(logits, axis=1).data

        return classify


# ---------------------------------------------------------------------------
# autoencoder with a classification head on the bottleneck


class Autoencoder:
    """FsVgg encoder + classifier head, plus a decoder that reconstructs
    the input through three stride-2 transposed-conv blocks."""

    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg
        self.prefix = "a"
        self._clf = FsVgg(cfg, prefix="a")
        b = cfg.base_channels
        self.dec_channels = [4 * b, 2 * b, b, b]

    def init_params(self, rng, store=None):
        store = store if store is not None else E.ParamStore()
        self._clf.init_encoder(store, rng)
        self._clf.init_head(store, rng)
        for i in range(3):
            _add_deconv(store, rng, f"a.dec.up{i + 1}", self.dec_channels[i], self.dec_channels[i + 1], 4, RELU_GAIN)
            _add_bn(store, f"a.dec.up{i + 1}.bn", self.dec_channels[i + 1])
        _add_conv(store, rng, "a.dec.out", 3, self.dec_channels[3], 1, 1.0)
        return store

    def classifier_param_names(self, store):
        return [n for n in store.names() if not n.startswith("a.dec.")]

    def classifier_view(self):
        """The encoder+head as a standalone classifier over the same names."""
        return self._clf

    def decode(self, store, h, train):
        for i in range(3):
            h = _deconv(store, f"a.dec.up{i + 1}", h, 2, 1)
            h = _bn(store, f"a.dec.up{i + 1}.bn", h, train)
            h = E.relu(h)
        return E.tanh(_conv(store, "a.dec.out", h, 1, 0))

    def forward(self, store, x, train):
        """-> (reconstruction (N, 3, p, p), class_logits (N, class_count))."""
        bottleneck = self._clf.encode(store, x, train)
        recon = self.decode(store, bottleneck, train)
        grid = self._clf.head(store, bottleneck, train)
        n, k = grid.shape[:2]
        return recon, E.reshape(grid, (n, k))

    def classify_logits(self, store, x, train):
        return self._clf.classify_logits(store, x, train)

    def patch_classifier(self, store):
        return self._clf.patch_classifier(store)


# ---------------------------------------------------------------------------
# single-sample functional wrappers


def generator_forward(gen_input: GeneratorInput, store, cfg: ArchConfig):
    """One latent draw -> one (3, patch_size, patch_size) image in [-1, 1]."""
    gen = Generator(cfg)
    with E.no_grad():
        out = gen.forward(store, gen_input.z[None, :], gen_input.c[None, :], train=False)
    return out.data[0]


def discriminator_forward(images, store, cfg: ArchConfig):
    """(3, p, p) -> DiscriminatorOutput; (N, 3, p, p) -> list, order kept."""
    disc = Discriminator(cfg)
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    with E.no_grad():
        src, cls = disc.forward(store, arr, train=False, update_sn=False)
        probs = E.softmax(cls, axis=1).data
    outs = [
        DiscriminatorOutput(float(src.data[i, 0]), probs[i].copy())
        for i in range(arr.shape[0])
    ]
    return outs[0] if single else outs


def classifier_forward(images, store, cfg: ArchConfig):
    """Class probability grid (N, class_count, gh, gw) for any input size."""
    clf = FsVgg(cfg)
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    with E.no_grad():
        grid = clf.forward(store, arr, train=False)
        probs = E.softmax(grid, axis=1).data
    return probs[0] if single else probs


def autoencoder_forward(images, store, cfg: ArchConfig):
    """-> (reconstruction, class probability rows)."""
    ae = Autoencoder(cfg)
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    with E.no_grad():
        recon, logits = ae.forward(store, arr, train=False)
        probs = E.softmax(logits, axis=1).data
    if single:
        return recon.data[0], probs[0]
    return recon.data, probs


MODEL_KINDS = {
    "acgan_d": Discriminator,
    "acgan_g": Generator,
    "fs_vgg": FsVgg,
    "ae_ssl": Autoencoder,
}


def build_model(kind, cfg: ArchConfig):
    try:
        return MODEL_KINDS[kind](cfg)
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}") from None


def save_model(path, store, cfg: ArchConfig, kind, iteration=None, test_accuracy=None):
    meta = {"arch": cfg.to_dict(), "model": kind}
    if iteration is not None:
        meta["iteration"] = int(iteration)
    if test_accuracy is not None:
        meta["test_accuracy"] = float(test_accuracy)
    E.save_checkpoint(path, store, meta)


def load_model(path):
    """-> (model, store, metadata). The store is rebuilt from the recorded
    architecture so trainable flags come from code, not the file."""
    arrays, meta = E.load_checkpoint(path)
    if not meta or "arch" not in meta or "model" not in meta:
        raise ConfigError(f"{path}: checkpoint lacks architecture metadata")
    cfg = ArchConfig.from_dict(meta["arch"])
    model = build_model(meta["model"], cfg)
    rng = np.random.default_rng(0)
    store = model.init_params(rng)
    expected = set(store.names())
    stored = set(arrays.keys())
    if expected != stored:
        missing = sorted(expected - stored)
        extra = sorted(stored - expected)
        raise ConfigError(
            f"{path}: parameter names do not match architecture "
            f"(missing {missing[:3]}, extra {extra[:3]})"
        )
    store.load_arrays(arrays)
    return model, store, meta
