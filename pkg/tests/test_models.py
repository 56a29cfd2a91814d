"""Architecture contracts: shapes, init conventions, FC consistency."""

import numpy as np
import pytest

from tcscorer import engine as E
from tcscorer import models as M
from tcscorer.errors import ConfigError, ShapeError

CFG = M.ArchConfig(patch_size=32, base_channels=8)


def fresh(model_cls, seed, **kwargs):
    model = model_cls(CFG, **kwargs) if kwargs else model_cls(CFG)
    store = model.init_params(np.random.default_rng(seed))
    return model, store


def test_arch_config_validation():
    for bad in (16, 33, 256):
        with pytest.raises(ConfigError):
            M.ArchConfig(patch_size=bad)
    with pytest.raises(ConfigError):
        M.ArchConfig(base_channels=0)
    with pytest.raises(ConfigError):
        M.ArchConfig(noise_dim=0)
    with pytest.raises(ConfigError):
        M.ArchConfig(class_count=7)
    cfg = M.ArchConfig(patch_size=64, base_channels=12, noise_dim=50)
    assert M.ArchConfig.from_dict(cfg.to_dict()) == cfg


def test_one_hot_rows():
    rows = M.one_hot([0, 7, 3])
    assert rows.shape == (3, 8) and rows.dtype == np.float32
    assert np.array_equal(rows.sum(axis=1), np.ones(3))
    assert rows[0, 0] == 1.0 and rows[1, 7] == 1.0 and rows[2, 3] == 1.0


def test_image_conversion_roundtrip():
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (5, 32, 32, 3), dtype=np.uint8)
    x = M.images_to_input(pixels)
    assert x.shape == (5, 3, 32, 32) and x.dtype == np.float32
    assert x.min() >= -1.0 and x.max() <= 1.0
    assert np.array_equal(M.output_to_images(x), pixels)
    single = M.images_to_input(pixels[0])
    assert single.shape == (1, 3, 32, 32)
    assert np.array_equal(single[0], x[0])


def test_generator_input_validation():
    z = np.zeros(100, np.float32)
    c = M.one_hot([2])[0]
    M.GeneratorInput(z, c)
    with pytest.raises(ShapeError):
        M.GeneratorInput(z, np.full(8, 0.125, np.float32))
    with pytest.raises(ShapeError):
        M.GeneratorInput(np.zeros((2, 100), np.float32), c)


def test_generator_output_shape_and_range():
    gen, store = fresh(M.Generator, 1)
    rng = np.random.default_rng(2)
    z = rng.standard_normal((4, CFG.noise_dim)).astype(np.float32)
    c = M.one_hot(rng.integers(0, 8, 4))
    out = gen.forward(store, z, c, train=False)
    assert out.shape == (4, 3, 32, 32)
    assert np.isfinite(out.data).all()
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0


def test_generator_single_sample_wrapper_matches_batch():
    gen, store = fresh(M.Generator, 3)
    rng = np.random.default_rng(4)
    z = rng.standard_normal((2, CFG.noise_dim)).astype(np.float32)
    c = M.one_hot([1, 6])
    batch = gen.forward(store, z, c, train=False).data
    for i in range(2):
        one = M.generator_forward(M.GeneratorInput(z[i], c[i]), store, CFG)
        # reduction order differs between batch shapes; float32 noise only
        assert np.abs(one - batch[i]).max() < 1e-6


def test_param_shapes_are_a_pure_function_of_config():
    stores = [M.Discriminator(CFG).init_params(np.random.default_rng(s))
              for s in (0, 99)]
    assert stores[0].names() == stores[1].names()
    for name in stores[0].names():
        assert stores[0][name].data.shape == stores[1][name].data.shape
    wider = M.Discriminator(M.ArchConfig(patch_size=32, base_channels=16))
    big = wider.init_params(np.random.default_rng(0))
    count = lambda st: sum(st[n].data.size for n in st.names())
    assert count(big) > count(stores[0])


def test_checkpoint_roundtrip_reproduces_forward_bitwise(tmp_path):
    disc, store = fresh(M.Discriminator, 5)
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, (3, 3, 32, 32)).astype(np.float32)
    src, cls = disc.forward(store, x, train=False, update_sn=False)
    path = str(tmp_path / "d.ckpt")
    E.save_checkpoint(path, store, metadata={"arch": CFG.to_dict()})
    arrays, meta = E.load_checkpoint(path)
    assert M.ArchConfig.from_dict(meta["arch"]) == CFG
    again = E.ParamStore()
    for name in store.names():
        again.add(name, arrays[name],
                  trainable=name in store.trainable_names())
    src2, cls2 = disc.forward(again, x, train=False, update_sn=False)
    assert np.array_equal(src.data, src2.data)
    assert np.array_equal(cls.data, cls2.data)


def test_trunk_weights_are_spectrally_normalized():
    disc, store = fresh(M.Discriminator, 7)
    for i in range(1, 4):
        state = E.SpectralState.attached(store[f"d.conv{i}.u"].data)
        for _ in range(30):
            w_sn = E.spectral_normalize(store[f"d.conv{i}.w"], state,
                                        update=True)
        flat = w_sn.data.reshape(w_sn.shape[0], -1)
        sigma = np.linalg.svd(flat.astype(np.float64), compute_uv=False)[0]
        assert 0.99 <= sigma <= 1.01


def test_fully_convolutional_consistency():
    _, store = fresh(M.FsVgg, 8)
    rng = np.random.default_rng(9)
    p = CFG.patch_size
    x = rng.uniform(-1, 1, (2, 3, p, p)).astype(np.float32)
    probs = M.classifier_forward(x, store, CFG)
    assert probs.shape == (2, 8, 1, 1)
    padded = np.zeros((2, 3, 2 * p, 2 * p), np.float32)
    off = p // 2
    padded[:, :, off:off + p, off:off + p] = x
    grid = M.classifier_forward(padded, store, CFG)
    gh = grid.shape[2]
    center = grid[:, :, gh // 2, gh // 2]
    assert np.abs(center - probs[:, :, 0, 0]).max() < 1e-4


def test_classify_logits_rejects_oversized_inputs():
    clf, store = fresh(M.FsVgg, 10)
    x = np.zeros((1, 3, 64, 64), np.float32)
    with pytest.raises(ShapeError):
        clf.classify_logits(store, x, train=False)


def test_autoencoder_shape_contract_and_zero_input():
    ae, store = fresh(M.Autoencoder, 11)
    x = np.zeros((2, 3, 32, 32), np.float32)
    recon, logits = ae.forward(store, E.as_tensor(x), train=True)
    assert recon.shape == (2, 3, 32, 32)
    assert logits.shape == (2, 8)
    loss = E.add(E.mean_squared_error(recon, x),
                 E.categorical_cross_entropy(logits, np.array([0, 1])))
    assert np.isfinite(loss.data)
    loss.backward()
    for name in store.trainable_names():
        grad = store[name].grad
        if grad is not None:
            assert np.isfinite(grad).all(), name


def test_autoencoder_overfits_one_patch():
    ae, store = fresh(M.Autoencoder, 12)
    rng = np.random.default_rng(13)
    x = rng.uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32)
    label = np.array([3])
    first = None
    for _ in range(50):
        recon, logits = ae.forward(store, E.as_tensor(x), train=True)
        mse = E.mean_squared_error(recon, x)
        if first is None:
            first = float(mse.data)
        E.add(mse, E.categorical_cross_entropy(logits, label)).backward()
        E.adam_step(store, lr=1e-3)
    recon, _ = ae.forward(store, E.as_tensor(x), train=False)
    final = float(E.mean_squared_error(recon, x).data)
    assert final < first / 2


def test_autoencoder_encoder_matches_standalone_classifier():
    ae, ae_store = fresh(M.Autoencoder, 14)
    clf = M.FsVgg(CFG, prefix="a")
    clf_store = clf.init_params(np.random.default_rng(14))
    names = ae.classifier_param_names(ae_store)
    assert sorted(names) == sorted(clf_store.names())
    for name in names:
        assert np.array_equal(ae_store[name].data, clf_store[name].data)
    rng = np.random.default_rng(15)
    x = rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    a = ae.classify_logits(ae_store, x, train=False).data
    b = clf.classify_logits(clf_store, x, train=False).data
    assert np.array_equal(a, b)


def test_discriminator_output_contract():
    disc, store = fresh(M.Discriminator, 16)
    rng = np.random.default_rng(17)
    x = rng.uniform(-1, 1, (4, 3, 32, 32)).astype(np.float32)
    outs = M.discriminator_forward(x, store, CFG)
    assert len(outs) == 4
    for out in outs:
        assert 0.0 < out.source_prob < 1.0
        assert out.class_probs.shape == (8,)
        assert abs(out.class_probs.sum() - 1.0) < 1e-6
    one = M.discriminator_forward(x[0], store, CFG)
    assert abs(one.source_prob - outs[0].source_prob) < 1e-6
    assert np.abs(one.class_probs - outs[0].class_probs).max() < 1e-6


def test_patch_classifier_closure_is_side_effect_free():
    rng = np.random.default_rng(18)
    pixels = rng.integers(0, 256, (3, 32, 32, 3), dtype=np.uint8)
    for model_cls in (M.FsVgg, M.Autoencoder, M.Discriminator):
        model, store = fresh(model_cls, 19)
        before = {n: store[n].data.copy() for n in store.names()}
        classify = model.patch_classifier(store)
        probs = classify(pixels)
        assert probs.shape == (3, 8)
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6
        assert np.array_equal(classify(pixels), probs)
        assert E.grad_enabled()
        for name, data in before.items():
            assert np.array_equal(store[name].data, data), name


def test_trainability_conventions():
    _, d_store = fresh(M.Discriminator, 20)
    trainable = set(d_store.trainable_names())
    for name in d_store.names():
        if name.endswith(".u"):
            assert name not in trainable
        else:
            assert name in trainable
    _, c_store = fresh(M.FsVgg, 21)
    trainable = set(c_store.trainable_names())
    for name in c_store.names():
        frozen = name.endswith(".rmean") or name.endswith(".rvar")
        assert (name not in trainable) == frozen
