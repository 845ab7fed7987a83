import numpy as np
import pytest

from mtpretrain import tensor as T
from mtpretrain.checkpoint import load_tensors, save_tensors
from mtpretrain.data import mask_patches
from mtpretrain.errors import ConfigError
from mtpretrain.model import (EncoderConfig, Model, TeacherState, ema_update, linear, patchify,
                              unpatchify)
from mtpretrain.objectives import asymmetric_multilabel_loss
from mtpretrain.tensor import Tensor

SMALL = EncoderConfig(image_size=64, patch_size=32, embed_dim=16, depth=2, heads=2,
                      decoder_dim=12, num_classes=5, proto_dim=8)


def images(n=2, seed=0, size=64):
    return np.random.default_rng(seed).uniform(size=(n, size, size, 3))


@pytest.fixture(scope="module")
def model():
    return Model.create(SMALL, seed=0)


# -- patches -------------------------------------------------------------------------------

def test_patchify_shapes():
    assert patchify(images(1), 32).shape == (1, 4, 3072)
    assert patchify(images(1, size=224), 32).shape == (1, 49, 3072)


def test_patchify_round_trip():
    x = images(3)
    np.testing.assert_array_equal(unpatchify(patchify(x, 32), 32, (2, 2)), x)


def test_patchify_layout():
    x = images(1)
    p = patchify(x, 32)
    np.testing.assert_array_equal(p[0, 1], x[0, :32, 32:].ravel())
    np.testing.assert_array_equal(p[0, 2], x[0, 32:, :32].ravel())


def test_patchify_indivisible():
    with pytest.raises(ConfigError):
        patchify(images(1, size=48), 32)


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=48, patch_size=32).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(depth=-1).validate()
    assert EncoderConfig(image_size=224).num_patches == 49


# -- encoder -------------------------------------------------------------------------------

def test_zero_depth_encoder_is_patch_projection():
    cfg = EncoderConfig(**{**SMALL.to_dict(), "depth": 0})
    m = Model.create(cfg, seed=1)
    x = images()
    proj = linear(Tensor(patchify(x, 32)), m.params, "patch_embed").data
    np.testing.assert_array_equal(m.encode(x).data, proj + m.params["pos_embed"].data)
    m.params["pos_embed"].data[...] = 0.0
    np.testing.assert_array_equal(m.encode(x).data, proj)


def test_empty_mask_is_no_op(model):
    x = images()
    mask = np.stack([mask_patches(0.0, SMALL.grid, np.random.default_rng(i)).grid for i in range(2)])
    assert model.encode(x, mask=mask).data.tobytes() == model.encode(x).data.tobytes()


def test_encoder_deterministic(model):
    x = images()
    a = model.encode(x).data
    b = Model.create(SMALL, seed=0).encode(x).data
    assert a.tobytes() == b.tobytes() and np.all(np.isfinite(a))


def test_full_mask_output_independent_of_image(model):
    mask = np.ones((2,) + SMALL.grid, dtype=bool)
    a = model.encode(images(2, seed=1), mask=mask).data
    b = model.encode(images(2, seed=2), mask=mask).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0], a[1])


def test_encoder_shape_mismatch(model):
    with pytest.raises(ConfigError):
        model.encode(images(1, size=32))


# -- heads ----------------------------------------------------------------------------------

def test_decoder_shapes(model):
    logits, g = model.decode_labels(model.encode(images(3)))
    assert logits.shape == (3, 5) and g.shape == (3, 12)


def test_decoder_toy_classes():
    cfg = EncoderConfig(embed_dim=16, depth=1, heads=2, decoder_dim=16, num_classes=8)
    m = Model.create(cfg)
    assert m.decode_labels(m.encode(images(2)))[0].shape == (2, 8)


def test_decoder_rejects_wrong_label_embedding(model):
    m = Model(SMALL, dict(model.params))
    m.params["label_embed"] = Tensor(np.zeros((4, 12)))
    with pytest.raises(ConfigError):
        m.decode_labels(m.encode(images(1)))


def test_decoder_class_permutation_equivariance(model):
    feats = model.encode(images(2))
    logits, _ = model.decode_labels(feats)
    perm = np.array([3, 0, 4, 1, 2])
    params = dict(model.params)
    # the per-class probe is keyed to the query row, so it moves with it
    for name in ("label_embed", "decoder.classifier.weight", "decoder.classifier.bias"):
        params[name] = Tensor(model.params[name].data[perm])
    permuted, _ = Model(SMALL, params).decode_labels(feats)
    np.testing.assert_allclose(permuted.data, logits.data[:, perm], rtol=1e-12, atol=1e-14)
    y = np.random.default_rng(0).integers(0, 2, size=(2, 5))
    assert asymmetric_multilabel_loss(permuted, y[:, perm]).item() == pytest.approx(
        asymmetric_multilabel_loss(logits, y).item(), rel=1e-12)


def test_projection_unit_norm(model):
    f = model.project_embed(model.encode(images(4))).data
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-9)


def test_projection_identical_images(model):
    x = images(1)
    f = model.project_embed(model.encode(np.concatenate([x, x]))).data
    assert f[0].tobytes() == f[1].tobytes()


def test_projection_scale_invariance():
    z = Tensor(np.random.default_rng(0).normal(size=(3, 8)))
    a = T.l2_normalize(z, axis=-1).data
    b = T.l2_normalize(z * 2.0, axis=-1).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_projection_zero_vector_floor():
    out = T.l2_normalize(Tensor(np.zeros((1, 4))), axis=-1).data
    assert np.all(np.isfinite(out))


def test_reconstruction_shape_and_linearity(model):
    feats = model.encode(images(2))
    assert model.reconstruct(feats).shape == (2, 64, 64, 3)
    params = dict(model.params)
    params["mim.head.bias"] = Tensor(np.zeros_like(model.params["mim.head.bias"].data))
    zero = Tensor(np.zeros((2, SMALL.num_patches, SMALL.embed_dim)))
    np.testing.assert_array_equal(Model(SMALL, params).reconstruct(zero).data, 0.0)


# -- momentum teacher ----------------------------------------------------------------------

def test_teacher_covers_encoder_decoder_and_queries(model):
    teacher = TeacherState.from_student(model.params)
    assert "label_embed" in teacher.params and "patch_embed.weight" in teacher.params
    assert "decoder.classifier.weight" in teacher.params
    assert not any(n.startswith(("proj.", "mim.")) for n in teacher.params)


def test_ema_fixed_point(model):
    teacher = TeacherState.from_student(model.params)
    before = {n: p.data.copy() for n, p in teacher.params.items()}
    ema_update(teacher, model.params, 0.995)
    for n, p in teacher.params.items():
        assert p.data.tobytes() == before[n].tobytes()


def test_ema_zero_momentum_copies(model):
    teacher = TeacherState.from_student(model.params)
    for p in teacher.params.values():
        p.data += 1.0
    ema_update(teacher, model.params, 0.0)
    for n, p in teacher.params.items():
        assert p.data.tobytes() == model.params[n].data.tobytes()


def test_ema_single_step_value():
    teacher = TeacherState({"w": Tensor([0.0])}, momentum=0.995)
    ema_update(teacher, {"w": Tensor([1.0])})
    assert teacher.params["w"].data[0] == pytest.approx(0.005, rel=1e-13)


def test_ema_mismatched_sets(model):
    teacher = TeacherState.from_student(model.params)
    del teacher.params["label_embed"]
    with pytest.raises(ConfigError):
        ema_update(teacher, model.params)
    with pytest.raises(ConfigError):
        ema_update(TeacherState.from_student(model.params), model.params, 1.5)


def test_ema_geometric_contraction(model):
    teacher = TeacherState.from_student(model.params)
    rng = np.random.default_rng(0)
    for p in teacher.params.values():
        p.data += rng.normal(size=p.shape)

    def dist():
        return np.sqrt(sum(((p.data - model.params[n].data) ** 2).sum()
                           for n, p in teacher.params.items()))

    d0 = dist()
    for k in range(1, 101):
        ema_update(teacher, model.params, 0.995)
        assert abs(dist() / (d0 * 0.995 ** k) - 1) <= 1e-12


def test_teacher_never_receives_gradients(model):
    teacher = TeacherState.from_student(model.params)
    x = images(2)
    _, g_t = teacher.decode(SMALL, x)
    logits, g = model.decode_labels(model.encode(x))
    (((g - g_t) ** 2).sum() + logits.sum()).backward()
    for p in teacher.params.values():
        assert not p.grad.any()
    model.zero_grad()


# -- checkpoint container --------------------------------------------------------------------

def test_checkpoint_round_trip_preserves_forward(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_tensors(str(path), {n: p.data for n, p in model.params.items()}, SMALL.to_dict(), {"k": 1})
    tensors, config, meta = load_tensors(str(path))
    assert config == SMALL.to_dict() and meta == {"k": 1}
    restored = Model(EncoderConfig(**config), {n: Tensor(v) for n, v in tensors.items()})
    x = images(2)
    a = model.decode_labels(model.encode(x))[0].data
    b = restored.decode_labels(restored.encode(x))[0].data
    assert a.tobytes() == b.tobytes()
    assert path.read_bytes()[:8] == b"MTPCKPT\0"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigError):
        load_tensors(str(path))
