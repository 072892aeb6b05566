import numpy as np
import pytest

from mbrbf.backbone import (
    BackboneConfig,
    backbone_backward_batch,
    backbone_forward,
    backbone_forward_batch,
    backbone_init,
    load_backbone,
    load_feature_block,
    save_backbone,
)
from mbrbf.errors import ConfigError, FormatError, ShapeError
from mbrbf.layers import grad_check
from mbrbf.tensorio import write_tensor

SMALL = BackboneConfig(input_shape=(1, 8, 8), conv_blocks=((2, 3, 2), (3, 3, 2)), seed=0)


def test_output_shape_three_blocks_pool_two():
    cfg = BackboneConfig(
        input_shape=(1, 48, 48),
        conv_blocks=((16, 3, 2), (32, 3, 2), (64, 3, 2)),
        seed=0,
    )
    assert cfg.output_shape() == (64, 6, 6)


def test_same_seed_identical_weights():
    a = backbone_init(SMALL)
    b = backbone_init(SMALL)
    for (na, wa), (nb, wb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb
        np.testing.assert_array_equal(wa, wb)


def test_excessive_pooling_rejected():
    with pytest.raises(ConfigError):
        BackboneConfig(input_shape=(1, 8, 8), conv_blocks=((4, 3, 16),))


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        BackboneConfig(input_shape=(1, 8, 8), conv_blocks=((4, 2, 2),))


def test_zero_image_zero_bias_gives_zero_block():
    bb = backbone_init(SMALL)
    fb = backbone_forward(bb, np.zeros((1, 8, 8)))
    assert not fb.tensor.any()


def test_forward_is_pure():
    bb = backbone_init(SMALL)
    img = np.random.default_rng(0).standard_normal((1, 8, 8))
    a = backbone_forward(bb, img).tensor
    b = backbone_forward(bb, img).tensor
    np.testing.assert_array_equal(a, b)


def test_forward_shape_matches_config_report():
    bb = backbone_init(SMALL)
    img = np.random.default_rng(1).standard_normal((1, 8, 8))
    fb = backbone_forward(bb, img)
    assert fb.tensor.shape == SMALL.output_shape() == (3, 2, 2)


def test_input_shape_mismatch():
    bb = backbone_init(SMALL)
    with pytest.raises(ShapeError):
        backbone_forward(bb, np.zeros((2, 8, 8)))


def test_backward_matches_finite_differences():
    # fd across conv weights and biases with a fixed linear readout;
    # inputs chosen away from ReLU kinks and pooling ties by construction
    for seed in range(5):
        rng = np.random.default_rng(seed)
        cfg = BackboneConfig(input_shape=(2, 4, 4), conv_blocks=((2, 3, 2),), seed=seed)
        bb = backbone_init(cfg)
        x = rng.standard_normal((1, 2, 4, 4))
        coeff = rng.standard_normal((1,) + cfg.output_shape())

        def loss():
            return float((coeff * backbone_forward_batch(bb, x)).sum())

        out, cache = backbone_forward_batch(bb, x, want_cache=True)
        grads = backbone_backward_batch(bb, cache, coeff)
        arrays = [bb.weights[0], bb.biases[0]]
        analytic = [grads["backbone.conv0.weights"], grads["backbone.conv0.bias"]]
        err = grad_check(loss, arrays, analytic, eps=1e-6)
        assert err < 1e-5


def test_load_feature_block(tmp_path):
    t = np.random.default_rng(2).standard_normal((512, 7, 7))
    path = tmp_path / "sample42.mbrt"
    write_tensor(t, path)
    fb = load_feature_block(path)
    assert fb.tensor.shape == (512, 7, 7)
    assert fb.sample_id == "sample42"
    np.testing.assert_array_equal(fb.tensor, t)


def test_load_feature_block_rejects_rank2(tmp_path):
    path = tmp_path / "bad.mbrt"
    write_tensor(np.ones((3, 3)), path)
    with pytest.raises(FormatError):
        load_feature_block(path)


def test_backbone_checkpoint_roundtrip(tmp_path):
    bb = backbone_init(SMALL)
    # perturb weights so we are not just reloading the init
    bb.weights[0] = bb.weights[0] + 0.25
    save_backbone(bb, tmp_path / "bb")
    back = load_backbone(tmp_path / "bb")
    assert back.config == bb.config
    for name, arr in bb.named_parameters().items():
        np.testing.assert_array_equal(back.named_parameters()[name], arr)


def test_load_backbone_frozen_override(tmp_path):
    bb = backbone_init(SMALL)
    save_backbone(bb, tmp_path / "bb")
    thawed = load_backbone(tmp_path / "bb", frozen=False)
    assert thawed.config.frozen is False
