import numpy as np
import pytest
import torch

from catintell import generator as G
from catintell.errors import ConfigError, ShapeError

from oracles import dcb_reference, generator_params

TOY = G.GeneratorConfig(stages=1, width=2, blocks_per_encoder_stage=1, blocks_per_decoder_stage=1, bottleneck_blocks=1)


def test_res_config_parameter_budget():
    n = G.count_parameters(G.build_generator(G.RES_CONFIG))
    assert 8e6 <= n <= 18e6


def test_syn_config_smaller_than_res():
    assert G.count_parameters(G.build_generator(G.SYN_CONFIG)) < G.count_parameters(G.build_generator(G.RES_CONFIG))


@pytest.mark.parametrize(
    "cfg",
    [TOY, G.GeneratorConfig(stages=2, width=4), G.RES_CONFIG, G.SYN_CONFIG],
    ids=["toy", "s2w4", "res", "syn"],
)
def test_parameter_count_matches_closed_form(cfg):
    expected = generator_params(
        cfg.stages, cfg.width, cfg.blocks_per_encoder_stage, cfg.blocks_per_decoder_stage, cfg.bottleneck_blocks
    )
    assert G.count_parameters(G.build_generator(cfg)) == expected


def test_toy_count_by_hand():
    # C=2, 1 stage: every layer written out
    dcb2 = (25 * 2 + 2) + 4 + (2 * 8 + 8) + (8 * 2 + 2) + (25 * 4 + 2)
    dcb4 = (25 * 4 + 4) + 8 + (4 * 16 + 16) + (16 * 4 + 4) + (25 * 8 + 4)
    total = (
        (25 * 3 * 2 + 2)  # input projection
        + dcb2 + (4 * 2 * 4 + 4)  # encoder + down
        + dcb4  # bottleneck
        + (9 * 4 * 2 + 2) + (4 * 2 + 2) + dcb2  # up, merge, decoder block
        + (25 * 2 * 3 + 3)  # output projection
    )
    assert G.count_parameters(G.build_generator(TOY)) == total


@pytest.mark.parametrize("h,w", [(256, 256), (192, 320), (100, 100)])
def test_res_forward_preserves_shape(h, w):
    model = G.build_generator(G.RES_CONFIG)
    batch = np.random.default_rng(0).random((1, h, w, 3), dtype=np.float32)
    out = G.forward(model, batch)
    assert out.shape == (1, h, w, 3)
    assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_forward_batch_of_two():
    model = G.build_generator(G.SYN_CONFIG)
    assert G.forward(model, np.zeros((2, 64, 64, 3), np.float32)).shape == (2, 64, 64, 3)


@pytest.mark.parametrize("h,w", [(1, 1), (3, 7), (17, 5)])
def test_forward_tiny_and_odd_sizes(h, w):
    model = G.build_generator(G.GeneratorConfig(stages=2, width=4))
    assert G.forward(model, np.full((1, h, w, 3), 0.5, np.float32)).shape == (1, h, w, 3)


@pytest.mark.parametrize("cfg,size", [(G.RES_CONFIG, 256), (G.SYN_CONFIG, 256)], ids=["res", "syn"])
def test_encoder_stage_shapes(cfg, size):
    trace = G.encoder_trace(G.build_generator(cfg), np.zeros((1, size, size, 3), np.float32))
    assert len(trace) == cfg.stages
    for i, f in enumerate(trace):
        assert f.shape == (1, size // 2 ** (i + 1), size // 2 ** (i + 1), cfg.width * 2 ** (i + 1))


def test_encoder_stage_values_for_res():
    trace = G.encoder_trace(G.build_generator(G.RES_CONFIG), np.zeros((1, 256, 256, 3), np.float32))
    assert trace[0].shape[1:] == (128, 128, 64)
    assert trace[3].shape[1:] == (16, 16, 512)


@pytest.mark.parametrize("shape", [(1, 1), (4, 4), (3, 9)])
def test_dcb_preserves_spatial_size(shape):
    block = G.DenseConvBlock(6)
    x = torch.randn(2, 6, *shape)
    assert block(x).shape == x.shape


def test_dcb_zero_input_with_zeroed_final_conv():
    block = G.DenseConvBlock(4)
    with torch.no_grad():
        block.conv2.weight.zero_()
        block.conv2.bias.zero_()
        block.conv2_branch.weight.zero_()
    assert not block(torch.zeros(1, 4, 5, 5)).any()


def _dcb_weights(block):
    p = {k: v.detach().double().numpy() for k, v in block.state_dict().items()}
    c = p["conv1.weight"].shape[0]
    # rebuild the single grouped kernel over interleaved (input, branch) channels
    grouped = np.zeros((c, 2, *p["conv2.weight"].shape[2:]))
    grouped[:, 0] = p["conv2.weight"][:, 0]
    grouped[:, 1] = p["conv2_branch.weight"][:, 0]
    p["grouped.weight"], p["grouped.bias"] = grouped, p["conv2.bias"]
    return p


def test_dcb_matches_independent_implementation():
    block = G.init_parameters(G.DenseConvBlock(2), seed=3)
    with torch.no_grad():
        block.norm.weight.uniform_(0.5, 1.5)
        block.norm.bias.uniform_(-0.2, 0.2)
    x = np.random.default_rng(7).standard_normal((4, 4, 2))
    ours = block.double()(torch.from_numpy(x).permute(2, 0, 1)[None])[0].permute(1, 2, 0).detach().numpy()
    np.testing.assert_allclose(ours, dcb_reference(x, _dcb_weights(block)), atol=1e-6)


def test_dense_groups_variant_preserves_shape():
    block = G.DenseConvBlock(4, groups=1)
    assert block.conv2.weight.shape == (4, 8, 5, 5)
    x = torch.randn(1, 4, 7, 7)
    assert block(x).shape == x.shape


def test_global_residual_zero_output_proj_is_identity():
    model = G.build_generator(G.GeneratorConfig(stages=2, width=4))
    with torch.no_grad():
        model.output_proj.weight.zero_()
        model.output_proj.bias.zero_()
    x = np.random.default_rng(1).random((1, 20, 12, 3), dtype=np.float32)
    np.testing.assert_allclose(G.forward(model, x), x, atol=1e-7)


def test_build_is_seeded():
    a = G.build_generator(TOY, seed=5).state_dict()
    b = G.build_generator(TOY, seed=5).state_dict()
    c = G.build_generator(TOY, seed=6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_config_validation():
    with pytest.raises(ConfigError):
        G.GeneratorConfig(stages=0)
    with pytest.raises(ConfigError):
        G.GeneratorConfig(kernel_large=4)
    with pytest.raises(ConfigError):
        G.GeneratorConfig.from_dict({"stages": 2, "depth": 3})
    assert G.GeneratorConfig.from_dict(G.RES_CONFIG.to_dict()) == G.RES_CONFIG


def test_bad_batch_shape_raises():
    with pytest.raises(ShapeError):
        G.forward(G.build_generator(TOY), np.zeros((1, 8, 8, 4), np.float32))
