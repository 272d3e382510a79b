import numpy as np
import pytest

from lmfnet import tensor as T
from lmfnet.checkpoint import load_arrays, save_arrays
from lmfnet.decoder import DecoderConfig, MLPDecoder
from lmfnet.encoder import EncoderConfig, MixTransformerEncoder
from lmfnet.errors import ConfigError, DataError, DimensionError
from lmfnet.fusion import (
    MFFR,
    MFSAF,
    FusionBlock,
    FusionConfig,
    Merge,
    merge_modalities,
    stack_modalities,
)
from lmfnet.model import LMFNet, ModelConfig, count_parameters
from lmfnet.nn import Linear
from lmfnet.tensor import Tensor

from conftest import checked_grad_error, jitter


def f64(module):
    return module.to(np.float64).eval()


def probe(y, seed=1):
    w = np.random.default_rng(seed).normal(size=y.shape)
    return T.tsum(y * Tensor(w))


def tiny_model(mode="full", modalities=("rgb", "nirrg", "dsm"), seed=0, **fusion):
    cfg = ModelConfig(
        modalities,
        EncoderConfig.tiny(),
        FusionConfig(sr_strides=(4, 2, 1, 1), **fusion),
        DecoderConfig(embed_dim=16),
        mode,
    )
    return LMFNet(cfg, seed=seed)


def inputs(n, B=1, H=64, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(B, 3, H, H)).astype(dtype) for _ in range(n)]


# -- parameters and init -------------------------------------------------------

def test_parameter_names_unique_and_kinds():
    m = tiny_model()
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    kinds = {p.kind for p in m.parameters()}
    assert kinds == {"weight", "bias", "norm_scale", "norm_shift"}


def test_initialisation_conventions():
    m = tiny_model()
    for name, p in m.named_parameters():
        if p.kind in ("bias", "norm_shift"):
            assert not p.data.any(), name
        if p.kind == "norm_scale":
            assert (p.data == 1).all(), name
    lin = m.decoder.fuse.weight.data
    assert np.abs(lin).max() <= 0.04 + 1e-7  # truncated at two standard deviations
    conv = m.encoder.stages[0].patch_embed.proj.weight.data  # fan_out = 8 * 7 * 7
    assert abs(conv.std() - np.sqrt(2 / (8 * 49))) < 0.01


# -- encoder -------------------------------------------------------------------

def test_pyramid_scale_law():
    enc = MixTransformerEncoder(EncoderConfig.tiny(), np.random.default_rng(0))
    feats = enc(Tensor(inputs(1)[0]))
    assert [f.shape for f in feats] == [(1, 8, 16, 16), (1, 16, 8, 8), (1, 24, 4, 4), (1, 32, 2, 2)]


def test_geometry_not_divisible_by_32():
    enc = MixTransformerEncoder(EncoderConfig.tiny(), np.random.default_rng(0))
    with pytest.raises(DimensionError, match="32"):
        enc(Tensor(np.zeros((1, 3, 48, 64), dtype=np.float32)))


def test_batch_rows_independent():
    enc = MixTransformerEncoder(EncoderConfig.tiny(), np.random.default_rng(0)).eval()
    x = inputs(1)[0]
    one = enc(Tensor(x))
    two = enc(Tensor(np.concatenate([x, x])))
    for a, b in zip(one, two):
        np.testing.assert_allclose(b.data[0], a.data[0], rtol=1e-5, atol=1e-6)
        np.testing.assert_array_equal(b.data[0], b.data[1])


def test_constant_input_constant_patch_embedding_interior():
    enc = MixTransformerEncoder(EncoderConfig.tiny(), np.random.default_rng(0))
    y = enc.stages[0].patch_embed.proj(Tensor(np.full((1, 3, 64, 64), 0.7, dtype=np.float32))).data
    interior = y[:, :, 1:-1, 1:-1]
    np.testing.assert_allclose(interior, interior[:, :, :1, :1] * np.ones_like(interior), rtol=1e-5)


def test_zero_depth_stage_is_identity():
    cfg = EncoderConfig(embed_dims=(8, 16, 24, 32), depths=(0, 0, 0, 0), num_heads=(1, 1, 1, 1))
    enc = MixTransformerEncoder(cfg, np.random.default_rng(0))
    grid = enc.patch_embed(Tensor(inputs(1)[0]), 0)
    assert np.array_equal(enc.encoder_stage(grid, 0).data, grid.data)


def test_weight_sharing_identical_inputs_identical_pyramids():
    enc = MixTransformerEncoder(EncoderConfig.tiny(), np.random.default_rng(0)).eval()
    x = inputs(1)[0]
    p1, p2 = enc.extract_pyramid([Tensor(x), Tensor(x.copy())])
    for a, b in zip(p1, p2):
        assert np.array_equal(a.data, b.data)


def test_mismatched_modality_geometry():
    enc = MixTransformerEncoder(EncoderConfig.tiny(), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        enc.extract_pyramid([Tensor(inputs(1)[0]), Tensor(inputs(1, H=32)[0])])


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_encoder_parameter_count_independent_of_n(n):
    counts = count_parameters(ModelConfig(tuple(f"m{i}" for i in range(n))))
    assert counts["encoder"] == count_parameters(ModelConfig(("m0",)))["encoder"]


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dims=(30, 64, 160, 256), num_heads=(4, 2, 5, 8))
    with pytest.raises(ConfigError):
        EncoderConfig(depths=(1, 1, 1))


def test_encoder_block_grad():
    enc = jitter(f64(MixTransformerEncoder(EncoderConfig.tiny(), np.random.default_rng(0))), std=0.1)
    grid = Tensor(np.random.default_rng(1).normal(size=(1, 8, 8, 8)), requires_grad=True, dtype=np.float64)
    params = [grid] + enc.stages[0].blocks.parameters()
    assert T.grad_check(lambda: probe(enc.encoder_stage(grid, 0)), params, max_entries=12) < 1e-4


# -- fusion ----------------------------------------------------------------------

def fusion_input(shape=(1, 4, 8, 8, 3), seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True, dtype=np.float64)


def test_hidden_modality_schedule():
    assert FusionConfig(n=4).hidden_modalities == (4, 8, 12, 20)


def test_fusion_block_shapes_all_stages():
    cfg = FusionConfig(sr_strides=(2, 2, 2, 1))
    blk = FusionBlock(4, 3, 1, cfg, np.random.default_rng(0)).eval()
    shape = (2, 4, 8, 8, 3)
    st = blk.stages(fusion_input(shape))
    assert st["pre_fusion"].shape == shape
    for k in ("post_reproject", "post_mffr", "post_mfsaf", "post_residual"):
        assert st[k].shape == (2, 4, 8, 8, 8), k
    assert st["post_merge"].shape == (2, 4, 8, 8)


@pytest.mark.parametrize("level,sr,op", [(0, 2, "linear"), (1, 2, "mean"), (3, 1, "max")])
def test_fusion_block_grad(level, sr, op):
    cfg = FusionConfig(sr_strides=(sr,) * 4, merge_op=op)
    blk = jitter(f64(FusionBlock(4, 3, level, cfg, np.random.default_rng(0))))
    x = fusion_input()
    assert checked_grad_error(lambda: probe(blk(x)), blk, [x]) < 1e-4


def test_mfsaf_stride_larger_than_map_is_config_error():
    layer = MFSAF(4, 4, 16, np.random.default_rng(0))
    with pytest.raises(ConfigError, match="m=16"):
        layer(fusion_input((1, 4, 8, 8, 4)))


def test_mfsaf_modalities_attend_independently():
    # before the modality-mixing projection, modality k's output depends only on modality k
    layer = f64(MFSAF(4, 3, 2, np.random.default_rng(0)))
    x = fusion_input()
    a = layer.attend(x).data
    x2 = x.data.copy()
    x2[..., 0] += 1.0
    b = layer.attend(Tensor(x2)).data
    assert np.array_equal(a[..., 1:], b[..., 1:])
    assert not np.array_equal(a[..., 0], b[..., 0])


def test_mfsaf_sr_conv_shape():
    layer = MFSAF(4, 3, 4, np.random.default_rng(0))
    assert layer.sr_conv.weight.shape == (4, 1, 4, 4)
    assert layer.sr_conv.stride == (4, 4) or layer.sr_conv.stride == 4


def test_mffr_conv_groups_equal_channels():
    layer = MFFR(6, 3, 3, (3, 3, 3), 0.1, np.random.default_rng(0))
    assert layer.conv.weight.shape == (6, 1, 3, 3, 3)


def test_fusion_rejects_wrong_modality_count():
    blk = FusionBlock(4, 3, 0, FusionConfig(sr_strides=(2, 2, 2, 1)), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        blk(fusion_input((1, 4, 8, 8, 2)))


def test_fusion_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(merge_op="sum")
    with pytest.raises(ConfigError):
        FusionConfig(n=0)
    with pytest.raises(ConfigError):
        FusionConfig(conv3d_kernel=(2, 3, 3))


def test_stack_modalities_order():
    a, b = Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones((1, 2, 2, 2)))
    s = stack_modalities([[a], [b]], 0)
    assert s.shape == (1, 2, 2, 2, 2)
    assert (s.data[..., 0] == 0).all() and (s.data[..., 1] == 1).all()


# -- merge -----------------------------------------------------------------------

def test_merge_examples():
    f = Tensor(np.array([1.0, 5.0, 3.0]).reshape(1, 1, 1, 1, 3))
    assert merge_modalities(f, "max").data.item() == 5.0
    assert merge_modalities(f, "mean").data.item() == 3.0
    m = Merge("linear", 3)
    assert m(f).data.item() == 3.0


def test_merge_unknown_op():
    with pytest.raises(ConfigError):
        merge_modalities(Tensor(np.ones((1, 1, 1, 1, 2))), "median")


# -- decoder -----------------------------------------------------------------------

def pyramid(dims=(8, 16, 24, 32), B=1, h=16, seed=0, dtype=np.float64, zeros=False):
    rng = np.random.default_rng(seed)
    return [
        Tensor(np.zeros((B, c, h >> i, h >> i)) if zeros else rng.normal(size=(B, c, h >> i, h >> i)), dtype=dtype)
        for i, c in enumerate(dims)
    ]


def test_decoder_shapes():
    dec = MLPDecoder((8, 16, 24, 32), DecoderConfig(embed_dim=16), np.random.default_rng(0)).eval()
    d = dec.decode_pyramid(pyramid())
    assert d.shape == (1, 16, 16, 16)
    logits = dec.classify(d)
    assert logits.shape == (1, 5, 64, 64)
    assert logits.data.argmax(axis=1).max() < 5


def test_decoder_zero_in_zero_out():
    dec = MLPDecoder((8, 16, 24, 32), DecoderConfig(embed_dim=16), np.random.default_rng(0))
    assert not dec.decode_pyramid(pyramid(zeros=True)).data.any()


def test_classify_constant_input_constant_logits():
    dec = MLPDecoder((8, 16, 24, 32), DecoderConfig(embed_dim=16), np.random.default_rng(0)).eval()
    const = Tensor(np.broadcast_to(np.arange(16.0)[None, :, None, None], (1, 16, 4, 4)).copy())
    y = dec.classify(const).data
    np.testing.assert_allclose(y, y[:, :, :1, :1] * np.ones_like(y), rtol=1e-12)


def test_decoder_bad_geometry():
    dec = MLPDecoder((8, 16, 24, 32), DecoderConfig(embed_dim=16), np.random.default_rng(0))
    p = pyramid()
    p[2] = Tensor(np.zeros((1, 24, 3, 3)))
    with pytest.raises(DimensionError):
        dec.decode_pyramid(p)


def test_decoder_grad():
    dec = jitter(f64(MLPDecoder((4, 4, 4, 4), DecoderConfig(embed_dim=4, num_classes=3), np.random.default_rng(0))))
    feats = pyramid((4, 4, 4, 4), h=8)
    for f in feats:
        f.requires_grad = True
    assert T.grad_check(lambda: probe(dec(feats)), feats + dec.parameters(), max_entries=10) < 1e-4


def test_decoder_config_validation():
    with pytest.raises(ConfigError):
        DecoderConfig(num_classes=1)


# -- full model --------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["full", "cat_only", "mffr_only", "mfsaf_only", "unimodal:dsm"])
def test_model_modes_shapes(mode):
    m = tiny_model(mode).eval()
    out = m(inputs(len(m.modalities), B=2))
    assert out.shape == (2, 5, 64, 64)


def test_cat_only_decoder_widths():
    m = tiny_model("cat_only")
    assert [p.weight.shape[0] for p in m.decoder.proj] == [24, 48, 72, 96]
    assert m.fusion is None


def test_mode_components():
    assert not hasattr(tiny_model("mffr_only").fusion.blocks[0], "mfsaf")
    blk = tiny_model("mfsaf_only").fusion.blocks[0]
    assert not hasattr(blk, "mffr_in") and not hasattr(blk, "mffr_out")


def test_unknown_mode():
    with pytest.raises(ConfigError):
        tiny_model("unimodal:lidar")
    with pytest.raises(ConfigError):
        tiny_model("everything")


def test_model_dict_inputs_and_missing_modality():
    m = tiny_model().eval()
    xs = dict(zip(m.modalities, inputs(3)))
    assert m(xs).shape == (1, 5, 64, 64)
    del xs["dsm"]
    with pytest.raises(DimensionError):
        m(xs)


def test_eval_determinism():
    m = tiny_model().eval()
    xs = inputs(3)
    assert np.array_equal(m(xs).data, m(xs).data)


def test_same_seed_same_weights():
    a, b = tiny_model(seed=3), tiny_model(seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_logits_finite_under_random_init():
    m = tiny_model().eval()
    rng = np.random.default_rng(0)
    for i in range(100):
        x = [rng.normal(0, 3, size=(1, 3, 32, 32)).astype(np.float32) for _ in range(3)]
        assert np.isfinite(m(x).data).all()


# -- parameter counts ----------------------------------------------------------------

def test_count_parameters_breakdown_sums():
    c = count_parameters(ModelConfig())
    assert c["total"] == c["encoder"] + c["fusion"] + c["decoder"]
    assert c["total"] == LMFNet(ModelConfig()).num_parameters()


def closed_form_segformer_count(dims, depths, srs, patches, E, K, mlp=4, c_in=3):
    """Layer-by-layer parameter arithmetic for a single-branch encoder + MLP decoder."""
    total, prev = 0, c_in
    for C, d, sr, k in zip(dims, depths, srs, patches):
        total += prev * C * k * k + C + 2 * C  # patch conv + norm
        block = 2 * C + (C * C + C) + (2 * C * C + 2 * C) + (C * C + C)  # norm1, q, kv, proj
        if sr > 1:
            block += C * C * sr * sr + C + 2 * C  # reduction conv + norm
        H = mlp * C
        block += 2 * C + (C * H + H) + (9 * H + H) + (H * C + C)  # norm2, fc1, dwconv, fc2
        total += d * block + 2 * C
        prev = C
    total += sum(C * E + E for C in dims) + (4 * E * E + E) + (E * K + K)
    return total


def test_segformer_b0_baseline_count():
    c = count_parameters(ModelConfig(("rgb",), ablation_mode="unimodal:rgb"))
    expect = closed_form_segformer_count((32, 64, 160, 256), (2, 2, 2, 2), (8, 4, 2, 1), (7, 3, 3, 3), 256, 5)
    assert c["total"] == expect == 3_715_173


# -- checkpoints ---------------------------------------------------------------------

def test_array_bundle_round_trip(tmp_path):
    arrays = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5], dtype=np.float64),
        "c": np.arange(4, dtype=np.int64),
        "d": np.array([[1, 2]], dtype=np.uint8),
    }
    save_arrays(tmp_path / "x.bin", arrays, {"k": 1})
    back, meta = load_arrays(tmp_path / "x.bin")
    assert meta == {"k": 1} and list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])


def test_array_bundle_truncated(tmp_path):
    save_arrays(tmp_path / "x.bin", {"a": np.ones(10, dtype=np.float32)})
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        load_arrays(tmp_path / "x.bin")


def test_array_bundle_manifest_is_text(tmp_path):
    save_arrays(tmp_path / "x.bin", {"w": np.ones((2, 3), dtype=np.float32)})
    head = (tmp_path / "x.bin").read_bytes().split(b"END\n")[0].decode()
    assert "w\tfloat32\t2,3" in head


def test_state_dict_round_trip_and_mismatch():
    a, b = tiny_model(seed=1), tiny_model(seed=2)
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)
    with pytest.raises(DataError):
        tiny_model("cat_only").load_state_dict(a.state_dict())


def test_linear_layer_shape_contract():
    lin = Linear(3, 5, np.random.default_rng(0))
    assert lin.weight.shape == (3, 5) and lin.bias.shape == (5,)
