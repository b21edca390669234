"""Detection network tests: configuration algebra, forward shapes, transfer
surgery, freeze policies, and an end-to-end finite-difference gradient check
on a tiny geometry.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psgdetect import model as M
from psgdetect import nncore
from psgdetect.nncore import ops
from psgdetect.nncore.gradcheck import max_relative_error


def tiny_config(**overrides):
    base = dict(
        in_channels=2,
        segment_samples=64,
        base_maps=2,
        kernel_size=3,
        stride=2,
        n_blocks=2,
        n_classes=1,
        windows_per_anchor=1,
        anchor_pool=2,
    )
    base.update(overrides)
    return M.ModelConfig(**base)


# ---------------------------------------------------------------------------
# configuration algebra


def test_full_scale_geometry():
    cfg = M.ModelConfig(
        in_channels=5,
        segment_samples=15360,
        base_maps=4,
        kernel_size=3,
        stride=2,
        n_blocks=6,
        anchor_pool=15,
    )
    assert cfg.decimated_len == 240
    assert cfg.feature_maps == 256
    assert cfg.n_anchor_positions == 16
    assert cfg.n_windows == 16


def test_indivisible_segment_rejected():
    with pytest.raises(M.ConfigurationError):
        M.ModelConfig(in_channels=2, segment_samples=100, stride=2, n_blocks=6)


def test_indivisible_anchor_pool_rejected():
    with pytest.raises(M.ConfigurationError):
        tiny_config(anchor_pool=3)  # decimated length 16 is not divisible


def test_kernel_smaller_than_stride_rejected():
    with pytest.raises(M.ConfigurationError):
        tiny_config(kernel_size=1, stride=2)


@settings(max_examples=15, deadline=None)
@given(
    in_channels=st.integers(1, 3),
    base_maps=st.integers(1, 2),
    n_blocks=st.integers(1, 3),
    stride=st.integers(1, 2),
    kernel_extra=st.integers(0, 2),
    anchor_pool=st.integers(1, 3),
    mult=st.integers(1, 2),
    n_classes=st.integers(1, 2),
    windows=st.integers(1, 2),
)
def test_shape_contract_property(
    in_channels, base_maps, n_blocks, stride, kernel_extra, anchor_pool, mult, n_classes, windows
):
    segment = stride ** n_blocks * anchor_pool * mult
    cfg = M.ModelConfig(
        in_channels=in_channels,
        segment_samples=segment,
        base_maps=base_maps,
        kernel_size=stride + kernel_extra,
        stride=stride,
        n_blocks=n_blocks,
        n_classes=n_classes,
        windows_per_anchor=windows,
        anchor_pool=anchor_pool,
    )
    assert cfg.decimated_len == anchor_pool * mult
    assert cfg.feature_maps == base_maps * 2 ** n_blocks
    net = M.build(cfg, rng_seed=0, dtype=np.float64)
    x = nncore.Tensor(
        np.random.default_rng(0).normal(size=(2, 1, in_channels, segment))
    )
    out = net.forward(x, training=True)
    assert out.p.data.shape == (2, cfg.n_windows, n_classes + 1)
    assert out.y.data.shape == (2, cfg.n_windows, 2)
    np.testing.assert_allclose(out.p.data.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# forward behavior


def test_forward_full_scale_shapes():
    cfg = M.ModelConfig(in_channels=5, segment_samples=15360, anchor_pool=15)
    net = M.build(cfg, rng_seed=3)
    x = nncore.Tensor(
        np.random.default_rng(4).normal(size=(1, 1, 5, 15360)).astype(np.float32)
    )
    out = net.forward(x, training=True)
    assert out.p.data.shape == (1, 16, 2)
    assert out.y.data.shape == (1, 16, 2)
    np.testing.assert_allclose(out.p.data.sum(axis=-1), 1.0, atol=1e-6)


def test_single_channel_config_mixing_kernel():
    net = M.build(tiny_config(in_channels=1), rng_seed=0)
    assert net.mix.weight.data.shape == (1, 1, 1, 1)
    x = nncore.Tensor(np.ones((1, 1, 1, 64), dtype=np.float32))
    out = net.forward(x, training=True)
    assert out.p.data.shape == (1, 8, 2)


def test_zero_input_zero_heads_give_uniform_probabilities():
    net = M.build(tiny_config(), rng_seed=1)
    for p in net.clf_head.parameters():
        p.tensor.data[:] = 0.0
    x = nncore.Tensor(np.zeros((1, 1, 2, 64), dtype=np.float32))
    out = net.forward(x, training=True)
    np.testing.assert_array_equal(out.p.data, 0.5)


def test_wrong_input_shape_raises():
    net = M.build(tiny_config(), rng_seed=0)
    with pytest.raises(nncore.ShapeError, match="64"):
        net.forward(nncore.Tensor(np.zeros((1, 1, 2, 32), dtype=np.float32)))


class _IdentityRec:
    """Stands in for the recurrent block: copies input to both directions."""

    def __call__(self, x):
        return ops.stack([x, x], axis=2)

    def parameters(self):
        return []


def test_cross_anchor_coupling_comes_only_from_recurrent_block():
    # Two anchors; same eval-mode stats; perturb only anchor 0's span.
    cfg = M.ModelConfig(
        in_channels=2,
        segment_samples=1920,
        base_maps=1,
        n_blocks=6,
        anchor_pool=15,
    )
    assert cfg.n_anchor_positions == 2
    rng = np.random.default_rng(7)
    x1 = rng.normal(size=(1, 1, 2, 1920)).astype(np.float32)
    x2 = x1.copy()
    x2[..., :700] += rng.normal(size=(1, 1, 2, 700)).astype(np.float32)

    def fresh(identity_rec):
        net = M.build(cfg, rng_seed=9)
        for bn in net.batchnorms():
            bn.initialized = True  # eval off the default (0, 1) stats
        if identity_rec:
            net.rec = _IdentityRec()
        return net

    net = fresh(identity_rec=True)
    far1 = net.forward(nncore.Tensor(x1)).p.data[0, 1]
    far2 = net.forward(nncore.Tensor(x2)).p.data[0, 1]
    np.testing.assert_array_equal(far1, far2)

    net = fresh(identity_rec=False)
    far1 = net.forward(nncore.Tensor(x1)).p.data[0, 1]
    far2 = net.forward(nncore.Tensor(x2)).p.data[0, 1]
    assert np.any(far1 != far2)


# ---------------------------------------------------------------------------
# surgery and freeze policies


def _train_once(net, x_shape, seed=0):
    rng = np.random.default_rng(seed)
    x = nncore.Tensor(rng.normal(size=x_shape).astype(np.float32))
    out = net.forward(x, training=True)
    return out


def _param_bytes(net, skip_blocks=()):
    out = {}
    for name, layers in net.named_blocks().items():
        if name in skip_blocks:
            continue
        for layer in layers:
            for p in layer.parameters():
                out[p.name] = p.data.tobytes()
            if isinstance(layer, nncore.BatchNorm2d):
                for bname, buf in layer.buffers():
                    out[bname] = buf.tobytes()
    return out


def test_surgery_preserves_downstream_bit_exactly():
    net = M.build(tiny_config(in_channels=2), rng_seed=5)
    _train_once(net, (2, 1, 2, 64))  # populate BN running stats
    single = M.replace_input_layers(net, 1, rng_seed=11)
    assert single.config.in_channels == 1
    before = _param_bytes(net, skip_blocks=M.DetectionModel.INPUT_BLOCKS)
    after = _param_bytes(single, skip_blocks=M.DetectionModel.INPUT_BLOCKS)
    assert before == after
    # Replaced layers are rebuilt for the new channel count and reset stats.
    assert single.mix.weight.data.shape == (1, 1, 1, 1)
    bn1 = single.blocks[0][1]
    assert not bn1.initialized
    np.testing.assert_array_equal(bn1.running_mean, 0.0)
    out = single.forward(
        nncore.Tensor(np.zeros((1, 1, 1, 64), dtype=np.float32)), training=True
    )
    assert out.p.data.shape == (1, 8, 2)


def test_self_surgery_reinitializes_input_layers_only():
    net = M.build(tiny_config(in_channels=2), rng_seed=5)
    again = M.replace_input_layers(net, 2, rng_seed=6)
    assert again.mix.weight.data.tobytes() != net.mix.weight.data.tobytes()
    assert (
        _param_bytes(again, skip_blocks=M.DetectionModel.INPUT_BLOCKS)
        == _param_bytes(net, skip_blocks=M.DetectionModel.INPUT_BLOCKS)
    )


def test_surgery_records_lineage():
    net = M.build(tiny_config(in_channels=2), rng_seed=5)
    net.provenance = {"checkpoint_id": "cafe0123"}
    single = M.replace_input_layers(net, 1, rng_seed=0)
    assert single.provenance["surgery"]["source"] == "cafe0123"
    assert single.provenance["surgery"]["from_channels"] == 2


def test_input_only_policy_census():
    cfg = tiny_config(in_channels=3, base_maps=2)
    net = M.build(cfg, rng_seed=0)
    net.set_trainable("input_layers_only")
    c, f1, k = 3, 4, cfg.kernel_size  # first block has 2*base_maps maps
    expected = (c * c + c) + (f1 * c * k + f1) + 2 * f1
    assert net.trainable_parameter_count() == expected
    net.set_trainable("all")
    assert all(not p.frozen for p in net.parameters())
    assert net.trainable_parameter_count() == sum(
        p.data.size for p in net.parameters()
    )


def test_frozen_trunk_unchanged_by_training_step():
    net = M.build(tiny_config(), rng_seed=2)
    _train_once(net, (2, 1, 2, 64))  # initialize BN stats
    net.set_trainable("input_layers_only")
    before = _param_bytes(net, skip_blocks=M.DetectionModel.INPUT_BLOCKS)
    opt = nncore.Adam(net.parameters())
    x = nncore.Tensor(np.random.default_rng(1).normal(size=(2, 1, 2, 64)).astype(np.float32))
    out = net.forward(x, training=True)
    loss = (out.p * out.p).sum() + (out.y * out.y).sum()
    opt.zero_grad()
    loss.backward()
    opt.step()
    after = _param_bytes(net, skip_blocks=M.DetectionModel.INPUT_BLOCKS)
    assert before == after
    # and the input layers did move
    assert any(
        p.grad is not None and np.any(p.grad != 0)
        for p in net.mix.parameters()
    )


def test_frozen_batchnorm_runs_eval_during_training():
    net = M.build(tiny_config(), rng_seed=2)
    _train_once(net, (2, 1, 2, 64))
    net.set_trainable("input_layers_only")
    frozen_bn = net.blocks[1][1]
    stats_before = frozen_bn.running_mean.copy()
    _train_once(net, (2, 1, 2, 64), seed=3)
    np.testing.assert_array_equal(frozen_bn.running_mean, stats_before)


# ---------------------------------------------------------------------------
# end-to-end gradient check


def test_end_to_end_gradient_check():
    cfg = tiny_config()
    net = M.build(cfg, rng_seed=13, dtype=np.float64)
    rng = np.random.default_rng(14)
    x = nncore.Tensor(rng.normal(size=(1, 1, 2, 64)), requires_grad=True)
    wp = nncore.Tensor(rng.normal(size=(1, cfg.n_windows, 2)))
    wy = nncore.Tensor(rng.normal(size=(1, cfg.n_windows, 2)))

    def build():
        out = net.forward(x, training=True)
        return (out.p * wp).sum() + (out.y * wy).sum()

    err = max_relative_error(
        build,
        [x] + [p.tensor for p in net.parameters()],
        samples_per_tensor=4,
        seed=99,
    )
    assert err < 1e-3, f"end-to-end gradient mismatch: {err:.3e}"


# ---------------------------------------------------------------------------
# checkpoints


def test_model_checkpoint_roundtrip_bit_exact(tmp_path):
    net = M.build(tiny_config(), rng_seed=21)
    _train_once(net, (2, 1, 2, 64))
    net.set_trainable("input_layers_only")
    net.provenance = {"experiment": "demo"}
    path = tmp_path / "net.ckpt"
    M.save_model(net, path, extra={"step": 12})
    loaded = M.load_model(path)
    assert loaded.config == net.config
    assert loaded.provenance == {"experiment": "demo"}
    assert _param_bytes(loaded) == _param_bytes(net)
    for p_src, p_dst in zip(net.parameters(), loaded.parameters()):
        assert p_src.frozen == p_dst.frozen
    for bn in loaded.batchnorms():
        assert bn.initialized


def test_load_model_rejects_missing_parameter(tmp_path):
    net = M.build(tiny_config(), rng_seed=21)
    entries = [
        nncore.CheckpointEntry(p.name, "param", p.data, frozen=p.frozen)
        for p in net.parameters()
    ][:-1]
    nncore.save_checkpoint(
        tmp_path / "short.ckpt",
        entries,
        config={
            "in_channels": 2,
            "segment_samples": 64,
            "base_maps": 2,
            "kernel_size": 3,
            "stride": 2,
            "n_blocks": 2,
            "n_classes": 1,
            "windows_per_anchor": 1,
            "anchor_pool": 2,
        },
    )
    with pytest.raises(nncore.CheckpointFormatError, match="missing"):
        M.load_model(tmp_path / "short.ckpt")


def test_checkpoint_id_is_stable(tmp_path):
    net = M.build(tiny_config(), rng_seed=21)
    M.save_model(net, tmp_path / "a.ckpt")
    M.save_model(net, tmp_path / "b.ckpt")
    assert M.checkpoint_id(tmp_path / "a.ckpt") == M.checkpoint_id(tmp_path / "b.ckpt")
    assert len(M.checkpoint_id(tmp_path / "a.ckpt")) == 16
