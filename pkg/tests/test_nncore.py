"""Tensor engine tests: op semantics, finite-difference gradients, Adam,
and checkpoint round-trips.

Every differentiable op is checked against central finite differences in
float64 (h = 1e-5, guarded relative error < 1e-4, >= 10 random trials per
layer type).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psgdetect import nncore
from psgdetect.nncore import ops
from psgdetect.nncore.gradcheck import max_relative_error

GRAD_TOL = 1e-4
TRIALS = 10


def const(x):
    return nncore.Tensor(np.asarray(x, dtype=np.float64))


def leaf(x):
    return nncore.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# op semantics


def test_conv2d_hand_example():
    x = leaf(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4))
    w = leaf(np.ones((1, 1, 1, 3)))
    b = leaf(np.zeros(1))
    out = ops.conv2d(x, w, b)
    np.testing.assert_allclose(out.data.reshape(-1), [6.0, 9.0])


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=(2, 1, 3, 5)))
    w = leaf(np.ones((1, 1, 1, 1)))
    out = ops.conv2d(x, w)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_channel_mixing_shape():
    # A (C, 1) kernel over a (1, 1, C, T) input collapses the channel rows.
    c, t = 5, 12
    x = leaf(np.random.default_rng(1).normal(size=(1, 1, c, t)))
    w = leaf(np.random.default_rng(2).normal(size=(c, 1, c, 1)))
    out = ops.conv2d(x, w)
    assert out.data.shape == (1, c, 1, t)


def test_conv2d_shape_errors_name_dimensions():
    x = leaf(np.zeros((1, 3, 4, 4)))
    w = leaf(np.zeros((2, 5, 2, 2)))
    with pytest.raises(nncore.ShapeError, match="3"):
        ops.conv2d(x, w)


def test_conv2d_kernel_too_large():
    x = leaf(np.zeros((1, 1, 2, 2)))
    w = leaf(np.zeros((1, 1, 3, 1)))
    with pytest.raises(nncore.ShapeError):
        ops.conv2d(x, w)


def test_relu_softmax_avgpool_values():
    np.testing.assert_array_equal(
        ops.relu(const([-1.0, 2.0])).data, [0.0, 2.0]
    )
    np.testing.assert_allclose(
        ops.softmax(const([0.0, 0.0])).data, [0.5, 0.5]
    )
    np.testing.assert_allclose(
        ops.avgpool1d(const([1.0, 2.0, 3.0, 4.0]), 2, 2).data, [1.5, 3.5]
    )


@given(
    st.lists(
        st.floats(min_value=-30.0, max_value=30.0, allow_nan=False),
        min_size=1,
        max_size=8,
    )
)
def test_softmax_rows_sum_to_one(values):
    out = ops.softmax(const(values)).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


@given(
    st.lists(
        st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
        min_size=1,
        max_size=16,
    )
)
def test_relu_idempotent(values):
    once = ops.relu(const(values)).data
    twice = ops.relu(const(once)).data
    np.testing.assert_array_equal(once, twice)


def test_backward_requires_scalar():
    t = leaf(np.zeros(3))
    with pytest.raises(nncore.UsageError):
        (t * 2.0).backward()


def test_linear_gradient_is_input():
    rng = np.random.default_rng(3)
    x = const(rng.normal(size=7))
    w = leaf(rng.normal(size=7))
    (w * x).sum().backward()
    np.testing.assert_allclose(w.grad, x.data)


def test_frozen_parameter_accumulates_no_gradient():
    p = nncore.Parameter("w", np.ones(4), frozen=True)
    x = leaf(np.full(4, 2.0))
    (p.tensor * x).sum().backward()
    assert p.grad is None
    assert x.grad is not None


# ---------------------------------------------------------------------------
# finite-difference gradients


def _check(build, tensors, tol=GRAD_TOL):
    err = max_relative_error(build, tensors)
    assert err < tol, f"gradient mismatch: {err:.3e}"


def test_grad_elementwise_chain():
    rng = np.random.default_rng(10)
    for _ in range(TRIALS):
        x = leaf(rng.normal(size=6) * 0.8 + 0.1)
        y = leaf(rng.uniform(0.5, 2.0, size=6))

        def build():
            z = ops.exp(x * 0.3) + ops.log(y) * ops.tanh(x)
            z = z / (ops.sigmoid(y) + 0.5) - ops.pow_const(y, 1.5)
            return z.sum()

        _check(build, [x, y])


def test_grad_abs_and_clip_away_from_kinks():
    rng = np.random.default_rng(11)
    for _ in range(TRIALS):
        vals = rng.normal(size=8)
        vals += 0.2 * np.sign(vals)  # keep |x| > h away from the kink
        x = leaf(vals)

        def build():
            return (ops.abs_(x) + ops.clip_min(x, -0.1)).sum()

        _check(build, [x])


def test_grad_relu():
    rng = np.random.default_rng(12)
    for _ in range(TRIALS):
        vals = rng.normal(size=(3, 5))
        vals += 0.2 * np.sign(vals)
        x = leaf(vals)
        weight = const(rng.normal(size=(3, 5)))

        def build():
            return (ops.relu(x) * weight).sum()

        _check(build, [x])


def test_grad_softmax():
    rng = np.random.default_rng(13)
    for _ in range(TRIALS):
        x = leaf(rng.normal(size=(4, 3)))
        weight = const(rng.normal(size=(4, 3)))

        def build():
            return (ops.softmax(x, axis=-1) * weight).sum()

        _check(build, [x])


def test_grad_matmul_and_reductions():
    rng = np.random.default_rng(14)
    for _ in range(TRIALS):
        a = leaf(rng.normal(size=(2, 3, 4)))
        b = leaf(rng.normal(size=(4, 2)))

        def build():
            out = ops.matmul(a, b)
            return out.mean(axis=(0, 1)).sum() + out.sum() * 0.1

        _check(build, [a, b])


def test_grad_conv2d_stride_and_padding():
    rng = np.random.default_rng(15)
    for _ in range(TRIALS):
        x = leaf(rng.normal(size=(2, 2, 3, 6)))
        w = leaf(rng.normal(size=(3, 2, 2, 3)))
        b = leaf(rng.normal(size=3))
        weight = None

        def build():
            nonlocal weight
            out = ops.conv2d(x, w, b, stride=(1, 2), padding=((1, 0), (1, 1)))
            if weight is None:
                weight = const(rng.normal(size=out.data.shape))
            return (out * weight).sum()

        _check(build, [x, w, b])


def test_grad_avgpool_overlapping():
    rng = np.random.default_rng(16)
    for _ in range(TRIALS):
        x = leaf(rng.normal(size=(2, 3, 9)))
        weight = const(rng.normal(size=(2, 3, 4)))

        def build():
            return (ops.avgpool1d(x, 3, 2) * weight).sum()

        _check(build, [x])


def test_grad_getitem_slice_and_fancy():
    rng = np.random.default_rng(17)
    idx = np.array([0, 2, 2, 3])
    for _ in range(TRIALS):
        x = leaf(rng.normal(size=(4, 5)))

        def build():
            return x[1:3, ::2].sum() + (x[idx] * 2.0).sum()

        _check(build, [x])


def test_grad_stack_and_transpose():
    rng = np.random.default_rng(18)
    for _ in range(TRIALS):
        a = leaf(rng.normal(size=(2, 3)))
        b = leaf(rng.normal(size=(2, 3)))

        def build():
            s = ops.stack([a, b, a], axis=1)
            return (ops.transpose(s, (2, 0, 1)) * 0.5).sum() + (a * b).sum()

        _check(build, [a, b])


def test_grad_batchnorm_train_mode():
    rng = np.random.default_rng(19)
    for trial in range(TRIALS):
        bn = nncore.BatchNorm2d(f"bn{trial}", 3, dtype=np.float64)
        x = leaf(rng.normal(size=(2, 3, 2, 4)))
        weight = const(rng.normal(size=(2, 3, 2, 4)))

        def build():
            return (bn(x, training=True) * weight).sum()

        _check(build, [x, bn.gamma.tensor, bn.beta.tensor])


def test_grad_bigru_all_parameters():
    rng = np.random.default_rng(20)
    for trial in range(TRIALS):
        gru = nncore.BiGRU(f"g{trial}", 2, 2, seed=trial, dtype=np.float64)
        x = leaf(rng.normal(size=(2, 2, 3)))
        weight = const(rng.normal(size=(2, 2, 2, 3)))

        def build():
            return (gru(x) * weight).sum()

        _check(build, [x] + [p.tensor for p in gru.parameters()])


# ---------------------------------------------------------------------------
# layers


def test_batchnorm_hand_values():
    bn = nncore.BatchNorm2d("bn", 1, dtype=np.float64)
    x = leaf(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1))
    out = bn(x, training=True)
    np.testing.assert_allclose(
        out.data.reshape(-1), [-1.22474, 0.0, 1.22474], atol=1e-4
    )


def test_batchnorm_affine_inversion():
    rng = np.random.default_rng(21)
    vals = rng.normal(loc=3.0, scale=2.0, size=(4, 1, 2, 5))
    bn = nncore.BatchNorm2d("bn", 1, dtype=np.float64)
    bn.gamma.tensor.data[:] = vals.std()
    bn.beta.tensor.data[:] = vals.mean()
    out = bn(const(vals), training=True)
    np.testing.assert_allclose(out.data, vals, atol=1e-3)


def test_batchnorm_eval_identity_with_unit_stats():
    bn = nncore.BatchNorm2d("bn", 2, dtype=np.float64)
    bn.initialized = True  # running stats still (0, 1)
    x = const(np.random.default_rng(22).normal(size=(3, 2, 1, 4)))
    out = bn(x, training=False)
    # Identity up to the 1/sqrt(1 + eps) factor, ~5e-6 relative.
    np.testing.assert_allclose(out.data, x.data, rtol=1e-4, atol=1e-5)


def test_batchnorm_eval_before_any_training_is_an_error():
    bn = nncore.BatchNorm2d("bn", 2, dtype=np.float64)
    with pytest.raises(nncore.StateError):
        bn(const(np.zeros((1, 2, 1, 3))), training=False)


def test_batchnorm_running_stats_update():
    bn = nncore.BatchNorm2d("bn", 1, momentum=0.1, dtype=np.float64)
    x = const(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1))
    bn(x, training=True)
    np.testing.assert_allclose(bn.running_mean, [0.2])  # 0.9*0 + 0.1*2
    np.testing.assert_allclose(bn.running_var, [0.9 + 0.1 * (2.0 / 3.0)])


def _zero_gru(n_in, hidden):
    gru = nncore.BiGRU("g", n_in, hidden, seed=0, dtype=np.float64)
    for p in gru.parameters():
        p.tensor.data[:] = 0.0
    return gru


def test_bigru_zero_weights_give_zero_output():
    gru = _zero_gru(3, 4)
    x = const(np.random.default_rng(23).normal(size=(2, 3, 6)))
    out = gru(x)
    assert out.data.shape == (2, 4, 2, 6)
    np.testing.assert_array_equal(out.data, 0.0)


def _share_directions(gru):
    fwd, bwd = gru._weights["fwd"], gru._weights["bwd"]
    for key in fwd:
        bwd[key].tensor.data[:] = fwd[key].tensor.data


def test_bigru_time_reversal_swaps_streams():
    gru = nncore.BiGRU("g", 2, 3, seed=7, dtype=np.float64)
    _share_directions(gru)
    x = np.random.default_rng(24).normal(size=(2, 2, 5))
    fwd_rev = gru(const(x[:, :, ::-1].copy())).data
    base = gru(const(x)).data
    np.testing.assert_allclose(fwd_rev[:, :, 0, ::-1], base[:, :, 1, :], atol=1e-12)
    np.testing.assert_allclose(fwd_rev[:, :, 1, ::-1], base[:, :, 0, :], atol=1e-12)


def test_bigru_single_step_directions_agree():
    gru = nncore.BiGRU("g", 3, 2, seed=8, dtype=np.float64)
    _share_directions(gru)
    out = gru(const(np.random.default_rng(25).normal(size=(1, 3, 1)))).data
    np.testing.assert_allclose(out[:, :, 0, :], out[:, :, 1, :], atol=1e-12)


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_closed_form():
    p = nncore.Parameter("w", np.full(3, 5.0))
    p.tensor.grad = np.ones(3)
    cfg = nncore.OptimizerConfig()
    nncore.adam_step([p], {}, cfg, 1)
    np.testing.assert_allclose(p.data, 5.0 - 1e-3, atol=1e-6)


def test_adam_zero_gradient_is_noop():
    p = nncore.Parameter("w", np.arange(4.0))
    p.tensor.grad = np.zeros(4)
    before = p.data.copy()
    states = {}
    nncore.adam_step([p], states, nncore.OptimizerConfig(), 1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_skips_frozen_even_with_stale_grad():
    p = nncore.Parameter("w", np.ones(2))
    p.tensor.grad = np.ones(2)
    p.frozen = True
    p.tensor.grad = np.ones(2)  # simulate a stale gradient
    before = p.data.copy()
    nncore.adam_step([p], {}, nncore.OptimizerConfig(), 1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_rejects_nonpositive_step_index():
    p = nncore.Parameter("w", np.ones(1))
    with pytest.raises(nncore.UsageError):
        nncore.adam_step([p], {}, nncore.OptimizerConfig(), 0)


def test_adam_moments_persist_across_steps():
    p = nncore.Parameter("w", np.zeros(1))
    opt = nncore.Adam([p], nncore.OptimizerConfig(learning_rate=0.1))
    for _ in range(3):
        p.tensor.grad = np.ones(1)
        opt.step()
    # With constant gradient every bias-corrected step is exactly -lr.
    np.testing.assert_allclose(p.data, [-0.3], atol=1e-9)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        nncore.OptimizerConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        nncore.OptimizerConfig(beta1=1.0)


def test_adam_converges_on_quadratic():
    rng = np.random.default_rng(26)
    target = rng.normal(size=5)
    p = nncore.Parameter("w", np.zeros(5))
    opt = nncore.Adam([p], nncore.OptimizerConfig(learning_rate=0.05))
    for _ in range(400):
        opt.zero_grad()
        diff = p.tensor - nncore.Tensor(target)
        (diff * diff).sum().backward()
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-3)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(27)
    entries = [
        nncore.CheckpointEntry("a.weight", "param", rng.normal(size=(3, 2)).astype(np.float32)),
        nncore.CheckpointEntry("a.bias", "param", rng.normal(size=3).astype(np.float32), frozen=True),
        nncore.CheckpointEntry("bn.running_mean", "buffer", rng.normal(size=3).astype(np.float32)),
    ]
    path = tmp_path / "model.ckpt"
    nncore.save_checkpoint(
        path,
        entries,
        config={"C": 5},
        provenance={"source": "abc123"},
        extra={"step": 7},
    )
    ck = nncore.load_checkpoint(path)
    assert ck.config == {"C": 5}
    assert ck.provenance == {"source": "abc123"}
    assert ck.extra == {"step": 7}
    for e in entries:
        got = ck.entries[e.name]
        assert got.kind == e.kind
        assert got.frozen == e.frozen
        assert got.array.dtype == np.float32
        assert got.array.tobytes() == e.array.tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(nncore.CheckpointFormatError):
        nncore.load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "v9.ckpt"
    nncore.save_checkpoint(path, [])
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(nncore.CheckpointVersionError):
        nncore.load_checkpoint(path)


def test_checkpoint_detects_truncation(tmp_path):
    path = tmp_path / "trunc.ckpt"
    nncore.save_checkpoint(
        path,
        [nncore.CheckpointEntry("w", "param", np.ones(8, dtype=np.float32))],
    )
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(nncore.CheckpointFormatError, match="truncated"):
        nncore.load_checkpoint(path)


def test_checkpoint_rejects_duplicate_names(tmp_path):
    with pytest.raises(ValueError):
        nncore.save_checkpoint(
            tmp_path / "dup.ckpt",
            [
                nncore.CheckpointEntry("w", "param", np.ones(1, dtype=np.float32)),
                nncore.CheckpointEntry("w", "param", np.ones(1, dtype=np.float32)),
            ],
        )


def test_float32_training_dtype_is_preserved():
    x = nncore.Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    out = ((x * 2.0 + 1.0) / 3.0).sum()
    assert out.data.dtype == np.float32
    out.backward()
    assert x.grad.dtype == np.float32
