import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from segfusion.tensor_core import (
    DegenerateStatsError,
    DimensionError,
    FormatError,
    OptimState,
    WindowError,
    adain,
    adam_step,
    adaptive_avg_pool1d,
    adaptive_avg_pool2d,
    conv1d_forward,
    cosine_lr,
    grad_check,
    linear_forward,
    pack_tensor,
    unpack_tensor,
)
from segfusion.tensor_core import autograd as ag
from segfusion.tensor_core import optim
from segfusion.tensor_core.gradcheck import ContractError, analytic_grad

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# ------------------------------------------------------------------ linear


def test_linear_identity():
    assert linear_forward([1, 2], np.eye(2), np.zeros(2)).tolist() == [1, 2]


def test_linear_zero_weights_pass_bias():
    assert linear_forward([1, 2], np.zeros((2, 2)), [3, 4]).tolist() == [3, 4]


def test_linear_hand_matmul():
    assert linear_forward([1, 2], [[1, 0], [1, 1]], [0, 1]).tolist() == [3, 3]


def test_linear_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(3,\).*\(2, 2\)"):
        linear_forward([1, 2, 3], np.eye(2), np.zeros(2))


# ------------------------------------------------------------------ conv1d


def test_conv1d_identity_kernel():
    assert conv1d_forward([[1, 2, 3]], [[[1]]], [0]).tolist() == [[1, 2, 3]]


def test_conv1d_hand_window():
    assert conv1d_forward([[1, 1, 1]], [[[1, 1]]], [0]).tolist() == [[2, 2]]


def test_conv1d_zero_kernel_passes_bias():
    assert conv1d_forward([[1, 2]], [[[0]]], [5]).tolist() == [[5, 5]]


def test_conv1d_window_too_wide():
    with pytest.raises(WindowError):
        conv1d_forward([[1, 2]], np.ones((1, 1, 5)), [0], pad=1)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 2)])
def test_conv1d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, K, b = rng.normal(size=(3, 11)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    got = conv1d_forward(x, K, b, stride, pad)
    want = oracles.conv1d(x, K, b, stride, pad)
    assert got.shape == (4, (11 + 2 * pad - 3) // stride + 1)
    np.testing.assert_allclose(got, want, atol=1e-12)


# ------------------------------------------------------------------ adain


def test_adain_self_style_identity():
    x = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_allclose(adain(x, x, eps=1e-12), x, atol=1e-6)


def test_adain_constant_content_gives_style_mean():
    rng = np.random.default_rng(1)
    content = np.tile(rng.normal(size=(1, 4)), (5, 1))
    style = rng.normal(size=(5, 4))
    out = adain(content, style)
    np.testing.assert_allclose(out, np.broadcast_to(style.mean(axis=0), out.shape), atol=1e-12)


def test_adain_hand_stats():
    np.testing.assert_allclose(adain([[0.0], [2.0]], [[10.0], [14.0]]), [[10], [14]], atol=1e-4)


def test_adain_needs_two_tokens():
    with pytest.raises(DegenerateStatsError):
        adain([[1.0, 2.0]], [[3.0, 4.0]])


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 7), st.integers(1, 4)), elements=finite),
    st.data(),
)
def test_adain_matches_style_mean(content, data):
    style = data.draw(arrays(np.float64, content.shape, elements=finite))
    out = adain(content, style)
    assert np.isfinite(out).all()
    scale = 1.0 + np.abs(style).max()
    np.testing.assert_allclose(out.mean(axis=0), style.mean(axis=0), atol=1e-9 * scale)


# ------------------------------------------------------------------ pooling


def test_pool1d_identity_and_global():
    x = np.arange(10.0).reshape(2, 5)
    np.testing.assert_array_equal(adaptive_avg_pool1d(x, 5), x)
    np.testing.assert_allclose(adaptive_avg_pool1d(x, 1), x.mean(axis=1, keepdims=True))


def test_pool1d_floor_ceil_windows():
    np.testing.assert_allclose(adaptive_avg_pool1d([[1, 2, 3, 4, 5]], 3), [[1.5, 3, 4.5]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_pool1d_preserves_mean_when_divisible(out_len, mult, seed):
    x = np.random.default_rng(seed).normal(size=(3, out_len * mult))
    np.testing.assert_allclose(adaptive_avg_pool1d(x, out_len).mean(axis=1), x.mean(axis=1), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_pool1d_matches_oracle(L, out_len, seed):
    x = np.random.default_rng(seed).normal(size=(2, L))
    np.testing.assert_allclose(adaptive_avg_pool1d(x, out_len), oracles.avg_pool1d(x, out_len), atol=1e-12)


@pytest.mark.parametrize("H,g", [(8, 4), (7, 3), (32, 8), (5, 5)])
def test_pool2d_matches_oracle(H, g):
    x = np.random.default_rng(H).integers(0, 2, size=(2, 3, H, H)).astype(np.uint8)
    want = oracles.avg_pool2d(x.astype(float), g)
    np.testing.assert_allclose(adaptive_avg_pool2d(x, g), want, atol=1e-12)
    np.testing.assert_allclose(adaptive_avg_pool2d(x.astype(float), g), want, atol=1e-12)


def test_forward_ops_are_bit_deterministic():
    rng = np.random.default_rng(3)
    x, K, b = rng.normal(size=(2, 3, 9)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    a, s = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    for f in (lambda: conv1d_forward(x, K, b, 1, 1), lambda: adain(a, s), lambda: adaptive_avg_pool1d(x, 4)):
        assert f().tobytes() == f().tobytes()


# ------------------------------------------------------------------ gradient checks


def _ce_target(shape, seed=0):
    return np.random.default_rng(seed).integers(0, shape[-1], size=int(np.prod(shape[:-1])))


def test_grad_check_linear_3x3():
    rng = np.random.default_rng(0)
    x, W, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=3)
    tgt = _ce_target((3, 3))
    rep = grad_check(lambda t, n: ag.softmax_cross_entropy(ag.linear(n["x"], n["W"], n["b"]), tgt),
                     {"x": x, "W": W, "b": b})
    assert rep.passed and rep.max_error < 1e-4 and rep.n_checked == 9 + 9 + 3


def test_grad_check_adain_content_path():
    rng = np.random.default_rng(1)
    style, w = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    rep = grad_check(lambda t, n: ag.sum_all(ag.mul(ag.adain(n["c"], t.const(style)), w)),
                     {"c": rng.normal(size=(4, 2))})
    assert rep.passed, str(rep)


def test_grad_check_flags_doubled_gradient():
    rng = np.random.default_rng(0)
    x, W, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=3)
    tgt = _ce_target((3, 3))

    def fn(t, n):
        return ag.softmax_cross_entropy(ag.linear(n["x"], n["W"], n["b"]), tgt)

    params = {"x": x, "W": W, "b": b}
    good = analytic_grad(fn, params)
    rep = grad_check(fn, params, analytic={k: 2 * v for k, v in good.items()})
    assert not rep.passed and rep.failures
    # error is |a - n| / max(1, |n|) = min(|n|, 1) when a = 2n
    expect = max(min(abs(v).max(), 1.0) for v in good.values())
    assert rep.max_error == pytest.approx(expect, rel=1e-5)
    name, idx = rep.worst_param, rep.worst_index
    assert abs(2 * good[name][idx] - good[name][idx]) / abs(2 * good[name][idx]) == pytest.approx(0.5)


def test_grad_check_rejects_non_scalar_loss():
    with pytest.raises(ContractError):
        grad_check(lambda t, n: ag.scale(n["x"], 2.0), {"x": np.ones(3)})


@pytest.mark.parametrize("op", ["conv1d", "pool1d", "pool2d", "concat", "weighted_add", "gelu", "mean"])
def test_grad_check_ops(op):
    rng = np.random.default_rng(7)
    w = rng.normal(size=(2, 3, 4))
    if op == "conv1d":
        fn = lambda t, n: ag.sum_all(ag.mul(ag.conv1d(n["x"], n["K"], n["b"], stride=2, pad=1), w[..., :3]))
        params = {"x": rng.normal(size=(2, 2, 6)), "K": rng.normal(size=(3, 2, 3)), "b": rng.normal(size=3)}
    elif op == "pool1d":
        fn = lambda t, n: ag.sum_all(ag.mul(ag.adaptive_avg_pool1d(n["x"], 4), w))
        params = {"x": rng.normal(size=(2, 3, 7))}
    elif op == "pool2d":
        fn = lambda t, n: ag.sum_all(ag.mul(ag.adaptive_avg_pool2d(n["x"], 3, 4), w))
        params = {"x": rng.normal(size=(2, 5, 9))}
    elif op == "concat":
        fn = lambda t, n: ag.sum_all(ag.mul(ag.concat([n["a"], n["b"]], axis=2), w))
        params = {"a": rng.normal(size=(2, 3, 1)), "b": rng.normal(size=(2, 3, 3))}
    elif op == "weighted_add":
        fn = lambda t, n: ag.sum_all(ag.mul(ag.weighted_add(n["a"], n["alpha"], n["e"]), w))
        params = {"a": rng.normal(size=w.shape), "alpha": np.array(-0.7), "e": rng.normal(size=w.shape)}
    elif op == "gelu":
        fn = lambda t, n: ag.sum_all(ag.mul(ag.gelu(n["x"]), w))
        params = {"x": rng.normal(size=w.shape) * 2}
    else:
        fn = lambda t, n: ag.sum_all(ag.mul(ag.mean(n["x"], axis=1), w[:, 0]))
        params = {"x": rng.normal(size=(2, 5, 4))}
    rep = grad_check(fn, params)
    assert rep.passed, str(rep)


def test_weighted_add_alpha_gradient_closed_form():
    rng = np.random.default_rng(2)
    a, e, gout = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    tape = ag.Tape()
    n = {k: tape.param(v, k) for k, v in {"a": a, "alpha": np.array(0.4), "e": e}.items()}
    loss = ag.sum_all(ag.mul(ag.weighted_add(n["a"], n["alpha"], n["e"]), gout))
    grads = tape.backward(loss)
    assert grads["alpha"] == pytest.approx(float((e * gout).sum()), abs=1e-12)
    assert grads["a"].shape == a.shape and grads["e"].shape == e.shape


# ------------------------------------------------------------------ optimiser


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 0.03, 2e-5) == 0
    assert cosine_lr(3, 100, 0.03, 2e-5) == pytest.approx(2e-5)
    assert cosine_lr(100, 100, 0.03, 2e-5) == pytest.approx(0.0, abs=1e-20)


def test_cosine_lr_shape():
    lrs = [cosine_lr(s, 200, 0.05, 1.0) for s in range(201)]
    assert lrs[:11] == pytest.approx([i / 10 for i in range(11)])
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[105] == pytest.approx(0.5 * (1 + math.cos(math.pi * 95 / 190)))


def test_cosine_lr_clamps_past_end(monkeypatch):
    monkeypatch.setattr(optim, "_warned_past_end", False)
    with pytest.warns(UserWarning):
        assert cosine_lr(101, 100, 0.03, 1.0) == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert cosine_lr(150, 100, 0.03, 1.0) == 0.0


def test_adam_matches_reference_update():
    p = {"w": np.array([1.0, -2.0])}
    state = OptimState(base_lr=0.1, warmup_ratio=0.0, total_steps=10)
    g = np.array([0.5, -0.25])
    lr = adam_step(state, p, {"w": g})
    # first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0]) - lr * g / (np.abs(g) + 1e-8))
    assert state.step == 1 and state.m["w"].shape == (2,)


def test_adam_skips_frozen_params():
    p = {"a": np.ones(3), "b": np.ones(3)}
    state = OptimState(base_lr=0.1, warmup_ratio=0.0, total_steps=5)
    adam_step(state, p, {"a": np.ones(3), "b": np.ones(3)}, trainable={"a": True, "b": False})
    assert (p["b"] == 1).all() and (p["a"] < 1).all()


# ------------------------------------------------------------------ TNSR


def test_tnsr_v1_layout_and_f32_payload():
    buf = pack_tensor(np.array([[1.5, -2.0, 3.25]]))
    assert buf[:4] == b"TNSR"
    assert buf[4:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert buf[16:20] == (3).to_bytes(4, "little")
    assert np.frombuffer(buf[20:], "<f4").tolist() == [1.5, -2.0, 3.25]
    arr, end = unpack_tensor(buf)
    assert arr.dtype == np.float64 and arr.tolist() == [[1.5, -2.0, 3.25]] and end == len(buf)


def test_tnsr_v2_bit_exact():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    arr, _ = unpack_tensor(pack_tensor(x, version=2))
    assert arr.tobytes() == x.tobytes()


@pytest.mark.parametrize("cut,offset", [(2, 0), (10, 10), (22, 22)])
def test_tnsr_truncation_reports_offset(cut, offset):
    buf = pack_tensor(np.ones((2, 2)))[:cut]
    with pytest.raises(FormatError) as e:
        unpack_tensor(buf)
    assert e.value.offset == offset
