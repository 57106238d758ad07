import numpy as np
import pytest

from narrowlane import network as N


def tiny_stack(seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (4, 84, 84) if batch is None else (batch, 4, 84, 84)
    return (rng.random(shape) < 0.1).astype(np.uint8)


# -- conv layer against a loop oracle ----------------------------------------


def _conv_ref(x, w, b, stride):
    bsz, _, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((bsz, cout, oh, ow))
    for bi in range(bsz):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = x[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[bi, co, i, j] = np.sum(patch * w[co]) + b[co]
    return out


def test_conv_forward_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    pre, _ = N._conv_forward(x, w, b, stride=2)
    np.testing.assert_allclose(pre, _conv_ref(x, w, b, 2), atol=1e-12)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    probe = rng.standard_normal((2, 3, 3, 3))  # stride 2 -> 3x3 output

    def loss(xx, ww, bb):
        pre, _ = N._conv_forward(xx, ww, bb, 2)
        return float(np.sum(pre * probe))

    pre, cols = N._conv_forward(x, w, b, 2)
    dw, db, dx = N._conv_backward(probe, cols, w, x.shape, 2)
    eps = 1e-6
    for arr, grad in ((x, dx), (w, dw), (b, db)):
        flat = arr.ravel()
        gflat = grad.ravel()
        for idx in rng.choice(flat.size, size=min(12, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss(x, w, b)
            flat[idx] = orig - eps
            down = loss(x, w, b)
            flat[idx] = orig
            num = (up - down) / (2 * eps)
            assert num == pytest.approx(gflat[idx], rel=1e-5, abs=1e-7)


# -- network forward -----------------------------------------------------------


def test_parameter_count_and_shapes():
    params = N.init_params(0)
    assert set(params) == set(N.PARAM_SHAPES)
    for k, v in params.items():
        assert v.shape == N.PARAM_SHAPES[k]
    assert N.parameter_count() == 1_849_125


def test_hidden_layer_sizes():
    params = N.init_params(0, dtype=np.float32)
    _, _, _, cache = N.forward_with_cache(params, tiny_stack(batch=2))
    assert cache["conv1_pre"].shape == (2, 32, 20, 20)
    assert cache["conv2_pre"].shape == (2, 64, 9, 9)
    assert cache["conv3_pre"].shape == (2, 64, 7, 7)
    assert cache["features"].shape == (2, 512)


def test_zero_parameters_give_zero_outputs():
    params = {k: np.zeros(s) for k, s in N.PARAM_SHAPES.items()}
    logits, value, features = N.forward(params, tiny_stack())
    np.testing.assert_array_equal(logits, np.zeros(4))
    assert value == 0.0
    np.testing.assert_array_equal(features, np.zeros(512))


def test_forward_is_deterministic():
    params = N.init_params(3, dtype=np.float32)
    x = tiny_stack(7, batch=3)
    a = N.forward(params, x)
    b = N.forward(params, x)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_single_and_batch_shapes():
    params = N.init_params(1, dtype=np.float32)
    logits, value, features = N.forward(params, tiny_stack())
    assert logits.shape == (4,) and isinstance(value, float) and features.shape == (512,)
    logits, values, features = N.forward(params, tiny_stack(batch=5))
    assert logits.shape == (5, 4) and values.shape == (5,) and features.shape == (5, 512)


def test_bad_input_shape_rejected():
    params = N.init_params(1)
    with pytest.raises(ValueError, match="expected stacks"):
        N.forward(params, np.zeros((4, 82, 84)))


def test_non_finite_activation_raises():
    params = N.init_params(1)
    params["fc_b"] = params["fc_b"] + np.inf
    with pytest.raises(FloatingPointError, match="non-finite"):
        N.forward(params, tiny_stack())


def test_batch_rows_are_independent():
    params = N.init_params(5, dtype=np.float64)
    x = tiny_stack(11, batch=4)
    logits, values, _ = N.forward(params, x)
    for i in range(4):
        li, vi, _ = N.forward(params, x[i])
        np.testing.assert_allclose(li, logits[i], atol=1e-12)
        assert vi == pytest.approx(values[i], abs=1e-12)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    params = N.init_params(9)
    opt = {"m": N.zeros_like_params(params), "v": N.zeros_like_params(params)}
    opt["m"]["fc_w"] += 0.125
    path = tmp_path / "ck.bin"
    N.save_checkpoint(path, params, opt, iteration=41, phase=2, adam_t=500)
    p2, o2, it, ph, t = N.load_checkpoint(path)
    assert (it, ph, t) == (41, 2, 500)
    for k in N.PARAM_SHAPES:
        np.testing.assert_array_equal(p2[k], params[k])
        np.testing.assert_array_equal(o2["m"][k], opt["m"][k])
        np.testing.assert_array_equal(o2["v"][k], opt["v"][k])


def test_checkpoint_float32_cast_is_lossless(tmp_path):
    params = N.init_params(2, dtype=np.float32)
    path = tmp_path / "ck.bin"
    N.save_checkpoint(path, params)
    p2, opt, _, _, _ = N.load_checkpoint(path, dtype=np.float32)
    assert opt is None
    for k in N.PARAM_SHAPES:
        assert p2[k].dtype == np.float32
        np.testing.assert_array_equal(p2[k], params[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        N.load_checkpoint(path)


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    params = N.init_params(0)
    path = tmp_path / "ck.bin"
    N.save_checkpoint(path, params)
    blob = bytearray(path.read_bytes())
    # First shape-table entry: magic(8) + header(16) + count(4) +
    # namelen(2) + "conv1_w"(7) + ndim(1) = offset 38; first dim u32.
    assert blob[28:30] == (7).to_bytes(2, "little")
    blob[38:42] = (33).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="shape mismatch"):
        N.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    params = N.init_params(0)
    path = tmp_path / "ck.bin"
    N.save_checkpoint(path, params)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 1000])
    with pytest.raises(ValueError, match="truncated"):
        N.load_checkpoint(path)
