"""Actor-critic network over occupancy stacks, in plain numpy.

Three strided conv layers, a shared fully connected trunk, and two small
heads: four action logits (one per prediction horizon) and a scalar
state value. Forward and backward passes are written out by hand; convs
go through im2col so the heavy lifting is matrix multiplication.

Everything is deterministic: given the same parameters and input, both
passes produce bit-identical results.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import as_strided

N_ACTIONS = 4

# (name, shape); declaration order doubles as the checkpoint tensor order.
PARAM_SHAPES = OrderedDict([
    ("conv1_w", (32, 4, 8, 8)), ("conv1_b", (32,)),
    ("conv2_w", (64, 32, 4, 4)), ("conv2_b", (64,)),
    ("conv3_w", (64, 64, 3, 3)), ("conv3_b", (64,)),
    ("fc_w", (3136, 512)), ("fc_b", (512,)),
    ("pi_w1", (512, 128)), ("pi_b1", (128,)),
    ("pi_w2", (128, 128)), ("pi_b2", (128,)),
    ("pi_w3", (128, N_ACTIONS)), ("pi_b3", (N_ACTIONS,)),
    ("v_w1", (512, 128)), ("v_b1", (128,)),
    ("v_w2", (128, 128)), ("v_b2", (128,)),
    ("v_w3", (128, 1)), ("v_b3", (1,)),
])

_CONV_STRIDES = {"conv1": 4, "conv2": 2, "conv3": 1}

VALUE_HEAD = ("v_w1", "v_b1", "v_w2", "v_b2", "v_w3", "v_b3")


def parameter_count() -> int:
    return sum(int(np.prod(s)) for s in PARAM_SHAPES.values())


def init_params(seed: int, dtype=np.float64) -> dict:
    """Scaled gaussian weights (1/sqrt(fan-in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
    return params


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# -- conv plumbing -----------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    patches = as_strided(
        x, (b, c, oh, ow, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3)
    )
    cols = np.ascontiguousarray(patches.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * oh * ow, c * kh * kw), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    dpat = dcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + (oh - 1) * stride + 1 : stride,
                  j : j + (ow - 1) * stride + 1 : stride] += dpat[:, :, :, :, i, j]
    return dx


def _conv_forward(x, w, b, stride):
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    pre = out.reshape(x.shape[0], oh, ow, w.shape[0]).transpose(0, 3, 1, 2)
    return pre, cols


def _conv_backward(dpre, cols, w, x_shape, stride, need_dx=True):
    c_out = w.shape[0]
    d2d = dpre.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = (d2d.T @ cols).reshape(w.shape)
    db = d2d.sum(axis=0)
    dx = None
    if need_dx:
        dcols = d2d @ w.reshape(c_out, -1)
        dx = _col2im(dcols, x_shape, w.shape[2], w.shape[3], stride)
    return dw, db, dx


# -- full network ------------------------------------------------------------


def _as_batch(stacks, dtype):
    x = np.asarray(stacks)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (4, 84, 84):
        raise ValueError(f"expected stacks shaped (4, 84, 84), got {x.shape}")
    return x.astype(dtype, copy=False), single


def forward_with_cache(params: dict, stacks) -> tuple:
    """Batched forward pass keeping every intermediate needed by backward."""
    dtype = params["fc_w"].dtype
    x, _ = _as_batch(stacks, dtype)
    cache = {"x": x}

    h = x
    for layer in ("conv1", "conv2", "conv3"):
        pre, cols = _conv_forward(h, params[layer + "_w"], params[layer + "_b"], _CONV_STRIDES[layer])
        cache[layer + "_in_shape"] = h.shape
        cache[layer + "_cols"] = cols
        cache[layer + "_pre"] = pre
        h = np.maximum(pre, 0)
    flat = h.reshape(h.shape[0], -1)
    cache["flat"] = flat

    fc_pre = flat @ params["fc_w"] + params["fc_b"]
    cache["fc_pre"] = fc_pre
    features = np.maximum(fc_pre, 0)
    cache["features"] = features

    def head(prefix):
        pre1 = features @ params[prefix + "_w1"] + params[prefix + "_b1"]
        h1 = np.maximum(pre1, 0)
        pre2 = h1 @ params[prefix + "_w2"] + params[prefix + "_b2"]
        h2 = np.maximum(pre2, 0)
        out = h2 @ params[prefix + "_w3"] + params[prefix + "_b3"]
        cache[prefix + "_pre1"], cache[prefix + "_h1"] = pre1, h1
        cache[prefix + "_pre2"], cache[prefix + "_h2"] = pre2, h2
        return out

    logits = head("pi")
    values = head("v")[:, 0]
    return logits, values, features, cache


def forward(params: dict, stacks):
    """Forward pass; returns (logits, value, features).

    Accepts one stack (4, 84, 84) or a batch. Raises when an activation
    goes non-finite, which signals diverged parameters.
    """
    dtype = params["fc_w"].dtype
    x, single = _as_batch(stacks, dtype)
    logits, values, features, _ = forward_with_cache(params, x)
    if not (np.isfinite(logits).all() and np.isfinite(values).all()):
        raise FloatingPointError("non-finite activation in forward pass")
    if single:
        return logits[0], float(values[0]), features[0]
    return logits, values, features


def backward(params: dict, cache: dict, dlogits: np.ndarray, dvalues: np.ndarray) -> dict:
    """Gradients of a scalar loss given d loss / d logits and d loss / d value."""
    grads = {}
    features = cache["features"]

    def head_backward(prefix, dout):
        h1, h2 = cache[prefix + "_h1"], cache[prefix + "_h2"]
        grads[prefix + "_w3"] = h2.T @ dout
        grads[prefix + "_b3"] = dout.sum(axis=0)
        dh2 = (dout @ params[prefix + "_w3"].T) * (cache[prefix + "_pre2"] > 0)
        grads[prefix + "_w2"] = h1.T @ dh2
        grads[prefix + "_b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ params[prefix + "_w2"].T) * (cache[prefix + "_pre1"] > 0)
        grads[prefix + "_w1"] = features.T @ dh1
        grads[prefix + "_b1"] = dh1.sum(axis=0)
        return dh1 @ params[prefix + "_w1"].T

    dfeat = head_backward("pi", dlogits)
    dfeat = dfeat + head_backward("v", dvalues[:, None])

    dfc_pre = dfeat * (cache["fc_pre"] > 0)
    grads["fc_w"] = cache["flat"].T @ dfc_pre
    grads["fc_b"] = dfc_pre.sum(axis=0)
    dh = (dfc_pre @ params["fc_w"].T).reshape(cache["conv3_pre"].shape[0], 64, 7, 7)

    for layer in ("conv3", "conv2", "conv1"):
        dpre = dh * (cache[layer + "_pre"] > 0)
        dw, db, dh = _conv_backward(
            dpre, cache[layer + "_cols"], params[layer + "_w"],
            cache[layer + "_in_shape"], _CONV_STRIDES[layer],
            need_dx=layer != "conv1",  # nothing upstream of the input
        )
        grads[layer + "_w"] = dw
        grads[layer + "_b"] = db
    return grads


def relu_mask_signature(cache: dict) -> np.ndarray:
    """Concatenated activation-sign pattern; used to spot kink crossings
    when comparing against finite differences."""
    parts = [
        (cache[k] > 0).ravel()
        for k in ("conv1_pre", "conv2_pre", "conv3_pre", "fc_pre",
                  "pi_pre1", "pi_pre2", "v_pre1", "v_pre2")
    ]
    return np.concatenate(parts)


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"NLCHKPT1"
_VERSION = 1


def save_checkpoint(path, params: dict, opt_state: dict | None = None,
                    iteration: int = 0, phase: int = 0, adam_t: int = 0) -> None:
    """Versioned binary checkpoint: header, shape table, then tensor data
    as little-endian float64 in declaration order (moments after weights)."""
    tensors = OrderedDict((k, params[k]) for k in PARAM_SHAPES)
    if opt_state is not None:
        for kind in ("m", "v"):
            for k in PARAM_SHAPES:
                tensors[f"adam_{kind}/{k}"] = opt_state[kind][k]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _VERSION, iteration, phase, adam_t))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, dtype=np.float64):
    """Load and validate a checkpoint; returns
    (params, opt_state or None, iteration, phase, adam_t)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, iteration, phase, adam_t = struct.unpack_from("<IIII", blob, 8)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 24)
    off = 28
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        entries.append((name, shape))

    expected = dict(PARAM_SHAPES)
    tensors = {}
    for name, shape in entries:
        base = name.split("/", 1)[-1]
        if base not in expected:
            raise ValueError(f"unknown tensor {name!r} in checkpoint")
        if tuple(shape) != expected[base]:
            raise ValueError(
                f"shape mismatch for {name!r}: file has {tuple(shape)}, "
                f"network declares {expected[base]}"
            )
        n = int(np.prod(shape))
        end = off + 8 * n
        if end > len(blob):
            raise ValueError("checkpoint truncated")
        tensors[name] = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).astype(dtype)
        off = end
    if off != len(blob):
        raise ValueError("trailing bytes after checkpoint tensors")

    for k in PARAM_SHAPES:
        if k not in tensors:
            raise ValueError(f"checkpoint is missing tensor {k!r}")
    params = {k: tensors[k] for k in PARAM_SHAPES}
    opt_state = None
    if any(k.startswith("adam_m/") for k in tensors):
        opt_state = {
            "m": {k: tensors[f"adam_m/{k}"] for k in PARAM_SHAPES},
            "v": {k: tensors[f"adam_v/{k}"] for k in PARAM_SHAPES},
        }
    return params, opt_state, iteration, phase, adam_t
