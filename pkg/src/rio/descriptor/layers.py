"""Forward/backward passes for the few layer types the encoder uses.

Each layer is a dict spec (``{"type": "conv", "out": 8, "k": 3}`` and so on).
``forward`` returns the output and a cache; ``backward`` takes the upstream
gradient and that cache and returns ``(dx, grads)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_TYPES = ("conv", "relu", "pool", "flatten", "fc")


def _im2col(x: np.ndarray, k: int) -> tuple[np.ndarray, tuple]:
    """(B, C, D, H, W) -> (C*k^3, B*D'*H'*W') column matrix."""
    B, C = x.shape[:2]
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    out_sp = win.shape[2:5]
    col = win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(C * k ** 3, -1)
    return col, out_sp


def conv_forward(x, W, b):
    """Valid (unpadded) stride-1 3D convolution (cross-correlation)."""
    O, C, k = W.shape[0], W.shape[1], W.shape[2]
    if x.ndim != 5 or x.shape[1] != C:
        raise ValueError(f"conv expects (B, {C}, D, H, W) input, got {x.shape}")
    col, sp = _im2col(x, k)
    y = W.reshape(O, -1) @ col + b[:, None]
    y = y.reshape((O, x.shape[0]) + sp).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(y), x


def conv_backward(dy, x, W, need_dx=True):
    O, C, k = W.shape[0], W.shape[1], W.shape[2]
    B = x.shape[0]
    sp = dy.shape[2:]
    dy_mat = dy.transpose(1, 0, 2, 3, 4).reshape(O, -1)
    col, _ = _im2col(x, k)
    dW = (dy_mat @ col.T).reshape(W.shape)
    db = dy_mat.sum(axis=1)
    dx = None
    if need_dx:
        dcol = (W.reshape(O, -1).T @ dy_mat).reshape((C, k, k, k, B) + tuple(sp))
        dx = np.zeros_like(x)
        D, H, Wd = sp
        for a in range(k):
            for bb in range(k):
                for c in range(k):
                    dx[:, :, a:a + D, bb:bb + H, c:c + Wd] += dcol[:, a, bb, c].transpose(1, 0, 2, 3, 4)
    return dx, dW, db


def pool_forward(x, size=2):
    B, C, D, H, W = x.shape
    if D % size or H % size or W % size:
        raise ValueError(f"pool size {size} does not divide spatial shape {x.shape[2:]}")
    s = size
    r = x.reshape(B, C, D // s, s, H // s, s, W // s, s).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    r = r.reshape(B, C, D // s, H // s, W // s, s ** 3)
    arg = np.argmax(r, axis=-1)
    y = np.take_along_axis(r, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg)


def pool_backward(dy, cache, size=2):
    shape, arg = cache
    B, C, D, H, W = shape
    s = size
    g = np.zeros(arg.shape + (s ** 3,), dtype=dy.dtype)
    np.put_along_axis(g, arg[..., None], dy[..., None], axis=-1)
    g = g.reshape(B, C, D // s, H // s, W // s, s, s, s).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return g.reshape(shape)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def fc_forward(x, W, b):
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"fc expects (B, {W.shape[1]}) input, got {x.shape}")
    return x @ W.T + b, x


def fc_backward(dy, x, W, need_dx=True):
    dW = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ W if need_dx else None
    return dx, dW, db


def output_shape(layers, in_shape: tuple) -> list[tuple]:
    """Per-layer output shapes (excluding batch) for an input of ``in_shape``."""
    shapes = []
    s = tuple(in_shape)
    for L in layers:
        t = L["type"]
        if t == "conv":
            k = L.get("k", 3)
            if len(s) != 4:
                raise ValueError("conv needs a (C, D, H, W) input")
            s = (L["out"],) + tuple(n - k + 1 for n in s[1:])
            if min(s[1:]) < 1:
                raise ValueError("convolution shrinks the volume below one voxel")
        elif t == "pool":
            p = L.get("size", 2)
            if any(n % p for n in s[1:]):
                raise ValueError(f"pool size {p} does not divide {s[1:]}")
            s = (s[0],) + tuple(n // p for n in s[1:])
        elif t == "flatten":
            s = (int(np.prod(s)),)
        elif t == "fc":
            if len(s) != 1:
                raise ValueError("fc needs a flat input")
            s = (L["out"],)
        elif t != "relu":
            raise ValueError(f"unknown layer type {t!r}")
        shapes.append(s)
    return shapes


def param_shapes(layers, in_shape: tuple) -> list[tuple[int, str, tuple]]:
    """``(layer_index, name, shape)`` for every parameter, in order."""
    out = []
    s = tuple(in_shape)
    for i, (L, o) in enumerate(zip(layers, output_shape(layers, in_shape))):
        if L["type"] == "conv":
            k = L.get("k", 3)
            out += [(i, "weight", (L["out"], s[0], k, k, k)), (i, "bias", (L["out"],))]
        elif L["type"] == "fc":
            out += [(i, "weight", (L["out"], s[0])), (i, "bias", (L["out"],))]
        s = o
    return out


def forward(layers, params: dict, prefix: str, x: np.ndarray):
    caches = []
    for i, L in enumerate(layers):
        t = L["type"]
        if t == "conv":
            x, c = conv_forward(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        elif t == "fc":
            x, c = fc_forward(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        elif t == "relu":
            x, c = relu_forward(x)
        elif t == "pool":
            x, c = pool_forward(x, L.get("size", 2))
        elif t == "flatten":
            c = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            raise ValueError(f"unknown layer type {t!r}")
        caches.append(c)
    return x, caches


def backward(layers, params: dict, prefix: str, dy: np.ndarray, caches, need_dx=False):
    grads = {}
    for i in range(len(layers) - 1, -1, -1):
        L, c = layers[i], caches[i]
        t = L["type"]
        want = need_dx or i > 0
        if t == "conv":
            dy, dW, db = conv_backward(dy, c, params[f"{prefix}.{i}.weight"], want)
            grads[f"{prefix}.{i}.weight"], grads[f"{prefix}.{i}.bias"] = dW, db
        elif t == "fc":
            dy, dW, db = fc_backward(dy, c, params[f"{prefix}.{i}.weight"], want)
            grads[f"{prefix}.{i}.weight"], grads[f"{prefix}.{i}.bias"] = dW, db
        elif t == "relu":
            dy = relu_backward(dy, c)
        elif t == "pool":
            dy = pool_backward(dy, c, L.get("size", 2))
        elif t == "flatten":
            dy = dy.reshape(c)
        if dy is None:
            break
    return dy, grads
