"""Numerical executor for :class:`~toolseg.model.ModelSpec` graphs.

Everything runs in float64 numpy on ``(N, H, W, C)`` batches. Forward
passes record a tape of per-layer caches so the matching backward pass
can produce analytic parameter gradients; both directions are pure
functions of their inputs (plus the explicit running-statistics updates
batch norm emits in training mode), so concurrent forward passes over
shared parameters are safe.

Convolution uses an im2col layout: a strided window view is flattened
into a patch matrix and handed to one BLAS matmul. The backward pass
scatters columns back through the same geometry.
"""

from __future__ import annotations

import numpy as np

from .model import ConvLayer, MaxPoolLayer, ModelSpec, ResidualUnit
from .tensor_ops import conv_output_size, upsample_weights

__all__ = [
    "forward",
    "coarse_logits",
    "predict",
    "residual_forward",
    "training_forward",
    "training_backward",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# --- primitives ------------------------------------------------------------

def _conv_patches(xp: np.ndarray, kernel: int, stride: int, rate: int,
                  oh: int, ow: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, si, sj, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, kernel, kernel, c),
        strides=(sn, stride * si, stride * sj, rate * si, rate * sj, sc),
        writeable=False,
    )
    return view.reshape(n * oh * ow, kernel * kernel * c)


def conv2d_forward(x, w, b, stride, padding, rate):
    n, h, wid, c_in = x.shape
    kernel = w.shape[0]
    oh = conv_output_size(h, kernel, stride, padding, rate)
    ow = conv_output_size(wid, kernel, stride, padding, rate)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) \
        if padding else x
    cols = _conv_patches(np.ascontiguousarray(xp), kernel, stride, rate, oh, ow)
    w_mat = w.reshape(-1, w.shape[3])
    y = cols @ w_mat
    if b is not None:
        y += b
    y = y.reshape(n, oh, ow, w.shape[3])
    cache = (x.shape, cols, w, stride, padding, rate, oh, ow)
    return y, cache


def conv2d_backward(dy, cache):
    x_shape, cols, w, stride, padding, rate, oh, ow = cache
    n, h, wid, c_in = x_shape
    kernel = w.shape[0]
    c_out = w.shape[3]
    dy_mat = dy.reshape(n * oh * ow, c_out)
    dw = (cols.T @ dy_mat).reshape(w.shape)
    db = dy_mat.sum(axis=0)
    dcols = dy_mat @ w.reshape(-1, c_out).T
    dcols = dcols.reshape(n, oh, ow, kernel, kernel, c_in)
    hp, wp = h + 2 * padding, wid + 2 * padding
    dxp = np.zeros((n, hp, wp, c_in), dtype=dy.dtype)
    for a in range(kernel):
        ia = a * rate
        for bk in range(kernel):
            jb = bk * rate
            dxp[:, ia:ia + stride * oh:stride,
                jb:jb + stride * ow:stride, :] += dcols[:, :, :, a, bk, :]
    if padding:
        dxp = dxp[:, padding:hp - padding, padding:wp - padding, :]
    return dxp, dw, db


def batchnorm_train(x, gamma, beta):
    axes = (0, 1, 2)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std, gamma, x.shape), (mu, var)


def batchnorm_train_backward(dy, cache):
    xhat, inv_std, gamma, shape = cache
    m = shape[0] * shape[1] * shape[2]
    axes = (0, 1, 2)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes)
                          - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def batchnorm_eval(x, gamma, beta, mean, var):
    scale = gamma / np.sqrt(var + BN_EPS)
    return x * scale + (beta - mean * scale), scale


def maxpool_forward(x, kernel, stride, padding):
    n, h, w, c = x.shape
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)),
                constant_values=-np.inf) if padding else x
    xp = np.ascontiguousarray(xp)
    sn, si, sj, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, oh, ow, kernel, kernel, c),
        strides=(sn, stride * si, stride * sj, si, sj, sc), writeable=False)
    windows = view.reshape(n, oh, ow, kernel * kernel, c)
    arg = windows.argmax(axis=3)
    y = np.take_along_axis(windows, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    cache = (x.shape, arg, kernel, stride, padding, oh, ow)
    return y, cache


def maxpool_backward(dy, cache):
    x_shape, arg, kernel, stride, padding, oh, ow = cache
    n, h, w, c = x_shape
    dxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dy.dtype)
    ni, oi, oj, ci = np.indices(arg.shape, sparse=False)
    rows = oi * stride + arg // kernel
    cols = oj * stride + arg % kernel
    np.add.at(dxp, (ni, rows, cols, ci), dy)
    if padding:
        dxp = dxp[:, padding:padding + h, padding:padding + w, :]
    return dxp


def _upsample_batch(x, factor):
    wy = upsample_weights(x.shape[1], factor)
    wx = upsample_weights(x.shape[2], factor)
    out = np.einsum("ph,nhwc->npwc", wy, x, optimize=True)
    return np.einsum("qw,npwc->npqc", wx, out, optimize=True), (wy, wx)


def _upsample_backward(dy, mats):
    wy, wx = mats
    out = np.einsum("qw,npqc->npwc", wx, dy, optimize=True)
    return np.einsum("ph,npwc->nhwc", wy, out, optimize=True)


# --- layer execution --------------------------------------------------------

def _conv_layer_forward(layer: ConvLayer, params, x, train, bn_frozen,
                        running_updates):
    w = params[f"{layer.name}.weight"]
    b = params[f"{layer.name}.bias"] if layer.bias else None
    if x.shape[3] != layer.in_channels:
        raise ValueError(f"{layer.name}: input has {x.shape[3]} channels, "
                         f"expected {layer.in_channels}")
    y, conv_cache = conv2d_forward(x, w, b, layer.stride, layer.padding,
                                   layer.rate)
    bn_cache = None
    bn_mode = None
    if layer.batch_norm:
        gamma = params[f"{layer.name}.bn.gamma"]
        beta = params[f"{layer.name}.bn.beta"]
        if train and not bn_frozen:
            y, bn_cache, stats = batchnorm_train(y, gamma, beta)
            if running_updates is not None:
                running_updates[layer.name] = stats
            bn_mode = "train"
        else:
            mean = params[f"{layer.name}.bn.running_mean"]
            var = params[f"{layer.name}.bn.running_var"]
            y, scale = batchnorm_eval(y, gamma, beta, mean, var)
            bn_cache = scale
            bn_mode = "eval"
    act_cache = None
    if layer.activation == "relu":
        act_cache = y > 0
        y = y * act_cache
    return y, (conv_cache, bn_cache, bn_mode, act_cache)


def _conv_layer_backward(layer: ConvLayer, dy, cache, grads):
    conv_cache, bn_cache, bn_mode, act_cache = cache
    if act_cache is not None:
        dy = dy * act_cache
    if layer.batch_norm:
        if bn_mode == "train":
            dy, dgamma, dbeta = batchnorm_train_backward(dy, bn_cache)
            grads[f"{layer.name}.bn.gamma"] = grads.get(
                f"{layer.name}.bn.gamma", 0) + dgamma
            grads[f"{layer.name}.bn.beta"] = grads.get(
                f"{layer.name}.bn.beta", 0) + dbeta
        else:
            dy = dy * bn_cache
    dx, dw, db = conv2d_backward(dy, conv_cache)
    grads[f"{layer.name}.weight"] = grads.get(f"{layer.name}.weight", 0) + dw
    if layer.bias:
        grads[f"{layer.name}.bias"] = grads.get(f"{layer.name}.bias", 0) + db
    return dx


def _item_forward(item, params, x, train, bn_frozen, running_updates):
    if isinstance(item, ConvLayer):
        return _conv_layer_forward(item, params, x, train, bn_frozen,
                                   running_updates)
    if isinstance(item, MaxPoolLayer):
        return maxpool_forward(x, item.kernel, item.stride, item.padding)
    if isinstance(item, ResidualUnit):
        if x.shape[3] != item.in_channels:
            raise ValueError(f"{item.name}: input has {x.shape[3]} channels, "
                             f"expected {item.in_channels}")
        caches = []
        out = x
        for conv in item.inner:
            out, cache = _conv_layer_forward(conv, params, out, train,
                                             bn_frozen, running_updates)
            caches.append(cache)
        if item.projection is not None:
            skip, proj_cache = _conv_layer_forward(item.projection, params, x,
                                                   train, bn_frozen,
                                                   running_updates)
        else:
            skip, proj_cache = x, None
        if skip.shape != out.shape:
            raise ValueError(f"{item.name}: skip branch shape {skip.shape} "
                             f"!= residual branch shape {out.shape}")
        y_pre = skip + out
        act = y_pre > 0
        return y_pre * act, (caches, proj_cache, act)
    raise ValueError(f"unknown layer kind {item!r}")


def _item_backward(item, params, dy, cache, grads):
    if isinstance(item, ConvLayer):
        return _conv_layer_backward(item, dy, cache, grads)
    if isinstance(item, MaxPoolLayer):
        return maxpool_backward(dy, cache)
    caches, proj_cache, act = cache
    dy = dy * act
    d_inner = dy
    for conv, conv_cache in zip(reversed(item.inner), reversed(caches)):
        d_inner = _conv_layer_backward(conv, d_inner, conv_cache, grads)
    if item.projection is not None:
        d_skip = _conv_layer_backward(item.projection, dy, proj_cache, grads)
    else:
        d_skip = dy
    return d_inner + d_skip


def _body_forward(model: ModelSpec, params, x, train, running_updates):
    tape = []
    for item in model.layers:
        x, cache = _item_forward(item, params, x, train, model.bn_frozen,
                                 running_updates)
        tape.append(cache)
    return x, tape


def _body_backward(model: ModelSpec, params, dy, tape, grads):
    for item, cache in zip(reversed(model.layers), reversed(tape)):
        dy = _item_backward(item, params, dy, cache, grads)
    return dy


def _pad_to_multiple(x, multiple):
    h, w = x.shape[1], x.shape[2]
    pad_h = (multiple - h % multiple) % multiple
    pad_w = (multiple - w % multiple) % multiple
    top, left = pad_h // 2, pad_w // 2
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (top, pad_h - top), (left, pad_w - left), (0, 0)))
    return x, (top, left, h, w)


def _as_batch(image) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"image must be h x w x c, got shape {x.shape}")
    return x[None]


# --- public surface ---------------------------------------------------------

def residual_forward(x, unit: ResidualUnit, params) -> np.ndarray:
    """Evaluate one residual unit on an h x w x c input (inference BN)."""
    batch = _as_batch(x)
    y, _ = _item_forward(unit, params, batch, train=False, bn_frozen=True,
                         running_updates=None)
    return y[0]


def coarse_logits(model: ModelSpec, params, image) -> np.ndarray:
    """Logit map before upsampling, at the model's native output stride."""
    if not model.fully_convolutional:
        raise ValueError("model has no convolutional head; convert it first")
    x = _as_batch(image)
    feat, _ = _body_forward(model, params, x, train=False, running_updates=None)
    y, _ = _conv_layer_forward(model.head, params, feat, train=False,
                               bn_frozen=True, running_updates=None)
    return y[0]


def forward(model: ModelSpec, params, image) -> np.ndarray:
    """Run the network on one image.

    Fully convolutional models return full-resolution logits
    (h x w x C): the input is symmetrically zero-padded to a multiple of
    the output stride, the coarse logit map is bilinearly upsampled by
    that stride, and the result is cropped back. Classifier models
    return a (C,) score vector. Deterministic given (params, image).
    """
    x = _as_batch(image)
    h, w = x.shape[1], x.shape[2]
    if h < 8 or w < 8:
        raise ValueError(f"input {h}x{w} is smaller than the 8x8 minimum")
    if not model.fully_convolutional:
        feat, _ = _body_forward(model, params, x, train=False,
                                running_updates=None)
        pooled = feat.mean(axis=(1, 2))
        scores = pooled @ params["fc.weight"] + params["fc.bias"]
        return scores[0]
    x, (top, left, h0, w0) = _pad_to_multiple(x, model.output_stride)
    feat, _ = _body_forward(model, params, x, train=False, running_updates=None)
    y, _ = _conv_layer_forward(model.head, params, feat, train=False,
                               bn_frozen=True, running_updates=None)
    up, _ = _upsample_batch(y, model.output_stride)
    return up[0, top:top + h0, left:left + w0, :]


def predict(model: ModelSpec, params, image) -> np.ndarray:
    """Class-ID mask: argmax over logits, ties to the lowest class index."""
    logits = forward(model, params, image)
    return np.argmax(logits, axis=-1).astype(np.int64)


def training_forward(model: ModelSpec, params, batch):
    """Forward pass for training on an (N, H, W, 3) batch.

    Returns full-resolution logits, the tape for
    :func:`training_backward`, and the batch-norm running-statistic
    updates to fold into the parameter store after the step. H and W
    must be multiples of the output stride.
    """
    if not model.fully_convolutional:
        raise ValueError("training requires a fully convolutional model")
    stride = model.output_stride
    if batch.shape[1] % stride or batch.shape[2] % stride:
        raise ValueError(f"batch spatial dims {batch.shape[1:3]} must be "
                         f"multiples of the output stride {stride}")
    running_updates: dict = {}
    feat, tape = _body_forward(model, params, batch, train=True,
                               running_updates=running_updates)
    y, head_cache = _conv_layer_forward(model.head, params, feat, train=True,
                                        bn_frozen=model.bn_frozen,
                                        running_updates=running_updates)
    logits, mats = _upsample_batch(y, stride)
    return logits, (tape, head_cache, mats), running_updates


def training_backward(model: ModelSpec, params, dlogits, tape):
    """Analytic parameter gradients for a recorded training forward."""
    body_tape, head_cache, mats = tape
    grads: dict = {}
    dy = _upsample_backward(dlogits, mats)
    dy = _conv_layer_backward(model.head, dy, head_cache, grads)
    _body_backward(model, params, dy, body_tape, grads)
    return grads


def apply_running_updates(params, running_updates, momentum: float = BN_MOMENTUM):
    """Fold batch statistics into the stored running mean/variance."""
    for name, (mu, var) in running_updates.items():
        rm = params[f"{name}.bn.running_mean"]
        rv = params[f"{name}.bn.running_var"]
        params[f"{name}.bn.running_mean"] = (1 - momentum) * rm + momentum * mu
        params[f"{name}.bn.running_var"] = (1 - momentum) * rv + momentum * var
