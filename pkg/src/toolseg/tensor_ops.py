"""Reference dilated convolution and bilinear upsampling.

These operations are the numerical ground truth for the rest of the
toolkit: the network executor is checked against them, and they are
plain float64 numpy with no framework behind them.

Conventions:

* ``dilated_conv_1d`` evaluates ``y[i] = sum_{k=1..K} x[i + r*k] * w[k]``
  with a zero-based output index and one-based tap index, "valid"
  semantics (no padding). It is a correlation; the filter is not
  mirrored.
* ``dilated_conv_2d`` is the per-axis extension with zero-based taps
  (offsets ``0, r, .., (K-1)*r``), explicit zero padding and stride.
  The tap-index shift relative to the 1-D form is a pure translation of
  the output grid and does not change any value.
* ``bilinear_upsample`` uses corner-aligned sampling: the first and last
  output samples coincide exactly with the input corners.

Tensors are numpy arrays laid out ``h x w x channels``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DilatedConvSpec",
    "dilated_conv_1d",
    "dilated_conv_2d",
    "bilinear_upsample",
    "conv_output_size",
    "effective_kernel_extent",
    "upsample_weights",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected scalar or pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class DilatedConvSpec:
    """Shape parameters of a 2-D dilated convolution.

    ``kernel_size``, ``rate``, ``stride`` and ``padding`` may be scalars
    or per-axis pairs. ``rate == 1`` reduces to standard convolution.
    """

    kernel_size: int | tuple[int, int]
    rate: int | tuple[int, int] = 1
    stride: int | tuple[int, int] = 1
    padding: int | tuple[int, int] = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for name in ("kernel_size", "rate", "stride"):
            if min(_pair(getattr(self, name))) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if min(_pair(self.padding)) < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def effective_extent(self) -> tuple[int, int]:
        """Per-axis span of the dilated kernel: K + (K-1)(r-1)."""
        kh, kw = _pair(self.kernel_size)
        rh, rw = _pair(self.rate)
        return effective_kernel_extent(kh, rh), effective_kernel_extent(kw, rw)


def effective_kernel_extent(kernel: int, rate: int) -> int:
    """Span covered by a kernel of size K at dilation rate r."""
    return kernel + (kernel - 1) * (rate - 1)


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0,
                     rate: int = 1) -> int:
    """Spatial output size: floor((in + 2*pad - effective_extent)/stride) + 1."""
    extent = effective_kernel_extent(kernel, rate)
    span = size + 2 * padding - extent
    if span < 0:
        return 0
    return span // stride + 1


def dilated_conv_1d(x, w, r: int) -> np.ndarray:
    """Dilated convolution of a 1-D signal, taps at x[i + r*k] for k = 1..K.

    Output index i runs over 0 .. len(x) - 1 - r*K; when the signal is
    shorter than the span of the taps the result is empty (not an
    error). Empty filters and non-positive rates are rejected.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 1 or w.ndim != 1:
        raise ValueError("dilated_conv_1d expects 1-D input and filter")
    if w.size == 0:
        raise ValueError("filter must be non-empty")
    r = int(r)
    if r < 1:
        raise ValueError(f"rate must be a positive integer, got {r}")
    k = w.size
    n_out = x.size - r * k
    if n_out <= 0:
        return np.zeros(0, dtype=np.float64)
    # gather the K taps for every output index in one shot
    idx = np.arange(n_out)[:, None] + r * np.arange(1, k + 1)[None, :]
    return x[idx] @ w


def dilated_conv_2d(x, spec: DilatedConvSpec, weights, bias=None) -> np.ndarray:
    """2-D dilated convolution of an h x w x c_in tensor.

    ``weights`` has shape (K_h, K_w, c_in, c_out); ``bias`` is optional
    with shape (c_out,). Zero padding and stride follow ``spec``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ValueError(f"input must be h x w x c, got shape {x.shape}")
    weights = np.asarray(weights, dtype=np.float64)
    kh, kw = _pair(spec.kernel_size)
    if weights.shape != (kh, kw, spec.in_channels, spec.out_channels):
        raise ValueError(
            f"weights shape {weights.shape} does not match spec "
            f"({kh}, {kw}, {spec.in_channels}, {spec.out_channels})")
    if x.shape[2] != spec.in_channels:
        raise ValueError(
            f"input has {x.shape[2]} channels, spec expects {spec.in_channels}")
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (spec.out_channels,):
            raise ValueError(f"bias shape {bias.shape} != ({spec.out_channels},)")

    rh, rw = _pair(spec.rate)
    sh, sw = _pair(spec.stride)
    ph, pw = _pair(spec.padding)

    h, w_in = x.shape[:2]
    oh = conv_output_size(h, kh, sh, ph, rh)
    ow = conv_output_size(w_in, kw, sw, pw, rw)
    if oh == 0 or ow == 0:
        return np.zeros((oh, ow, spec.out_channels), dtype=np.float64)

    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x
    xp = np.ascontiguousarray(xp)
    si, sj, sc = xp.strides
    # window view: (oh, ow, kh, kw, c_in); taps spaced by the rate
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(oh, ow, kh, kw, x.shape[2]),
        strides=(sh * si, sw * sj, rh * si, rw * sj, sc),
        writeable=False,
    )
    cols = patches.reshape(oh * ow, kh * kw * x.shape[2])
    out = cols @ weights.reshape(kh * kw * spec.in_channels, spec.out_channels)
    out = out.reshape(oh, ow, spec.out_channels)
    if bias is not None:
        out = out + bias
    return out


def upsample_weights(n_in: int, factor: int) -> np.ndarray:
    """Corner-aligned interpolation matrix mapping n_in samples to n_in*factor.

    Row j holds the (at most two) source weights of output sample j; each
    row sums to 1, so interpolation preserves value bounds.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(np.intp)
    lo = np.minimum(lo, n_in - 2)
    frac = pos - lo
    mat[np.arange(n_out), lo] = 1.0 - frac
    mat[np.arange(n_out), lo + 1] = frac
    return mat


def bilinear_upsample(x, factor: int) -> np.ndarray:
    """Separable corner-aligned bilinear upsampling of an h x w x c tensor.

    Factor 1 returns the input unchanged. Output values never leave
    [min(x), max(x)] because the interpolation weights are convex.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    x = np.asarray(x, dtype=np.float64)
    squeeze = False
    if x.ndim == 2:
        x = x[:, :, None]
        squeeze = True
    if x.ndim != 3:
        raise ValueError(f"input must be h x w x c, got shape {x.shape}")
    if factor == 1:
        out = x.copy()
        return out[:, :, 0] if squeeze else out

    h, w, c = x.shape
    wy = upsample_weights(h, factor)            # (h*f, h)
    wx = upsample_weights(w, factor)            # (w*f, w)
    out = np.einsum("ph,hwc->pwc", wy, x, optimize=True)
    out = np.einsum("qw,pwc->pqc", wx, out, optimize=True)
    return out[:, :, 0] if squeeze else out
