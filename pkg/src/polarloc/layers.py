"""Differentiable layers for polar scan images.

Convolutions treat the H axis as angular (0..360 degrees, periodic) and
the W axis as radial. Stride-1 convolutions therefore pad circularly
along H and with zeros along W, which makes them exactly equivariant to
cyclic shifts of the angular axis. Stride-2 convolutions use a 2x2
kernel that tiles the input exactly, so they need no padding and remain
equivariant to even shifts.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    _record,
    clamp_min,
    exp,
    log,
    mean_spatial,
    mul_channels,
    mul_scalar_tensor,
    pow_const,
    pow_tensor,
    sigmoid,
)


def _pad_hw(x, ph, pw):
    """Pad NCHW: wrap rows (angular), zero columns (radial)."""
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    if ph:
        out[:, :, :ph, pw:pw + w] = x[:, :, h - ph:, :]
        out[:, :, ph + h:, pw:pw + w] = x[:, :, :ph, :]
    return out


def _unpad_hw(dxp, ph, pw, h, w):
    """Adjoint of _pad_hw: fold wrapped-row gradients back, drop zero pads."""
    dx = dxp[:, :, ph:ph + h, pw:pw + w].copy()
    if ph:
        dx[:, :, h - ph:, :] += dxp[:, :, :ph, pw:pw + w]
        dx[:, :, :ph, :] += dxp[:, :, ph + h:, pw:pw + w]
    return dx


def _im2col(xp, kh, kw, sh, sw):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    col = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return col, ho, wo


def _col2im(dcol, n, c, hp, wp, kh, kw, sh, sw, ho, wo):
    dxp = np.zeros((n, c, hp, wp), dtype=dcol.dtype)
    d6 = dcol.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += d6[:, :, i, j]
    return dxp


def conv2d_circular(x, weight, bias, stride=(1, 1)):
    """2d cross-correlation with circular angular / zero radial padding.

    x: (N, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,).
    Stride 1 keeps the spatial size ("same" padding); stride 2 with a 2x2
    kernel halves it and requires even extents.
    """
    sh, sw = stride
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if sh == 1:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("stride-1 convolutions require odd kernels")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    else:
        if (kh, kw) != (sh, sw):
            raise ValueError("strided convolutions require kernel == stride")
        if h % sh or w % sw:
            raise ValueError(f"spatial extents {(h, w)} not divisible by stride {(sh, sw)}")
        ph = pw = 0
    if ph > h:
        raise ValueError(f"angular extent {h} too small for kernel {kh}")

    xp = _pad_hw(x.data, ph, pw)
    col, ho, wo = _im2col(xp, kh, kw, sh, sw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, col)
    out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        gr = g.reshape(n, cout, ho * wo)
        gb = gr.sum(axis=(0, 2)) if bias.requires_grad else None
        gw = None
        if weight.requires_grad:
            col_b, _, _ = _im2col(_pad_hw(x.data, ph, pw), kh, kw, sh, sw)
            gw = np.matmul(gr, col_b.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        gx = None
        if x.requires_grad:
            dcol = np.matmul(wmat.T, gr)
            dxp = _col2im(dcol, n, cin, hp, wp, kh, kw, sh, sw, ho, wo)
            gx = _unpad_hw(dxp, ph, pw, h, w)
        return (gx, gw, gb)

    return _record("conv2d", (x, weight, bias), out, bwd)


def conv_transpose2d(x, weight, bias):
    """Transposed convolution, 2x2 kernel, stride 2: doubles both extents.

    weight: (Cin, Cout, 2, 2). With the weight array shared, this is the
    exact adjoint of the matching stride-2 conv.
    """
    n, cin, h, w = x.data.shape
    cin_w, cout, kh, kw = weight.data.shape
    if (kh, kw) != (2, 2):
        raise ValueError("conv_transpose2d supports only 2x2 kernels")
    if cin != cin_w:
        raise ValueError(f"tconv: input has {cin} channels, weight expects {cin_w}")

    xr = x.data.reshape(n, cin, h * w)
    out = np.empty((n, cout, 2 * h, 2 * w), dtype=x.data.dtype)
    for di in (0, 1):
        for dj in (0, 1):
            part = np.matmul(weight.data[:, :, di, dj].T, xr)
            out[:, :, di::2, dj::2] = part.reshape(n, cout, h, w)
    out += bias.data[None, :, None, None]

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = np.zeros((n, cin, h * w), dtype=g.dtype) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for di in (0, 1):
            for dj in (0, 1):
                gpart = g[:, :, di::2, dj::2].reshape(n, cout, h * w)
                if gx is not None:
                    gx += np.matmul(weight.data[:, :, di, dj], gpart)
                if gw is not None:
                    gw[:, :, di, dj] = np.matmul(xr, gpart.transpose(0, 2, 1)).sum(axis=0)
        return (None if gx is None else gx.reshape(n, cin, h, w), gw, gb)

    return _record("conv_transpose2d", (x, weight, bias), out, bwd)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5, update_running=True):
    """Per-channel batch normalization over (N, H, W) with affine output.

    Train mode normalizes with batch statistics (and folds them into the
    running estimates, which feed nothing in this mode, so repeated calls
    on the same input stay pure); eval mode uses only the running stats,
    making the output independent of batch composition.
    """
    n, c, h, w = x.data.shape
    dt = x.data.dtype
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch norm in train mode needs batch*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3), dtype=dt)
        var = x.data.var(axis=(0, 2, 3), dtype=dt)
        if update_running:
            running_mean *= dt.type(1.0 - momentum)
            running_mean += dt.type(momentum) * mu
            running_var *= dt.type(1.0 - momentum)
            running_var += dt.type(momentum) * (var * (m / (m - 1.0))).astype(dt)
        ivar = 1.0 / np.sqrt(var + dt.type(eps))
        xhat = (x.data - mu[None, :, None, None]) * ivar[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bwd(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = None
            if x.requires_grad:
                dxhat = g * gamma.data[None, :, None, None]
                s1 = dxhat.sum(axis=(0, 2, 3)) / m
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)) / m
                gx = ivar[None, :, None, None] * (
                    dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
            return (gx, ggamma, gbeta)

        return _record("batch_norm", (x, gamma, beta), out, bwd)

    istd = 1.0 / np.sqrt(running_var + dt.type(eps))
    scale = gamma.data * istd
    shift = beta.data - running_mean * scale
    out = x.data * scale[None, :, None, None] + shift[None, :, None, None]

    def bwd_eval(g):
        gx = g * scale[None, :, None, None] if x.requires_grad else None
        ggamma = None
        if gamma.requires_grad:
            xhat = (x.data - running_mean[None, :, None, None]) * istd[None, :, None, None]
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return (gx, ggamma, gbeta)

    return _record("batch_norm", (x, gamma, beta), out, bwd_eval)


def conv1d_circular(profile, weight):
    """1d cross-correlation over the channel axis with circular padding.

    profile: (N, C); weight: (k,) with k odd. Used by ECA so that the
    parameter shape is independent of the channel count.
    """
    k = weight.data.shape[0]
    if k % 2 == 0:
        raise ValueError("conv1d_circular requires an odd kernel")
    off = k // 2
    wd = weight.data
    out = np.zeros_like(profile.data)
    for j in range(k):
        out += wd[j] * np.roll(profile.data, off - j, axis=1)

    def bwd(g):
        gp = None
        if profile.requires_grad:
            gp = np.zeros_like(g)
            for j in range(k):
                gp += wd[j] * np.roll(g, j - off, axis=1)
        gw = None
        if weight.requires_grad:
            gw = np.array(
                [np.sum(g * np.roll(profile.data, off - j, axis=1)) for j in range(k)],
                dtype=wd.dtype)
        return (gp, gw)

    return _record("conv1d_circular", (profile, weight), out, bwd)


# ---------------------------------------------------------------------------
# layer classes (parameters + forward)

class CircularConv2d:
    """Conv layer owning weight/bias; Kaiming fan-in init."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = (stride, stride)
        fan_in = in_channels * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, std, size=(out_channels, in_channels, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return conv2d_circular(x, self.weight, self.bias, self.stride)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class TransposedConv2d:
    """2x2 stride-2 transposed conv; weight layout (in, out, 2, 2)."""

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * 4
        std = np.sqrt(2.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        w = rng.normal(0.0, std, size=(in_channels, out_channels, 2, 2))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return conv_transpose2d(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class BatchNorm2d:
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, training=False, update_running=True):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training, self.momentum, self.eps, update_running)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Eca:
    """Efficient channel attention: pooled channel profile -> circular 1d
    conv -> sigmoid -> per-channel multiplicative gate."""

    def __init__(self, kernel_size=3, rng=None, dtype=np.float32):
        if kernel_size % 2 == 0:
            raise ValueError("ECA kernel size must be odd")
        self.kernel_size = kernel_size
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(kernel_size)
        w = rng.uniform(-bound, bound, size=kernel_size)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)

    def __call__(self, x):
        profile = mean_spatial(x)
        gate = sigmoid(conv1d_circular(profile, self.weight))
        return mul_channels(x, gate)

    def parameters(self):
        return [("weight", self.weight)]


class GeM:
    """Generalized-mean pooling (N,C,H,W) -> (N,C) with a learnable
    exponent p shared across channels: (mean clamp(x,eps)^p)^(1/p)."""

    def __init__(self, p=3.0, eps=1e-6, dtype=np.float32):
        self.p = Tensor(np.asarray(p, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        z = pow_tensor(clamp_min(x, self.eps), self.p)
        m = mean_spatial(z)
        inv_p = pow_const(self.p, -1.0)
        return exp(mul_scalar_tensor(log(m), inv_p))

    def parameters(self):
        return [("p", self.p)]

    def clamp_p(self, minimum=1e-3):
        """Keep p positive after an optimizer step."""
        np.maximum(self.p.data, minimum, out=self.p.data)
