"""Layer primitives for the flow networks: convolutions, warping, correlation,
resampling. All are recorded ops (see flowpatch.tensor) with hand-written
backward rules; conv_transpose2d is the exact adjoint of conv2d.
"""

from __future__ import annotations

import numpy as np

from .tensor import ConfigError, Tensor, as_tensor, record_op


def _as4(t: Tensor) -> np.ndarray:
    return t.data


# ---------------------------------------------------------------------------
# Convolution (im2col / col2im)
# ---------------------------------------------------------------------------


def _zpad(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-pad the two spatial axes (np.pad has heavy per-call overhead)."""
    if pad == 0:
        return x
    N, C, H, W = x.shape
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + H, pad : pad + W] = x
    return out


def _pack(xp: np.ndarray, kH: int, kW: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """im2col in (N, Ci*kH*kW, Ho*Wo) layout: one fast strided copy per kernel
    offset, so the contraction below is a single batched BLAS matmul."""
    N, Ci = xp.shape[:2]
    buf = np.empty((N, Ci, kH, kW, Ho, Wo), dtype=np.float32)
    for i in range(kH):
        for j in range(kW):
            buf[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return buf.reshape(N, Ci * kH * kW, Ho * Wo)


def _unpack_add(cols: np.ndarray, N, Ci, H, W, kH, kW, stride, pad, Ho, Wo) -> np.ndarray:
    """Adjoint of _pack: scatter-add (N, Ci*kH*kW, Ho*Wo) columns back into an
    unpadded image."""
    gx = np.zeros((N, Ci, H + 2 * pad, W + 2 * pad), dtype=np.float32)
    c6 = cols.reshape(N, Ci, kH, kW, Ho, Wo)
    for i in range(kH):
        for j in range(kW):
            gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += c6[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx)


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation; output side = floor((H + 2*pad - kH)/stride) + 1."""
    input, kernel = as_tensor(input), as_tensor(kernel)
    x, k = input.data, kernel.data
    N, Ci, H, W = x.shape
    Co, Ck, kH, kW = k.shape
    if Ck != Ci:
        raise ConfigError(f"conv2d: kernel expects {Ck} input channels, input has {Ci} (input {x.shape}, kernel {k.shape})")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} pad={pad}")
    Ho = (H + 2 * pad - kH) // stride + 1
    Wo = (W + 2 * pad - kW) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ConfigError(f"conv2d: kernel {kH}x{kW} too large for input {H}x{W} with pad {pad}")

    xp = _zpad(x, pad)
    cols = _pack(xp, kH, kW, stride, Ho, Wo)
    k2 = k.reshape(Co, Ci * kH * kW)
    out = np.matmul(k2[None], cols).reshape(N, Co, Ho, Wo)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    inputs = [input, kernel] if bias is None else [input, kernel, bias]

    def bwd(g, nd):
        g3 = g.reshape(N, Co, Ho * Wo)
        gk = gx = gb = None
        if nd[1]:
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(Co, Ci, kH, kW)
        if nd[0]:
            gcols = np.matmul(k2.T[None], g3)
            gx = _unpack_add(gcols, N, Ci, H, W, kH, kW, stride, pad, Ho, Wo)
        if bias is None:
            return gx, gk
        if nd[2]:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32).reshape(bias.data.shape)
        return gx, gk, gb

    return record_op("conv2d", inputs, out, bwd)


def conv_transpose2d(input: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Exact adjoint of conv2d with the same kernel/stride/pad.

    Kernel layout matches conv2d: (Co, Ci, kH, kW); this op maps Co channels
    to Ci channels and the output side is (H - 1)*stride - 2*pad + kH.
    """
    input, kernel = as_tensor(input), as_tensor(kernel)
    y, k = input.data, kernel.data
    N, Cy, Ho, Wo = y.shape
    Co, Ci, kH, kW = k.shape
    if Cy != Co:
        raise ConfigError(f"conv_transpose2d: kernel expects {Co} input channels, input has {Cy}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv_transpose2d: invalid stride={stride} pad={pad}")
    H = (Ho - 1) * stride - 2 * pad + kH
    W = (Wo - 1) * stride - 2 * pad + kW
    if H < 1 or W < 1:
        raise ConfigError(f"conv_transpose2d: degenerate output {H}x{W}")

    k2 = k.reshape(Co, Ci * kH * kW)
    y3 = y.reshape(N, Co, Ho * Wo)
    out = _unpack_add(np.matmul(k2.T[None], y3), N, Ci, H, W, kH, kW, stride, pad, Ho, Wo)

    def bwd(g, nd):
        gp = _zpad(g, pad)
        gcols = _pack(gp, kH, kW, stride, Ho, Wo)
        gy = np.matmul(k2[None], gcols).reshape(N, Co, Ho, Wo) if nd[0] else None
        gk = (
            np.matmul(y3, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(Co, Ci, kH, kW)
            if nd[1]
            else None
        )
        return gy, gk

    return record_op("conv_transpose2d", [input, kernel], out, bwd)


def leaky_relu(input: Tensor, slope: float = 0.1) -> Tensor:
    """max(x, slope*x); the subgradient at exactly 0 is slope."""
    if not (0.0 <= slope < 1.0):
        raise ConfigError(f"leaky_relu: slope must be in [0, 1), got {slope}")
    input = as_tensor(input)
    x = input.data
    out = np.where(x >= 0, x, np.float32(slope) * x)
    dmask = np.where(x > 0, np.float32(1.0), np.float32(slope))
    return record_op("leaky_relu", [input], out, lambda g, nd: (g * dmask,))


# ---------------------------------------------------------------------------
# Bilinear warping / resampling
# ---------------------------------------------------------------------------


def _gather(flat: np.ndarray, idx: np.ndarray) -> np.ndarray:
    N, C, HW = flat.shape
    idxb = np.broadcast_to(idx[:, None, :], (N, C, idx.shape[-1]))
    return np.take_along_axis(flat, idxb, axis=2)


def _scatter_add(acc_shape, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Deterministic scatter-add over the flattened spatial axis via bincount."""
    N, C, HW = acc_shape
    M = idx.shape[-1]
    base = (np.arange(N * C, dtype=np.int64) * HW).reshape(N, C, 1)
    gidx = (np.broadcast_to(idx[:, None, :], (N, C, M)) + base).ravel()
    out = np.bincount(gidx, weights=vals.ravel().astype(np.float64), minlength=N * C * HW)
    return out.reshape(N, C, HW).astype(np.float32)


def bilinear_warp(image: Tensor, flow: Tensor) -> Tensor:
    """Sample image at (x + u, y + v) with bilinear weights, clamping to border.

    Differentiable w.r.t. both image and flow; the flow gradient is zeroed
    where the sample coordinate is clamped outside the image.
    """
    image, flow = as_tensor(image), as_tensor(flow)
    img, f = image.data, flow.data
    N, C, H, W = img.shape
    if f.shape != (N, 2, H, W):
        raise ConfigError(f"bilinear_warp: flow shape {f.shape} does not match image {img.shape}")

    gx = np.arange(W, dtype=np.float32)[None, None, :]
    gy = np.arange(H, dtype=np.float32)[None, :, None]
    rawx = gx + f[:, 0]
    rawy = gy + f[:, 1]
    xs = np.clip(rawx, 0.0, W - 1.0)
    ys = np.clip(rawy, 0.0, H - 1.0)
    x0 = np.clip(np.floor(xs), 0, max(W - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (xs - x0).astype(np.float32)
    wy = (ys - y0).astype(np.float32)

    flat = img.reshape(N, C, H * W)
    i00 = (y0 * W + x0).reshape(N, -1)
    i01 = (y0 * W + x1).reshape(N, -1)
    i10 = (y1 * W + x0).reshape(N, -1)
    i11 = (y1 * W + x1).reshape(N, -1)
    v00 = _gather(flat, i00).reshape(N, C, H, W)
    v01 = _gather(flat, i01).reshape(N, C, H, W)
    v10 = _gather(flat, i10).reshape(N, C, H, W)
    v11 = _gather(flat, i11).reshape(N, C, H, W)

    wxe = wx[:, None]
    wye = wy[:, None]
    out = (1 - wye) * ((1 - wxe) * v00 + wxe * v01) + wye * ((1 - wxe) * v10 + wxe * v11)
    out = out.astype(np.float32)

    inx = ((rawx >= 0) & (rawx <= W - 1)).astype(np.float32)
    iny = ((rawy >= 0) & (rawy <= H - 1)).astype(np.float32)

    def bwd(g, nd):
        w00 = (1 - wye) * (1 - wxe)
        w01 = (1 - wye) * wxe
        w10 = wye * (1 - wxe)
        w11 = wye * wxe
        gimg = gflow = None
        if nd[0]:
            gimg = (
                _scatter_add((N, C, H * W), i00, g * w00)
                + _scatter_add((N, C, H * W), i01, g * w01)
                + _scatter_add((N, C, H * W), i10, g * w10)
                + _scatter_add((N, C, H * W), i11, g * w11)
            ).reshape(N, C, H, W)
        if nd[1]:
            dwx = (1 - wye) * (v01 - v00) + wye * (v11 - v10)
            dwy = (1 - wxe) * (v10 - v00) + wxe * (v11 - v01)
            gu = (g * dwx).sum(axis=1) * inx
            gv = (g * dwy).sum(axis=1) * iny
            gflow = np.stack([gu, gv], axis=1).astype(np.float32)
        return gimg, gflow

    return record_op("bilinear_warp", [image, flow], out, bwd)


def local_correlation(f1: Tensor, f2: Tensor, max_disp: int) -> Tensor:
    """Channel-mean dot products of f1 with f2 shifted over a window.

    Output has (2*max_disp+1)**2 channels; channel q encodes displacement
    (dy, dx) with q = (dy + d)*(2d+1) + (dx + d), f2 zero-padded outside.
    """
    f1, f2 = as_tensor(f1), as_tensor(f2)
    a, b = f1.data, f2.data
    if a.shape != b.shape:
        raise ConfigError(f"local_correlation: shapes differ {a.shape} vs {b.shape}")
    if max_disp < 0:
        raise ConfigError(f"local_correlation: max_disp must be >= 0, got {max_disp}")
    N, C, H, W = a.shape
    d = max_disp
    side = 2 * d + 1
    bp = _zpad(b, d)
    out = np.empty((N, side * side, H, W), dtype=np.float32)
    shifts = []
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            sl = bp[:, :, d + dy : d + dy + H, d + dx : d + dx + W]
            q = (dy + d) * side + (dx + d)
            out[:, q] = (a * sl).sum(axis=1) / np.float32(C)
            shifts.append((dy, dx, sl))

    def bwd(g, nd):
        ga = gb = None
        if nd[0]:
            ga = np.zeros_like(a)
        if nd[1]:
            gbp = np.zeros_like(bp)
        for q, (dy, dx, sl) in enumerate(shifts):
            gq = g[:, q : q + 1] / np.float32(C)
            if nd[0]:
                ga += gq * sl
            if nd[1]:
                gbp[:, :, d + dy : d + dy + H, d + dx : d + dx + W] += gq * a
        if nd[1]:
            gb = gbp[:, :, d : d + H, d : d + W] if d else gbp
            gb = np.ascontiguousarray(gb)
        return ga, gb

    return record_op("local_correlation", [f1, f2], out, bwd)


def avg_pool2(input: Tensor) -> Tensor:
    """2x2 average-pool downsample; spatial dims must be even."""
    input = as_tensor(input)
    x = input.data
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ConfigError(f"avg_pool2: dims must be even, got {H}x{W}")
    out = x.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bwd(g, nd):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.float32(0.25)
        return (gx,)

    return record_op("avg_pool2", [input], out.astype(np.float32), bwd)


def _upsample2_taps(n_out: int, n_in: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.clip(np.floor(src), 0, max(n_in - 2, 0)).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(np.float32)
    return i0, i1, w


def upsample2(input: Tensor) -> Tensor:
    """Bilinear x2 upsample (half-pixel alignment); constants stay constant."""
    input = as_tensor(input)
    x = input.data
    N, C, H, W = x.shape
    y0, y1, wy = _upsample2_taps(2 * H, H)
    x0, x1, wx = _upsample2_taps(2 * W, W)
    wyc = wy[None, None, :, None]
    wxc = wx[None, None, None, :]
    tmp = (1 - wyc) * x[:, :, y0, :] + wyc * x[:, :, y1, :]
    out = ((1 - wxc) * tmp[:, :, :, x0] + wxc * tmp[:, :, :, x1]).astype(np.float32)

    def bwd(g, nd):
        gtmp = np.zeros((N, C, 2 * H, W), dtype=np.float32)
        np.add.at(gtmp, (slice(None), slice(None), slice(None), x0), (1 - wxc) * g)
        np.add.at(gtmp, (slice(None), slice(None), slice(None), x1), wxc * g)
        gx = np.zeros((N, C, H, W), dtype=np.float32)
        np.add.at(gx, (slice(None), slice(None), y0, slice(None)), (1 - wyc) * gtmp)
        np.add.at(gx, (slice(None), slice(None), y1, slice(None)), wyc * gtmp)
        return (gx,)

    return record_op("upsample2", [input], out, bwd)
