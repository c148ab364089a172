"""Coarse-to-fine Horn-Schunck variational flow.

Quadratic brightness-constancy data term with quadratic smoothness, solved by
Jacobi iterations on an image pyramid with inter-level warping. On identical
frames the temporal derivative vanishes everywhere, so the zero-initialised
solve returns an exactly-zero field at every level -- the classical-immunity
property the patch attacks cannot break.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# conventional 3x3 neighbourhood-average stencil for the smoothness term
_AVG_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]],
    dtype=np.float32,
)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class HSConfig:
    alpha: float = 15.0
    iters_per_level: int = 100
    levels: int = 4
    warps_per_level: int = 3

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.iters_per_level < 1 or self.levels < 1 or self.warps_per_level < 1:
            raise ValueError("iters_per_level, levels and warps_per_level must be >= 1")


def to_gray(image: np.ndarray) -> np.ndarray:
    """Collapse a (3,H,W) or (1,H,W) image to a (H,W) luma map."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, img, axes=1)
    raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")


def _filter2(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size correlation with edge replication."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw))
    return np.einsum("hwij,ij->hw", win, kernel, optimize=True).astype(np.float32)


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    return x[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _upsample_flow(u: np.ndarray, shape) -> np.ndarray:
    """Nearest x2 blow-up then crop; values scaled by the caller."""
    up = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)
    return np.ascontiguousarray(up[: shape[0], : shape[1]])


def _warp_gray(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    xs = np.clip(np.arange(w, dtype=np.float32)[None, :] + u, 0, w - 1)
    ys = np.clip(np.arange(h, dtype=np.float32)[:, None] + v, 0, h - 1)
    x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xs - x0
    wy = ys - y0
    out = (1 - wy) * ((1 - wx) * img[y0, x0] + wx * img[y0, x1]) + wy * (
        (1 - wx) * img[y1, x0] + wx * img[y1, x1]
    )
    return out.astype(np.float32)


_KX = np.array([[-0.5, 0.0, 0.5]], dtype=np.float32)


def _derivatives(i1: np.ndarray, i2w: np.ndarray):
    avg = 0.5 * (i1 + i2w)
    ix = _filter2(avg, _KX)
    iy = _filter2(avg, _KX.T)
    it = i2w - i1
    return ix, iy, it


def horn_schunck(I1, I2, cfg: HSConfig | None = None) -> np.ndarray:
    """Estimate flow from frame 1 to frame 2; returns a (2,H,W) float32 field.

    Accepts (H,W), (1,H,W) or (3,H,W) inputs (colour is converted to luma).
    """
    cfg = cfg or HSConfig()
    # luma is scaled to the classical 0-255 brightness convention so the
    # default smoothness weight keeps its textbook meaning
    g1 = to_gray(I1) * np.float32(255.0)
    g2 = to_gray(I2) * np.float32(255.0)
    if g1.shape != g2.shape:
        raise ValueError(f"frame shapes differ: {g1.shape} vs {g2.shape}")

    pyr1, pyr2 = [g1], [g2]
    for _ in range(cfg.levels - 1):
        if min(pyr1[-1].shape) < 8:
            break
        pyr1.append(_downsample(pyr1[-1]))
        pyr2.append(_downsample(pyr2[-1]))

    u = np.zeros_like(pyr1[-1])
    v = np.zeros_like(pyr1[-1])
    alpha2 = np.float32(cfg.alpha**2)

    for lvl in range(len(pyr1) - 1, -1, -1):
        p1, p2 = pyr1[lvl], pyr2[lvl]
        if u.shape != p1.shape:
            u = _upsample_flow(u, p1.shape) * np.float32(2.0)
            v = _upsample_flow(v, p1.shape) * np.float32(2.0)
        for _ in range(cfg.warps_per_level):
            i2w = _warp_gray(p2, u, v)
            ix, iy, it = _derivatives(p1, i2w)
            denom = alpha2 + ix * ix + iy * iy
            du = np.zeros_like(u)
            dv = np.zeros_like(v)
            for _ in range(cfg.iters_per_level):
                du_avg = _filter2(du, _AVG_KERNEL)
                dv_avg = _filter2(dv, _AVG_KERNEL)
                shared = (ix * du_avg + iy * dv_avg + it) / denom
                du = du_avg - ix * shared
                dv = dv_avg - iy * shared
            u = u + du
            v = v + dv

    return np.stack([u, v]).astype(np.float32)
