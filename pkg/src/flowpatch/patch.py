"""The adversarial patch: circular-masked pixel grid, transform sampling, the
differentiable paste operator, and the homography machinery used to move a
pasted patch consistently with camera motion and scene depth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ConfigError, Tensor, as_tensor, record_op


class PlacementError(Exception):
    """Patch footprint would leave the image."""


def circular_mask(h: int, w: int) -> np.ndarray:
    """Boolean disc of diameter min(h, w) centred on the pixel grid."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = min(h, w) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r


@dataclass
class Patch:
    """Optimisable pixel grid in [0,1] behind an immutable circular mask."""

    pixels: np.ndarray  # (h, w, 3) float32
    mask: np.ndarray = None  # (h, w) bool

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ConfigError(f"patch pixels must be (h, w, 3), got {self.pixels.shape}")
        if self.mask is None:
            self.mask = circular_mask(*self.pixels.shape[:2])
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.pixels.shape[:2]:
            raise ConfigError("mask shape does not match pixels")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    @property
    def diameter(self) -> int:
        return min(self.pixels.shape[:2])

    @classmethod
    def random(cls, size: int, seed: int) -> "Patch":
        rng = np.random.default_rng(seed)
        return cls(rng.random((size, size, 3)).astype(np.float32))

    def clipped(self) -> "Patch":
        return Patch(np.clip(self.pixels, 0.0, 1.0), self.mask)

    def save(self, path, provenance: dict | None = None):
        """Write an 8-bit PNG plus a JSON sidecar (quantisation step 1/255)."""
        path = Path(path)
        img = np.round(np.clip(self.pixels, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(path)
        meta = {
            "height": int(self.pixels.shape[0]),
            "width": int(self.pixels.shape[1]),
            "mask_diameter": int(self.diameter),
            "provenance": provenance or {},
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Patch":
        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        return cls(img)


@dataclass
class TransformRanges:
    """Half-widths of the augmentation distribution: angle in degrees around 0,
    scale multiplicative around 1."""

    angle_deg: float = 10.0
    scale: float = 0.05


@dataclass
class TransformSample:
    angle_deg: float
    scale: float
    location: tuple[float, float]  # (cx, cy) pixel centre in the image


def _valid_center_box(image_dims, patch_dims, max_scale) -> tuple[float, float, float, float]:
    H, W = image_dims
    r = max_scale * (min(patch_dims) / 2.0)
    return r, W - 1 - r, r, H - 1 - r  # x_lo, x_hi, y_lo, y_hi


def sample_transform(rng, image_dims, patch_dims, ranges: TransformRanges) -> TransformSample:
    """Uniform placement over all centres keeping the disc footprint inside the
    image at maximum scale; uniform angle/scale over the configured ranges."""
    x_lo, x_hi, y_lo, y_hi = _valid_center_box(image_dims, patch_dims, 1.0 + ranges.scale)
    if x_hi < x_lo or y_hi < y_lo:
        raise ConfigError(
            f"patch {patch_dims} at max scale does not fit image {image_dims}"
        )
    angle = float(rng.uniform(-ranges.angle_deg, ranges.angle_deg))
    scale = float(rng.uniform(1.0 - ranges.scale, 1.0 + ranges.scale))
    cx = float(rng.uniform(x_lo, x_hi))
    cy = float(rng.uniform(y_lo, y_hi))
    return TransformSample(angle_deg=angle, scale=scale, location=(cx, cy))


def _inverse_patch_coords(xg, yg, t: TransformSample, patch_dims):
    """Map image coords to patch-pixel coords for a rotate/scale-about-centre
    paste (inverse transform)."""
    h, w = patch_dims
    th = math.radians(t.angle_deg)
    c, s = math.cos(th), math.sin(th)
    dx = xg - t.location[0]
    dy = yg - t.location[1]
    px = (c * dx + s * dy) / t.scale + (w - 1) / 2.0
    py = (-s * dx + c * dy) / t.scale + (h - 1) / 2.0
    return px.astype(np.float32), py.astype(np.float32)


def _bilinear_taps(px, py, h, w):
    """Corner indices/weights for sampling a (h, w) grid at (py, px); samples
    outside the grid get weight 0 via the validity mask."""
    inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    pxc = np.clip(px, 0, w - 1)
    pyc = np.clip(py, 0, h - 1)
    x0 = np.clip(np.floor(pxc), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(pyc), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (pxc - x0).astype(np.float32)
    fy = (pyc - y0).astype(np.float32)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    return inside, (y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)


def _sample_grid(grid: np.ndarray, taps) -> np.ndarray:
    inside, *corners = taps
    out = np.zeros(inside.shape, dtype=np.float32) if grid.ndim == 2 else np.zeros(
        (grid.shape[0],) + inside.shape, dtype=np.float32
    )
    for (yy, xx, wgt) in corners:
        if grid.ndim == 2:
            out += wgt * grid[yy, xx]
        else:
            out += wgt[None] * grid[:, yy, xx]
    return out * inside.astype(np.float32)


class _PastePlan:
    """Per-frame sampling geometry: which image pixels are covered and the
    patch-space bilinear taps for each of them."""

    __slots__ = ("ys", "xs", "taps")

    def __init__(self, ys, xs, taps):
        self.ys = ys
        self.xs = xs
        self.taps = taps


def _plan_from_coords(px, py, yg, xg, mask_f: np.ndarray):
    h, w = mask_f.shape
    taps = _bilinear_taps(px, py, h, w)
    m = _sample_grid(mask_f, taps) >= 0.5
    if not m.any():
        return None
    taps_sel = (
        taps[0][m],
        tuple(a[m] for a in taps[1]),
        tuple(a[m] for a in taps[2]),
        tuple(a[m] for a in taps[3]),
        tuple(a[m] for a in taps[4]),
    )
    return _PastePlan(yg[m], xg[m], taps_sel)


def _static_plan(t: TransformSample, image_dims, patch: Patch):
    H, W = image_dims
    h, w = patch.size
    r = t.scale * (patch.diameter / 2.0)
    cx, cy = t.location
    if cx - r < 0 or cx + r > W - 1 or cy - r < 0 or cy + r > H - 1:
        raise PlacementError(
            f"patch footprint (centre {t.location}, radius {r:.2f}) leaves the {H}x{W} image"
        )
    x_lo, x_hi = int(math.floor(cx - r - 1)), int(math.ceil(cx + r + 1))
    y_lo, y_hi = int(math.floor(cy - r - 1)), int(math.ceil(cy + r + 1))
    x_lo, y_lo = max(x_lo, 0), max(y_lo, 0)
    x_hi, y_hi = min(x_hi, W - 1), min(y_hi, H - 1)
    yg, xg = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
    px, py = _inverse_patch_coords(xg.astype(np.float64), yg.astype(np.float64), t, (h, w))
    return _plan_from_coords(px, py, yg, xg, patch.mask.astype(np.float32))


def _composite(images: Tensor, patch_px: Tensor, plans) -> Tensor:
    """Recorded paste op: write bilinear patch samples over plan pixels.

    images: (N, 3, H, W); patch_px: (1, 3, h, w) with out-of-mask pixels
    already zeroed (they are never read). plans: one _PastePlan or None per
    batch element.
    """
    images, patch_px = as_tensor(images), as_tensor(patch_px)
    N = images.data.shape[0]
    if len(plans) != N:
        raise ConfigError(f"{len(plans)} paste plans for batch of {N}")
    ph, pw = patch_px.data.shape[2], patch_px.data.shape[3]
    out = images.data.copy()
    for n, plan in enumerate(plans):
        if plan is None:
            continue
        _, *corners = plan.taps
        vals = np.zeros((3, plan.ys.size), dtype=np.float32)
        for (yy, xx, wgt) in corners:
            vals += wgt[None] * patch_px.data[0][:, yy, xx]
        out[n][:, plan.ys, plan.xs] = vals

    def bwd(g, nd):
        gimg = gpatch = None
        if nd[0]:
            gimg = g.copy()
            for n, plan in enumerate(plans):
                if plan is not None:
                    gimg[n][:, plan.ys, plan.xs] = 0.0
        if nd[1]:
            acc = np.zeros((3, ph * pw), dtype=np.float64)
            for n, plan in enumerate(plans):
                if plan is None:
                    continue
                gsel = g[n][:, plan.ys, plan.xs]
                for (yy, xx, wgt) in plan.taps[1:]:
                    flat = yy * pw + xx
                    for c in range(3):
                        acc[c] += np.bincount(flat, weights=(gsel[c] * wgt).astype(np.float64), minlength=ph * pw)
            gpatch = np.zeros_like(patch_px.data)
            gpatch[0] = acc.reshape(3, ph, pw).astype(np.float32)
        return gimg, gpatch

    return record_op("apply_patch", [images, patch_px], out, bwd)


def patch_pixels_tensor(p: Patch) -> Tensor:
    """Patch pixels as a (1,3,h,w) leaf with out-of-mask pixels zeroed."""
    px = (p.pixels * p.mask[:, :, None]).transpose(2, 0, 1)[None]
    return Tensor(np.ascontiguousarray(px), requires_grad=True)


def apply_patch(I, p, t) -> Tensor:
    """Paste patch p into image(s) I at transform t; differentiable w.r.t. the
    patch pixels when ``p`` is given as a (1,3,h,w) Tensor.

    I: Tensor or array (N,3,H,W); t: one TransformSample (shared by the batch)
    or a list of per-element samples. Pixels outside the transformed disc are
    returned bit-exactly.
    """
    I = as_tensor(I)
    if isinstance(p, Patch):
        mask = p.mask
        px_t = Tensor((p.pixels * p.mask[:, :, None]).transpose(2, 0, 1)[None].copy())
        patch_obj = p
    else:
        px_t = as_tensor(p)
        h, w = px_t.data.shape[2], px_t.data.shape[3]
        mask = circular_mask(h, w)
        patch_obj = Patch(np.moveaxis(px_t.data[0], 0, 2), mask)
    N, _, H, W = I.data.shape
    ts = t if isinstance(t, (list, tuple)) else [t] * N
    plans = [_static_plan(tt, (H, W), patch_obj) for tt in ts]
    return _composite(I, px_t, plans)


def patch_footprint_mask(t: TransformSample, image_dims, patch: Patch) -> np.ndarray:
    """Boolean (H,W) map of the transformed disc in the frame-1 image."""
    H, W = image_dims
    plan = _static_plan(t, (H, W), patch)
    out = np.zeros((H, W), dtype=bool)
    if plan is not None:
        out[plan.ys, plan.xs] = True
    return out


# ---------------------------------------------------------------------------
# Homography-based patch motion
# ---------------------------------------------------------------------------


@dataclass
class CameraModel:
    """Pinhole intrinsics plus the relative pose mapping frame-1 camera
    coordinates to frame-2: P2 = R @ P1 + t."""

    focal_px: float
    cx: float
    cy: float
    baseline: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)


@dataclass
class PatchMotion:
    """3x3 homography mapping frame-1 patch-region image points to frame-2."""

    H: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64).reshape(3, 3)
        if not np.isfinite(self.H).all():
            raise ConfigError("homography has non-finite entries")
        det = np.linalg.det(self.H)
        if abs(det) <= 1e-12:
            raise ConfigError(f"homography is singular (|det|={abs(det):.2e})")
        self.H = self.H / self.H[2, 2]

    @classmethod
    def identity(cls) -> "PatchMotion":
        return cls(np.eye(3))


def _normalise_points(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    ph = np.column_stack([pts, np.ones(len(pts))]) @ T.T
    return ph, T


def fit_homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalised DLT over >= 4 correspondences; raises on degeneracy."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4 or len(src) != len(dst):
        raise ConfigError("DLT needs >= 4 matched point pairs")
    sph, Ts = _normalise_points(src)
    dph, Td = _normalise_points(dst)
    rows = []
    for (x, y, _), (u, v, _) in zip(sph, dph):
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
    A = np.asarray(rows)
    _, sv, vt = np.linalg.svd(A)
    if sv[-2] < 1e-12:
        raise ConfigError("degenerate correspondences (collinear points?)")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return H / H[2, 2]


def _apply_h(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return ph[:, :2] / ph[:, 2:3]


def patch_region_points(t: TransformSample, diameter: float) -> np.ndarray:
    """Bounding-square corners of the transformed disc plus its centre
    (5 correspondences for the DLT)."""
    r = t.scale * diameter / 2.0
    th = math.radians(t.angle_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    rel = np.array([[-r, -r], [r, -r], [r, r], [-r, r], [0.0, 0.0]])
    return rel @ rot.T + np.asarray(t.location, dtype=np.float64)


def project_patch_points(t1: TransformSample, disparity: float, cam: CameraModel, diameter: float = 32.0):
    """Frame-1 patch-region points and their frame-2 reprojections at the
    frontoparallel plane of depth f*baseline/disparity."""
    if disparity <= 0:
        raise ConfigError(f"disparity must be > 0, got {disparity}")
    pts1 = patch_region_points(t1, diameter)
    Z = cam.focal_px * cam.baseline / disparity
    X = (pts1[:, 0] - cam.cx) * Z / cam.focal_px
    Y = (pts1[:, 1] - cam.cy) * Z / cam.focal_px
    P1 = np.column_stack([X, Y, np.full(len(pts1), Z)])
    P2 = P1 @ cam.R.T + cam.t
    if np.any(P2[:, 2] <= 0):
        raise ConfigError("patch points move behind the camera under this pose")
    pts2 = np.column_stack(
        [
            cam.focal_px * P2[:, 0] / P2[:, 2] + cam.cx,
            cam.focal_px * P2[:, 1] / P2[:, 2] + cam.cy,
        ]
    )
    return pts1, pts2


def estimate_patch_homography(t1: TransformSample, disparity: float, cam: CameraModel) -> PatchMotion:
    """Back-project the patch-region points to depth f*baseline/disparity,
    move them by the relative pose, re-project into frame 2, and fit the
    homography by normalised DLT.

    The fitted map is the one induced by the frontoparallel plane at that
    depth, so it is independent of the sampling square's size.
    """
    pts1, pts2 = project_patch_points(t1, disparity, cam)
    return PatchMotion(fit_homography_dlt(pts1, pts2))


def reprojection_residual(motion: PatchMotion, src: np.ndarray, dst: np.ndarray) -> float:
    pred = _apply_h(motion.H, src)
    return float(np.sqrt(((pred - dst) ** 2).sum(axis=1)).max())


def sample_patch_disparity(disp_map: np.ndarray, footprint: np.ndarray, rng) -> float:
    """Draw a disparity between the patch-region minimum and the scene maximum
    (free space between the camera and the covered surface)."""
    lo = float(disp_map[footprint].min())
    hi = float(disp_map.max())
    if hi <= lo:
        raise ConfigError(f"no free-space disparity interval (lo={lo}, hi={hi})")
    return float(rng.uniform(lo, hi))


def apply_patch_pair_moving(I1, I2, p, t1: TransformSample, motion: PatchMotion):
    """Frame 1 gets the static paste; frame 2 gets the homography-warped patch
    with the warped mask thresholded at 0.5. Returns (frame1, frame2)."""
    I1, I2 = as_tensor(I1), as_tensor(I2)
    if isinstance(p, Patch):
        patch_obj = p
        px_t = Tensor((p.pixels * p.mask[:, :, None]).transpose(2, 0, 1)[None].copy())
    else:
        px_t = as_tensor(p)
        patch_obj = Patch(np.moveaxis(px_t.data[0], 0, 2))
    N, _, H, W = I1.data.shape
    out1 = _composite(I1, px_t, [_static_plan(t1, (H, W), patch_obj)] * N)

    # frame-2 footprint bbox from the H-mapped frame-1 footprint square
    d = patch_obj.diameter
    sq1 = patch_region_points(t1, d)[:4]
    sq2 = _apply_h(motion.H, sq1)
    if (
        sq2[:, 0].min() < 0
        or sq2[:, 0].max() > W - 1
        or sq2[:, 1].min() < 0
        or sq2[:, 1].max() > H - 1
    ):
        raise PlacementError(f"warped patch footprint leaves the {H}x{W} frame 2")
    x_lo = max(int(math.floor(sq2[:, 0].min() - 1)), 0)
    x_hi = min(int(math.ceil(sq2[:, 0].max() + 1)), W - 1)
    y_lo = max(int(math.floor(sq2[:, 1].min() - 1)), 0)
    y_hi = min(int(math.ceil(sq2[:, 1].max() + 1)), H - 1)
    yg, xg = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
    pts = np.column_stack([xg.ravel().astype(np.float64), yg.ravel().astype(np.float64)])
    back = _apply_h(np.linalg.inv(motion.H), pts)
    px, py = _inverse_patch_coords(back[:, 0].reshape(yg.shape), back[:, 1].reshape(yg.shape), t1, patch_obj.size)
    plan2 = _plan_from_coords(px, py, yg, xg, patch_obj.mask.astype(np.float32))
    out2 = _composite(I2, px_t, [plan2] * N)
    return out1, out2
