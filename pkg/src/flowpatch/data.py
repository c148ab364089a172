"""Synthetic two-frame scenes with exact ground-truth flow, plus flow-file and
image I/O and the usual hue-wheel flow rendering.

Scenes are value-noise textures evaluated as continuous functions, so frame 2
is rendered analytically at shifted coordinates and the ground truth is exact
by construction rather than estimated. Sprites are textured squares layered
over the background; dis-occluded pixels are masked out of the validity map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .patch import CameraModel

FLO_TAG = 202021.25


class FlowFormatError(Exception):
    """Malformed .flo payload; message carries the failing byte offset."""


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 128
    # background texture: seeded value-noise octaves; richer texture gives the
    # correlation layers more to match on
    octaves: int = 4
    base_spacing: float = 12.0
    amplitude: float = 0.5
    amplitude_decay: float = 0.75
    # sprites
    sprite_count: int = 3
    sprite_size_range: tuple[int, int] = (10, 20)
    sprite_speed_max: tuple[float, float] = (3.0, 1.5)
    # camera in-plane translation (image-space px, sampled per pair)
    camera_shift_max: tuple[float, float] = (3.0, 1.5)
    # disparity plane (px): top row at `far`, bottom row at `near`
    disparity_near: float = 24.0
    disparity_far: float = 6.0
    focal_px: float = 100.0
    baseline: float = 0.2

    def max_speed(self) -> float:
        """Largest flow magnitude this config can emit (documented ceiling for
        what the trained nets are expected to represent)."""
        vx = self.camera_shift_max[0] + self.sprite_speed_max[0] * (self.sprite_count > 0)
        vy = self.camera_shift_max[1] + self.sprite_speed_max[1] * (self.sprite_count > 0)
        return math.hypot(vx, vy)


@dataclass
class SamplePair:
    i1: np.ndarray  # (3, H, W) float32 in [0, 1]
    i2: np.ndarray
    gt_flow: np.ndarray  # (2, H, W) float32, frame1 -> frame2 pixel motion
    valid: np.ndarray  # (H, W) bool, False on dis-occlusions
    disparity: np.ndarray  # (H, W) float32
    cam: CameraModel
    seed: int


class _ValueNoise:
    """Continuous 3-channel value noise: bilinear interpolation of seeded
    random lattices, octave-summed. Evaluable at any (possibly shifted)
    coordinates inside the configured margin."""

    def __init__(self, rng, cfg: SceneConfig, extent_hw, margin: float):
        self.margin = margin
        self.layers = []
        amp = cfg.amplitude
        spacing = cfg.base_spacing
        for _ in range(cfg.octaves):
            if spacing < 2.0:
                break
            ny = int(math.ceil((extent_hw[0] + 2 * margin) / spacing)) + 2
            nx = int(math.ceil((extent_hw[1] + 2 * margin) / spacing)) + 2
            self.layers.append((spacing, amp, rng.random((3, ny, nx), dtype=np.float64)))
            amp *= cfg.amplitude_decay
            spacing /= 2.0

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.full((3,) + x.shape, 0.5, dtype=np.float64)
        for spacing, amp, lat in self.layers:
            gx = (x + self.margin) / spacing
            gy = (y + self.margin) / spacing
            x0 = np.clip(np.floor(gx), 0, lat.shape[2] - 2).astype(np.int64)
            y0 = np.clip(np.floor(gy), 0, lat.shape[1] - 2).astype(np.int64)
            fx = gx - x0
            fy = gy - y0
            v = (1 - fy) * ((1 - fx) * lat[:, y0, x0] + fx * lat[:, y0, x0 + 1]) + fy * (
                (1 - fx) * lat[:, y0 + 1, x0] + fx * lat[:, y0 + 1, x0 + 1]
            )
            out += amp * (v - 0.5)
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_pair(cfg: SceneConfig, seed: int, camera_shift: tuple[float, float] | None = None) -> SamplePair:
    """Render a two-frame scene; deterministic per (cfg, seed).

    ``camera_shift`` pins the background translation (used for the
    pure-translation probe pairs); otherwise it is drawn from the config range.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE11E]))
    H, W = cfg.height, cfg.width
    margin = 8.0 + max(cfg.camera_shift_max) + max(cfg.sprite_speed_max)
    bg = _ValueNoise(rng, cfg, (H, W), margin)

    if camera_shift is None:
        dx = float(rng.uniform(-cfg.camera_shift_max[0], cfg.camera_shift_max[0]))
        dy = float(rng.uniform(-cfg.camera_shift_max[1], cfg.camera_shift_max[1]))
    else:
        dx, dy = float(camera_shift[0]), float(camera_shift[1])

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    i1 = bg.sample(xx, yy)
    i2 = bg.sample(xx - dx, yy - dy)
    flow = np.empty((2, H, W), dtype=np.float32)
    flow[0] = dx
    flow[1] = dy
    id1 = np.zeros((H, W), dtype=np.int32)
    id2 = np.zeros((H, W), dtype=np.int32)

    for k in range(cfg.sprite_count):
        size = int(rng.integers(cfg.sprite_size_range[0], cfg.sprite_size_range[1] + 1))
        vx = float(rng.uniform(-cfg.sprite_speed_max[0], cfg.sprite_speed_max[0]))
        vy = float(rng.uniform(-cfg.sprite_speed_max[1], cfg.sprite_speed_max[1]))
        half = size / 2.0
        pad = half + abs(vx) + 1
        pady = half + abs(vy) + 1
        if 2 * pad >= W or 2 * pady >= H:
            continue
        cx = float(rng.uniform(pad, W - 1 - pad))
        cy = float(rng.uniform(pady, H - 1 - pady))
        tex_cfg = SceneConfig(
            octaves=2, base_spacing=max(4.0, size / 2.0), amplitude=cfg.amplitude,
            amplitude_decay=cfg.amplitude_decay,
        )
        tex = _ValueNoise(rng, tex_cfg, (size + 4, size + 4), margin=4.0)

        m1 = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        m2 = (np.abs(xx - (cx + vx)) <= half) & (np.abs(yy - (cy + vy)) <= half)
        i1[:, m1] = tex.sample(xx[m1] - cx + half, yy[m1] - cy + half)
        i2[:, m2] = tex.sample(xx[m2] - (cx + vx) + half, yy[m2] - (cy + vy) + half)
        flow[0][m1] = vx
        flow[1][m1] = vy
        id1[m1] = k + 1
        id2[m2] = k + 1

    # validity: the flow target must land in frame 2 on the same layer
    tx = np.rint(xx + flow[0]).astype(np.int64)
    ty = np.rint(yy + flow[1]).astype(np.int64)
    inb = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
    valid = np.zeros((H, W), dtype=bool)
    valid[inb] = id2[ty[inb], tx[inb]] == id1[inb]

    disparity = (
        cfg.disparity_far
        + (cfg.disparity_near - cfg.disparity_far) * (yy / max(H - 1, 1))
    ).astype(np.float32)
    # relative pose consistent with the background shift at the mean scene depth
    z_mean = cfg.focal_px * cfg.baseline / float(disparity.mean())
    cam = CameraModel(
        focal_px=cfg.focal_px,
        cx=(W - 1) / 2.0,
        cy=(H - 1) / 2.0,
        baseline=cfg.baseline,
        R=np.eye(3),
        t=np.array([-dx * z_mean / cfg.focal_px, -dy * z_mean / cfg.focal_px, 0.0]),
    )
    return SamplePair(
        i1=i1.astype(np.float32),
        i2=i2.astype(np.float32),
        gt_flow=flow,
        valid=valid,
        disparity=disparity,
        cam=cam,
        seed=seed,
    )


def generate_dataset(cfg: SceneConfig, count: int, seed: int) -> list[SamplePair]:
    return [generate_pair(cfg, int(s)) for s in np.random.SeedSequence(seed).generate_state(count)]


def replicated_noise_pair(cfg: SceneConfig, seed: int) -> SamplePair:
    """Uniform-noise image replicated into both frames: true flow is zero."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0F10]))
    H, W = cfg.height, cfg.width
    img = rng.random((3, H, W), dtype=np.float64).astype(np.float32)
    yy = np.arange(H, dtype=np.float64)[:, None]
    disparity = (
        cfg.disparity_far + (cfg.disparity_near - cfg.disparity_far) * (yy / max(H - 1, 1))
    ) * np.ones((1, W))
    cam = CameraModel(
        focal_px=cfg.focal_px, cx=(W - 1) / 2.0, cy=(H - 1) / 2.0, baseline=cfg.baseline
    )
    return SamplePair(
        i1=img,
        i2=img.copy(),
        gt_flow=np.zeros((2, H, W), np.float32),
        valid=np.ones((H, W), bool),
        disparity=disparity.astype(np.float32),
        cam=cam,
        seed=seed,
    )


def translation_probes(cfg: SceneConfig, shifts, seed: int) -> list[SamplePair]:
    """Pure-translation pairs (no sprites) at the given (dx, dy) shifts."""
    base = np.random.SeedSequence(seed).generate_state(len(shifts))
    quiet = _without_sprites(cfg)
    return [generate_pair(quiet, int(s), camera_shift=sh) for s, sh in zip(base, shifts)]


def _without_sprites(cfg: SceneConfig) -> SceneConfig:
    from dataclasses import replace

    return replace(cfg, sprite_count=0)


# ---------------------------------------------------------------------------
# .flo interchange, PNG and manifest I/O
# ---------------------------------------------------------------------------


def write_flo(flow: np.ndarray, path):
    """Middlebury layout: float32 tag, int32 width/height, interleaved (u, v)
    row-major float32, all little-endian."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    _, H, W = flow.shape
    with open(path, "wb") as f:
        f.write(np.array([FLO_TAG], dtype="<f4").tobytes())
        f.write(np.array([W, H], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(flow.transpose(1, 2, 0)).astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header at offset {len(raw)} (need 12 bytes)")
    tag = np.frombuffer(raw, "<f4", count=1, offset=0)[0]
    if tag != np.float32(FLO_TAG):
        raise FlowFormatError(f"{path}: bad magic tag {tag!r} at offset 0 (expected {FLO_TAG})")
    W, H = (int(v) for v in np.frombuffer(raw, "<i4", count=2, offset=4))
    if W <= 0 or H <= 0:
        raise FlowFormatError(f"{path}: invalid dims {W}x{H} at offset 4")
    need = 12 + 8 * H * W
    if len(raw) != need:
        raise FlowFormatError(
            f"{path}: payload ends at offset {len(raw)}, expected {need} bytes for {W}x{H}"
        )
    data = np.frombuffer(raw, "<f4", count=2 * H * W, offset=12).reshape(H, W, 2)
    return np.ascontiguousarray(data.transpose(2, 0, 1))


def save_image(path, img: np.ndarray):
    """Write a (C,H,W) or (H,W) float image in [0,1] as an 8-bit PNG."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path)


def load_image(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Hue from flow angle, saturation from magnitude (white at zero flow).

    max_mag defaults to the 99th percentile of the magnitudes; the output only
    depends on flow/max_mag, so jointly rescaling both leaves it unchanged.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[0], flow[1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99.0))
    if max_mag <= 0:
        max_mag = 1.0
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    val = np.ones_like(sat)

    # vectorised HSV -> RGB
    k = (hue * 6.0) % 6.0
    i = np.floor(k)
    f = k - i
    p = val * (1 - sat)
    q = val * (1 - sat * f)
    t = val * (1 - sat * (1 - f))
    i = i.astype(np.int64) % 6
    rgb = np.choose(
        i[None],
        [
            np.stack([val, t, p]),
            np.stack([q, val, p]),
            np.stack([p, val, t]),
            np.stack([p, q, val]),
            np.stack([t, p, val]),
            np.stack([val, p, q]),
        ],
    )
    return rgb.astype(np.float32)


def save_dataset(out_dir, pairs: list[SamplePair], seed: int) -> Path:
    """Write PNG frames, .flo ground truth, masks and a JSONL manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for idx, p in enumerate(pairs):
            sid = f"{idx:05d}"
            rec = {
                "id": sid,
                "i1": f"{sid}_img1.png",
                "i2": f"{sid}_img2.png",
                "flow": f"{sid}_flow.flo",
                "valid": f"{sid}_valid.png",
                "disparity": f"{sid}_disp.npy",
                "seed": int(p.seed),
                "cam": {
                    "focal_px": p.cam.focal_px,
                    "cx": p.cam.cx,
                    "cy": p.cam.cy,
                    "baseline": p.cam.baseline,
                    "R": p.cam.R.ravel().tolist(),
                    "t": p.cam.t.tolist(),
                },
            }
            save_image(out / rec["i1"], p.i1)
            save_image(out / rec["i2"], p.i2)
            write_flo(p.gt_flow, out / rec["flow"])
            save_image(out / rec["valid"], p.valid.astype(np.float32))
            np.save(out / rec["disparity"], p.disparity)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"count": len(pairs), "seed": int(seed)}
    (out / "dataset.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return manifest


def load_dataset(in_dir) -> list[SamplePair]:
    src = Path(in_dir)
    manifest = src / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {src}")
    pairs = []
    for line in manifest.read_text().splitlines():
        rec = json.loads(line)
        cam = CameraModel(
            focal_px=rec["cam"]["focal_px"],
            cx=rec["cam"]["cx"],
            cy=rec["cam"]["cy"],
            baseline=rec["cam"]["baseline"],
            R=np.asarray(rec["cam"]["R"]).reshape(3, 3),
            t=np.asarray(rec["cam"]["t"]),
        )
        valid_img = np.asarray(Image.open(src / rec["valid"]).convert("L"))
        pairs.append(
            SamplePair(
                i1=load_image(src / rec["i1"]),
                i2=load_image(src / rec["i2"]),
                gt_flow=read_flo(src / rec["flow"]),
                valid=valid_img > 127,
                disparity=np.load(src / rec["disparity"]),
                cam=cam,
                seed=int(rec["seed"]),
            )
        )
    return pairs
