"""Two miniature trainable flow networks, one per architecture family:

* MiniED -- siamese strided-conv encoder, a correlation layer joining the two
  streams, and a transposed-conv decoder with skip concatenations predicting a
  flow map at every decoder level (global receptive field at the bottleneck).
* MiniSP -- image pyramid with a small shared feature extractor; at each level
  the second frame's features are warped by the upsampled running flow,
  correlated, and a per-level conv stack predicts a residual (local receptive
  fields, coarse-to-fine refinement).

Flow values are full-resolution pixel units at every level; warps rescale
internally. Supervised training minimises a multi-scale average end-point
error with SGD + momentum.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import ops
from .tensor import ConfigError, Tensor, backward, batch_slice, concat, no_grad, sqrt, tmean
from .zeroflow import spatial_invariance_score

MULTISCALE_WEIGHTS = (0.32, 0.08, 0.02, 0.01)  # finest -> coarsest
INPUT_GAIN = 2.0  # images arrive in [0,1]; centre and stretch for contrast


class Family(Enum):
    ENCODER_DECODER = "ed"
    SPATIAL_PYRAMID = "sp"


@dataclass
class NetworkSpec:
    family: Family
    levels: int = 4
    base_channels: int = 16
    max_disp: int = 3
    leaky_slope: float = 0.1
    in_channels: int = 3

    def __post_init__(self):
        if isinstance(self.family, str):
            self.family = Family(self.family)
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.max_disp < 1:
            raise ConfigError(f"max_disp must be >= 1, got {self.max_disp}")

    @property
    def corr_channels(self) -> int:
        return (2 * self.max_disp + 1) ** 2

    def check_input(self, shape):
        H, W = shape[2], shape[3]
        div = 1 << self.levels
        if H % div or W % div:
            raise ConfigError(f"input {H}x{W} not divisible by 2^levels = {div}")


@dataclass
class FlowOutput:
    final: Tensor  # (N, 2, H, W)
    per_level: list  # flows coarse -> fine, each (N, 2, h, w)

    def final_np(self, n: int = 0) -> np.ndarray:
        return self.final.data[n].copy()


@dataclass
class TraceEntry:
    layer: str
    mean_norm: float
    spatial_std_ratio: float
    thumbnail: np.ndarray


FeatureTrace = list  # of TraceEntry, in forward order


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class _LayerPlan:
    name: str
    in_ch: int
    out_ch: int
    kind: str  # conv3s2 | conv3s1 | conv1s1 | deconv4s2


def _ed_enc_ch(spec: NetworkSpec, level: int) -> int:
    C = spec.base_channels
    if level == 1:
        return C
    if level == 2:
        return 2 * C
    return min(4 * C * (1 << (level - 3)), 6 * C)


def _ed_dec_ch(spec: NetworkSpec, level: int) -> int:
    return max(spec.base_channels, min(_ed_enc_ch(spec, level) // 2, 4 * spec.base_channels))


def _ed_plan(spec: NetworkSpec) -> list[_LayerPlan]:
    C = spec.base_channels
    L = spec.levels
    plan = [
        _LayerPlan("enc1", spec.in_channels, C, "conv3s2"),
        _LayerPlan("enc2", C, 2 * C, "conv3s2"),
        _LayerPlan("redir", 2 * C, C, "conv1s1"),
    ]
    cur = spec.corr_channels + C
    if L == 2:
        plan.append(_LayerPlan("enc_mix", cur, 4 * C, "conv3s1"))
        cur = 4 * C
    else:
        for l in range(3, L + 1):
            plan.append(_LayerPlan(f"enc{l}", cur, _ed_enc_ch(spec, l), "conv3s2"))
            cur = _ed_enc_ch(spec, l)
    plan.append(_LayerPlan(f"flow{L}", cur, 2, "conv3s1"))
    for l in range(L - 1, 0, -1):
        dch = _ed_dec_ch(spec, l)
        plan.append(_LayerPlan(f"deconv{l}", cur, dch, "deconv4s2"))
        cur = dch + _ed_skip_ch(spec, l) + 2
        plan.append(_LayerPlan(f"flow{l}", cur, 2, "conv3s1"))
    return plan


def _ed_skip_ch(spec: NetworkSpec, level: int) -> int:
    # level 2 skips the correlation/redirect merge so decoder flow layers see
    # the matching signal directly; other levels skip the encoder features
    if level == 1:
        return spec.base_channels
    if level == 2:
        return spec.corr_channels + spec.base_channels
    return _ed_enc_ch(spec, level)


def _sp_hidden(spec: NetworkSpec, level: int) -> int:
    # fine levels run at large spatial dims; keep their predictors skinny
    return 2 * spec.base_channels if level >= 3 else spec.base_channels


def _sp_plan(spec: NetworkSpec) -> list[_LayerPlan]:
    C = spec.base_channels
    plan = [
        _LayerPlan("feat1", spec.in_channels, C, "conv3s1"),
        _LayerPlan("feat2", C, C, "conv3s1"),
    ]
    in_ch = spec.corr_channels + C + 2
    for l in range(spec.levels, 0, -1):
        h = _sp_hidden(spec, l)
        plan.append(_LayerPlan(f"pred{l}_1", in_ch, h, "conv3s1"))
        plan.append(_LayerPlan(f"pred{l}_2", h, C, "conv3s1"))
        plan.append(_LayerPlan(f"pred{l}_3", C, 2, "conv3s1"))
    return plan


_KIND_GEOM = {
    "conv3s2": (3, 2, 1),
    "conv3s1": (3, 1, 1),
    "conv1s1": (1, 1, 0),
    "deconv4s2": (4, 2, 1),
}


@dataclass
class NetworkParams:
    spec: NetworkSpec
    layers: dict  # name -> (kernel Tensor, bias Tensor)
    rng_seed: int
    name: str = ""

    def __post_init__(self):
        expected = [p.name for p in plan_for(self.spec)]
        got = list(self.layers.keys())
        if sorted(expected) != sorted(got):
            raise ConfigError(f"layer set mismatch: expected {sorted(expected)}, got {sorted(got)}")
        for lname, (k, b) in self.layers.items():
            if not (np.isfinite(k.data).all() and np.isfinite(b.data).all()):
                raise ConfigError(f"non-finite parameters in layer {lname}")

    def tensors(self):
        for lname in sorted(self.layers):
            k, b = self.layers[lname]
            yield f"{lname}.kernel", k
            yield f"{lname}.bias", b

    def copy_state(self) -> dict:
        return {n: t.data.copy() for n, t in self.tensors()}

    def load_state(self, state: dict):
        for n, t in self.tensors():
            t.data[...] = state[n]

    def set_requires_grad(self, flag: bool):
        for _, t in self.tensors():
            t.requires_grad = flag
            if flag and t.grad is None:
                t.grad = np.zeros_like(t.data)
            if not flag:
                t.grad = None


def plan_for(spec: NetworkSpec) -> list[_LayerPlan]:
    return _ed_plan(spec) if spec.family is Family.ENCODER_DECODER else _sp_plan(spec)


def init_params(spec: NetworkSpec, seed: int, name: str = "") -> NetworkParams:
    """He-uniform kernels scaled by fan-in, zero biases; fixed layer order so
    identical seeds give bit-identical parameters."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x17AB]))
    layers = {}
    for p in plan_for(spec):
        kh, _, _ = _KIND_GEOM[p.kind]
        if p.kind == "deconv4s2":
            shape = (p.in_ch, p.out_ch, kh, kh)  # conv layout: maps dim0 -> dim1
            fan_in = p.in_ch * kh * kh
        else:
            shape = (p.out_ch, p.in_ch, kh, kh)
            fan_in = p.in_ch * kh * kh
        bound = np.sqrt(6.0 / fan_in)
        kernel = Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32))
        bias = Tensor(np.zeros((1, p.out_ch, 1, 1), dtype=np.float32))
        layers[p.name] = (kernel, bias)
    return NetworkParams(spec=spec, layers=layers, rng_seed=seed, name=name)


def param_count(params: NetworkParams) -> int:
    return sum(t.data.size for _, t in params.tensors())


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _split_batch(t: Tensor, n: int):
    return batch_slice(t, 0, n), batch_slice(t, n, t.data.shape[0])


def _layer(params: NetworkParams, name: str, x: Tensor) -> Tensor:
    k, b = params.layers[name]
    kind = next(p.kind for p in plan_for(params.spec) if p.name == name)
    kh, stride, pad = _KIND_GEOM[kind]
    if kind == "deconv4s2":
        return ops.conv_transpose2d(x, k, stride, pad) + b
    return ops.conv2d(x, k, b, stride, pad)


class _Tracer:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.entries: FeatureTrace | None = [] if enabled else None

    def add(self, name: str, t: Tensor):
        if not self.enabled:
            return
        fmap = t.data[0].astype(np.float64)
        norms = np.sqrt((fmap**2).sum(axis=0))
        self.entries.append(
            TraceEntry(
                layer=name,
                mean_norm=float(norms.mean()),
                spatial_std_ratio=spatial_invariance_score(fmap),
                thumbnail=_thumbnail(fmap.mean(axis=0)),
            )
        )


def _thumbnail(map2d: np.ndarray, max_side: int = 32) -> np.ndarray:
    h, w = map2d.shape
    fy = max(1, int(np.ceil(h / max_side)))
    fx = max(1, int(np.ceil(w / max_side)))
    hh, ww = h - h % fy, w - w % fx
    if hh == 0 or ww == 0:
        return map2d.astype(np.float32)
    return (
        map2d[:hh, :ww].reshape(hh // fy, fy, ww // fx, fx).mean(axis=(1, 3)).astype(np.float32)
    )


def mini_ed_forward(I1, I2, params: NetworkParams, trace: bool = False):
    """Encoder-decoder forward; returns (FlowOutput, FeatureTrace | None)."""
    if params.spec.family is not Family.ENCODER_DECODER:
        raise ConfigError(f"params are for family {params.spec.family}, expected ENCODER_DECODER")
    spec = params.spec
    I1, I2 = _as_input(I1, spec), _as_input(I2, spec)
    slope = spec.leaky_slope
    tr = _Tracer(trace)
    L = spec.levels

    n = I1.data.shape[0]
    both = (concat([I1, I2], axis=0) - 0.5) * INPUT_GAIN  # shared siamese batch
    s1 = ops.leaky_relu(_layer(params, "enc1", both), slope)
    s2 = ops.leaky_relu(_layer(params, "enc2", s1), slope)
    a1, _ = _split_batch(s1, n)
    a2, b2 = _split_batch(s2, n)
    tr.add("enc1", a1)
    tr.add("enc2", a2)
    cv = ops.leaky_relu(ops.local_correlation(a2, b2, spec.max_disp), slope)
    tr.add("corr", cv)
    rd = ops.leaky_relu(_layer(params, "redir", a2), slope)
    tr.add("redir", rd)
    x = concat([cv, rd])
    skips = {1: a1, 2: x}
    if L == 2:
        x = ops.leaky_relu(_layer(params, "enc_mix", x), slope)
        tr.add("enc_mix", x)
    else:
        for l in range(3, L + 1):
            x = ops.leaky_relu(_layer(params, f"enc{l}", x), slope)
            skips[l] = x
            tr.add(f"enc{l}", x)

    flow = _layer(params, f"flow{L}", x)
    tr.add(f"flow{L}", flow)
    per_level = [flow]
    for l in range(L - 1, 0, -1):
        x = ops.leaky_relu(_layer(params, f"deconv{l}", x), slope)
        tr.add(f"deconv{l}", x)
        x = concat([x, skips[l], ops.upsample2(flow)])
        flow = _layer(params, f"flow{l}", x)
        tr.add(f"flow{l}", flow)
        per_level.append(flow)
    final = ops.upsample2(flow)
    tr.add("final", final)
    return FlowOutput(final=final, per_level=per_level), tr.entries


def mini_sp_forward(I1, I2, params: NetworkParams, trace: bool = False):
    """Spatial-pyramid forward; returns (FlowOutput, FeatureTrace | None)."""
    if params.spec.family is not Family.SPATIAL_PYRAMID:
        raise ConfigError(f"params are for family {params.spec.family}, expected SPATIAL_PYRAMID")
    spec = params.spec
    I1, I2 = _as_input(I1, spec), _as_input(I2, spec)
    slope = spec.leaky_slope
    tr = _Tracer(trace)
    L = spec.levels

    n = I1.data.shape[0]
    pyr = []
    both = (concat([I1, I2], axis=0) - 0.5) * INPUT_GAIN  # shared feature extractor
    for l in range(1, L + 1):
        both = ops.avg_pool2(both)
        pyr.append(both)

    def features(img):
        h = ops.leaky_relu(_layer(params, "feat1", img), slope)
        return ops.leaky_relu(_layer(params, "feat2", h), slope)

    flow = None
    per_level = []
    for l in range(L, 0, -1):
        f1, f2 = _split_batch(features(pyr[l - 1]), n)
        tr.add(f"feat{l}", f1)
        n, _, h, w = f1.data.shape
        up = ops.upsample2(flow) if flow is not None else Tensor(np.zeros((n, 2, h, w), np.float32))
        lvl_units = up * float(2.0**-l)  # full-res px -> level px
        wf2 = ops.bilinear_warp(f2, lvl_units)
        cv = ops.leaky_relu(ops.local_correlation(f1, wf2, spec.max_disp), slope)
        tr.add(f"corr{l}", cv)
        z = concat([cv, f1, lvl_units])
        z = ops.leaky_relu(_layer(params, f"pred{l}_1", z), slope)
        z = ops.leaky_relu(_layer(params, f"pred{l}_2", z), slope)
        res = _layer(params, f"pred{l}_3", z)
        flow = up + res * float(2.0**l)
        tr.add(f"flow{l}", flow)
        per_level.append(flow)
    final = ops.upsample2(flow)
    tr.add("final", final)
    return FlowOutput(final=final, per_level=per_level), tr.entries


def forward(I1, I2, params: NetworkParams, trace: bool = False):
    if params.spec.family is Family.ENCODER_DECODER:
        return mini_ed_forward(I1, I2, params, trace)
    return mini_sp_forward(I1, I2, params, trace)


def _as_input(x, spec: NetworkSpec) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))
    spec.check_input(t.data.shape)
    if t.data.shape[1] != spec.in_channels:
        raise ConfigError(f"expected {spec.in_channels} input channels, got {t.data.shape[1]}")
    return t


# ---------------------------------------------------------------------------
# Supervised training
# ---------------------------------------------------------------------------


def multiscale_weights(levels: int) -> list[float]:
    w = list(MULTISCALE_WEIGHTS)
    while len(w) < levels:
        w.append(w[-1] / 2.0)
    return w[:levels]


def _downsampled_gt(gt: np.ndarray, levels: int) -> list[np.ndarray]:
    """GT flow pooled to each pyramid scale (values stay full-res px)."""
    out = []
    cur = gt
    for _ in range(levels):
        n, c, h, w = cur.shape
        cur = cur.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)).astype(np.float32)
        out.append(cur)
    return out  # index l-1 is scale 1/2^l


def multiscale_epe_loss(out: FlowOutput, gt_batch: np.ndarray) -> Tensor:
    """Sum of per-level mean end-point errors, weighted finest -> coarsest."""
    L = len(out.per_level)
    gts = _downsampled_gt(gt_batch, L)
    weights = multiscale_weights(L)
    loss = None
    for k, flow in enumerate(out.per_level):  # coarse -> fine
        level = L - k  # scale 1/2^level
        diff = flow - Tensor(gts[level - 1])
        term = tmean(sqrt(channel_sum(diff * diff) + 1e-6)) * weights[level - 1]
        loss = term if loss is None else loss + term
    return loss


def channel_sum(s: Tensor) -> Tensor:
    """Sum over channels as a 1x1 all-ones convolution (stays on the graph)."""
    k = Tensor(np.ones((1, s.data.shape[1], 1, 1), np.float32))
    return ops.conv2d(s, k, None, 1, 0)


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 2e-3
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0


def train_supervised(dataset, spec: NetworkSpec, epochs: int, lr: float, seed: int,
                     batch_size: int = 4, momentum: float = 0.9, name: str = "",
                     warmup_epochs: int = 3, clip_norm: float = 10.0, log=None):
    """SGD with momentum on the multi-scale EPE loss.

    The rate warms up linearly over ``warmup_epochs`` and steps down 3x at
    60% and 85% of the run; gradients are clipped to a global norm to keep
    momentum from overshooting early. Returns (params, curve) where curve
    holds one mean training loss per epoch. On divergence (non-finite loss)
    training aborts and the last finite epoch's parameters are returned.
    """
    params = init_params(spec, seed, name=name)
    if epochs <= 0 or not dataset:
        return params, []
    params.set_requires_grad(True)
    vel = {n: np.zeros_like(t.data) for n, t in params.tensors()}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4]))
    i1 = np.stack([p.i1 for p in dataset])
    i2 = np.stack([p.i2 for p in dataset])
    gt = np.stack([p.gt_flow for p in dataset])
    fwd = mini_ed_forward if spec.family is Family.ENCODER_DECODER else mini_sp_forward

    curve: list[float] = []
    checkpoint = params.copy_state()
    try:
        for epoch in range(epochs):
            lr_t = lr * min(1.0, (epoch + 1) / max(warmup_epochs, 1))
            if epoch >= 0.85 * epochs:
                lr_t *= 1.0 / 9.0
            elif epoch >= 0.6 * epochs:
                lr_t *= 1.0 / 3.0
            order = rng.permutation(len(dataset))
            losses = []
            for s in range(0, len(order), batch_size):
                idx = order[s : s + batch_size]
                for _, t in params.tensors():
                    t.zero_grad()
                out, _ = fwd(Tensor(i1[idx]), Tensor(i2[idx]), params)
                loss = multiscale_epe_loss(out, gt[idx])
                backward(loss)
                gnorm = np.sqrt(
                    sum(float((t.grad.astype(np.float64) ** 2).sum()) for _, t in params.tensors())
                )
                scale = np.float32(min(1.0, clip_norm / gnorm) if gnorm > 0 else 1.0)
                for n, t in params.tensors():
                    vel[n] = momentum * vel[n] + t.grad * scale
                    t.data -= np.float32(lr_t) * vel[n]
                losses.append(loss.item())
            curve.append(float(np.mean(losses)))
            if log:
                log(epoch, curve[-1])
            checkpoint = params.copy_state()
    except Exception as exc:  # divergence: keep the last finite checkpoint
        from .tensor import NonFiniteError

        if not isinstance(exc, NonFiniteError):
            raise
        params.load_state(checkpoint)
    params.set_requires_grad(False)
    return params, curve


# ---------------------------------------------------------------------------
# Parameter container serialization ("MFNP")
# ---------------------------------------------------------------------------

_MAGIC = b"MFNP"
_VERSION = 1
_FAMILY_CODE = {Family.ENCODER_DECODER: 0, Family.SPATIAL_PYRAMID: 1}
_FAMILY_FROM = {v: k for k, v in _FAMILY_CODE.items()}


def save_params(params: NetworkParams, path):
    """Flat binary container: header with the spec fields, then named tensors
    (name length, name, 4-dim shape, raw little-endian float32)."""
    spec = params.spec
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(
            struct.pack(
                "<IBIIIdIq",
                _VERSION,
                _FAMILY_CODE[spec.family],
                spec.levels,
                spec.base_channels,
                spec.max_disp,
                spec.leaky_slope,
                spec.in_channels,
                params.rng_seed,
            )
        )
        named = list(params.tensors())
        f.write(struct.pack("<I", len(named)))
        for name, t in named:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<4I", *t.data.shape))
            f.write(t.data.astype("<f4").tobytes())


def load_params(path, name: str = "") -> NetworkParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path}: bad params magic {raw[:4]!r}")
    off = 4
    version, fam, levels, base_ch, max_disp, slope, in_ch, seed = struct.unpack_from("<IBIIIdIq", raw, off)
    off += struct.calcsize("<IBIIIdIq")
    if version != _VERSION:
        raise ConfigError(f"{path}: unsupported params version {version}")
    spec = NetworkSpec(
        family=_FAMILY_FROM[fam],
        levels=levels,
        base_channels=base_ch,
        max_disp=max_disp,
        leaky_slope=float(slope),
        in_channels=in_ch,
    )
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        tname = raw[off : off + nlen].decode("utf-8")
        off += nlen
        shape = struct.unpack_from("<4I", raw, off)
        off += 16
        size = int(np.prod(shape))
        data = np.frombuffer(raw, "<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
        tensors[tname] = Tensor(data)
    layers = {}
    for tname in tensors:
        if tname.endswith(".kernel"):
            lname = tname[: -len(".kernel")]
            layers[lname] = (tensors[tname], tensors[lname + ".bias"])
    return NetworkParams(spec=spec, layers=layers, rng_seed=seed, name=name or Path(path).stem)
