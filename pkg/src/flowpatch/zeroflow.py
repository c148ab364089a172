"""Zero-motion diagnostic: feed a replicated noise image (true flow is zero
everywhere) through a flow method, with and without the adversarial patch, and
record per-layer activation statistics. Deviations from zero output are the
measurement, not an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .patch import Patch, TransformRanges, TransformSample, apply_patch, sample_transform
from .tensor import Tensor, no_grad


def spatial_invariance_score(feature_map: np.ndarray) -> float:
    """Spread of the per-position channel norm over space: std divided by
    (mean + 1e-8). 0 for a perfectly uniform response."""
    f = np.asarray(feature_map, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    norms = np.sqrt((f**2).sum(axis=0))
    return float(norms.std() / (norms.mean() + 1e-8))


def checkerboard_score(feature_map: np.ndarray) -> float:
    """Fraction of the non-DC spectral energy of the channel-mean map sitting
    in the period-2 alternation bins.

    Measured on the FFT bins at the Nyquist frequency: the (Nyquist, Nyquist)
    checkerboard bin together with the two axis-aligned Nyquist stripe bins
    that strided deconvolutions also excite. Odd-sized maps are centre-cropped
    by one row/column so the Nyquist bins are exact. 1.0 for a pure +/-1
    checkerboard, 0 for any constant map.
    """
    f = np.asarray(feature_map, dtype=np.float64)
    m = f.mean(axis=0) if f.ndim == 3 else f
    H, W = m.shape
    if H < 4 or W < 4:
        raise ValueError(f"map must be at least 4x4, got {H}x{W}")
    m = m[: H - H % 2, : W - W % 2]
    H, W = m.shape
    F = np.fft.fft2(m)
    E = np.abs(F) ** 2
    total = E.sum() - E[0, 0]
    if total <= 1e-24:
        return 0.0
    period2 = E[H // 2, W // 2] + E[H // 2, 0] + E[0, W // 2]
    return float(min(period2 / total, 1.0))


# traced-layer stage classification (names come from the network tracers)
def layer_stage(name: str) -> str:
    if name.startswith(("deconv", "flow", "pred")) or name == "final":
        return "decoder"
    if name.startswith(("enc", "corr", "redir", "feat")):
        return "encoder"
    return "other"


@dataclass
class ZeroFlowLayerStats:
    layer: str
    stage: str
    mean_norm_with: float
    mean_norm_without: float
    std_ratio_with: float
    std_ratio_without: float
    checkerboard: float


@dataclass
class ZeroFlowReport:
    method: str
    seed: int
    layers: list  # of ZeroFlowLayerStats
    final_mag_with: float
    final_mag_without: float
    placement: TransformSample | None
    thumbnails: dict = field(default_factory=dict)  # layer -> (with, without)

    def decoder_amplification(self) -> tuple[float, float]:
        """(max decoder with/without mean-norm ratio, max encoder ratio)."""
        eps = 1e-8

        def ratio(row):
            return (row.mean_norm_with + eps) / (row.mean_norm_without + eps)

        dec = [ratio(r) for r in self.layers if r.stage == "decoder"]
        enc = [ratio(r) for r in self.layers if r.stage == "encoder"]
        return (max(dec) if dec else 0.0, max(enc) if enc else 0.0)


def zero_flow_test(
    method,
    patch: Patch | None = None,
    seed: int = 0,
    image_dims: tuple[int, int] = (64, 128),
    placement: TransformSample | None = None,
) -> ZeroFlowReport:
    """Run a flow method on replicated uniform-noise frames.

    ``method`` needs ``name`` and ``compute(i1, i2, trace=...)`` returning
    (flow (2,H,W), trace-or-None). With a patch, the same paste goes into both
    frames, so the true flow stays zero; any nonzero prediction or activation
    asymmetry is the diagnostic.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2E80F10]))
    H, W = image_dims
    noise = rng.random((3, H, W), dtype=np.float64).astype(np.float32)

    frames = {"without": noise}
    if patch is not None:
        if placement is None:
            placement = sample_transform(rng, (H, W), patch.size, TransformRanges())
        with no_grad():
            pasted = apply_patch(Tensor(noise[None]), patch, placement)
        frames["with"] = pasted.data[0]
    else:
        frames["with"] = noise

    results = {}
    for key, img in frames.items():
        flow, trace = method.compute(img, img.copy(), trace=True)
        results[key] = (flow, trace or [])

    flow_w, trace_w = results["with"]
    flow_o, trace_o = results["without"]
    by_name = {e.layer: e for e in trace_o}
    layers = []
    thumbs = {}
    for e in trace_w:
        o = by_name.get(e.layer)
        layers.append(
            ZeroFlowLayerStats(
                layer=e.layer,
                stage=layer_stage(e.layer),
                mean_norm_with=e.mean_norm,
                mean_norm_without=o.mean_norm if o else float("nan"),
                std_ratio_with=e.spatial_std_ratio,
                std_ratio_without=o.spatial_std_ratio if o else float("nan"),
                checkerboard=checkerboard_score(e.thumbnail)
                if min(e.thumbnail.shape) >= 4
                else 0.0,
            )
        )
        thumbs[e.layer] = (e.thumbnail, o.thumbnail if o else None)

    return ZeroFlowReport(
        method=getattr(method, "name", type(method).__name__),
        seed=seed,
        layers=layers,
        final_mag_with=float(np.hypot(flow_w[0], flow_w[1]).mean()),
        final_mag_without=float(np.hypot(flow_o[0], flow_o[1]).mean()),
        placement=placement if patch is not None else None,
        thumbnails=thumbs,
    )


def report_rows(report: ZeroFlowReport) -> list[dict]:
    rows = []
    for r in report.layers:
        rows.append(
            {
                "method": report.method,
                "layer": r.layer,
                "stage": r.stage,
                "mean_norm_with_patch": f"{r.mean_norm_with:.6g}",
                "mean_norm_without": f"{r.mean_norm_without:.6g}",
                "spatial_std_ratio_with": f"{r.std_ratio_with:.6g}",
                "spatial_std_ratio_without": f"{r.std_ratio_without:.6g}",
                "checkerboard_score": f"{r.checkerboard:.6g}",
            }
        )
    return rows
