"""End-point-error metrics, relative degradation, and the attack evaluation
harness producing per-method report rows (full-frame and patch-region-excluded
EPE, static or realistic-motion placement).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classical import HSConfig, horn_schunck
from .networks import Family, NetworkParams, mini_ed_forward, mini_sp_forward
from .patch import (
    Patch,
    PlacementError,
    TransformRanges,
    apply_patch,
    apply_patch_pair_moving,
    estimate_patch_homography,
    patch_footprint_mask,
    sample_patch_disparity,
    sample_transform,
)
from .tensor import Tensor, no_grad


def epe(flow: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean Euclidean end-point error over (masked) pixels."""
    flow = np.asarray(flow, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if flow.shape != gt.shape:
        raise ValueError(f"flow shapes differ: {flow.shape} vs {gt.shape}")
    err = np.sqrt((flow[0] - gt[0]) ** 2 + (flow[1] - gt[1]) ** 2)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != err.shape:
            raise ValueError(f"mask shape {mask.shape} does not match flow {err.shape}")
        if not mask.any():
            raise ValueError("empty evaluation mask")
        err = err[mask]
    return float(err.mean())


def relative_degradation(epe_clean: float, epe_attacked: float) -> float:
    """Percent EPE increase over the clean baseline (exact, unrounded)."""
    if epe_clean <= 0:
        raise ValueError("relative degradation undefined for zero clean EPE")
    return 100.0 * (epe_attacked - epe_clean) / epe_clean


def round_percent(value: float) -> int:
    """Half-away-from-zero integer rounding used for printed percentages."""
    return int(math.floor(value + 0.5)) if value >= 0 else int(math.ceil(value - 0.5))


# ---------------------------------------------------------------------------
# Flow methods (shared protocol: name + compute(i1, i2, trace))
# ---------------------------------------------------------------------------


class NetworkMethod:
    """Wraps NetworkParams as an evaluation method with feature tracing."""

    def __init__(self, params: NetworkParams, name: str | None = None):
        self.params = params
        self.name = name or params.name or params.spec.family.value

    def compute(self, i1: np.ndarray, i2: np.ndarray, trace: bool = False):
        fwd = mini_ed_forward if self.params.spec.family is Family.ENCODER_DECODER else mini_sp_forward
        with no_grad():
            out, tr = fwd(Tensor(i1[None]), Tensor(i2[None]), self.params, trace=trace)
        return out.final.data[0].copy(), tr


class HornSchunckMethod:
    """Classical baseline; no feature traces."""

    def __init__(self, cfg: HSConfig | None = None, name: str = "hs"):
        self.cfg = cfg or HSConfig()
        self.name = name

    def compute(self, i1: np.ndarray, i2: np.ndarray, trace: bool = False):
        return horn_schunck(i1, i2, self.cfg), None


@dataclass
class MethodReport:
    method: str
    epe_clean: float
    epe_attacked: float
    rel_degradation_pct: float | None  # None when clean EPE is zero (n/a)
    epe_attacked_excl_patch: float
    epe_clean_excl_patch: float


@dataclass
class EvalReport:
    rows: list  # of MethodReport
    policy: str  # random-static | realistic-motion | none
    patch_area_pct: float
    sample_count: int
    seed: int

    def row(self, method: str) -> MethodReport:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


POLICIES = ("random-static", "realistic-motion", "none")


def evaluate_attack(methods, patch: Patch | None, dataset, policy: str = "random-static",
                    seed: int = 0, ranges: TransformRanges | None = None,
                    fixed_placements=None) -> EvalReport:
    """Evaluate flow methods on clean and patched versions of the dataset.

    Placements (and homographies under realistic motion) are sampled once per
    dataset element from ``seed``, then shared by every method, so rows are
    directly comparable; ``fixed_placements`` (one TransformSample per pair)
    overrides the sampling. Ground truth stays the clean-scene flow: the patch
    is an adversary, not scene content.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if isinstance(methods, (NetworkMethod, HornSchunckMethod)) or hasattr(methods, "compute"):
        methods = [methods]
    if not dataset:
        raise ValueError("empty dataset")
    ranges = ranges or TransformRanges()
    H, W = dataset[0].i1.shape[1:]

    placements = []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    if patch is not None and policy != "none":
        for k, pair in enumerate(dataset):
            frames = None
            # the warped footprint can leave the frame under patch motion:
            # redraw (deterministically) a bounded number of times
            for attempt in range(20):
                if fixed_placements is not None:
                    t1 = fixed_placements[k]
                else:
                    t1 = sample_transform(rng, (H, W), patch.size, ranges)
                try:
                    if policy == "realistic-motion":
                        foot = patch_footprint_mask(t1, (H, W), patch)
                        disp = sample_patch_disparity(pair.disparity, foot, rng)
                        motion = estimate_patch_homography(t1, disp, pair.cam)
                        with no_grad():
                            f1, f2 = apply_patch_pair_moving(
                                Tensor(pair.i1[None]), Tensor(pair.i2[None]), patch, t1, motion
                            )
                    else:
                        with no_grad():
                            f1 = apply_patch(Tensor(pair.i1[None]), patch, t1)
                            f2 = apply_patch(Tensor(pair.i2[None]), patch, t1)
                    frames = (f1.data[0], f2.data[0])
                    break
                except PlacementError:
                    if fixed_placements is not None:
                        raise
            if frames is None:
                raise PlacementError(
                    f"no feasible placement for dataset element {k} after 20 draws"
                )
            placements.append((t1, frames, patch_footprint_mask(t1, (H, W), patch)))
    else:
        placements = [(None, (pair.i1, pair.i2), np.zeros((H, W), bool)) for pair in dataset]

    rows = []
    for method in methods:
        ec, ea, ecx, eax = [], [], [], []
        for pair, (t1, frames, foot) in zip(dataset, placements):
            clean_flow, _ = method.compute(pair.i1, pair.i2)
            att_flow, _ = method.compute(frames[0], frames[1])
            valid = pair.valid
            excl = valid & ~foot
            ec.append(epe(clean_flow, pair.gt_flow, valid))
            ea.append(epe(att_flow, pair.gt_flow, valid))
            ecx.append(epe(clean_flow, pair.gt_flow, excl))
            eax.append(epe(att_flow, pair.gt_flow, excl))
        mc, ma = float(np.mean(ec)), float(np.mean(ea))
        if mc > 0:
            rel = relative_degradation(mc, ma)
        elif ma == mc:
            rel = 0.0  # unchanged output on a zero-error baseline: no degradation
        else:
            rel = None  # strict increase from a zero baseline: undefined, n/a
        rows.append(
            MethodReport(
                method=method.name,
                epe_clean=mc,
                epe_attacked=ma,
                rel_degradation_pct=rel,
                epe_attacked_excl_patch=float(np.mean(eax)),
                epe_clean_excl_patch=float(np.mean(ecx)),
            )
        )
    area = 0.0
    if patch is not None:
        ph, pw = patch.size
        area = 100.0 * ph * pw / (H * W)
    return EvalReport(
        rows=rows, policy=policy, patch_area_pct=area, sample_count=len(dataset), seed=seed
    )


def _fmt_rel(rel: float | None) -> str:
    if rel is None:
        return "n/a"
    return f"{'+' if rel >= 0 else ''}{round_percent(rel)}%"


def write_report_csv(report: EvalReport, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            [
                "method", "policy", "patch_area_pct", "samples", "seed",
                "epe_clean", "epe_attacked", "rel_degradation_pct",
                "epe_clean_excl_patch", "epe_attacked_excl_patch",
            ]
        )
        for r in report.rows:
            w.writerow(
                [
                    r.method, report.policy, f"{report.patch_area_pct:.3f}",
                    report.sample_count, report.seed,
                    f"{r.epe_clean:.4f}", f"{r.epe_attacked:.4f}",
                    "n/a" if r.rel_degradation_pct is None else f"{r.rel_degradation_pct:.2f}",
                    f"{r.epe_clean_excl_patch:.4f}", f"{r.epe_attacked_excl_patch:.4f}",
                ]
            )


def format_table(reports: dict[str, EvalReport]) -> str:
    """Text table in the white-box layout: one row per method, an unattacked
    EPE column, then (EPE | Rel) per patch-size label."""
    labels = list(reports)
    methods = [r.method for r in reports[labels[0]].rows]
    header = ["Method", "Unattacked EPE"]
    for lab in labels:
        header += [f"{lab} EPE", f"{lab} Rel"]
    rows = [header]
    for m in methods:
        base = reports[labels[0]].row(m).epe_clean
        line = [m, f"{base:.2f}"]
        for lab in labels:
            r = reports[lab].row(m)
            line += [f"{r.epe_attacked:.2f}", _fmt_rel(r.rel_degradation_pct)]
        rows.append(line)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    out = []
    for idx, row in enumerate(rows):
        out.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if idx == 0:
            out.append("-" * len(out[0]))
    return "\n".join(out) + "\n"
