"""Patch optimisation: minimise the expected cosine between the network's
clean predictions (pseudo ground truth) and its predictions on patched frames.
Minimising the cosine drives the attacked flow toward the reverse of the clean
flow. White-box attacks one network; black-box jointly optimises the sum of
per-network losses to obtain a universal patch.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import ops
from .networks import Family, NetworkParams, channel_sum, mini_ed_forward, mini_sp_forward
from .patch import Patch, TransformRanges, apply_patch, patch_pixels_tensor, sample_transform
from .tensor import (
    ConfigError,
    NonFiniteError,
    Tensor,
    backward,
    no_grad,
    sqrt,
    tmean,
)

ZERO_NORM_CUTOFF = 1e-6  # pseudo-label pixels below this magnitude are skipped
COSINE_EPS = 1e-8


@dataclass
class AttackConfig:
    patch_size: int = 16
    steps: int = 2000
    batch: int = 4
    lr: float = 100.0  # on the [0,1] pixel scale at desk resolution
    lr_decay: float = 1.0  # multiplicative, applied at 50% and 75% of steps
    ranges: TransformRanges = field(default_factory=TransformRanges)
    targets: tuple[str, ...] = ()  # labels for reporting only
    seed: int = 0

    def patch_area_pct(self, image_dims) -> float:
        H, W = image_dims
        return 100.0 * self.patch_size * self.patch_size / (H * W)


@dataclass
class PseudoLabel:
    """Clean prediction F(I1, I2), detached from any gradient graph."""

    flow: np.ndarray  # (2, H, W) float32

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float32)


def _forward_fn(params: NetworkParams):
    return mini_ed_forward if params.spec.family is Family.ENCODER_DECODER else mini_sp_forward


def pseudo_label(params: NetworkParams, i1: np.ndarray, i2: np.ndarray) -> PseudoLabel:
    with no_grad():
        out, _ = _forward_fn(params)(Tensor(i1[None]), Tensor(i2[None]), params)
    return PseudoLabel(out.final.data[0])


def cosine_loss(clean, attacked) -> Tensor:
    """Mean over pixels (and batch) of the cosine between clean and attacked
    flow vectors; clean pixels with near-zero norm contribute 0.

    ``clean`` is a constant (N,2,H,W)/(2,H,W) array; ``attacked`` is a tensor
    on the gradient graph. The result lies in [-1, 1].
    """
    if isinstance(clean, PseudoLabel):
        clean = clean.flow
    if isinstance(clean, Tensor):
        clean = clean.data
    clean = np.asarray(clean, dtype=np.float32)
    if clean.ndim == 3:
        clean = clean[None]
    if not isinstance(attacked, Tensor):
        attacked = Tensor(np.asarray(attacked, np.float32)[None] if np.asarray(attacked).ndim == 3 else attacked)
    if clean.shape != attacked.data.shape:
        raise ConfigError(f"flow shapes differ: clean {clean.shape} vs attacked {attacked.data.shape}")

    cu, cv = clean[:, 0:1], clean[:, 1:2]
    cnorm = np.sqrt(cu * cu + cv * cv)
    weight = (cnorm >= ZERO_NORM_CUTOFF).astype(np.float32)

    dot = channel_sum(attacked * Tensor(clean))
    # tiny floor inside the sqrt keeps the gradient finite at exactly zero flow
    anorm2 = channel_sum(attacked * attacked)
    anorm = sqrt(anorm2 + 1e-12)
    cos = dot / (anorm * Tensor(cnorm) + COSINE_EPS)
    return tmean(cos * Tensor(weight))


@dataclass
class AttackResult:
    patch: Patch
    best_patch: Patch
    loss_curve: list  # per step: [total, per-target...]
    config: AttackConfig
    target_names: tuple


def _dataset_arrays(dataset):
    i1 = np.stack([p.i1 for p in dataset])
    i2 = np.stack([p.i2 for p in dataset])
    return i1, i2


def black_box_attack(nets, dataset, cfg: AttackConfig) -> AttackResult:
    """Jointly optimise one patch against several networks: the loss is the
    unweighted sum of per-network cosine losses. With a single network this
    reduces exactly to the white-box attack."""
    if not nets:
        raise ConfigError("need at least one target network")
    H, W = dataset[0].i1.shape[1:]
    radius_at_max = (1.0 + cfg.ranges.scale) * cfg.patch_size / 2.0
    if 2 * radius_at_max > min(H, W) - 1:
        raise ConfigError(f"patch {cfg.patch_size} does not fit {H}x{W} under max scale")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA77AC4]))
    patch = Patch.random(cfg.patch_size, seed=cfg.seed)
    i1, i2 = _dataset_arrays(dataset)
    n_data = len(dataset)

    names = tuple(cfg.targets) if cfg.targets else tuple(
        net.name or f"net{j}" for j, net in enumerate(nets)
    )

    # clean predictions never change during the attack: compute them once; a
    # non-finite clean forward cannot recover (the patch never touches the
    # clean frames), so that aborts the run immediately
    try:
        labels = [
            np.stack([pseudo_label(net, i1[k], i2[k]).flow for k in range(n_data)])
            for net in nets
        ]
    except NonFiniteError:
        return AttackResult(
            patch=patch,
            best_patch=Patch(patch.pixels.copy(), patch.mask),
            loss_curve=[],
            config=cfg,
            target_names=names,
        )
    best = Patch(patch.pixels.copy(), patch.mask)
    best_loss = np.inf
    curve = []
    lr = cfg.lr
    failures = 0
    for step in range(cfg.steps):
        if cfg.lr_decay != 1.0 and cfg.steps >= 4 and step in (cfg.steps // 2, (3 * cfg.steps) // 4):
            lr *= cfg.lr_decay
        idx = rng.integers(0, n_data, size=cfg.batch)
        ts = [sample_transform(rng, (H, W), patch.size, cfg.ranges) for _ in idx]
        px = patch_pixels_tensor(patch)
        try:
            a1 = apply_patch(Tensor(i1[idx]), px, ts)
            a2 = apply_patch(Tensor(i2[idx]), px, ts)
            per_net = []
            total = None
            for net, lab in zip(nets, labels):
                out, _ = _forward_fn(net)(a1, a2, net)
                term = cosine_loss(lab[idx], out.final)
                per_net.append(term.item())
                total = term if total is None else total + term
            backward(total)
            step_loss = float(sum(per_net))
        except NonFiniteError:
            failures += 1
            lr *= 0.5
            if failures >= 5:
                break
            curve.append([float("nan")] + [float("nan")] * len(nets))
            continue
        failures = 0
        grad = px.grad[0].transpose(1, 2, 0)  # back to (h, w, 3)
        patch.pixels = np.clip(
            patch.pixels - np.float32(lr) * grad * patch.mask[:, :, None], 0.0, 1.0
        )
        curve.append([step_loss] + per_net)
        if step_loss < best_loss:
            best_loss = step_loss
            best = Patch(patch.pixels.copy(), patch.mask)

    return AttackResult(
        patch=patch, best_patch=best, loss_curve=curve, config=cfg, target_names=names
    )


def white_box_attack(net: NetworkParams, dataset, cfg: AttackConfig) -> AttackResult:
    """Optimise a patch against a single network (its own clean predictions
    serve as pseudo ground truth)."""
    return black_box_attack([net], dataset, cfg)


def save_attack_artifacts(result: AttackResult, out_dir, extra_meta: dict | None = None):
    """Emit patch PNG + metadata sidecar, loss-curve CSV and config snapshot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "targets": list(result.target_names),
        "steps": result.config.steps,
        "seed": result.config.seed,
        "final_loss": result.loss_curve[-1][0] if result.loss_curve else None,
        "best_loss": min((r[0] for r in result.loss_curve if r[0] == r[0]), default=None),
    }
    if extra_meta:
        meta.update(extra_meta)
    result.best_patch.save(out / "patch.png", provenance=meta)
    with open(out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss_total"] + [f"loss_{n}" for n in result.target_names])
        for step, row in enumerate(result.loss_curve):
            w.writerow([step] + [f"{v:.6f}" for v in row])
    cfg = asdict(result.config)
    cfg["ranges"] = {"angle_deg": result.config.ranges.angle_deg, "scale": result.config.ranges.scale}
    (out / "attack_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
