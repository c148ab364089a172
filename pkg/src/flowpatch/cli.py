"""Batch command-line front end: gen-data, train, attack, eval, zeroflow, viz.

Every command resolves its configuration (file + flags), writes a resolved
snapshot next to its outputs, and is byte-deterministic given the same seed.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data as datamod
from .attack import AttackConfig, black_box_attack, save_attack_artifacts, white_box_attack
from .classical import HSConfig
from .data import SceneConfig, flow_to_color, generate_dataset, load_dataset, read_flo, save_dataset, save_image
from .evaluation import (
    EvalReport,
    HornSchunckMethod,
    NetworkMethod,
    evaluate_attack,
    format_table,
    write_report_csv,
)
from .networks import Family, NetworkSpec, load_params, save_params, train_supervised
from .patch import Patch, TransformRanges
from .zeroflow import report_rows, zero_flow_test


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir(path_str: str) -> Path:
    root = os.environ.get("FLOWPATCH_OUT_ROOT")
    p = Path(path_str)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a mapping")
    return cfg


def _scene_config(cfg: dict) -> SceneConfig:
    fields = {f.name for f in dataclasses.fields(SceneConfig)}
    extra = set(cfg) - fields
    if extra:
        raise UsageError(f"unknown scene config keys: {sorted(extra)}")
    kw = dict(cfg)
    for key in ("sprite_size_range", "sprite_speed_max", "camera_shift_max"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return SceneConfig(**kw)


def _write_snapshot(out: Path, name: str, payload: dict):
    (out / name).write_text(yaml.safe_dump(payload, sort_keys=True))


def _dump(obj) -> dict:
    d = dataclasses.asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _scene_config(_load_config(args.config).get("scene", _load_config(args.config)))
    out = _out_dir(args.out)
    pairs = generate_dataset(cfg, args.count, args.seed)
    save_dataset(out, pairs, seed=args.seed)
    _write_snapshot(out, "resolved_config.yaml", {"scene": _dump(cfg), "count": args.count, "seed": args.seed})
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    family = Family.ENCODER_DECODER if args.arch == "ed" else Family.SPATIAL_PYRAMID
    overrides = _load_config(args.config).get("network", {})
    spec = NetworkSpec(family=family, **overrides)
    defaults = {"ed": (0.05, 2.0), "sp": (0.01, 5.0)}
    lr = args.lr if args.lr is not None else defaults[args.arch][0]
    clip = defaults[args.arch][1]
    out = _out_dir(Path(args.out).parent if Path(args.out).suffix else args.out)
    params_path = Path(args.out) if Path(args.out).suffix else out / f"{args.arch}.mfnp"
    params, curve = train_supervised(
        dataset, spec, epochs=args.epochs, lr=lr, seed=args.seed,
        batch_size=args.batch, clip_norm=clip, name=args.arch,
        log=(lambda e, l: print(f"epoch {e}: loss {l:.4f}")) if args.verbose else None,
    )
    save_params(params, params_path)
    with open(params_path.with_suffix(".curve.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for e, l in enumerate(curve):
            w.writerow([e, f"{l:.6f}"])
    _write_snapshot(
        params_path.parent, f"{params_path.stem}_train_config.yaml",
        {"arch": args.arch, "epochs": args.epochs, "lr": lr, "clip_norm": clip,
         "batch": args.batch, "seed": args.seed, "data": str(args.data),
         "network": {k: (v.value if isinstance(v, Family) else v) for k, v in _dump(spec).items()}},
    )
    print(f"saved params to {params_path} ({len(curve)} epochs)")
    return 0


def _parse_targets(spec_str: str):
    out = []
    for part in spec_str.split(","):
        part = part.strip()
        if part:
            out.append(part)
    return out


def cmd_attack(args) -> int:
    targets = _parse_targets(args.targets)
    if args.mode == "black" and len(targets) < 2:
        raise UsageError("black-box mode jointly optimises over several networks; give >= 2 targets")
    if args.mode == "white" and len(targets) != 1:
        raise UsageError("white-box mode attacks one network; give exactly 1 target")
    nets = [load_params(t) for t in targets]
    dataset = load_dataset(args.data)
    cfg = AttackConfig(
        patch_size=args.patch_size,
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        ranges=TransformRanges(angle_deg=args.angle, scale=args.scale),
        targets=tuple(Path(t).stem for t in targets),
        seed=args.seed,
    )
    result = black_box_attack(nets, dataset, cfg) if args.mode == "black" else white_box_attack(nets[0], dataset, cfg)
    out = _out_dir(args.out)
    H, W = dataset[0].i1.shape[1:]
    save_attack_artifacts(result, out, extra_meta={"mode": args.mode, "patch_area_pct": cfg.patch_area_pct((H, W))})
    _write_snapshot(out, "resolved_config.yaml", {
        "mode": args.mode, "targets": list(cfg.targets), "patch_size": cfg.patch_size,
        "steps": cfg.steps, "batch": cfg.batch, "lr": cfg.lr, "seed": cfg.seed,
        "angle_deg": cfg.ranges.angle_deg, "scale": cfg.ranges.scale, "data": str(args.data),
    })
    finite = [r[0] for r in result.loss_curve if r[0] == r[0]]
    if finite:
        print(f"attack done: first loss {finite[0]:.4f}, best {min(finite):.4f}")
    else:
        print("attack done (no steps)")
    return 0


def _build_methods(spec_str: str):
    methods = []
    for part in _parse_targets(spec_str):
        if ":" in part:
            name, path = part.split(":", 1)
            methods.append(NetworkMethod(load_params(path), name=name))
        elif part == "hs":
            methods.append(HornSchunckMethod())
        else:
            raise UsageError(
                f"unknown method {part!r}; available: 'hs' or '<name>:<params.mfnp>'"
            )
    if not methods:
        raise UsageError("no methods given")
    return methods


def cmd_eval(args) -> int:
    methods = _build_methods(args.methods)
    dataset = load_dataset(args.data)
    patch = Patch.load(args.patch) if args.patch else None
    policy = {"static": "random-static", "moving": "realistic-motion", "none": "none"}[args.policy]
    if policy != "none" and patch is None:
        raise UsageError("--patch is required unless --policy none")
    report = evaluate_attack(methods, patch, dataset, policy=policy, seed=args.seed)
    out = _out_dir(args.out)
    write_report_csv(report, out / "eval_report.csv")
    table = format_table({f"{patch.size[0]}x{patch.size[1]}" if patch else "none": report})
    (out / "eval_table.txt").write_text(table)
    _write_snapshot(out, "resolved_config.yaml", {
        "methods": args.methods, "patch": args.patch, "policy": args.policy,
        "seed": args.seed, "data": str(args.data),
    })
    print(table, end="")
    return 0


def cmd_zeroflow(args) -> int:
    methods = _build_methods(args.methods)
    patch = Patch.load(args.patch) if args.patch else None
    out = _out_dir(args.out)
    rows = []
    for m in methods:
        rep = zero_flow_test(m, patch=patch, seed=args.seed, image_dims=(args.height, args.width))
        rows.extend(report_rows(rep))
        thumb_dir = out / f"thumbnails_{m.name}"
        thumb_dir.mkdir(exist_ok=True)
        for order, (layer, (tw, to)) in enumerate(rep.thumbnails.items()):
            for tag, arr in (("with", tw), ("without", to)):
                if arr is None:
                    continue
                lo, hi = float(arr.min()), float(arr.max())
                norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
                save_image(thumb_dir / f"{order:02d}_{layer}_{tag}.png", norm.astype(np.float32))
        print(f"{m.name}: final |flow| with patch {rep.final_mag_with:.4f}, without {rep.final_mag_without:.4f}")
    with open(out / "zeroflow_report.csv", "w", newline="") as f:
        if rows:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    _write_snapshot(out, "resolved_config.yaml", {
        "methods": args.methods, "patch": args.patch, "seed": args.seed,
        "height": args.height, "width": args.width,
    })
    return 0


def cmd_viz(args) -> int:
    flow = read_flo(args.flo)
    img = flow_to_color(flow, max_mag=args.max_mag)
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, img)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="flowpatch", description="Adversarial patch attacks on miniature optical-flow estimators")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic two-frame dataset")
    g.add_argument("--config", default=None, help="YAML with a 'scene:' section")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a miniature flow network")
    t.add_argument("--arch", choices=("ed", "sp"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--out", required=True, help="params path (.mfnp) or directory")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", default=None, help="YAML with a 'network:' section")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("attack", help="optimise an adversarial patch")
    a.add_argument("--mode", choices=("white", "black"), required=True)
    a.add_argument("--targets", required=True, help="comma-separated params paths")
    a.add_argument("--data", required=True)
    a.add_argument("--patch-size", type=int, default=16)
    a.add_argument("--steps", type=int, default=2000)
    a.add_argument("--batch", type=int, default=4)
    a.add_argument("--lr", type=float, default=100.0)
    a.add_argument("--angle", type=float, default=10.0)
    a.add_argument("--scale", type=float, default=0.05)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_attack)

    e = sub.add_parser("eval", help="EPE report for methods under a patch")
    e.add_argument("--methods", required=True, help="e.g. 'ed:runs/ed.mfnp,sp:runs/sp.mfnp,hs'")
    e.add_argument("--data", required=True)
    e.add_argument("--patch", default=None)
    e.add_argument("--policy", choices=("static", "moving", "none"), default="static")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    z = sub.add_parser("zeroflow", help="replicated-noise diagnostic")
    z.add_argument("--methods", required=True)
    z.add_argument("--patch", default=None)
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--height", type=int, default=64)
    z.add_argument("--width", type=int, default=128)
    z.add_argument("--out", required=True)
    z.set_defaults(fn=cmd_zeroflow)

    v = sub.add_parser("viz", help="render a .flo file as a colour PNG")
    v.add_argument("--flo", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--max-mag", type=float, default=None)
    v.set_defaults(fn=cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime/numerical failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
