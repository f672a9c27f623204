import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import pydantic

import analysis
import tensor_core as tc
from checkpoint import Checkpoint, load_checkpoint
from config import SYNTHETIC, RunConfig, resolve_threads
from data_io import Dataset, PerturbSpec
from model import ModelConfig, model_forward, parameter_count
from shared import ReViTError, ValidationError, get_logger, set_log_level
from training import evaluate, input_stats, model_inputs, perturbation_sweep, sweep_fixed_alpha, train

logger = get_logger(__name__)


def _load_presets() -> Dict[str, ModelConfig]:
    try:
        import presets
    except ImportError as e:
        raise SystemExit(f"Failed to import presets.py: {e}")
    return {
        name: obj
        for name, obj in vars(presets).items()
        if not name.startswith("_") and isinstance(obj, ModelConfig)
    }


def _run_config(args: argparse.Namespace, base: Optional[Dict] = None) -> RunConfig:
    overrides = {
        "data": getattr(args, "data", None),
        "out": getattr(args, "out", None),
        "variant": getattr(args, "variant", None),
        "alpha_mode": getattr(args, "alpha_mode", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "base_lr": getattr(args, "lr", None),
        "seed": getattr(args, "seed", None),
        "max_steps": getattr(args, "max_steps", None),
    }
    preset = getattr(args, "preset", None)
    if preset:
        presets = _load_presets()
        if preset not in presets:
            choices = ", ".join(sorted(presets)) or "<none>"
            raise ValidationError(f"Unknown preset '{preset}'. Choose one of: {choices}")
        preset_cfg = presets[preset]
        base = {**preset_cfg.to_dict(), "synthetic_classes": preset_cfg.num_classes, **(base or {})}
    return RunConfig.load(args.config, overrides, base)


def _checkpoint_data(args: argparse.Namespace, ckpt: Checkpoint) -> Dataset:
    """Test split matching the checkpoint's geometry."""
    model_fields = ckpt.config.to_dict()
    base = {"synthetic_classes": ckpt.config.num_classes}
    run = RunConfig.load(args.config, {**model_fields, "data": args.data}, base)
    _, test = run.load_datasets()
    return test


def _tags(ckpts: Sequence[Checkpoint]) -> List[str]:
    tags = [c.config.variant for c in ckpts]
    if len(set(tags)) < len(tags):
        tags = [f"{t}_{chr(ord('a') + i)}" for i, t in enumerate(tags)]
    return tags


def cmd_list(args: argparse.Namespace) -> None:
    presets = _load_presets()
    if not presets:
        print("No presets found in presets.py")
        return
    print("Model presets:")
    for name in sorted(presets):
        cfg = presets[name]
        print(
            f"  - {name}: {cfg.image_size}px/{cfg.patch_size} dim={cfg.dim} depth={cfg.depth} "
            f"heads={cfg.heads} params={parameter_count(cfg)}"
        )


def cmd_train(args: argparse.Namespace) -> None:
    run = _run_config(args)
    model_cfg, train_cfg = run.to_model_config(), run.to_train_config()
    train_set, test_set = run.load_datasets()
    result = train(
        model_cfg,
        train_cfg,
        train_set,
        run.out,
        val_set=test_set,
        threads=resolve_threads(args.threads),
        progress=sys.stderr.isatty(),
        stats=run.input_stats(),
    )
    (Path(run.out) / "run_config.json").write_text(run.model_dump_json(indent=2))
    print(f"checkpoint={result.best_checkpoint}")
    print(f"metrics={result.metrics_path}")
    print(f"best_val={result.best_val:.6f}")


def cmd_eval(args: argparse.Namespace) -> None:
    ckpt = load_checkpoint(args.ckpt)
    dataset = _checkpoint_data(args, ckpt)
    threads = resolve_threads(args.threads)
    if not args.perturb:
        result = evaluate(ckpt, dataset, threads=threads)
        print(f"top1={result.top1:.6f}")
        print(f"top5={result.top5:.6f}")
        return

    specs = PerturbSpec.parse_sweep(args.perturb)
    if len(specs) == 1:
        result = evaluate(ckpt, dataset, specs[0], args.pad_anchor, threads)
        print(f"top1={result.top1:.6f}")
        print(f"top5={result.top5:.6f}")
        return
    table = perturbation_sweep(ckpt, dataset, specs[0].mode, [s.percent for s in specs], args.pad_anchor, threads)
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        table.to_csv(path / f"perturb_{specs[0].mode}.csv", index=False, float_format="%.6f")
    print(table.to_csv(index=False, float_format="%.6f"), end="")


def cmd_analyze(args: argparse.Namespace) -> None:
    ckpts = [load_checkpoint(p) for p in args.ckpt]
    if len(ckpts) > 2:
        raise ValidationError("analyze compares at most two checkpoints")
    out = Path(args.out)
    tags = _tags(ckpts)

    if args.metric == "alpha":
        for ckpt, tag in zip(ckpts, tags):
            report = analysis.alpha_report(ckpt, tag)
            path = analysis.write_alpha_report(report, out)
            if report.notice:
                print(f"notice: {report.notice}")
            print(f"wrote {path}")
        return

    geometry = {(c.config.image_size, c.config.patch_size, c.config.channels) for c in ckpts}
    if len(geometry) > 1:
        raise ValidationError("checkpoints to compare must share image geometry")
    images = _checkpoint_data(args, ckpts[0]).images[: args.samples]

    if args.metric == "nonlocality":
        reports = [
            analysis.collect_non_locality(c.config, c.params, model_inputs(images, stats=input_stats(c)), tag)
            for c, tag in zip(ckpts, tags)
        ]
        for report in reports:
            for path in analysis.write_non_locality(report, out).values():
                print(f"wrote {path}")
        if len(reports) == 2:
            compare = analysis.compare_reports(*reports)
            compare.to_csv(out / "compare_nonlocality.csv", index=False, float_format=analysis.FLOAT_FORMAT)
            analysis.observe_non_locality_order(*reports)
            print(f"wrote {out / 'compare_nonlocality.csv'}")
        return

    profiles = []
    for ckpt, tag in zip(ckpts, tags):
        inputs = model_inputs(images, stats=input_stats(ckpt))
        matrices, profile = analysis.collect_similarity(ckpt.config, ckpt.params, inputs)
        written = analysis.write_similarity(matrices, profile, out, tag)
        profiles.append(profile)
        print(f"wrote {len(written)} similarity matrices for {tag}")
    if len(profiles) == 2:
        compare = pd.DataFrame(
            {"layer": range(len(profiles[0])), f"sim_{tags[0]}": profiles[0], f"sim_{tags[1]}": profiles[1]}
        )
        compare.to_csv(out / "compare_similarity.csv", index=False, float_format=analysis.FLOAT_FORMAT)
        analysis.observe_feature_collapse(profiles[0], profiles[1], tags)
        print(f"wrote {out / 'compare_similarity.csv'}")


def _resolve_image(args: argparse.Namespace, ckpt: Checkpoint) -> np.ndarray:
    ref = str(args.image)
    if ref.lstrip("-").isdigit():
        images = _checkpoint_data(args, ckpt).images
        index = int(ref)
        if not 0 <= index < len(images):
            raise ValidationError(f"image index {index} outside [0, {len(images)})")
        return images[index]
    path = Path(ref)
    if path.suffix != ".npy" or not path.is_file():
        raise ValidationError(f"--image must be a dataset index or an existing .npy file, got {ref!r}")
    return np.load(path)


def cmd_export_attn(args: argparse.Namespace) -> None:
    ckpt = load_checkpoint(args.ckpt)
    image = _resolve_image(args, ckpt)
    with tc.no_grad():
        record = model_forward(model_inputs(image, stats=input_stats(ckpt)), ckpt.config, ckpt.params, capture=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer, maps in enumerate(record.attentions):
        for head, attn in enumerate(maps):
            stem = f"attn_l{layer}_h{head}"
            np.savetxt(out / f"{stem}.csv", attn, fmt="%.9g", delimiter=",")
            (out / f"{stem}.f32").write_bytes(np.ascontiguousarray(attn, dtype="<f4").tobytes())
            entries.append({"layer": layer, "head": head, "shape": list(attn.shape), "csv": f"{stem}.csv", "blob": f"{stem}.f32"})
    index = {"checkpoint": str(args.ckpt), "image": str(args.image), "maps": entries}
    (out / "index.json").write_text(json.dumps(index, indent=2))
    print(f"wrote {len(entries)} attention maps to {out}")


def cmd_sweep_alpha(args: argparse.Namespace) -> None:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    run = _run_config(args)
    train_set, test_set = run.load_datasets()
    table = sweep_fixed_alpha(
        values, run.to_model_config(), run.to_train_config(), train_set, run.out, test_set,
        threads=resolve_threads(args.threads), stats=run.input_stats(),
    )
    Path(run.out).mkdir(parents=True, exist_ok=True)
    table.to_csv(Path(run.out) / "alpha_sweep.csv", index=False, float_format="%.6f")
    print(table.to_csv(index=False, float_format="%.6f"), end="")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (flags override its values)")
    p.add_argument("--preset", help="Model preset from presets.py used as the base config")
    p.add_argument("--data", help=f"CIFAR-10 binary directory or '{SYNTHETIC}'")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--variant", choices=["vit", "revit"])
    p.add_argument("--alpha-mode", help="shared, per_layer or fixed:<value>")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="Base learning rate")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="revit",
        description="Train and analyse ViT / residual-attention ViT encoders",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--threads", type=int, help="Worker threads (default: REVIT_THREADS, 0 = all CPUs)")
    sub = parser.add_subparsers(dest="cmd", required=True)

    sub.add_parser("list", help="List model presets")

    p_train = sub.add_parser("train", help="Train a model")
    _add_run_options(p_train)

    p_eval = sub.add_parser("eval", help="Top-1 accuracy of a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", default=SYNTHETIC)
    p_eval.add_argument("--config", help="JSON run config for the synthetic data settings")
    p_eval.add_argument("--perturb", help="mode:percent or mode:all, mode in hshift|vshift|scale")
    p_eval.add_argument("--pad-anchor", default="top_left")
    p_eval.add_argument("--out", help="Directory for the perturbation table")

    p_an = sub.add_parser("analyze", help="Non-locality, feature similarity or alpha reports")
    p_an.add_argument("--ckpt", required=True, action="append", help="Checkpoint (repeat to compare two)")
    p_an.add_argument("--data", default=SYNTHETIC)
    p_an.add_argument("--config", help="JSON run config for the synthetic data settings")
    p_an.add_argument("--metric", required=True, choices=["nonlocality", "similarity", "alpha"])
    p_an.add_argument("--samples", type=int, default=256)
    p_an.add_argument("--out", required=True)

    p_exp = sub.add_parser("export-attn", help="Write every attention map of one image")
    p_exp.add_argument("--ckpt", required=True)
    p_exp.add_argument("--image", required=True, help="Test-split index or path to a [C, H, W] .npy file")
    p_exp.add_argument("--data", default=SYNTHETIC)
    p_exp.add_argument("--config", help="JSON run config for the synthetic data settings")
    p_exp.add_argument("--out", required=True)

    p_sweep = sub.add_parser("sweep-alpha", help="Train one model per fixed alpha")
    _add_run_options(p_sweep)
    p_sweep.add_argument("--values", default="0,0.25,0.5,0.75,1", help="Comma-separated alpha values")
    return parser


COMMANDS = {
    "list": cmd_list,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "export-attn": cmd_export_attn,
    "sweep-alpha": cmd_sweep_alpha,
}


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_log_level("DEBUG")
    try:
        COMMANDS[args.cmd](args)
    except (ValidationError, pydantic.ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(2)
    except (ReViTError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(1)


if __name__ == "__main__":
    main()
