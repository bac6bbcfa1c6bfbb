"""Command-line orchestration: dataset generation, encoder pretraining,
training, sampling, evaluation, ablations, and figure emission.

Configuration lives in a single YAML file; any leaf can be overridden on
the command line with dotted-key assignments (``train.seed=3``). Every
command writes a config snapshot into its run directory. The output root
defaults to $THERMODIFF_OUTPUT_ROOT, falling back to ./runs.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import degrade, diffusion, encoder as enc, metrics, plots, report, synthdata, training
from .denoiser import Denoiser, DenoiserConfig
from .schedules import build_shift_schedule, build_vp_schedule

OUTPUT_ROOT_ENV = "THERMODIFF_OUTPUT_ROOT"

DEFAULT_CONFIG = {
    "dataset": {
        "dir": "data",
        "n_train": 200,
        "n_test": 40,
        "crop_size": 64,
        "scale": 8,
        "scene_size": 72,
    },
    "encoder": {
        "path": "encoder/encoder.npz",
        "img_size": 64,
        "patch_size": 8,
        "embed_dim": 64,
        "depth": 4,
        "n_heads": 4,
        "bands": 6,
        "pretrained": True,  # False = seeded random frozen encoder (ablation)
        "mask_ratio": 0.75,
        "steps": 2000,
        "batch_size": 8,
        "lr": 1e-3,
        "seed": 7,
    },
    "model": {
        "inner_channels": 32,
        "channel_mult": [1, 2, 4],
        "blocks_per_stage": 2,
        "attn_resolutions": [16, 32],
        "n_heads": 4,
        "norm_groups": 8,
        "head_mode": "x0",
        "conditioning": "efm_cross_attention",
        "context_dim": 64,
        "bands": 6,
        "image_size": 64,
    },
    "schedule": {
        "kind": "shift",  # shift (x0 head) or vp (epsilon head)
        "T": 15,
        "kappa": 1.0,
        "sqrt_eta_min": 0.04,
        "sqrt_eta_max": 0.999,
        # vp parameters (desk-scaled so the signal is destroyed by T)
        "vp_T": 100,
        "beta_min": 1e-5,
        "beta_max": 0.1,
    },
    "train": {
        "out_dir": "train",
        "learning_rate": 5e-5,
        "iterations": 20000,
        "batch_size": 8,
        "clip_norm": 1.0,
        "ema_decay": 0.9999,
        "seed": 0,
        "log_every": 100,
        "checkpoint_every": 5000,
        "lr_schedule": "constant",  # constant | cosine
        "resume": None,
    },
    "sample": {
        "checkpoint": None,
        "steps": None,  # None = native schedule
        "seed": 0,
        "indices": [0],
        "out_dir": "samples",
    },
    "eval": {
        "out_dir": "eval",
        "checkpoints": {},  # name -> checkpoint path
        "x0_steps": [1, 3, 5, 10, 15],
        "eps_ddim_fractions": [0.025, 0.05, 0.1, 0.25],
        "ablate_pairs": [["x0_concat", "x0_efm"], ["eps_concat", "eps_efm"]],
        "seed": 0,
    },
}


class CliError(RuntimeError):
    pass


def _deep_update(base: dict, other: dict) -> dict:
    for k, v in other.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _apply_override(cfg: dict, assignment: str):
    if "=" not in assignment:
        raise CliError(f"override must be KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise CliError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise CliError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(config_path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        _deep_update(cfg, yaml.safe_load(path.read_text()) or {})
    for o in overrides:
        _apply_override(cfg, o)
    return cfg


def _root(args) -> Path:
    root = args.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
    return Path(root)


def _resolve(root: Path, p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else root / p


def _snapshot(cfg: dict, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config_snapshot.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


def _load_dataset(cfg, root) -> synthdata.SceneDataset:
    d = _resolve(root, cfg["dataset"]["dir"])
    if not d.exists():
        raise CliError(f"dataset directory not found: {d} (run gen-data first)")
    return synthdata.SceneDataset(d)


def _load_encoder(cfg, root):
    path = _resolve(root, cfg["encoder"]["path"])
    if not path.exists():
        raise CliError(f"encoder weights not found: {path} (run pretrain-encoder first)")
    return enc.load_encoder(path)


def _build_denoiser(cfg, use_diffusion_state=True, head_mode=None) -> Denoiser:
    m = dict(cfg["model"])
    m["channel_mult"] = tuple(m["channel_mult"])
    m["attn_resolutions"] = tuple(m["attn_resolutions"])
    m["use_diffusion_state"] = use_diffusion_state
    if head_mode is not None:
        m["head_mode"] = head_mode
    return Denoiser(DenoiserConfig(**m))


def _build_schedule(cfg):
    s = cfg["schedule"]
    if s["kind"] == "shift":
        return build_shift_schedule(s["T"], s["kappa"], s["sqrt_eta_min"], s["sqrt_eta_max"])
    if s["kind"] == "vp":
        return build_vp_schedule(s["vp_T"], s["beta_min"], s["beta_max"])
    raise CliError(f"unknown schedule kind {s['kind']!r}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, args) -> int:
    root = _root(args)
    d = cfg["dataset"]
    out = _resolve(root, d["dir"])
    scene_cfg = synthdata.SceneConfig(size=d["scene_size"])
    manifest = synthdata.build_dataset(out, d["n_train"], d["n_test"],
                                       config=scene_cfg, crop_size=d["crop_size"],
                                       scale=d["scale"])
    _snapshot(cfg, out)
    print(f"dataset written to {out}")
    print(f"manifest digest: {manifest.digest()}")
    return 0


def cmd_pretrain_encoder(cfg, args) -> int:
    root = _root(args)
    e = cfg["encoder"]
    dataset = _load_dataset(cfg, root)
    config = enc.EncoderConfig(
        img_size=e["img_size"], patch_size=e["patch_size"], embed_dim=e["embed_dim"],
        depth=e["depth"], n_heads=e["n_heads"], bands=e["bands"])
    if e["pretrained"]:
        stacks = np.stack([
            dataset.read("train", i)["S"] for i in range(dataset.n_scenes("train"))
        ]).astype(np.float32)
        model = enc.mae_pretrain(stacks, config, mask_ratio=e["mask_ratio"],
                                 steps=e["steps"], batch_size=e["batch_size"],
                                 lr=e["lr"], seed=e["seed"])
    else:
        torch.manual_seed(e["seed"])
        model = enc.ReflectanceEncoder(config)
    enc.freeze(model)
    path = _resolve(root, e["path"])
    path.parent.mkdir(parents=True, exist_ok=True)
    enc.save_encoder(path, model)
    _snapshot(cfg, path.parent)
    print(f"encoder written to {path}")
    print(f"encoder checksum: {enc.param_checksum(model)}")
    return 0


def cmd_train(cfg, args) -> int:
    root = _root(args)
    t = cfg["train"]
    out = _resolve(root, t["out_dir"])
    dataset = _load_dataset(cfg, root)
    head = cfg["model"]["head_mode"]
    formulation = "epsilon" if head == "epsilon" else "x0"
    conditioning = cfg["model"]["conditioning"]
    encoder = _load_encoder(cfg, root) if conditioning == "efm_cross_attention" else None

    train_cfg = training.TrainConfig(
        learning_rate=t["learning_rate"], iterations=t["iterations"],
        batch_size=t["batch_size"], clip_norm=t["clip_norm"],
        ema_decay=t["ema_decay"], seed=t["seed"], formulation=formulation,
        conditioning=conditioning, log_every=t["log_every"],
        checkpoint_every=t["checkpoint_every"], lr_schedule=t["lr_schedule"])
    model = _build_denoiser(cfg)
    sched = _build_schedule(cfg)
    torch.manual_seed(train_cfg.seed)
    _snapshot(cfg, out)
    resume = _resolve(root, t["resume"]) if t["resume"] else None
    ckpt = training.train(dataset, model, encoder, sched, train_cfg, out, resume_from=resume)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_train_regression(cfg, args) -> int:
    root = _root(args)
    t = cfg["train"]
    out = _resolve(root, t["out_dir"])
    dataset = _load_dataset(cfg, root)
    conditioning = cfg["model"]["conditioning"]
    encoder = _load_encoder(cfg, root) if conditioning == "efm_cross_attention" else None
    train_cfg = training.TrainConfig(
        learning_rate=t["learning_rate"], iterations=t["iterations"],
        batch_size=t["batch_size"], clip_norm=t["clip_norm"],
        ema_decay=t["ema_decay"], seed=t["seed"], formulation="regression",
        conditioning=conditioning, log_every=t["log_every"],
        checkpoint_every=t["checkpoint_every"], lr_schedule=t["lr_schedule"])
    model = _build_denoiser(cfg, use_diffusion_state=False)
    torch.manual_seed(train_cfg.seed)
    _snapshot(cfg, out)
    resume = _resolve(root, t["resume"]) if t["resume"] else None
    ckpt = training.train_regression(dataset, model, encoder, train_cfg, out, resume_from=resume)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_sample(cfg, args) -> int:
    root = _root(args)
    s = cfg["sample"]
    if not s["checkpoint"]:
        raise CliError("sample.checkpoint is required")
    ckpt_path = _resolve(root, s["checkpoint"])
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    dataset = _load_dataset(cfg, root)
    model, manifest = training.denoiser_from_checkpoint(ckpt_path)
    sched = training.schedule_from_checkpoint(ckpt_path)
    encoder = (_load_encoder(cfg, root)
               if model.config.conditioning == "efm_cross_attention" else None)
    patches = [p for p in report.load_test_patches(dataset, encoder)
               if p.index in set(s["indices"])]
    steps = s["steps"] or (sched.T if sched is not None else None)
    kind = ("regression" if not model.config.use_diffusion_state
            else "x0" if model.config.head_mode == "x0" else "eps_ddim")
    preds = report.predict_variant(kind, patches, dataset, model=model,
                                   sched=sched, steps=steps, seed=s["seed"])
    out = _resolve(root, s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "samples.npz",
             Y_hat=preds.astype("<f4"),
             Y=np.stack([p.Y for p in patches]).astype("<f4"),
             indices=np.asarray([p.index for p in patches]))
    run_record = {
        "seed": s["seed"],
        "steps": steps,
        "schedule_digest": sched.digest() if sched is not None else None,
        "checkpoint_digest": report.file_digest(ckpt_path),
        "indices": list(s["indices"]),
    }
    (out / "run_record.json").write_text(json.dumps(run_record, indent=2))
    _snapshot(cfg, out)
    print(f"samples written to {out}")
    return 0


def _eps_step_grid(cfg, T: int) -> list[int]:
    grid = sorted({max(1, round(T * f)) for f in cfg["eval"]["eps_ddim_fractions"]})
    return [g for g in grid if g < T]


def _eval_variants(cfg, root, dataset, encoder, patches):
    """Run every requested checkpoint; returns (summaries, table3 rows,
    per-variant predictions)."""
    ev = cfg["eval"]
    data_range = float(max(p.Y.max() for p in patches) - min(p.Y.min() for p in patches))
    preds_by_name, summaries, table3 = {}, [], []

    def add(name, preds):
        preds_by_name[name] = preds
        summaries.append(report.summarize_variant(
            name, preds, patches, dataset, encoder, data_range))

    add("bicubic", report.predict_variant("bicubic", patches, dataset))

    for name, ckpt in ev["checkpoints"].items():
        ckpt_path = _resolve(root, ckpt)
        if not ckpt_path.exists():
            raise CliError(f"missing checkpoint for variant {name!r}: {ckpt_path}")
        model, _ = training.denoiser_from_checkpoint(ckpt_path)
        sched = training.schedule_from_checkpoint(ckpt_path)
        if not model.config.use_diffusion_state:
            add(name, report.predict_variant("regression", patches, dataset, model=model))
            continue
        if model.config.head_mode == "x0":
            native = sched.T
            for steps in [st for st in ev["x0_steps"] if st <= native] + [native]:
                preds = report.predict_variant("x0", patches, dataset, model=model,
                                               sched=sched, steps=steps, seed=ev["seed"])
                s = report.summarize_variant(f"{name}@{steps}", preds, patches,
                                             dataset, encoder, data_range)
                table3.append({"model": name, "steps": steps, "native": steps == native,
                               "rmse": s["aggregate"]["rmse"], "ssim": s["aggregate"]["ssim"]})
                if steps == native:
                    add(name, preds)
                preds_by_name[f"{name}@{steps}"] = preds
        else:
            for steps in _eps_step_grid(cfg, sched.T):
                preds = report.predict_variant("eps_ddim", patches, dataset, model=model,
                                               sched=sched, steps=steps, seed=ev["seed"])
                s = report.summarize_variant(f"{name}@ddim{steps}", preds, patches,
                                             dataset, encoder, data_range)
                table3.append({"model": name, "steps": steps, "native": False,
                               "rmse": s["aggregate"]["rmse"], "ssim": s["aggregate"]["ssim"]})
            preds = report.predict_variant("eps_ddpm", patches, dataset, model=model,
                                           sched=sched, seed=ev["seed"])
            s = report.summarize_variant(name, preds, patches, dataset, encoder, data_range)
            table3.append({"model": name, "steps": sched.T, "native": True,
                           "rmse": s["aggregate"]["rmse"], "ssim": s["aggregate"]["ssim"]})
            add(name, preds)
    return summaries, table3, preds_by_name, data_range


def _cond_ablations(cfg, patches, preds_by_name, summaries, out):
    """Conditioning ablation: per-patch RMSE difference (concat - efm)
    against scene complexity, plus error-difference maps."""
    by_name = {s["name"]: s for s in summaries}
    complexities = {p.index: p.complexity for p in patches}
    results = {}
    for concat_name, efm_name in cfg["eval"]["ablate_pairs"]:
        if concat_name not in by_name or efm_name not in by_name:
            continue
        analysis = metrics.delta_rmse_analysis(
            by_name[concat_name]["per_patch_rmse"],
            by_name[efm_name]["per_patch_rmse"], complexities)
        tag = f"{concat_name}_vs_{efm_name}"
        plots.plot_delta_rmse(analysis, tag, out / f"delta_rmse_{tag}.png")
        order = np.argsort(analysis.complexity)
        tercile = order[-max(1, len(order) // 3):]
        results[tag] = {
            "pearson_r": analysis.pearson_r,
            "mean_delta": float(analysis.delta.mean()),
            "high_complexity_tercile_mean_delta": float(analysis.delta[tercile].mean()),
        }
        best = patches[int(np.argmax(analysis.delta))]
        diff = metrics.error_difference_map(
            preds_by_name[concat_name][best.index],
            preds_by_name[efm_name][best.index], best.Y)
        plots.plot_error_difference_map(diff, tag, out / f"error_diff_{tag}.png")
    return results


def cmd_eval(cfg, args) -> int:
    root = _root(args)
    out = _resolve(root, cfg["eval"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(cfg, root)
    encoder = _load_encoder(cfg, root)
    patches = report.load_test_patches(dataset, encoder)
    summaries, table3, preds_by_name, data_range = _eval_variants(
        cfg, root, dataset, encoder, patches)
    report.write_table1(out / "table1.csv", summaries)
    if table3:
        report.write_table3(out / "table3.csv", table3)
    ablation = _cond_ablations(cfg, patches, preds_by_name, summaries, out)
    digests = {name: report.file_digest(_resolve(root, p))
               for name, p in cfg["eval"]["checkpoints"].items()}
    report.save_report(out, summaries, patches, extra={
        "data_range": data_range,
        "conditioning_ablation": ablation,
        "checkpoint_digests": digests,
        "table3": table3,
        "seed": cfg["eval"]["seed"],
    })
    report.render_report_plots(out)
    _snapshot(cfg, out)
    print(f"evaluation report written to {out}")
    return 0


def cmd_ablate_steps(cfg, args) -> int:
    root = _root(args)
    out = _resolve(root, cfg["eval"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(cfg, root)
    encoder = _load_encoder(cfg, root)
    patches = report.load_test_patches(dataset, encoder)
    _, table3, _, _ = _eval_variants(cfg, root, dataset, encoder, patches)
    if not table3:
        raise CliError("no diffusion checkpoints configured under eval.checkpoints")
    report.write_table3(out / "table3.csv", table3)
    _snapshot(cfg, out)
    print(f"step ablation written to {out / 'table3.csv'}")
    return 0


def cmd_ablate_cond(cfg, args) -> int:
    root = _root(args)
    out = _resolve(root, cfg["eval"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(cfg, root)
    encoder = _load_encoder(cfg, root)
    patches = report.load_test_patches(dataset, encoder)
    summaries, _, preds_by_name, _ = _eval_variants(cfg, root, dataset, encoder, patches)
    ablation = _cond_ablations(cfg, patches, preds_by_name, summaries, out)
    if not ablation:
        raise CliError("conditioning ablation needs both checkpoints of a pair "
                       "(see eval.ablate_pairs)")
    (out / "conditioning_ablation.json").write_text(json.dumps(ablation, indent=2))
    _snapshot(cfg, out)
    print(f"conditioning ablation written to {out}")
    return 0


def cmd_plot(cfg, args) -> int:
    root = _root(args)
    out = _resolve(root, cfg["eval"]["out_dir"])
    if not (out / "report.npz").exists():
        raise CliError(f"no stored report in {out} (run eval first)")
    report.render_report_plots(out)
    print(f"figures regenerated in {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-encoder": cmd_pretrain_encoder,
    "train": cmd_train,
    "train-regression": cmd_train_regression,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate-steps": cmd_ablate_steps,
    "ablate-cond": cmd_ablate_cond,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermodiff",
        description="Residual-diffusion super-resolution experiment runner")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("overrides", nargs="*", help="dotted-key config overrides (a.b=value)")
    parser.add_argument("--config", default=None, help="YAML config file")
    parser.add_argument("--output-root", default=None,
                        help=f"run output root (default ${OUTPUT_ROOT_ENV} or ./runs)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except (CliError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
