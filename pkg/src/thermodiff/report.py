"""Evaluation harness: runs each requested model variant over the test
split, aggregates per-group and per-pixel metrics, and persists a report
that the plotting command can re-render without recomputation."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion, metrics, plots
from .encoder import embed
from .synthdata import per_class_masks


@dataclass
class TestPatch:
    index: int
    Y: np.ndarray
    X_tilde: np.ndarray
    X_cond: np.ndarray
    S: np.ndarray
    Z: np.ndarray | None
    class_map: np.ndarray
    group: str
    masks: dict
    complexity: float


def load_test_patches(dataset, encoder) -> list[TestPatch]:
    """Deterministic center-crop reads of the full test split, with
    conditioning tokens precomputed once (the encoder is frozen)."""
    patches = []
    for i in range(dataset.n_scenes("test")):
        s = dataset.read("test", i)
        masks, group = per_class_masks(s["class_map"])
        Z = embed(s["S"], encoder) if encoder is not None else None
        patches.append(TestPatch(
            index=i, Y=s["Y"], X_tilde=s["X_tilde"], X_cond=s["X_cond"],
            S=s["S"], Z=Z, class_map=s["class_map"], group=group, masks=masks,
            complexity=metrics.scene_complexity(s["S"]),
        ))
    return patches


def _to_batch(patch: TestPatch, need_z: bool, need_s: bool):
    X = torch.from_numpy(patch.X_cond[None, None].astype(np.float32))
    Z = torch.from_numpy(patch.Z[None].astype(np.float32)) if need_z else None
    S = torch.from_numpy(patch.S[None].astype(np.float32)) if need_s else None
    return X, Z, S


def predict_variant(kind: str, patches, dataset, model=None, sched=None,
                    steps: int | None = None, seed: int = 0) -> np.ndarray:
    """Predicted fields (N, H, W) for one variant over the test patches.

    kind: bicubic | regression | x0 | eps_ddim | eps_ddpm.
    """
    preds = []
    for patch in patches:
        if kind == "bicubic":
            R_std = np.zeros_like(patch.Y)
        else:
            need_z = model.config.conditioning == "efm_cross_attention"
            need_s = model.config.conditioning == "channel_concat"
            X, Z, S = _to_batch(patch, need_z, need_s)
            if kind == "regression":
                with torch.no_grad():
                    R_std = model(None, X, None, Z=Z, S=S)[0, 0].numpy()
            elif kind == "x0":
                R_std = diffusion.sample_shift(
                    model, X, Z=Z, S=S, sched=sched, steps=steps,
                    seed=seed + patch.index)[0, 0].numpy()
            elif kind == "eps_ddim":
                R_std = diffusion.sample_ddim(
                    model, X, Z=Z, S=S, sched=sched, steps=steps,
                    seed=seed + patch.index)[0, 0].numpy()
            elif kind == "eps_ddpm":
                R_std = diffusion.sample_ddpm(
                    model, X, Z=Z, S=S, sched=sched,
                    seed=seed + patch.index)[0, 0].numpy()
            else:
                raise ValueError(f"unknown variant kind {kind!r}")
        preds.append(diffusion.reconstruct(patch.X_tilde, R_std, dataset.normalizer))
    return np.stack(preds)


GROUPS = ("Forest", "Low Vegetation", "Water")


def summarize_variant(name: str, preds: np.ndarray, patches, dataset,
                      encoder, data_range: float) -> dict:
    """Per-group and aggregate metrics plus spatial diagnostics."""
    targets = np.stack([p.Y for p in patches])
    per_patch_rmse = {p.index: metrics.rmse(preds[k], p.Y) for k, p in enumerate(patches)}
    out = {
        "name": name,
        "per_patch_rmse": per_patch_rmse,
        "rmse_map": metrics.per_pixel_rmse_map(preds, targets),
        "checkerboard": metrics.checkerboard_score(
            metrics.per_pixel_rmse_map(preds, targets), dataset.scale),
        "groups": {},
        "aggregate": {
            "rmse": metrics.rmse(preds, targets),
            "ssim": float(np.mean([
                metrics.ssim(preds[k], p.Y, data_range=data_range)
                for k, p in enumerate(patches)])),
        },
    }
    for group in GROUPS:
        idx = [k for k, p in enumerate(patches) if p.group == group]
        if not idx:
            out["groups"][group] = None
            continue
        g_pred, g_true = preds[idx], targets[idx]
        row = {
            "n_patches": len(idx),
            "rmse": metrics.rmse(g_pred, g_true),
            "ssim": float(np.mean([
                metrics.ssim(g_pred[k], g_true[k], data_range=data_range)
                for k in range(len(idx))])),
        }
        if encoder is not None:
            scale = lambda f: (f - dataset.mu_X) / dataset.sigma_X
            row["fed"] = metrics.embedding_frechet_distance(
                scale(g_pred), scale(g_true), encoder)
        out["groups"][group] = row
    return out


def write_table1(path: Path, summaries: list[dict]):
    """Per-group metric table, one row per (model, group)."""
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "group", "n_patches", "rmse", "ssim", "fed"])
        for s in summaries:
            for group in GROUPS:
                row = s["groups"].get(group)
                if row is None:
                    continue
                w.writerow([s["name"], group, row["n_patches"],
                            f"{row['rmse']:.6f}", f"{row['ssim']:.6f}",
                            f"{row.get('fed', float('nan')):.6f}"])
            w.writerow([s["name"], "All", len(s["per_patch_rmse"]),
                        f"{s['aggregate']['rmse']:.6f}",
                        f"{s['aggregate']['ssim']:.6f}", ""])


def write_table3(path: Path, rows: list[dict]):
    """Step-count ablation table; the native schedule carries a dagger."""
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "steps", "rmse", "ssim"])
        for r in rows:
            steps = f"{r['steps']}{'+' if r.get('native') else ''}"
            w.writerow([r["model"], steps, f"{r['rmse']:.6f}", f"{r['ssim']:.6f}"])


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()[:16]


def save_report(out_dir: Path, summaries: list[dict], patches, extra: dict | None = None):
    """Persist arrays (npz) + scalars (json); plots are re-renderable from
    this pair alone."""
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays, scalars = {}, {"variants": {}, "complexity": {}}
    scalars["complexity"] = {str(p.index): p.complexity for p in patches}
    for s in summaries:
        key = s["name"]
        arrays[f"rmse_map/{key}"] = s["rmse_map"]
        arrays[f"per_patch_rmse/{key}"] = np.array(
            [s["per_patch_rmse"][p.index] for p in patches])
        scalars["variants"][key] = {
            "checkerboard": s["checkerboard"],
            "aggregate": s["aggregate"],
            "groups": s["groups"],
        }
    if extra:
        scalars.update(extra)
    np.savez(out_dir / "report.npz", **arrays)
    (out_dir / "summary.json").write_text(json.dumps(scalars, indent=2))


def render_report_plots(out_dir: Path):
    """Regenerate all raster figures from the stored report."""
    out_dir = Path(out_dir)
    scalars = json.loads((out_dir / "summary.json").read_text())
    with np.load(out_dir / "report.npz") as z:
        for key in z.files:
            if key.startswith("rmse_map/"):
                name = key.split("/", 1)[1]
                plots.plot_rmse_map(z[key], f"per-pixel RMSE: {name}",
                                    out_dir / f"rmse_map_{name}.png")
    return scalars
