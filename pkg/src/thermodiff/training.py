"""Training loops for the diffusion variants and the regression baseline,
EMA maintenance, gradient clipping, and checkpointing.

Checkpoints are a single npz container of named tensors (raw weights, EMA
weights, optimizer moments, RNG states) plus a JSON manifest carrying the
model config, train config, schedule, and iteration count. Training is
deterministic given the seed on a single worker, and resuming reproduces
the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from . import diffusion
from .denoiser import Denoiser, DenoiserConfig
from .encoder import embed_batch, param_checksum
from .schedules import schedule_from_dict

FORMULATIONS = ("epsilon", "x0", "regression")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    iterations: int = 20_000
    batch_size: int = 8
    clip_norm: float = 1.0
    ema_decay: float = 0.9999
    seed: int = 0
    formulation: str = "x0"
    conditioning: str = "efm_cross_attention"
    log_every: int = 100
    checkpoint_every: int = 5000
    lr_schedule: str = "constant"  # constant | cosine (decay to zero over `iterations`)

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not (0.0 < self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in (0,1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, iteration: int) -> float:
        """Learning rate applied at a given (0-based) iteration; a pure
        function of the iteration so interrupted runs resume exactly."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        frac = iteration / max(1, self.iterations)
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


def ema_update(raw: dict[str, torch.Tensor], ema: dict[str, torch.Tensor], decay: float):
    """ema <- decay * ema + (1 - decay) * raw, per parameter, in place."""
    for name, p in raw.items():
        if ema[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        ema[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema


def _ema_init(denoiser) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in denoiser.state_dict().items()
            if v.dtype.is_floating_point}


def make_batch(dataset, rng: np.random.Generator, batch_size: int, encoder,
               conditioning: str, split: str = "train") -> dict:
    """Draw a training batch (random scenes, random crops) and attach the
    conditioning tensors the selected mode needs."""
    n = dataset.n_scenes(split)
    idx = rng.integers(0, n, size=batch_size)
    samples = [dataset.read(split, int(i), rng=rng) for i in idx]
    batch = {
        "R": _stack(samples, "R_std"),
        "X_cond": _stack(samples, "X_cond"),
    }
    if conditioning == "channel_concat":
        batch["S"] = torch.from_numpy(
            np.stack([s["S"] for s in samples]).astype(np.float32))
    elif conditioning == "efm_cross_attention":
        S = torch.from_numpy(np.stack([s["S"] for s in samples]).astype(np.float32))
        batch["Z"] = embed_batch(S, encoder)
    return batch


def _stack(samples, key):
    return torch.from_numpy(np.stack([s[key] for s in samples])[:, None].astype(np.float32))


def compute_loss(batch, denoiser, sched, formulation: str, generator: torch.Generator):
    if formulation == "epsilon":
        return diffusion.loss_eps(batch, denoiser, sched, generator)
    if formulation == "x0":
        return diffusion.loss_x0(batch, denoiser, sched, generator)
    pred = denoiser(None, batch["X_cond"], None, Z=batch.get("Z"), S=batch.get("S"))
    return torch.mean(torch.abs(batch["R"] - pred))


def train(dataset, denoiser: Denoiser, encoder, sched, config: TrainConfig,
          out_dir: str | Path, resume_from: str | Path | None = None) -> Path:
    """Run the full training loop; returns the path of the final
    checkpoint. ``encoder`` must be frozen in efm_cross_attention mode."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.conditioning == "efm_cross_attention":
        if encoder is None or not getattr(encoder, "frozen", False):
            raise ValueError("efm_cross_attention training requires a frozen encoder")
    if config.formulation == "epsilon" and denoiser.config.head_mode != "epsilon":
        raise ValueError("epsilon formulation requires an epsilon head")
    if config.formulation == "x0" and denoiser.config.head_mode != "x0":
        raise ValueError("x0 formulation requires an x0 head")

    opt = torch.optim.Adam(denoiser.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    start_iter = 0

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        # Extending the horizon is the point of resuming; everything else
        # must match or the continued run would silently diverge. Under a
        # cosine schedule the lr history is a function of the horizon, so
        # changing the horizon would rewrite the past and is refused.
        if (config.lr_schedule != "constant"
                and state["manifest"]["train_config"]["iterations"] != config.iterations):
            raise ValueError("resume refused: cannot change the horizon of a cosine lr run")
        stored = dict(state["manifest"]["train_config"], iterations=config.iterations)
        if stored != asdict(config):
            raise ValueError("resume refused: train config does not match checkpoint")
        if state["manifest"]["denoiser_config"] != denoiser.config.to_dict():
            raise ValueError("resume refused: denoiser config does not match checkpoint")
        denoiser.load_state_dict(state["raw"])
        ema = state["ema"]
        state["optimizer"]["param_groups"] = opt.state_dict()["param_groups"]
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["manifest"]["rng_numpy"]
        gen.set_state(torch.from_numpy(state["rng_torch"]))
        start_iter = state["manifest"]["iteration"]
    else:
        ema = _ema_init(denoiser)

    loss_csv = out_dir / "loss.csv"
    if start_iter == 0 and loss_csv.exists():
        loss_csv.unlink()
    last_ckpt = out_dir / "checkpoint.npz"
    t0 = time.time()

    for it in range(start_iter, config.iterations):
        lr = config.lr_at(it)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = make_batch(dataset, rng, config.batch_size, encoder, config.conditioning)
        loss = compute_loss(batch, denoiser, sched, config.formulation, gen)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at iteration {it}; last good checkpoint at {last_ckpt}")
        opt.zero_grad()
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(denoiser.parameters(), config.clip_norm)
        opt.step()
        # Warm-up keeps short runs usable: the configured decay would leave
        # the EMA dominated by the random init for the first ~1/(1-decay)
        # steps. The effective decay converges to config.ema_decay.
        decay = min(config.ema_decay, (1.0 + it) / (10.0 + it))
        ema_update(dict(denoiser.named_parameters()), ema, decay)

        if (it + 1) % config.log_every == 0 or it == start_iter:
            _append_csv(
                loss_csv, [it + 1, float(loss.detach()), float(grad_norm), time.time() - t0]
            )
        if (it + 1) % config.checkpoint_every == 0 or it + 1 == config.iterations:
            save_checkpoint(last_ckpt, denoiser, ema, opt, it + 1, sched, config,
                            rng_numpy=rng.bit_generator.state,
                            rng_torch=gen.get_state().numpy())
    return last_ckpt


def train_regression(dataset, denoiser: Denoiser, encoder, config: TrainConfig,
                     out_dir: str | Path, resume_from=None) -> Path:
    """Single-pass L1 regression of the standardized residual from the
    upsampled coarse field plus conditioning tokens."""
    if config.formulation != "regression":
        raise ValueError("train_regression requires formulation='regression'")
    if denoiser.config.use_diffusion_state:
        raise ValueError("regression denoiser must be built without a diffusion state input")
    return train(dataset, denoiser, encoder, None, config, out_dir, resume_from=resume_from)


def _append_csv(path: Path, row):
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["iteration", "loss", "grad_norm", "wall_time_s"])
        w.writerow(row)


def save_checkpoint(path: str | Path, denoiser, ema, opt, iteration, sched,
                    train_config: TrainConfig, rng_numpy=None, rng_torch=None):
    path = Path(path)
    arrays = {}
    for name, p in denoiser.state_dict().items():
        arrays[f"raw/{name}"] = p.detach().cpu().numpy()
    for name, p in ema.items():
        arrays[f"ema/{name}"] = p.detach().cpu().numpy()
    opt_state = opt.state_dict()
    params = list(denoiser.parameters())
    for pid, st in opt_state["state"].items():
        for key in ("exp_avg", "exp_avg_sq"):
            arrays[f"opt/{pid}/{key}"] = st[key].cpu().numpy()
        arrays[f"opt/{pid}/step"] = np.asarray(
            st["step"].item() if torch.is_tensor(st["step"]) else st["step"])
    if rng_torch is not None:
        arrays["rng/torch"] = np.asarray(rng_torch, dtype=np.uint8)
    manifest = {
        "iteration": int(iteration),
        "denoiser_config": denoiser.config.to_dict(),
        "train_config": asdict(train_config),
        "schedule": sched.to_dict() if sched is not None else None,
        "schedule_digest": sched.digest() if sched is not None else None,
        "n_params": len(params),
        "rng_numpy": rng_numpy,
        "param_checksum": param_checksum(denoiser),
    }
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, default=str))


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    raw, ema, opt_moments = {}, {}, {}
    rng_torch = None
    with np.load(path) as z:
        for key in z.files:
            if key.startswith("raw/"):
                raw[key[4:]] = torch.from_numpy(z[key])
            elif key.startswith("ema/"):
                ema[key[4:]] = torch.from_numpy(z[key])
            elif key.startswith("opt/"):
                _, pid, k = key.split("/")
                opt_moments.setdefault(int(pid), {})[k] = z[key]
            elif key == "rng/torch":
                rng_torch = z[key]
    opt_state = {
        "state": {
            pid: {
                "step": torch.tensor(float(st["step"])),
                "exp_avg": torch.from_numpy(st["exp_avg"]),
                "exp_avg_sq": torch.from_numpy(st["exp_avg_sq"]),
            }
            for pid, st in opt_moments.items()
        },
        "param_groups": None,  # re-derived by the caller's optimizer
    }
    return {"manifest": manifest, "raw": raw, "ema": ema,
            "optimizer": opt_state, "rng_torch": rng_torch}


def denoiser_from_checkpoint(path: str | Path, use_ema: bool = True) -> tuple[Denoiser, dict]:
    """Rebuild the denoiser (EMA weights by default, as used for
    evaluation) together with its manifest."""
    state = load_checkpoint(path)
    config = DenoiserConfig.from_dict(state["manifest"]["denoiser_config"])
    model = Denoiser(config)
    weights = dict(state["raw"])
    if use_ema:
        weights.update(state["ema"])
    model.load_state_dict(weights)
    model.eval()
    return model, state["manifest"]


def schedule_from_checkpoint(path: str | Path):
    manifest = json.loads(Path(path).with_suffix(".json").read_text())
    if manifest["schedule"] is None:
        return None
    return schedule_from_dict(manifest["schedule"])
