"""Distortion metrics, spatial error diagnostics, and the conditioning
ablation analyses (per-patch RMSE difference vs scene complexity, signed
error-difference maps, embedding Frechet distance)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
COMPLEXITY_BINS = 20
MIN_BIN_COUNT = 5  # bins with fewer patches are flagged less stable


def rmse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    err2 = (pred - target) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty mask")
        err2 = err2[mask]
    return float(np.sqrt(err2.mean()))


def _ssim_filter(x: np.ndarray) -> np.ndarray:
    # Gaussian window of size 11 (sigma 1.5): truncate 3.5 gives radius 5.
    return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=3.5)


def ssim(pred: np.ndarray, target: np.ndarray, data_range: float | None = None) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = (0.01 L)^2,
    C2 = (0.03 L)^2, averaged over interior windows. L defaults to the
    target's max - min and should be fixed per evaluation set."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    L = float(target.max() - target.min()) if data_range is None else float(data_range)
    C1, C2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mu_p, mu_t = _ssim_filter(pred), _ssim_filter(target)
    var_p = _ssim_filter(pred * pred) - mu_p**2
    var_t = _ssim_filter(target * target) - mu_t**2
    cov = _ssim_filter(pred * target) - mu_p * mu_t
    s = ((2 * mu_p * mu_t + C1) * (2 * cov + C2)) / (
        (mu_p**2 + mu_t**2 + C1) * (var_p + var_t + C2))
    pad = (SSIM_WINDOW - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def per_pixel_rmse_map(predictions: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Positionwise RMSE over a stack of test patches, (N, H, W) in."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 3:
        raise ValueError("expected matching (N, H, W) stacks")
    if predictions.shape[0] == 0:
        raise ValueError("empty patch set")
    return np.sqrt(((predictions - targets) ** 2).mean(axis=0))


def checkerboard_score(rmse_map: np.ndarray, scale: int) -> float | None:
    """Mean map value on coarse-block boundary pixels divided by the mean
    on interior pixels. None when the map is all zero (perfect predictions)."""
    H, W = rmse_map.shape
    ii = np.arange(H) % scale
    jj = np.arange(W) % scale
    edge_i = (ii == 0) | (ii == scale - 1)
    edge_j = (jj == 0) | (jj == scale - 1)
    boundary = edge_i[:, None] | edge_j[None, :]
    interior_mean = rmse_map[~boundary].mean()
    if interior_mean == 0.0:
        return None
    return float(rmse_map[boundary].mean() / interior_mean)


def scene_complexity(S: np.ndarray) -> float:
    """Mean finite-difference gradient magnitude over bands and pixels of
    a normalized (C, H, W) reflectance stack; edge rows/columns excluded
    so both forward differences exist at every counted pixel."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {S.shape}")
    C, H, W = S.shape
    if H < 2 or W < 2:
        raise ValueError("field too small for gradients")
    gx = S[:, :-1, 1:] - S[:, :-1, :-1]
    gy = S[:, 1:, :-1] - S[:, :-1, :-1]
    return float(np.sqrt(gx**2 + gy**2).mean())


@dataclass
class DeltaRmseAnalysis:
    delta: np.ndarray           # per-patch RMSE_A - RMSE_B
    complexity: np.ndarray
    bin_edges: np.ndarray
    bin_mean: np.ndarray
    bin_stderr: np.ndarray
    bin_count: np.ndarray
    bin_stable: np.ndarray      # False where count < MIN_BIN_COUNT
    pearson_r: float | None     # None when undefined (zero variance)


def delta_rmse_analysis(results_a: dict[int, float], results_b: dict[int, float],
                        complexities: dict[int, float],
                        n_bins: int = COMPLEXITY_BINS) -> DeltaRmseAnalysis:
    """Per-patch RMSE difference (A - B) against scene complexity:
    equal-width binned means with standard errors, plus the Pearson
    correlation over patches."""
    ids = sorted(results_a)
    if sorted(results_b) != ids or not all(i in complexities for i in ids):
        raise ValueError("misaligned patch ids across inputs")
    delta = np.array([results_a[i] - results_b[i] for i in ids])
    comp = np.array([complexities[i] for i in ids])

    lo, hi = comp.min(), comp.max()
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, n_bins + 1)
    which = np.clip(np.digitize(comp, edges) - 1, 0, n_bins - 1)
    mean = np.full(n_bins, np.nan)
    stderr = np.full(n_bins, np.nan)
    count = np.zeros(n_bins, dtype=np.int64)
    for b in range(n_bins):
        vals = delta[which == b]
        count[b] = len(vals)
        if len(vals):
            mean[b] = vals.mean()
            stderr[b] = vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0

    if delta.std() == 0.0 or comp.std() == 0.0:
        r = None
    else:
        r = float(np.corrcoef(delta, comp)[0, 1])
    return DeltaRmseAnalysis(
        delta=delta, complexity=comp, bin_edges=edges, bin_mean=mean,
        bin_stderr=stderr, bin_count=count,
        bin_stable=count >= MIN_BIN_COUNT, pearson_r=r,
    )


def error_difference_map(pred_a: np.ndarray, pred_b: np.ndarray, target: np.ndarray) -> np.ndarray:
    """|error_A| - |error_B| elementwise; positive where B is better."""
    pred_a, pred_b, target = (np.asarray(x, dtype=np.float64) for x in (pred_a, pred_b, target))
    if not (pred_a.shape == pred_b.shape == target.shape):
        raise ValueError("shape mismatch")
    return np.abs(pred_a - target) - np.abs(pred_b - target)


def _sqrtm_psd(M: np.ndarray) -> np.ndarray:
    """Square root of a symmetric matrix via eigendecomposition, negative
    eigenvalues clamped at zero."""
    vals, vecs = np.linalg.eigh((M + M.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the
    cross term computed symmetrically as sqrt(sqrt(S_a) S_b sqrt(S_a))."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    sigma_a, sigma_b = np.atleast_2d(sigma_a).astype(np.float64), np.atleast_2d(sigma_b).astype(np.float64)
    root_a = _sqrtm_psd(sigma_a)
    cross = _sqrtm_psd(root_a @ sigma_b @ root_a)
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(sigma_a + sigma_b - 2.0 * cross))


def embedding_frechet_distance(set_a: np.ndarray, set_b: np.ndarray, encoder) -> float:
    """Frechet distance between token-pooled frozen-encoder features of
    two sets of (N, H, W) fields (fields are tiled to the encoder's band
    count). Falls back to the mean-only term when either set is too small
    for a covariance estimate."""
    feats = [_pooled_features(s, encoder) for s in (set_a, set_b)]
    for f in feats:
        if f.shape[0] == 0:
            raise ValueError("empty field set")
    mu = [f.mean(axis=0) for f in feats]
    if min(f.shape[0] for f in feats) < 2:
        return float(np.sum((mu[0] - mu[1]) ** 2))
    sigma = [np.cov(f, rowvar=False) for f in feats]
    return frechet_distance(mu[0], sigma[0], mu[1], sigma[1])


def _pooled_features(fields: np.ndarray, encoder) -> np.ndarray:
    import torch

    from .encoder import embed_batch

    fields = np.asarray(fields, dtype=np.float32)
    if fields.ndim != 3:
        raise ValueError(f"expected (N, H, W) fields, got {fields.shape}")
    bands = encoder.config.bands
    x = torch.from_numpy(np.repeat(fields[:, None], bands, axis=1))
    tokens = embed_batch(x, encoder)
    return tokens.mean(dim=1).numpy()
