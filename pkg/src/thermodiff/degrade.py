"""Reduced-resolution degradation protocol, residual formation, and
normalizations.

The low-resolution input is synthesized from the high-resolution truth by
Gaussian PSF blur (sigma = s/pi), area-average downsampling by the scale
factor s, and bicubic upsampling back to the fine grid. The prediction
target is the residual between the truth and the upsampled coarse field,
standardized by training-set statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a paired high/low-resolution grid."""

    H: int
    W: int
    s: int
    delta_hr: float = 30.0
    delta_lr: float | None = None

    def __post_init__(self):
        if self.s < 2:
            raise ValueError(f"scale factor must be >= 2, got {self.s}")
        if self.H % self.s or self.W % self.s:
            raise ValueError(f"grid {self.H}x{self.W} not divisible by s={self.s}")

    @property
    def h(self) -> int:
        return self.H // self.s

    @property
    def w(self) -> int:
        return self.W // self.s


def gaussian_psf_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian kernel truncated at radius ceil(3*sigma), renormalized
    to unit sum."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def psf_blur(Y: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding (edge sample not
    duplicated; scipy's "mirror" mode)."""
    k = gaussian_psf_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(Y, dtype=np.float64), k, axis=0, mode="mirror")
    return ndimage.correlate1d(out, k, axis=1, mode="mirror")


def block_average(Y: np.ndarray, s: int) -> np.ndarray:
    """Mean over non-overlapping s x s blocks."""
    H, W = Y.shape
    if H % s or W % s:
        raise ValueError(f"shape {Y.shape} not divisible by s={s}")
    return Y.reshape(H // s, s, W // s, s).mean(axis=(1, 3))


def _catmull_rom(x: np.ndarray) -> np.ndarray:
    # Cubic convolution kernel with a = -0.5.
    a = -0.5
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    out[near] = (a + 2.0) * ax[near] ** 3 - (a + 3.0) * ax[near] ** 2 + 1.0
    out[far] = a * ax[far] ** 3 - 5.0 * a * ax[far] ** 2 + 8.0 * a * ax[far] - 4.0 * a
    return out


def _bicubic_matrix(n_fine: int, n_coarse: int, s: int) -> np.ndarray:
    """Interpolation matrix mapping n_coarse samples to n_fine, Catmull-Rom
    weights, out-of-range source indices clamped to the edge samples."""
    i = np.arange(n_fine, dtype=np.float64)
    u = (i + 0.5) / s - 0.5
    j0 = np.floor(u).astype(np.int64)
    f = u - j0
    W = np.zeros((n_fine, n_coarse), dtype=np.float64)
    for tap in range(-1, 3):
        w = _catmull_rom(f - tap)
        j = np.clip(j0 + tap, 0, n_coarse - 1)
        np.add.at(W, (np.arange(n_fine), j), w)
    return W


def bicubic_upsample(X: np.ndarray, s: int) -> np.ndarray:
    """Catmull-Rom bicubic upsampling by integer factor s with clamped
    edge sampling. Exact on constant fields (weights sum to one)."""
    h, w = X.shape
    Wr = _bicubic_matrix(h * s, h, s)
    Wc = _bicubic_matrix(w * s, w, s)
    return Wr @ np.asarray(X, dtype=np.float64) @ Wc.T


def wald_degrade(Y: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Full reduced-resolution pipeline: PSF blur (sigma = s/pi), s x s
    area averaging to the coarse field X, bicubic upsampling to X_tilde.

    Returns (X, X_tilde).
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError(f"expected a 2-D field, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("input field contains non-finite values")
    GridSpec(H=Y.shape[0], W=Y.shape[1], s=s)  # validates divisibility
    blurred = psf_blur(Y, sigma=s / math.pi)
    X = block_average(blurred, s)
    return X, bicubic_upsample(X, s)


def make_residual(Y: np.ndarray, X_tilde: np.ndarray) -> np.ndarray:
    """R = Y - X_tilde; reconstruct(X_tilde, R) recovers Y exactly."""
    Y = np.asarray(Y)
    X_tilde = np.asarray(X_tilde)
    if Y.shape != X_tilde.shape:
        raise ValueError(f"shape mismatch: {Y.shape} vs {X_tilde.shape}")
    return Y - X_tilde


class UnfittedNormalizerError(RuntimeError):
    pass


@dataclass
class ResidualNormalizer:
    """Standardizes residuals as R' = (R - mu) / (3 * sigma), mapping
    roughly 99.7% of values into [-1, 1]. No clipping is applied. Must be
    fitted on the training split only."""

    mu_R: float | None = None
    sigma_R: float | None = None

    @property
    def fitted(self) -> bool:
        return self.mu_R is not None and self.sigma_R is not None

    def _require_fitted(self):
        if not self.fitted:
            raise UnfittedNormalizerError("normalizer has not been fitted")

    def standardize(self, R: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return (np.asarray(R) - self.mu_R) / (3.0 * self.sigma_R)

    def unstandardize(self, R_prime: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return np.asarray(R_prime) * (3.0 * self.sigma_R) + self.mu_R


@dataclass
class RunningMoments:
    """Associative (mergeable) accumulator for global mean/std over a
    stream of arrays, Chan update for numerical stability."""

    n: int = 0
    mean: float = 0.0
    M2: float = 0.0

    def update(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite values in stream")
        other = RunningMoments(
            n=values.size,
            mean=float(values.mean()),
            M2=float(((values - values.mean()) ** 2).sum()),
        )
        self.merge(other)

    def merge(self, other: "RunningMoments"):
        if other.n == 0:
            return
        if self.n == 0:
            self.n, self.mean, self.M2 = other.n, other.mean, other.M2
            return
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / n
        self.M2 += other.M2 + delta**2 * self.n * other.n / n
        self.n = n

    @property
    def std(self) -> float:
        return math.sqrt(self.M2 / self.n) if self.n else 0.0


def fit_normalizer(residual_stream: Iterable[np.ndarray]) -> ResidualNormalizer:
    """Single-pass global mean/std over all residual pixels in the stream."""
    acc = RunningMoments()
    n_fields = 0
    for R in residual_stream:
        acc.update(R)
        n_fields += 1
    if n_fields < 2:
        raise ValueError(f"need at least 2 fields to fit, got {n_fields}")
    if acc.std == 0.0:
        raise ValueError("residual stream has zero variance")
    return ResidualNormalizer(mu_R=acc.mean, sigma_R=acc.std)


def normalize_reflectance(S: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Per-band affine map of a (C, H, W) stack to [0, 1], then clamp."""
    S = np.asarray(S, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64).reshape(-1, 1, 1)
    hi = np.asarray(hi, dtype=np.float64).reshape(-1, 1, 1)
    if np.any(hi <= lo):
        raise ValueError("degenerate band range: hi must exceed lo per band")
    return np.clip((S - lo) / (hi - lo), 0.0, 1.0)


def save_normalizer(path: str | Path, normalizer: ResidualNormalizer,
                    band_lo: np.ndarray, band_hi: np.ndarray,
                    extra: dict | None = None):
    normalizer._require_fitted()
    doc = {
        "mu_R": normalizer.mu_R,
        "sigma_R": normalizer.sigma_R,
        "band_lo": np.asarray(band_lo, dtype=float).tolist(),
        "band_hi": np.asarray(band_hi, dtype=float).tolist(),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def load_normalizer(path: str | Path) -> tuple[ResidualNormalizer, dict]:
    doc = json.loads(Path(path).read_text())
    return ResidualNormalizer(mu_R=doc["mu_R"], sigma_R=doc["sigma_R"]), doc
