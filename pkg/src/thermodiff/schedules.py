"""Diffusion noise schedules and reduced-step sampling subsequences.

Two schedule families are supported: a variance-preserving (VP) linear
noise schedule for the epsilon-prediction formulation, and an exponential
shift schedule for the few-step x0-prediction formulation. Schedules are
immutable after construction and are meant to be serialized alongside
checkpoints so sampling never recomputes them from drifting defaults.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

DEFAULT_SQRT_ETA_MIN = 0.04
DEFAULT_SQRT_ETA_MAX = 0.999


@dataclass(frozen=True)
class VPSchedule:
    """Variance-preserving schedule: per-step rates beta and cumulative
    signal fractions alpha_bar, both indexed by t = 1..T (position t-1)."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-indexed t; t = 0 is the clean state (exactly 1)."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"kind": "vp", "beta": self.beta.tolist()}

    def digest(self) -> str:
        return _digest_arrays(self.beta)


@dataclass(frozen=True)
class ShiftSchedule:
    """Exponential transition schedule: shift levels eta (sqrt(eta) is a
    geometric progression) and noise scale kappa."""

    eta: np.ndarray
    kappa: float

    @property
    def T(self) -> int:
        return len(self.eta)

    def eta_at(self, t: int) -> float:
        """eta for 1-indexed t; t = 0 is the clean state (exactly 0)."""
        if t == 0:
            return 0.0
        return float(self.eta[t - 1])

    def to_dict(self) -> dict:
        return {"kind": "shift", "eta": self.eta.tolist(), "kappa": self.kappa}

    def digest(self) -> str:
        return _digest_arrays(self.eta, np.asarray([self.kappa]))


def _digest_arrays(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def build_vp_schedule(T: int, beta_min: float, beta_max: float) -> VPSchedule:
    """Linear beta schedule from beta_min to beta_max over T steps, with
    alpha_bar computed as the running product of (1 - beta)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return VPSchedule(beta=beta, alpha_bar=alpha_bar)


def build_shift_schedule(
    T: int,
    kappa: float = 1.0,
    sqrt_eta_min: float = DEFAULT_SQRT_ETA_MIN,
    sqrt_eta_max: float = DEFAULT_SQRT_ETA_MAX,
) -> ShiftSchedule:
    """Shift schedule where sqrt(eta) runs geometrically from sqrt_eta_min
    to sqrt_eta_max over T steps. For T = 1 the two endpoints may coincide."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kappa <= 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if not (0.0 < sqrt_eta_min <= sqrt_eta_max <= 1.0):
        raise ValueError(f"need 0 < sqrt_eta_min <= sqrt_eta_max <= 1, got ({sqrt_eta_min}, {sqrt_eta_max})")
    if T > 1 and sqrt_eta_min >= sqrt_eta_max:
        raise ValueError("sqrt_eta_min must be strictly below sqrt_eta_max for T > 1")
    if T == 1:
        sqrt_eta = np.asarray([sqrt_eta_max], dtype=np.float64)
    else:
        sqrt_eta = np.geomspace(sqrt_eta_min, sqrt_eta_max, T, dtype=np.float64)
    return ShiftSchedule(eta=sqrt_eta**2, kappa=float(kappa))


def ddim_subsequence(T: int, n_steps: int) -> np.ndarray:
    """Strictly increasing 1-indexed timesteps, n_steps of them, evenly
    spaced over [1, T] and always ending at T. Consumed in reverse order
    at sampling time."""
    if not (1 <= n_steps <= T):
        raise ValueError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    ts = np.round(T * np.arange(1, n_steps + 1) / n_steps).astype(np.int64)
    assert ts[-1] == T and np.all(np.diff(ts) > 0)
    return ts


def schedule_from_dict(d: dict) -> VPSchedule | ShiftSchedule:
    """Inverse of VPSchedule.to_dict / ShiftSchedule.to_dict."""
    kind = d["kind"]
    if kind == "vp":
        beta = np.asarray(d["beta"], dtype=np.float64)
        return VPSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))
    if kind == "shift":
        return ShiftSchedule(eta=np.asarray(d["eta"], dtype=np.float64), kappa=float(d["kappa"]))
    raise ValueError(f"unknown schedule kind {kind!r}")
