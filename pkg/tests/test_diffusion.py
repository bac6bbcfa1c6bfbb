import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from thermodiff.degrade import ResidualNormalizer, fit_normalizer, make_residual
from thermodiff.diffusion import (
    loss_eps,
    loss_x0,
    reconstruct,
    sample_ddim,
    sample_ddpm,
    sample_shift,
    shift_forward,
    vp_forward,
)
from thermodiff.schedules import build_shift_schedule, build_vp_schedule

VP_DESK = build_vp_schedule(100, 1e-5, 0.1)
SHIFT_NATIVE = build_shift_schedule(15, 1.0, 0.04, 0.999)


class _EpsOracle:
    """Inverts the VP forward map around a fixed clean target, so every
    prediction is the exact noise consistent with that target."""

    config = SimpleNamespace(head_mode="epsilon")

    def __init__(self, R_star, sched, offset=0.0):
        self.R_star = R_star
        self.sched = sched
        self.offset = offset
        self.calls = 0

    def __call__(self, R_t, X_cond, t, Z=None, S=None):
        self.calls += 1
        tt = int(t) if np.isscalar(t) or t.ndim == 0 else None
        if tt is not None:
            ab = self.sched.alpha_bar_at(tt)
            return (R_t - math.sqrt(ab) * self.R_star) / math.sqrt(1.0 - ab) + self.offset
        ab = torch.tensor([self.sched.alpha_bar_at(int(ti)) for ti in t],
                          dtype=R_t.dtype).reshape(-1, 1, 1, 1)
        return (R_t - torch.sqrt(ab) * self.R_star) / torch.sqrt(1.0 - ab) + self.offset


class _X0Oracle:
    config = SimpleNamespace(head_mode="x0")

    def __init__(self, R_star, offset=0.0):
        self.R_star = R_star
        self.offset = offset
        self.calls = 0

    def __call__(self, R_t, X_cond, t, Z=None, S=None):
        self.calls += 1
        return self.R_star + self.offset


def _target(shape=(1, 1, 8, 8), seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


class TestForwardProcesses:
    def test_vp_closed_form(self):
        sched = build_vp_schedule(2, 0.5, 0.5)  # alpha_bar = (0.5, 0.25)
        R = torch.ones(1, 1, 4, 4)
        out = vp_forward(R, 2, torch.ones_like(R), sched)
        assert torch.allclose(out, torch.full_like(R, 0.5 + math.sqrt(0.75)), atol=1e-6)

    def test_vp_t0_is_identity(self):
        R = _target(seed=1)
        assert torch.allclose(vp_forward(R, 0, torch.randn_like(R), VP_DESK), R)

    def test_vp_variance_preserving_monte_carlo(self):
        gen = torch.Generator().manual_seed(2)
        n = 1_000_000
        R = torch.randn(n, generator=gen)
        eps = torch.randn(n, generator=gen)
        for t in (1, 37, 100):
            var = vp_forward(R, t, eps, VP_DESK).var().item()
            se = math.sqrt(2.0 / (n - 1))
            assert abs(var - 1.0) < 3 * se

    def test_vp_per_sample_timesteps(self):
        R = _target((3, 1, 4, 4), seed=3)
        eps = _target((3, 1, 4, 4), seed=4)
        t = torch.tensor([1, 50, 100])
        batched = vp_forward(R, t, eps, VP_DESK)
        for i, ti in enumerate(t.tolist()):
            single = vp_forward(R[i : i + 1], ti, eps[i : i + 1], VP_DESK)
            assert torch.allclose(batched[i : i + 1], single)

    def test_vp_rejects_out_of_range(self):
        R = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ValueError):
            vp_forward(R, 101, torch.zeros_like(R), VP_DESK)
        with pytest.raises(ValueError):
            vp_forward(R, -1, torch.zeros_like(R), VP_DESK)

    def test_shift_closed_form(self):
        sched = build_shift_schedule(1, 1.0, 0.5, 0.5)  # eta = (0.25,)
        R = torch.full((1, 1, 4, 4), 2.0)
        out = shift_forward(R, 1, torch.ones_like(R), sched)
        assert torch.allclose(out, torch.full_like(R, 2.0), atol=1e-6)

    def test_shift_eta_zero_limit(self):
        R = _target(seed=5)
        assert torch.allclose(shift_forward(R, 0, torch.randn_like(R), SHIFT_NATIVE), R)

    def test_shift_eta_one_replaces_signal(self):
        sched = build_shift_schedule(1, 1.0, 1.0, 1.0)
        R = _target(seed=6)
        eps = _target(seed=7)
        assert torch.allclose(shift_forward(R, 1, eps, sched), eps)

    def test_shift_rejects_out_of_range(self):
        R = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ValueError):
            shift_forward(R, 16, torch.zeros_like(R), SHIFT_NATIVE)


class TestLosses:
    def _batch(self, seed=0, n=4):
        gen = torch.Generator().manual_seed(seed)
        return {
            "R": torch.randn(n, 1, 8, 8, generator=gen),
            "X_cond": torch.randn(n, 1, 8, 8, generator=gen),
        }

    def test_eps_oracle_loss_near_zero(self):
        batch = self._batch()
        oracle = _EpsOracle(batch["R"], VP_DESK)
        loss = loss_eps(batch, oracle, VP_DESK, torch.Generator().manual_seed(0))
        assert loss.item() < 1e-6

    def test_eps_constant_offset_gives_abs_c(self):
        batch = self._batch(1)
        oracle = _EpsOracle(batch["R"], VP_DESK, offset=-0.375)
        loss = loss_eps(batch, oracle, VP_DESK, torch.Generator().manual_seed(1))
        assert abs(loss.item() - 0.375) < 1e-6

    def test_x0_oracle_loss_zero(self):
        batch = self._batch(2)
        oracle = _X0Oracle(batch["R"])
        loss = loss_x0(batch, oracle, SHIFT_NATIVE, torch.Generator().manual_seed(2))
        assert loss.item() == 0.0

    def test_x0_constant_offset_gives_c_squared(self):
        batch = self._batch(3)
        oracle = _X0Oracle(batch["R"], offset=0.25)
        loss = loss_x0(batch, oracle, SHIFT_NATIVE, torch.Generator().manual_seed(3))
        assert abs(loss.item() - 0.0625) < 1e-7

    def test_losses_bit_reproducible(self):
        batch = self._batch(4)
        oracle = _EpsOracle(batch["R"], VP_DESK, offset=0.1)
        a = loss_eps(batch, oracle, VP_DESK, torch.Generator().manual_seed(9))
        b = loss_eps(batch, oracle, VP_DESK, torch.Generator().manual_seed(9))
        assert a.item() == b.item()

    def test_head_mode_mismatch_rejected(self):
        batch = self._batch(5)
        with pytest.raises(ValueError):
            loss_eps(batch, _X0Oracle(batch["R"]), VP_DESK, torch.Generator())
        with pytest.raises(ValueError):
            loss_x0(batch, _EpsOracle(batch["R"], VP_DESK), SHIFT_NATIVE, torch.Generator())


class TestDdimSampler:
    @pytest.mark.parametrize("steps", [1, 10, 50])
    def test_oracle_exactness(self, steps):
        R_star = _target(seed=10)
        X = torch.zeros_like(R_star)
        out = sample_ddim(_EpsOracle(R_star, VP_DESK), X, sched=VP_DESK, steps=steps, seed=3)
        assert (out - R_star).abs().max().item() < 1e-5

    def test_oracle_exactness_larger_grid(self):
        R_star = _target((2, 1, 16, 16), seed=11)
        X = torch.zeros_like(R_star)
        out = sample_ddim(_EpsOracle(R_star, VP_DESK), X, sched=VP_DESK, steps=25, seed=0)
        assert (out - R_star).abs().max().item() < 1e-5

    def test_deterministic(self):
        R_star = _target(seed=12)
        X = torch.zeros_like(R_star)
        a = sample_ddim(_EpsOracle(R_star, VP_DESK), X, sched=VP_DESK, steps=10, seed=7)
        b = sample_ddim(_EpsOracle(R_star, VP_DESK), X, sched=VP_DESK, steps=10, seed=7)
        assert torch.equal(a, b)

    def test_rejects_bad_step_count(self):
        X = torch.zeros(1, 1, 8, 8)
        with pytest.raises(ValueError):
            sample_ddim(_EpsOracle(X, VP_DESK), X, sched=VP_DESK, steps=0)
        with pytest.raises(ValueError):
            sample_ddim(_EpsOracle(X, VP_DESK), X, sched=VP_DESK, steps=101)


class TestDdpmSampler:
    def test_oracle_mean_within_monte_carlo_error(self):
        R_star = _target(seed=13)
        X = torch.zeros_like(R_star)
        sched = build_vp_schedule(25, 1e-4, 0.2)
        draws = torch.stack([
            sample_ddpm(_EpsOracle(R_star, sched), X, sched=sched, seed=s)
            for s in range(64)
        ])
        mean = draws.mean(dim=0)
        se = draws.std(dim=0) / math.sqrt(64)
        # The oracle collapses the final transition onto R* exactly, so the
        # Monte Carlo spread can be zero; allow a single-precision floor.
        assert ((mean - R_star).abs() <= 3 * se + 1e-5).all()

    def test_deterministic(self):
        R_star = _target(seed=14)
        X = torch.zeros_like(R_star)
        a = sample_ddpm(_EpsOracle(R_star, VP_DESK), X, sched=VP_DESK, seed=5)
        b = sample_ddpm(_EpsOracle(R_star, VP_DESK), X, sched=VP_DESK, seed=5)
        assert torch.equal(a, b)

    def test_requires_epsilon_head(self):
        X = torch.zeros(1, 1, 8, 8)
        with pytest.raises(ValueError):
            sample_ddpm(_X0Oracle(X), X, sched=VP_DESK)


class TestShiftSampler:
    def test_oracle_lands_within_noise_floor(self):
        R_star = _target(seed=15)
        X = torch.zeros_like(R_star)
        floor = SHIFT_NATIVE.kappa * math.sqrt(SHIFT_NATIVE.eta_at(1))
        for steps in (15, 5):
            out = sample_shift(_X0Oracle(R_star), X, sched=SHIFT_NATIVE, steps=steps, seed=1)
            assert (out - R_star).abs().max().item() <= floor

    def test_single_step_one_evaluation(self):
        R_star = _target(seed=16)
        oracle = _X0Oracle(R_star)
        out = sample_shift(oracle, torch.zeros_like(R_star), sched=SHIFT_NATIVE, steps=1, seed=2)
        assert oracle.calls == 1
        assert torch.allclose(out, R_star)

    def test_deterministic(self):
        R_star = _target(seed=17)
        X = torch.zeros_like(R_star)
        a = sample_shift(_X0Oracle(R_star), X, sched=SHIFT_NATIVE, steps=15, seed=4)
        b = sample_shift(_X0Oracle(R_star), X, sched=SHIFT_NATIVE, steps=15, seed=4)
        assert torch.equal(a, b)

    def test_rejects_bad_step_count(self):
        X = torch.zeros(1, 1, 8, 8)
        with pytest.raises(ValueError):
            sample_shift(_X0Oracle(X), X, sched=SHIFT_NATIVE, steps=0)
        with pytest.raises(ValueError):
            sample_shift(_X0Oracle(X), X, sched=SHIFT_NATIVE, steps=16)

    def test_requires_x0_head(self):
        X = torch.zeros(1, 1, 8, 8)
        with pytest.raises(ValueError):
            sample_shift(_EpsOracle(X, VP_DESK), X, sched=SHIFT_NATIVE, steps=5)


class TestReconstruct:
    def _normalizer(self, seed=0):
        rng = np.random.default_rng(seed)
        fields = [rng.normal(0, 2, (16, 16)) for _ in range(8)]
        return fit_normalizer(fields)

    def test_zero_residual_gives_coarse_plus_mean(self):
        norm = self._normalizer()
        X = np.random.default_rng(1).normal(20, 3, (16, 16))
        out = reconstruct(X, np.zeros((16, 16)), norm)
        assert np.allclose(out, X + norm.mu_R, atol=1e-12)

    def test_ground_truth_round_trip(self):
        norm = self._normalizer(2)
        rng = np.random.default_rng(3)
        Y = rng.normal(20, 3, (16, 16))
        X = rng.normal(20, 3, (16, 16))
        R_std = norm.standardize(make_residual(Y, X))
        assert np.abs(reconstruct(X, R_std, norm) - Y).max() < 1e-5

    def test_unfitted_normalizer_rejected(self):
        from thermodiff.degrade import UnfittedNormalizerError

        with pytest.raises(UnfittedNormalizerError):
            reconstruct(np.zeros((4, 4)), np.zeros((4, 4)), ResidualNormalizer())
