import numpy as np
import pytest

from lans_alpha import (
    BlowUpError,
    IntegratorConfig,
    PhysicalParams,
    SpectralField,
    StepKernel,
    alpha_energy,
    integrate,
    make_noise,
    run_ensemble,
    step,
    step_variation,
    substream,
)
from lans_alpha.diagnostics import strong_convergence_study
from conftest import rand_field


def params(nu=1.0, alpha=0.5):
    return PhysicalParams(nu=nu, alpha=alpha, L=2 * np.pi)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            IntegratorConfig(scheme="euler")
        with pytest.raises(ValueError):
            IntegratorConfig(dt=0.0)
        with pytest.raises(ValueError):
            IntegratorConfig(dt=2.0, t_end=1.0)
        with pytest.raises(ValueError):
            IntegratorConfig(record_every=0)
        assert IntegratorConfig(dt=1e-3, t_end=0.0).num_steps() == 0

    def test_rk4_rejects_noise(self, basis1):
        spec, _ = make_noise(1.5, 1.0, basis1)
        cfg = IntegratorConfig(scheme="rk4_deterministic", dt=1e-3, t_end=0.1)
        with pytest.raises(ValueError):
            StepKernel(basis1, params(), cfg, spec)

    def test_stochastic_requires_viscosity(self, basis1):
        spec, _ = make_noise(1.5, 1.0, basis1)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.1)
        with pytest.raises(ValueError):
            StepKernel(basis1, PhysicalParams(nu=0.0, alpha=0.0, L=2 * np.pi), cfg, spec)


class TestStep:
    def test_exponential_exact_linear_decay(self, basis1):
        p = params(nu=2.0)
        spec, _ = make_noise(1.5, 0.0, basis1)
        cfg = IntegratorConfig(
            scheme="exponential_em", dt=0.37, t_end=0.37, nonlinearity=False
        )
        j = 5
        out = step(SpectralField.unit(basis1, j), p, spec, cfg)
        assert out.coeffs[j] == np.exp(-p.nu * basis1.eigenvalues[j] * cfg.dt)
        assert np.all(out.coeffs[np.arange(8) != j] == 0.0)

    def test_exponential_one_step_variance(self, basis1):
        # from u = 0 the one-step law is the exact OU transition
        p = params()
        spec, _ = make_noise(1.5, 1.0, basis1, seed=3)
        dt = 0.05
        cfg = IntegratorConfig(scheme="exponential_em", dt=dt, t_end=dt, nonlinearity=False)
        kern = StepKernel(basis1, p, cfg, spec)
        M = 100_000
        dW = np.sqrt(dt) * substream(3).standard_normal((M, basis1.mode_count))
        out = kern.step(np.zeros((M, basis1.mode_count)), dW)
        lam = basis1.eigenvalues
        theo = spec.q**2 * (1 - np.exp(-2 * p.nu * lam * dt)) / (2 * p.nu * lam)
        assert np.all(np.abs(out.var(axis=0, ddof=1) / theo - 1) <= 0.05)

    def test_rk4_conserves_alpha_energy(self, basis2):
        p = params(nu=0.0)
        spec, _ = make_noise(1.5, 0.0, basis2)
        cfg = IntegratorConfig(scheme="rk4_deterministic", dt=1e-3, t_end=1.0, record_every=100)
        x0 = rand_field(basis2, np.random.default_rng(0), scale=0.5)
        rec = integrate(x0, p, spec, cfg)
        drift_rel = abs(rec.F_values[-1] - rec.F_values[0]) / rec.F_values[0]
        assert drift_rel <= 1e-8

    def test_rk4_conservation_error_is_fourth_order(self, basis2):
        # needs an amplitude where the O(dt^4) defect sits above rounding
        p = params(nu=0.0, alpha=0.3)
        spec, _ = make_noise(1.5, 0.0, basis2)
        x0 = rand_field(basis2, np.random.default_rng(1), scale=3.0)
        errs = []
        for dt in (0.02, 0.01):
            cfg = IntegratorConfig(scheme="rk4_deterministic", dt=dt, t_end=0.2, record_every=1)
            rec = integrate(x0, p, spec, cfg)
            errs.append(abs(rec.F_values[-1] - rec.F_values[0]))
        ratio = errs[0] / errs[1]
        assert 8.0 <= ratio <= 32.0  # nominal 16x per halving

    def test_semi_implicit_unconditionally_damps_linear_part(self, basis2):
        p = params(nu=50.0)
        spec, _ = make_noise(1.5, 0.0, basis2)
        cfg = IntegratorConfig(dt=0.5, t_end=5.0, nonlinearity=False)
        rec = integrate(rand_field(basis2, np.random.default_rng(2)), p, spec, cfg)
        assert rec.F_values[-1] < rec.F_values[0]
        assert np.all(np.isfinite(rec.F_values))

    def test_step_requires_rng_for_noise(self, basis1):
        spec, _ = make_noise(1.5, 1.0, basis1)
        cfg = IntegratorConfig(dt=1e-3, t_end=1e-3)
        with pytest.raises(ValueError):
            step(SpectralField.zeros(basis1), params(), spec, cfg, None)

    def test_stochastic_step_replays_with_same_stream(self, basis1):
        spec, _ = make_noise(1.5, 1.0, basis1, seed=77)
        cfg = IntegratorConfig(dt=1e-3, t_end=1e-3)
        u0 = rand_field(basis1, np.random.default_rng(20))
        a = step(u0, params(), spec, cfg, substream(77))
        b = step(u0, params(), spec, cfg, substream(77))
        assert np.array_equal(a.coeffs, b.coeffs)
        assert not np.array_equal(a.coeffs, u0.coeffs)


class TestStepVariation:
    def test_zero_stays_zero(self, basis1):
        p = params()
        spec, _ = make_noise(1.5, 0.5, basis1, seed=1)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.05)
        paths = run_ensemble(
            rand_field(basis1, np.random.default_rng(3)).coeffs,
            p, spec, cfg, 1, eta0_coeffs=np.zeros(8),
        )
        assert np.all(paths.eta_final == 0.0)

    def test_linearity(self, basis1):
        p = params()
        cfg = IntegratorConfig(dt=1e-3, t_end=1e-3)
        rng = np.random.default_rng(4)
        u, h = rand_field(basis1, rng), rand_field(basis1, rng)
        one = step_variation(u, h, p, cfg).coeffs
        scaled = step_variation(u, 3.0 * h, p, cfg).coeffs
        assert np.abs(scaled - 3.0 * one).max() < 1e-12 * (1 + np.abs(one).max())

    @pytest.mark.parametrize("scheme", ["semi_implicit_em", "exponential_em"])
    def test_pathwise_finite_difference(self, basis1, scheme):
        # common noise: the variation is the exact derivative of the
        # discrete map, so the FD error is O(delta)
        p = params()
        spec, _ = make_noise(1.5, 0.5, basis1, alpha=p.alpha, seed=11)
        cfg = IntegratorConfig(scheme=scheme, dt=1e-3, t_end=0.1)
        x0 = rand_field(basis1, np.random.default_rng(5), scale=0.4)
        h = SpectralField.unit(basis1, 2)
        delta = 1e-5
        base = run_ensemble(x0.coeffs, p, spec, cfg, 1, eta0_coeffs=h.coeffs)
        bumped = run_ensemble(x0.coeffs + delta * h.coeffs, p, spec, cfg, 1)
        fd = (bumped.final_coeffs[0] - base.final_coeffs[0]) / delta
        eta = base.eta_final[0]
        assert np.linalg.norm(fd - eta) / np.linalg.norm(eta) <= 1e-4

    def test_rk4_variation_is_exact_jacobian(self, basis1):
        p = params(nu=0.3)
        spec, _ = make_noise(1.5, 0.0, basis1)
        cfg = IntegratorConfig(scheme="rk4_deterministic", dt=5e-3, t_end=0.2)
        x0 = rand_field(basis1, np.random.default_rng(6), scale=0.5)
        h = SpectralField.unit(basis1, 0)
        delta = 1e-6
        base = run_ensemble(x0.coeffs, p, spec, cfg, 1, eta0_coeffs=h.coeffs)
        bumped = run_ensemble(x0.coeffs + delta * h.coeffs, p, spec, cfg, 1)
        fd = (bumped.final_coeffs[0] - base.final_coeffs[0]) / delta
        assert np.linalg.norm(fd - base.eta_final[0]) / np.linalg.norm(base.eta_final[0]) < 1e-5


class TestIntegrate:
    def test_zero_horizon(self, basis1):
        spec, _ = make_noise(1.5, 0.5, basis1)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.0)
        x0 = rand_field(basis1, np.random.default_rng(7))
        rec = integrate(x0, params(), spec, cfg)
        assert len(rec.times) == 1 and rec.times[0] == 0.0
        assert rec.F_values[0] == pytest.approx(alpha_energy(x0.coeffs, basis1, 0.5))

    def test_deterministic_dissipation(self, basis2):
        spec, _ = make_noise(1.5, 0.0, basis2)
        cfg = IntegratorConfig(dt=1e-3, t_end=1.0, record_every=10)
        rec = integrate(rand_field(basis2, np.random.default_rng(8)), params(), spec, cfg)
        assert np.all(np.diff(rec.F_values) <= 1e-14)

    def test_bit_identical_replay(self, basis1):
        spec, _ = make_noise(1.5, 0.5, basis1, seed=21)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.2, record_every=7)
        x0 = rand_field(basis1, np.random.default_rng(9))
        r1 = integrate(x0, params(), spec, cfg, store_fields=True)
        r2 = integrate(x0, params(), spec, cfg, store_fields=True)
        assert np.array_equal(r1.F_values, r2.F_values)
        assert np.array_equal(r1.martingale_accumulator, r2.martingale_accumulator)
        assert np.array_equal(r1.snapshots, r2.snapshots)

    def test_blow_up_reported_with_time(self, basis1):
        p = PhysicalParams(nu=1e-6, alpha=0.0, L=2 * np.pi)
        spec, _ = make_noise(1.5, 0.0, basis1)
        cfg = IntegratorConfig(dt=5.0, t_end=500.0, nonlinearity=True)
        huge = SpectralField(basis1, 1e6 * np.ones(8))
        with pytest.raises(BlowUpError) as err:
            integrate(huge, p, spec, cfg)
        assert err.value.time > 0

    def test_record_shapes_and_monotone_times(self, basis1):
        spec, _ = make_noise(1.5, 0.5, basis1, seed=17)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.123, record_every=7)
        rec = integrate(rand_field(basis1, np.random.default_rng(16)), params(), spec, cfg)
        n = len(rec.times)
        assert (
            len(rec.F_values)
            == len(rec.dissipation_values)
            == len(rec.martingale_accumulator)
            == n
        )
        assert np.all(np.diff(rec.times) > 0)
        assert rec.times[-1] == pytest.approx(cfg.num_steps() * cfg.dt)

    def test_observers_collected(self, basis1):
        spec, _ = make_noise(1.5, 0.0, basis1)
        cfg = IntegratorConfig(dt=1e-2, t_end=0.1, record_every=5)
        rec = integrate(
            rand_field(basis1, np.random.default_rng(10)),
            params(), spec, cfg,
            observers={"first": lambda t, u: float(u.coeffs[0])},
        )
        assert len(rec.observables["first"]) == len(rec.times)


class TestPathwiseStability:
    def test_same_increments_bit_exact(self, basis1):
        spec, _ = make_noise(1.5, 0.5, basis1, seed=31)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.5)
        x0 = rand_field(basis1, np.random.default_rng(11), scale=0.5)
        a = run_ensemble(x0.coeffs, params(), spec, cfg, 1).final_coeffs
        b = run_ensemble(x0.coeffs, params(), spec, cfg, 1).final_coeffs
        assert np.array_equal(a, b)

    def test_tiny_perturbation_stays_small(self, basis1):
        # Gronwall-type surrogate for pathwise uniqueness
        spec, _ = make_noise(1.5, 0.5, basis1, seed=32)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.5)
        x0 = rand_field(basis1, np.random.default_rng(12), scale=0.5)
        base = run_ensemble(x0.coeffs, params(), spec, cfg, 1).final_coeffs[0]
        shifted = x0.coeffs.copy()
        shifted[0] += 1e-10
        other = run_ensemble(shifted, params(), spec, cfg, 1).final_coeffs[0]
        assert np.linalg.norm(other - base) <= 1e-6


class TestDiscreteItoBalance:
    def residual_rms(self, dt, basis, p, spec, M=100):
        cfg = IntegratorConfig(dt=dt, t_end=0.25, record_every=1)
        x0 = 0.3 * np.ones(basis.mode_count)
        paths = run_ensemble(x0, p, spec, cfg, M)
        F0 = alpha_energy(x0, basis, p.alpha)
        res = (
            paths.F[:, -1]
            + 2 * p.nu * paths.dissipation_integrals()
            - F0
            - spec.trace_alpha(p.alpha) * paths.times[-1]
            - 2 * paths.martingale[:, -1]
        )
        return float(np.sqrt(np.mean(res**2)))

    def test_pathwise_residual_shrinks_with_dt(self, basis1):
        p = params()
        spec, _ = make_noise(1.5, 0.5, basis1, alpha=p.alpha, seed=33)
        r1 = self.residual_rms(2e-3, basis1, p, spec)
        r2 = self.residual_rms(5e-4, basis1, p, spec)
        order = np.log(r1 / r2) / np.log(4.0)
        # the squared-increment fluctuations contribute an O(sqrt(dt))
        # component, so the fitted order sits between 1/2 and 1
        assert r2 < r1
        assert 0.3 <= order <= 1.3


class TestStrongConvergence:
    def test_order_near_one(self, basis2):
        p = params()
        spec, _ = make_noise(1.5, 0.5, basis2, alpha=p.alpha, seed=42)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.5)
        x0 = rand_field(basis2, np.random.default_rng(13), scale=0.3)
        res = strong_convergence_study(p, spec, cfg, x0, [4e-3, 2e-3, 1e-3, 5e-4], 30)
        assert np.all(np.diff(res.errors) < 0)
        assert 0.7 <= res.order <= 1.3

    def test_final_time_must_divide_all_resolutions(self, basis2):
        p = params()
        spec, _ = make_noise(1.5, 0.5, basis2, alpha=p.alpha, seed=42)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.25)  # 0.25/4e-3 is not integer
        x0 = rand_field(basis2, np.random.default_rng(13), scale=0.3)
        with pytest.raises(ValueError):
            strong_convergence_study(p, spec, cfg, x0, [4e-3, 2e-3, 1e-3, 5e-4], 5)


class TestEnsembleMachinery:
    def test_matches_single_trajectory(self, basis1):
        # member i of the batch reproduces integrate(member=i) bit-exactly
        p = params()
        spec, _ = make_noise(1.5, 0.5, basis1, seed=55)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.05, record_every=1)
        x0 = rand_field(basis1, np.random.default_rng(14), scale=0.5)
        paths = run_ensemble(x0.coeffs, p, spec, cfg, 3)
        for i in range(3):
            rec = integrate(x0, p, spec, cfg, member=i)
            assert np.array_equal(paths.F[i], rec.F_values)
            # martingale sums accumulate in a different order (batched einsum
            # vs scalar loop), so equality holds to rounding, not bit-exactly
            assert paths.martingale[i, -1] == pytest.approx(
                rec.martingale_accumulator[-1], rel=1e-12, abs=1e-15
            )

    def test_thread_split_is_bit_identical(self, basis1, monkeypatch):
        p = params()
        spec, _ = make_noise(1.5, 0.5, basis1, seed=56)
        cfg = IntegratorConfig(dt=1e-3, t_end=0.05)
        x0 = rand_field(basis1, np.random.default_rng(15)).coeffs
        monkeypatch.delenv("LANS_THREADS", raising=False)
        serial = run_ensemble(x0, p, spec, cfg, 8)
        monkeypatch.setenv("LANS_THREADS", "4")
        threaded = run_ensemble(x0, p, spec, cfg, 8)
        assert np.array_equal(serial.final_coeffs, threaded.final_coeffs)
        assert np.array_equal(serial.F, threaded.F)
