"""Integrator correctness: determinism, thermal statistics, faults."""

import numpy as np
import pytest

from cotrap import (
    ConfigError,
    IntegrationFault,
    NoiseModel,
    ParticleSpec,
    mode_structure,
    project_modes,
    simulate,
    thermal_kick_scale,
    welch_psd,
)
from cotrap import _kernel
from cotrap.constants import K_B
from cotrap.dynamics import Trajectory, ou_coefficients, total_energy
from cotrap.trap import axial_stiffness

from conftest import make_pair

FS = 2500.0
DT = 1.0 / (FS * 10)


def run(trap, pair, *, t0=293.0, seed=1, duration=10.0, gamma0=None, **kw):
    p1, p2 = pair
    if gamma0 is not None:
        p1 = ParticleSpec(p1.charge_e, p1.mass, gamma0)
        p2 = ParticleSpec(p2.charge_e, p2.mass, gamma0)
    noise = NoiseModel(t0=t0, seed=seed)
    return simulate(trap, p1, p2, noise, kw.pop("controllers", ()),
                    duration=duration, dt=kw.pop("dt", DT),
                    sample_rate=kw.pop("sample_rate", FS), **kw)


class TestKickScale:
    def test_zero_temperature(self, ref_pair):
        p = ParticleSpec(ref_pair[0].charge_e, ref_pair[0].mass, 10.0)
        assert thermal_kick_scale(p, 0.0, 1e-5) == 0.0

    def test_diffusive_dt_scaling(self, ref_pair):
        p = ParticleSpec(ref_pair[0].charge_e, ref_pair[0].mass, 10.0)
        a = thermal_kick_scale(p, 293.0, 1e-5)
        b = thermal_kick_scale(p, 293.0, 2e-5)
        assert b == pytest.approx(np.sqrt(2) * a, rel=1e-12)

    def test_matches_ou_coefficient_at_small_dt(self, ref_pair):
        p = ParticleSpec(ref_pair[0].charge_e, ref_pair[0].mass, 10.0)
        _, b = ou_coefficients(p, 293.0, 1e-7)
        assert b == pytest.approx(thermal_kick_scale(p, 293.0, 1e-7), rel=1e-5)

    def test_free_particle_velocity_variance(self):
        # Ornstein-Uhlenbeck stationary variance as the oracle; a nearly
        # free particle (tiny trap stiffness irrelevant to velocities)
        p = ParticleSpec(charge_e=1, mass=5.6e-17, gamma0=1e4)
        a, b = ou_coefficients(p, 293.0, 1e-5)
        rng = np.random.default_rng(2)
        xi = rng.standard_normal(500_000)
        out = np.empty_like(xi)
        v = 0.0
        for i in range(len(xi)):
            v = a * v + b * xi[i]
            out[i] = v
        assert np.var(out[1000:]) == pytest.approx(K_B * 293.0 / p.mass, rel=0.02)


class TestConservativeLimit:
    def test_energy_conservation(self, paper_trap, ref_pair):
        ms = mode_structure(paper_trap, *ref_pair)
        amp = 2e-6
        ini = (ms.z1_eq + amp * ms.e_plus[0] + 0.4 * amp * ms.e_minus[0],
               ms.z2_eq + amp * ms.e_plus[1] + 0.4 * amp * ms.e_minus[1],
               0.0, 0.0)
        duration = 1e4 * 2 * np.pi / ms.omega_plus
        traj = run(paper_trap, ref_pair, t0=0.0, gamma0=0.0,
                   duration=duration, initial_state=ini)
        p1, p2 = ref_pair
        e = total_energy(paper_trap, p1, p2, traj.z1, traj.z2, traj.v1, traj.v2)
        e_eq = total_energy(paper_trap, p1, p2, ms.z1_eq, ms.z2_eq, 0.0, 0.0)
        e_osc = np.mean(e) - e_eq
        n = len(e)
        drift = abs(np.mean(e[-n // 50:]) - np.mean(e[: n // 50]))
        assert drift / e_osc < 1e-6

    def test_second_order_convergence(self, paper_trap, ref_pair):
        ms = mode_structure(paper_trap, *ref_pair)
        amp = 1e-6
        ini = (ms.z1_eq + amp * ms.e_plus[0], ms.z2_eq + amp * ms.e_plus[1], 0.0, 0.0)
        duration = 10 * 2 * np.pi / ms.omega_plus

        def final_state(n_sub):
            traj = run(paper_trap, ref_pair, t0=0.0, gamma0=0.0,
                       duration=duration, dt=1.0 / (FS * n_sub),
                       initial_state=ini)
            return np.array([traj.z1[-1], traj.z2[-1]])

        ref = final_state(160)
        err_a = np.linalg.norm(final_state(10) - ref)
        err_b = np.linalg.norm(final_state(20) - ref)
        assert err_a / err_b == pytest.approx(4.0, rel=0.2)

    def test_psd_peaks_match_mode_frequencies(self, paper_trap, ref_pair):
        ms = mode_structure(paper_trap, *ref_pair)
        traj = run(paper_trap, ref_pair, gamma0=5.0, duration=60.0, seed=3)
        s1, s2 = traj.deviations(ms.z1_eq, ms.z2_eq)
        mt = project_modes(s1, s2, ms.r_plus, ms.r_minus)
        psd_p = welch_psd(mt.z_plus, FS, segment_length=2**15)
        psd_m = welch_psd(mt.z_minus, FS, segment_length=2**15)
        f_p = psd_p.peak_frequency(200.0, 280.0)
        f_m = psd_m.peak_frequency(370.0, 460.0)
        assert f_p == pytest.approx(ms.omega_plus / (2 * np.pi), rel=1e-3)
        assert f_m == pytest.approx(ms.omega_minus / (2 * np.pi), rel=1e-3)


class TestThermalStatistics:
    def test_mode_equipartition(self, paper_trap, ref_pair):
        ms = mode_structure(paper_trap, *ref_pair)
        traj = run(paper_trap, ref_pair, gamma0=28.0, duration=120.0, seed=4)
        s1, s2 = traj.deviations(ms.z1_eq, ms.z2_eq)
        mt = project_modes(s1, s2, ms.r_plus, ms.r_minus)
        p1 = ref_pair[0]
        t_plus = p1.mass * ms.omega_plus**2 * np.var(mt.z_plus) / K_B
        t_minus = p1.mass * ms.omega_minus**2 * np.var(mt.z_minus) / K_B
        # ~1700 independent samples -> sigma ~ 3.4%; allow 3 sigma
        assert t_plus == pytest.approx(293.0, rel=0.11)
        assert t_minus == pytest.approx(293.0, rel=0.11)

    def test_velocity_equipartition(self, paper_trap, ref_pair):
        traj = run(paper_trap, ref_pair, gamma0=28.0, duration=120.0, seed=5)
        p1, p2 = ref_pair
        assert p1.mass * np.var(traj.v1) / K_B == pytest.approx(293.0, rel=0.08)
        assert p2.mass * np.var(traj.v2) / K_B == pytest.approx(293.0, rel=0.08)

    def test_extra_force_noise_heats(self, paper_trap, ref_pair):
        # the white-force-noise knob adds S/(4 m gamma k_B) of temperature
        p1, p2 = make_pair(2135, 906, gamma0=50.0)
        s_extra = 2.0 * (4 * p1.mass * 50.0 * K_B * 293.0)  # 2x the thermal PSD
        noise = NoiseModel(t0=293.0, seed=21, force_noise_psd=(s_extra, s_extra))
        traj = simulate(paper_trap, p1, p2, noise, duration=80.0, dt=DT,
                        sample_rate=FS)
        t1 = p1.mass * np.var(traj.v1) / K_B
        assert t1 == pytest.approx(3 * 293.0, rel=0.1)

    def test_noise_streams_independent(self, paper_trap, ref_pair):
        # the injected force streams are uncorrelated; at equal damping the
        # velocity cross-correlation reduces to the Coulomb-mediated part,
        # which vanishes when the coupling is off
        traj = run(paper_trap, ref_pair, gamma0=50.0, duration=60.0, seed=6,
                   coulomb_coupling=False)
        c = np.corrcoef(traj.v1, traj.v2)[0, 1]
        assert abs(c) < 4.0 / np.sqrt(len(traj.v1) / 10)


class TestDeterminismAndIO:
    def test_identical_seed_identical_output(self, paper_trap, ref_pair):
        a = run(paper_trap, ref_pair, gamma0=28.0, duration=5.0, seed=7)
        b = run(paper_trap, ref_pair, gamma0=28.0, duration=5.0, seed=7)
        for name in ("z1", "z2", "v1", "v2"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_different_seed_differs(self, paper_trap, ref_pair):
        a = run(paper_trap, ref_pair, gamma0=28.0, duration=2.0, seed=8)
        b = run(paper_trap, ref_pair, gamma0=28.0, duration=2.0, seed=9)
        assert not np.array_equal(a.z1, b.z1)

    def test_csv_round_trip_preserves_bits(self, paper_trap, ref_pair, tmp_path):
        traj = run(paper_trap, ref_pair, gamma0=28.0, duration=2.0, seed=10)
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        back = Trajectory.from_csv(path)
        assert back.sample_rate == traj.sample_rate
        for name in ("z1", "z2", "v1", "v2"):
            assert np.array_equal(getattr(back, name), getattr(traj, name))
        assert back.meta == traj.meta

    def test_csv_round_trip_controller_run(self, paper_trap, tmp_path):
        # force and measurement columns, plus non-finite force limits in
        # the metadata, must survive the text format exactly
        from cotrap.feedback import DetectionModel, design_controller

        p1, p2 = make_pair(2135, 906, gamma0=28.0)
        ms = mode_structure(paper_trap, p1, p2)
        cfg = design_controller("velocity_damper", ms, "plus", 50.0, FS, p1.mass)
        det = DetectionModel(s_nn=1e-15, sample_rate=FS, seed=3)
        traj = simulate(paper_trap, p1, p2, NoiseModel(t0=293.0, seed=9), [cfg],
                        duration=2.0, dt=DT, sample_rate=FS, detection=det)
        path = tmp_path / "ctrl.csv"
        traj.to_csv(path)
        back = Trajectory.from_csv(path)
        assert np.array_equal(back.forces, traj.forces)
        assert np.array_equal(back.y, traj.y)
        assert back.meta == traj.meta

    def test_csv_bytes_reproducible(self, paper_trap, ref_pair, tmp_path):
        pa = tmp_path / "a.csv"
        pb = tmp_path / "b.csv"
        run(paper_trap, ref_pair, gamma0=28.0, duration=2.0, seed=11).to_csv(pa)
        run(paper_trap, ref_pair, gamma0=28.0, duration=2.0, seed=11).to_csv(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_store_every_subsamples(self, paper_trap, ref_pair):
        a = run(paper_trap, ref_pair, gamma0=28.0, duration=4.0, seed=12)
        b = run(paper_trap, ref_pair, gamma0=28.0, duration=4.0, seed=12,
                store_every=5)
        assert b.sample_rate == a.sample_rate / 5
        assert np.array_equal(b.z1, a.z1[4::5])


class TestKernelParity:
    def test_python_and_jit_paths_agree(self, paper_trap, ref_pair):
        if not _kernel.NUMBA_ENABLED:
            pytest.skip("numba path not active")
        p1, p2 = make_pair(2135, 906, gamma0=28.0)
        u1 = axial_stiffness(paper_trap, p1)
        u2 = axial_stiffness(paper_trap, p2)
        from cotrap.constants import EPSILON_0
        from cotrap.dynamics import thermal_equilibrium_state
        from cotrap.feedback import build_kernel_set, design_controller

        ms = mode_structure(paper_trap, p1, p2)
        kq = p1.charge * p2.charge / (4 * np.pi * EPSILON_0)
        dt = DT
        a1, b1 = ou_coefficients(p1, 293.0, dt)
        a2, b2 = ou_coefficients(p2, 293.0, dt)
        cfg = design_controller("velocity_damper", ms, "plus", 28.0, FS,
                                p1.mass, bandwidth=800.0)
        n = 4000
        results = []
        for fn in (_kernel.run_block_python, _kernel.run_block):
            rng = np.random.default_rng(99)
            state = thermal_equilibrium_state(paper_trap, p1, p2, 293.0, rng)
            kset = build_kernel_set([cfg], FS, p1.mass)
            pos = np.array([state.z1, state.z2])
            vel = np.array([state.v1, state.v2])
            thermal = rng.standard_normal((n, 10, 2))
            det = rng.standard_normal(n)
            outs = [np.empty(n) for _ in range(5)]
            out_f = np.empty((1, n))
            hold = np.zeros(1)
            fault, _ = fn(
                pos, vel, p1.mass, p2.mass, u1, u2, kq, True,
                a1, b1, a2, b2, dt, 10, 0, 1.0 / FS,
                thermal, 1e-9, det,
                kset.kind, kset.sos, kset.sos_off, kset.sos_state,
                kset.dly_buf, kset.dly_len, kset.dly_pos,
                kset.gain_n_per_m, kset.lo_omega, kset.lo_phase,
                kset.force_limit, kset.sat_count, hold, 1,
                *outs, out_f,
            )
            assert fault == 0
            results.append((pos.copy(), vel.copy(), [o.copy() for o in outs],
                            out_f.copy()))
        (pos_a, vel_a, outs_a, f_a), (pos_b, vel_b, outs_b, f_b) = results
        assert np.array_equal(pos_a, pos_b)
        assert np.array_equal(vel_a, vel_b)
        assert np.array_equal(f_a, f_b)
        for oa, ob in zip(outs_a, outs_b):
            assert np.array_equal(oa, ob)


class TestFaultsAndValidation:
    def test_crossing_fault(self, paper_trap):
        # fire the particles at each other hard enough to cross
        p1, p2 = make_pair(200, 200)
        ms = mode_structure(paper_trap, p1, p2)
        v = 0.5 * ms.z_sep * ms.omega_minus
        noise = NoiseModel(t0=0.0, seed=13)
        with pytest.raises(IntegrationFault, match="crossed") as exc:
            simulate(paper_trap, p1, p2, noise, duration=5.0, dt=DT,
                     sample_rate=FS,
                     initial_state=(ms.z1_eq, ms.z2_eq, 40 * v, -40 * v))
        assert exc.value.time > 0

    def test_dt_too_large_rejected(self, paper_trap, ref_pair):
        with pytest.raises(ConfigError, match="dt"):
            run(paper_trap, ref_pair, dt=1.0 / (FS * 2), sample_rate=FS)

    def test_dt_must_subdivide_sample_period(self, paper_trap, ref_pair):
        with pytest.raises(ConfigError, match="subdivide"):
            run(paper_trap, ref_pair, dt=3.07e-5)

    def test_negative_temperature_rejected(self):
        with pytest.raises(ConfigError):
            NoiseModel(t0=-1.0, seed=0)

    def test_initial_crossing_rejected(self, paper_trap, ref_pair):
        with pytest.raises(ConfigError, match="z2 > z1"):
            run(paper_trap, ref_pair, initial_state=(1e-4, -1e-4, 0.0, 0.0))

    def test_detection_rate_must_match(self, paper_trap, ref_pair):
        from cotrap.feedback import DetectionModel

        det = DetectionModel(s_nn=1e-15, sample_rate=2 * FS, seed=0)
        with pytest.raises(ConfigError, match="sample_rate"):
            run(paper_trap, ref_pair, duration=1.0, detection=det)


class TestControllerLocality:
    def test_particle2_untouched_without_coupling(self, paper_trap):
        # with the Coulomb term disabled, a controller acting on particle 1
        # must leave particle 2's trajectory exactly unchanged
        p1, p2 = make_pair(2135, 906, gamma0=28.0)
        ms = mode_structure(paper_trap, p1, p2)
        from cotrap.feedback import design_controller

        cfg = design_controller("velocity_damper", ms, "plus", 100.0, FS, p1.mass)
        noise = NoiseModel(t0=293.0, seed=14)
        kw = dict(duration=5.0, dt=DT, sample_rate=FS, coulomb_coupling=False)
        off = simulate(paper_trap, p1, p2, noise, [], **kw)
        on = simulate(paper_trap, p1, p2, noise, [cfg], **kw)
        assert np.array_equal(on.z2, off.z2)
        assert np.array_equal(on.v2, off.v2)
        assert not np.array_equal(on.z1, off.z1)
