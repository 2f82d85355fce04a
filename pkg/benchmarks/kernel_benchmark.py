#!/usr/bin/env python3
"""Benchmark the integration kernel: numba-jitted vs pure Python.

Runs the same thermal two-particle simulation through both execution
paths of cotrap._kernel and reports substeps/second.  The pure path is
the one selected by COTRAP_NO_NUMBA=1; here both are invoked explicitly
so a single process can compare them.
"""

import argparse
import time

import numpy as np

from cotrap import _kernel
from cotrap.constants import EPSILON_0
from cotrap.dynamics import ou_coefficients, thermal_equilibrium_state
from cotrap.feedback import build_kernel_set, design_controller
from cotrap.trap import ParticleSpec, TrapConfig, axial_stiffness, mode_structure


def build_problem(with_controller):
    trap = TrapConfig(v0=120.0, u0=49.0, omega_rf=2 * np.pi * 1e4, eta=0.82,
                      kappa=0.071, r0=1.1e-3, z0=3.5e-3)
    p1 = ParticleSpec.from_radius(2135, 193.5e-9, 1850.0, gamma0=28.0)
    p2 = ParticleSpec.from_radius(906, 193.5e-9, 1850.0, gamma0=28.0)
    modes = mode_structure(trap, p1, p2)
    fs = 5000.0
    controllers = []
    if with_controller:
        controllers = [design_controller("velocity_damper", modes, "plus", 28.0,
                                         fs, p1.mass, bandwidth=1000.0)]
    return trap, p1, p2, modes, fs, controllers


def run_once(kernel_fn, n_samples, n_sub, with_controller, seed=123):
    trap, p1, p2, modes, fs, controllers = build_problem(with_controller)
    dt = 1.0 / (fs * n_sub)
    u1 = axial_stiffness(trap, p1)
    u2 = axial_stiffness(trap, p2)
    kq = p1.charge * p2.charge / (4.0 * np.pi * EPSILON_0)
    a1, b1 = ou_coefficients(p1, 293.0, dt)
    a2, b2 = ou_coefficients(p2, 293.0, dt)
    rng = np.random.Generator(np.random.PCG64(seed))
    state = thermal_equilibrium_state(trap, p1, p2, 293.0, rng)
    kset = build_kernel_set(controllers, fs, p1.mass)
    pos = np.array([state.z1, state.z2])
    vel = np.array([state.v1, state.v2])
    thermal = rng.standard_normal((n_samples, n_sub, 2))
    det = np.zeros(n_samples)
    out = [np.empty(n_samples) for _ in range(5)]
    out_f = np.empty((len(controllers), n_samples))
    hold = np.zeros(len(controllers))
    t0 = time.perf_counter()
    fault, _ = kernel_fn(
        pos, vel, p1.mass, p2.mass, u1, u2, kq, True,
        a1, b1, a2, b2, dt, n_sub, 0, 1.0 / fs,
        thermal, 0.0, det,
        kset.kind, kset.sos, kset.sos_off, kset.sos_state,
        kset.dly_buf, kset.dly_len, kset.dly_pos,
        kset.gain_n_per_m, kset.lo_omega, kset.lo_phase,
        kset.force_limit, kset.sat_count, hold, 1,
        out[0], out[1], out[2], out[3], out[4], out_f,
    )
    elapsed = time.perf_counter() - t0
    assert fault == 0
    return elapsed, (pos, vel, out)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=200_000,
                    help="output samples per timed run (numba path)")
    ap.add_argument("--pure-samples", type=int, default=20_000,
                    help="output samples for the pure-python path")
    ap.add_argument("--substeps", type=int, default=5)
    ap.add_argument("--controller", action="store_true",
                    help="include a velocity damper in the loop")
    args = ap.parse_args()

    print(f"numba available: {_kernel.NUMBA_ENABLED}"
          + (" (disabled by COTRAP_NO_NUMBA)" if _kernel.NUMBA_DISABLED else ""))

    # pure python reference
    elapsed, _ = run_once(_kernel.run_block_python, args.pure_samples,
                          args.substeps, args.controller)
    pure_rate = args.pure_samples * args.substeps / elapsed
    print(f"pure python : {args.pure_samples * args.substeps:>10d} substeps "
          f"in {elapsed:7.3f} s -> {pure_rate:12.0f} substeps/s")

    if _kernel.NUMBA_ENABLED:
        # warm up the JIT before timing
        run_once(_kernel.run_block, 1000, args.substeps, args.controller)
        elapsed, _ = run_once(_kernel.run_block, args.samples, args.substeps,
                              args.controller)
        jit_rate = args.samples * args.substeps / elapsed
        print(f"numba jit   : {args.samples * args.substeps:>10d} substeps "
              f"in {elapsed:7.3f} s -> {jit_rate:12.0f} substeps/s")
        print(f"speedup     : {jit_rate / pure_rate:.1f}x")

        # both paths must produce identical trajectories on identical noise
        _, (pos_a, vel_a, out_a) = run_once(_kernel.run_block_python, 2000,
                                            args.substeps, args.controller)
        _, (pos_b, vel_b, out_b) = run_once(_kernel.run_block, 2000,
                                            args.substeps, args.controller)
        same = np.array_equal(pos_a, pos_b) and all(
            np.array_equal(a, b) for a, b in zip(out_a, out_b)
        )
        print(f"paths agree : {same}")


if __name__ == "__main__":
    main()
