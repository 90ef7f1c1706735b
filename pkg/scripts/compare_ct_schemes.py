#!/usr/bin/env python3
"""Run all four continuous-time schemes (gradient and Lyapunov, direct and
indirect) on the same desk-scale instance and compare tracking.

    python scripts/compare_ct_schemes.py
"""

import numpy as np

from mrac import (DirectGainConfig, IndirectGainConfig, InitialConditions,
                  LyapunovDirectGains, LyapunovIndirectGains, PlantModel,
                  ProjectionConfig, ReferenceModel, ReferenceSignal,
                  run_direct_scenario, run_indirect_scenario,
                  run_lyapunov_scenario, solve_matching,
                  stack_controller_gains, theta_star_indirect,
                  tracking_metrics)


def instance():
    A_m = np.array([[0.0, 1.0], [-2.0, -3.0]])
    b_m = np.array([[0.0], [1.0]])
    b = np.array([[0.0], [2.0]])
    A = A_m - b @ np.array([[-1.5, -1.0]])
    plant = PlantModel(A=A, B=b, time_domain="continuous")
    ref = ReferenceModel(A_m=A_m, B_m=b_m, time_domain="continuous")
    return plant, ref


def main():
    plant, ref = instance()
    sol = solve_matching(plant, ref)
    sig = ReferenceSignal.sinusoids(amplitudes=[[1.0]], frequencies=[[0.5]])
    horizon, h = 4000, 0.01
    theta_c = stack_controller_gains(sol.K1, sol.K2)
    theta_p = theta_star_indirect(sol.K1, sol.K2)
    proj = ProjectionConfig.from_k2_upper(1.0, 1.0)

    runs = {}
    runs["gradient direct"] = run_direct_scenario(
        plant, ref, sig,
        DirectGainConfig(Gamma=np.eye(3), gamma=1.0, sign_k2=1.0,
                         k2_lower=0.25, time_domain="continuous"),
        InitialConditions(theta0=1.25 * theta_c, rho0=1.25 / sol.k2),
        horizon, h=h)
    runs["gradient indirect"] = run_indirect_scenario(
        plant, ref, sig,
        IndirectGainConfig(Gamma=np.eye(3), time_domain="continuous"), proj,
        InitialConditions(theta0=1.25 * theta_p), horizon, h=h)
    runs["lyapunov direct"] = run_lyapunov_scenario(
        plant, ref, sig, "direct",
        LyapunovDirectGains(Gamma=np.eye(2), gamma=1.0, sign_k2=1.0), None,
        InitialConditions(theta0=1.25 * theta_c), horizon, h=h)
    runs["lyapunov indirect"] = run_lyapunov_scenario(
        plant, ref, sig, "indirect",
        LyapunovIndirectGains(Gamma1=np.eye(2), Gamma2=[[1.0]]), proj,
        InitialConditions(theta0=1.25 * theta_p), horizon, h=h)

    print(f"{'scheme':<20} {'sup|e|':>10} {'tail|e|':>10} {'V end/start':>12}")
    for name, tr in runs.items():
        metrics = tracking_metrics(tr)
        ratio = tr.V[-1] / tr.V[0] if tr.V is not None and tr.V[0] > 0 else float("nan")
        print(f"{name:<20} {tr.summary.sup_e:>10.3g} "
              f"{metrics.last_window_max:>10.3g} {ratio:>12.4f}")


if __name__ == "__main__":
    main()
