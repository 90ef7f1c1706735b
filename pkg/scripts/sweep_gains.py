#!/usr/bin/env python3
"""Sweep the rho adaptation gain on the benchmark scenario and tabulate how
the contraction margin trades against tail tracking error.

    python scripts/sweep_gains.py
"""

import numpy as np

from mrac import gamma0_direct, tracking_metrics
from mrac.scenario import benchmark_config, config_from_dict, run_scenario


def main():
    base = benchmark_config().to_dict()
    base["horizon"] = 3000
    print(f"{'gamma':>6} {'gamma0':>7} {'margin':>7} {'sup|e|':>10} "
          f"{'tail|e|':>10} {'sum eps^2/m^2':>14}")
    for gamma in (0.25, 0.5, 1.0, 1.5, 1.9):
        data = dict(base)
        data["gains"] = dict(base["gains"], gamma=gamma)
        run = run_scenario(config_from_dict(data))
        g0 = gamma0_direct(0.5 * np.eye(3), gamma, [2.0])
        metrics = tracking_metrics(run.trace)
        print(f"{gamma:>6.2f} {g0:>7.2f} {2.0 - g0:>7.2f} "
              f"{run.trace.summary.sup_e:>10.3g} "
              f"{metrics.last_window_max:>10.3g} "
              f"{run.trace.summary.sum_eps2_over_m2:>14.6g}")


if __name__ == "__main__":
    main()
