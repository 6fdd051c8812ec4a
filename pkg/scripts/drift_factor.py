"""Fitted initial x-drift of the Slow SDEs on the toy manifold, qsr versus sgd.

Usage: python3 scripts/drift_factor.py
"""

import os

import numpy as np

from qsrlab import cli, sdelab

CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                      "configs", "sde_toy.yaml")


def main():
    cfg = cli.load_config(CONFIG)
    spec = cfg.section("sde")
    prob = cli.build_problem(cfg)
    zeta0 = np.array(prob.theta0)
    common = {k: spec[k] for k in ("B", "horizon", "dt", "n_paths", "record_every")}

    def drift(variant, **kw):
        ss = sdelab.SlowSdeSpec(variant, seed=cfg.seed, **common, **kw)
        return sdelab.fit_initial_drift(sdelab.integrate_slow_sde(prob, ss, zeta0))

    exact = sdelab.slow_drift(prob, zeta0, sdelab.SlowSdeSpec("sgd", B=spec["B"]))[0]
    base = drift("sgd")
    print(f"sgd: fitted {base:.4f}, closed form {exact:.4f}")
    for K in (2, 4, 8):
        q = drift("local_qsr", K=K)
        lsr = drift("local_lsr", K=K, beta=spec["beta"])
        print(f"K={K}: qsr/sgd {q / base:.2f} (theory {K}), "
              f"lsr(beta={spec['beta']})/sgd {lsr / base:.2f}")


if __name__ == "__main__":
    main()
