"""Final sharpness of Local SGD on the toy manifold under several sync rules.

Compares QSR, H = beta/eta and constant H = H_base (the usual baseline), and
also a constant H chosen to match the communication volume of QSR.

Usage: python3 scripts/sharpness_ordering.py [--seeds N]
"""

import argparse
import math
import os

import numpy as np

from qsrlab import cli, engine, syncrules

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def final_sharpness(prob, sched, train, rule, seeds):
    out = []
    for s in seeds:
        tc = engine.TrainConfig(prob, sched, K=train["K"], B_loc=train["B_loc"], seed=s,
                                sampling=train["sampling"], sync=rule)
        out.append(engine.run_local(tc).records[-1].sharpness)
    return np.mean(out), np.std(out, ddof=1) / math.sqrt(len(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    args = ap.parse_args()
    cfg = cli.load_config(os.path.join(CONFIGS, "train_toy_qsr.yaml"))
    sched, prob, train = cli.build_schedule(cfg), cli.build_problem(cfg), cfg.section("train")
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    rules = {}
    for name in ("train_toy_qsr", "train_toy_beta", "train_toy_const"):
        c = cli.load_config(os.path.join(CONFIGS, name + ".yaml"))
        rules[name.replace("train_toy_", "")] = syncrules.from_dict(c.section("sync"))
    qsr_syncs = syncrules.expand_timeline(rules["qsr"], sched).num_syncs
    rules["const_equal_budget"] = syncrules.constant(round(sched.total_steps / qsr_syncs))
    print(f"{'rule':20s} {'comm':>7s} {'sharpness':>16s}")
    for name, rule in rules.items():
        m, se = final_sharpness(prob, sched, train, rule, seeds)
        f = syncrules.comm_fraction(rule, sched)
        print(f"{name:20s} {100 * f:6.2f}% {m:9.3f} +- {se:.3f}")


if __name__ == "__main__":
    main()
