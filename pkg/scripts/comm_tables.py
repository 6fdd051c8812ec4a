"""Communication fractions of the ImageNet-scale recipes and the wall-clock ledger.

Usage: python3 scripts/comm_tables.py
"""

import os

from qsrlab import cli, commcost, syncrules

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
RECIPES = [("ResNet-152, QSR H_base=2, alpha=0.2", "resnet_qsr_hb2.yaml", 0.397),
           ("ResNet-152, QSR H_base=4, alpha=0.25", "resnet_qsr_hb4.yaml", 0.201),
           ("ViT-B, constant H=4", "const_h4.yaml", 0.25),
           ("ViT-B, QSR H_base=4, alpha=0.0175", "vit_qsr_hb4.yaml", 0.104),
           ("ViT-B, QSR H_base=8, alpha=0.0175", "vit_qsr_hb8.yaml", 0.069)]


def main():
    print(f"{'recipe':40s} {'steps':>7s} {'syncs':>6s} {'fraction':>9s} {'reported':>9s}")
    fractions = {}
    for label, name, reported in RECIPES:
        cfg = cli.load_config(os.path.join(CONFIGS, name))
        sched = cli.build_schedule(cfg)
        tl = syncrules.expand_timeline(syncrules.from_dict(cfg.section("sync")), sched)
        f = tl.num_syncs / tl.total_steps
        fractions[name] = f
        print(f"{label:40s} {tl.total_steps:7d} {tl.num_syncs:6d} {100 * f:8.2f}% {100 * reported:8.1f}%")

    led = commcost.CommLedger(26.7, 21.2, 4)
    led.add_period(8, measured=20.5)
    led.add_fraction("QSR H_base=4", fractions["vit_qsr_hb4.yaml"])
    led.add_fraction("QSR H_base=8", fractions["vit_qsr_hb8.yaml"])
    rep = led.report()
    print(f"\nViT-B wall clock (hours): comm {rep['T_comm_para']}, comp {rep['T_comp_para']}")
    for row in rep["periods"]:
        print(f"  H={row['H']}: predicted {row['total']} vs measured {row['measured']} "
              f"({100 * led.by_period[row['H']]['rel_error']:.1f}% off)")
    for row in rep["rules"]:
        print(f"  {row['rule']}: comm {row['comm']}, total {row['total']}")


if __name__ == "__main__":
    main()
