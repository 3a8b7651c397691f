"""Train the host once per regulariser setting and compare robustness.

For each ablation (none, rfunc, rda, both) and seed, report primary test
accuracy, watermark accuracy, and the watermark accuracy left after a
fine-tune and a fine-prune attack.  Writes a CSV to stdout or ``--out``.

    python scripts/ablation.py --seeds 0 1 2 --out ablation.csv
"""
import argparse
import csv
import dataclasses
import sys

from mtlmark import attacks
from mtlmark.attacks import AttackConfig
from mtlmark.data import SplitSpec
from mtlmark.experiment import ABLATIONS, ExperimentConfig, ablation_config, run_host


def seeded(seed: int) -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.data.seed = cfg.model.seed = seed
    cfg.data.split = SplitSpec(0.5, 0.25, 0.25, seed)
    cfg.train = dataclasses.replace(cfg.train, seed=seed)
    return cfg.validate()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--ablations", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    ap.add_argument("--attack-epochs", type=int, default=10)
    ap.add_argument("--out", type=argparse.FileType("w"), default=sys.stdout)
    args = ap.parse_args(argv)

    writer = csv.writer(args.out)
    writer.writerow(["seed", "ablation", "primary_test", "wm", "wm_after_ft", "wm_after_fp"])
    for seed in args.seeds:
        cfg = seeded(seed)
        clean = None
        for name in args.ablations:
            run = run_host(cfg, ablation_config(cfg.train, name), clean=clean)
            clean = (run.clean, run.primary_report)
            head, wm = run.watermarked.c_wm, run.wm
            row = [seed, name, run.embed_report.accuracies["primary_test"], run.embed_report.accuracies["wm"]]
            for kind, fn in (("ft", attacks.fine_tune), ("fp", attacks.fine_prune)):
                attacked = fn(run.watermarked, run.adversary,
                              AttackConfig(kind=kind, epochs=args.attack_epochs, seed=seed))
                row.append(attacks.wm_accuracy(attacked, head, wm.inputs, wm.labels))
            writer.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in row])
            args.out.flush()


if __name__ == "__main__":
    main()
