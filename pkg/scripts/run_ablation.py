"""Full model versus -local, -gated and -delta variants, averaged over seeds."""

import numpy as np
from _common import base_parser, dataset_folds, load, seeded, variant

from deltamil.cli import ABLATIONS
from deltamil.train import cross_validate


def main():
    p = base_parser(__doc__)
    p.set_defaults(seeds="0,1,2")
    args = p.parse_args()
    cfg = load(args.config)
    folds = dataset_folds(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    scores = {name: [] for name, _ in ABLATIONS}
    for seed in seeds:
        for name, switches in ABLATIONS:
            rep, _, _ = cross_validate(folds, variant(cfg.model, **switches), seeded(cfg.optim, seed), seed)
            scores[name].append(rep.auc)
            print(f"seed {seed}\t{name}\tauc {rep.auc:.4f}", flush=True)
    print("variant\tauc_mean\tauc_std\tfull_minus_variant")
    full = np.mean(scores["full"])
    for name, vals in scores.items():
        print(f"{name}\t{np.mean(vals):.4f}\t{np.std(vals):.4f}\t{full - np.mean(vals):+.4f}")


if __name__ == "__main__":
    main()
