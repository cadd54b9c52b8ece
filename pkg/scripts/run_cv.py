"""Cross-validated AUC/ACC for DeltaMIL and the pooling baselines on synthetic bags."""

import time

from _common import base_parser, dataset_folds, load, seeded, variant

from deltamil.train import cross_validate


def main():
    p = base_parser(__doc__)
    p.add_argument("--models", default="deltamil,abmil,mean,max")
    args = p.parse_args()
    cfg = load(args.config)
    folds = dataset_folds(cfg)
    for seed in map(int, args.seeds.split(",")):
        for name in args.models.split(","):
            t0 = time.perf_counter()
            rep, _, res = cross_validate(folds, variant(cfg.model, model=name), seeded(cfg.optim, seed), seed)
            epochs = [r.epochs_run for r in res]
            print(f"# seed {seed} model {name} epochs {epochs} {time.perf_counter() - t0:.0f}s")
            print(rep.summary(), flush=True)


if __name__ == "__main__":
    main()
