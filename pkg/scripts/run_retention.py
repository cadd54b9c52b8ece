"""Retention curves and witness percentiles for trained DeltaMIL and ABMIL models."""

from pathlib import Path

import numpy as np
from _common import base_parser, dataset_folds, load, seeded, variant

from deltamil.saliency import STRATEGIES, export_heatmap, extract_attention, format_curves, sweep, witness_percentile
from deltamil.train import cross_validate

RATIOS = (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)


def main():
    p = base_parser(__doc__)
    p.add_argument("--out", default="runs/retention")
    p.add_argument("--models", default="deltamil,abmil")
    args = p.parse_args()
    cfg = load(args.config)
    folds = dataset_folds(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in map(int, args.seeds.split(",")):
        for name in args.models.split(","):
            _, models, _ = cross_validate(folds, variant(cfg.model, model=name), seeded(cfg.optim, seed), seed)
            tests = [f[2] for f in folds]
            curves = []
            for s in STRATEGIES:
                per_fold = [sweep(m, te, s, RATIOS) for m, te in zip(models, tests)]
                pts = [(r, float(np.mean([c.points[i][1] for c in per_fold]))) for i, r in enumerate(RATIOS)]
                curves.append(type(per_fold[0])(s, pts, per_fold[0].seeds))
            table = format_curves(curves)
            (out / f"{name}_seed{seed}.tsv").write_text(table)
            wp = [witness_percentile(extract_attention(m, b), b.witness)
                  for m, te in zip(models, tests) for b in te if b.witness.any()]
            print(f"# {name} seed {seed}: witness percentile {np.mean(wp):.4f}")
            print(table, flush=True)
            first = next(b for b in tests[0] if b.witness.any())
            export_heatmap(extract_attention(models[0], first), first.coords, out / f"{name}_seed{seed}_{first.bag_id}.pgm")


if __name__ == "__main__":
    main()
