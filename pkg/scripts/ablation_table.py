"""Full pipeline against every ablation on one config, printed as text tables with stage timings.

    python3 scripts/ablation_table.py --seed 0 --out runs/ablate
    python3 scripts/ablation_table.py --noise 0.1 --dropout 0.2 --skip registration-only
"""

import argparse
import json
from dataclasses import replace

from segmatch import pipeline as pl


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--dropout", type=float, default=0.0)
    ap.add_argument("--out", help="persist artifacts here (nothing is written without it)")
    ap.add_argument("--skip", nargs="*", default=[], choices=pl.VARIANTS)
    args = ap.parse_args()

    cfg = pl.PipelineConfig(seed=args.seed, out=args.out or "runs/unused")
    cfg = replace(cfg, generator=replace(cfg.generator, feature_noise_sigma=args.noise, occlusion_drop_prob=args.dropout))
    variants = tuple(v for v in pl.VARIANTS if v not in args.skip)
    rep = pl.run_all(cfg, variants, write=args.out is not None)
    timings = rep.pop("_timings")
    print(pl.format_report(rep))
    print(json.dumps({k: round(v, 2) for k, v in timings.items()}, indent=1))


if __name__ == "__main__":
    main()
