"""Average pseudo-label and final IoU over seeds for one noise/dropout setting.

    python3 scripts/noisy_trend.py --noise 0.1 --dropout 0.2 --seeds 5
"""

import argparse
import json
from dataclasses import replace

import numpy as np

from segmatch import pipeline as pl
from segmatch.synth import GeneratorConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--dropout", type=float, default=0.2)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--isolation", default="evidence", choices=("literal", "evidence", "off"))
    ap.add_argument("--json", help="write per-seed numbers here")
    args = ap.parse_args()

    gen = GeneratorConfig(feature_noise_sigma=args.noise, occlusion_drop_prob=args.dropout)
    per_seed = []
    for seed in range(args.seeds):
        cfg = pl.PipelineConfig(seed=seed, generator=gen)
        cfg = replace(cfg, prune=replace(cfg.prune, isolation=args.isolation))
        rep = pl.run_all(cfg, ("no-matching", "no-pruning"), write=False)
        row = {f"3d/{k}": v["iou"] for k, v in rep["pseudo_labels_3d"].items()}
        row.update({f"2d/{k}": v["iou"] for k, v in rep["final_2d"].items()})
        per_seed.append(row)
        print(seed, " ".join(f"{k}={v:.3f}" for k, v in row.items()), flush=True)

    print("mean", " ".join(f"{k}={np.mean([r[k] for r in per_seed]):.3f}" for k in per_seed[0]))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(per_seed, f, indent=1)


if __name__ == "__main__":
    main()
