"""Command line entry point: one subcommand per pipeline stage plus full and ablation runs.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl
from .cluster import ClusterConfig, save_mask, segment_image
from .embed import EmbeddingTable
from .prune import PruneConfig, PseudoLabeling
from .synth import LabeledImage, load_dataset, save_dataset

EXIT_CONFIG = 2
EXIT_STAGE = 3


class ConfigError(ValueError):
    pass


def _config(args) -> pl.PipelineConfig:
    try:
        cfg = pl.PipelineConfig.load(args.config) if args.config else pl.PipelineConfig()
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.workers is not None:
        over["workers"] = args.workers
    cfg = replace(cfg, **over)
    try:
        pl.validate(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _out(cfg) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset(out: Path):
    return load_dataset(out / "step0_dataset")


def cmd_generate(cfg, args):
    out = _out(cfg)
    cfg.save(out / "config.json")
    ds = pl.generate(cfg)
    save_dataset(ds, out / "step0_dataset")
    print(f"{len(ds.scenes)} scenes, {sum(len(g) for g in ds.graphs)} segments -> {out / 'step0_dataset'}")


def cmd_embed(cfg, args):
    out = _out(cfg)
    e = replace(cfg.embed, tau=args.tau if args.tau is not None else cfg.embed.tau)
    if args.epochs is not None:
        e = replace(e, **{"phi1_epochs" if args.stage == 1 else "phi2_epochs": args.epochs})
    cfg = replace(cfg, embed=e)
    ds = _dataset(out)
    if args.stage == 1:
        table = pl.train_phi1(ds, cfg)
        name = "step1_phi1.json"
    else:
        labeling = PseudoLabeling.load(args.labels or out / "step3_pseudolabels.json")
        table = pl.train_phi2(ds, labeling, cfg)
        name = "step4_phi2.json"
    table.save(out / name)
    print(f"final loss {table.history[-1]:.4f} -> {out / name}")


def cmd_match(cfg, args):
    out = _out(cfg)
    ds = _dataset(out)
    phi1 = EmbeddingTable.load(out / "step1_phi1.json")
    times: list[float] = []
    matches = pl.match_stage(ds, phi1, cfg, times)
    (out / "step2_matches.json").write_text(json.dumps({"matches": [m.to_json() for m in matches]}, indent=1, sort_keys=True))
    (out / "step2_pair_times.json").write_text(json.dumps({"seconds": times}))
    failed = sum(not m.ok for m in matches)
    print(f"{len(matches)} component pairs solved, {failed} rejected by size cap or timeout")


def cmd_prune_merge(cfg, args):
    out = _out(cfg)
    prune = cfg.prune
    if args.alpha is not None or args.t2 is not None or args.isolation is not None:
        try:
            prune = PruneConfig(args.alpha if args.alpha is not None else prune.alpha,
                                args.t2 if args.t2 is not None else prune.t2,
                                args.isolation or prune.isolation)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    cfg = replace(cfg, prune=prune)
    ds = _dataset(out)
    matches = pl.load_matches(out / "step2_matches.json")
    if not args.no_pruning:
        matches = pl.attach_scores(matches, ds, cfg)
    labeling = pl.prune_merge(matches, ds, cfg, pruning=not args.no_pruning)
    labeling.save(out / "step3_pseudolabels.json")
    print(f"{labeling.n_objects()} pseudo-objects, {len(labeling.conflicts)} conflicts")


def cmd_train_phi2(cfg, args):
    args.stage = 2
    cmd_embed(cfg, args)


def cmd_infer(cfg, args):
    ccfg = cfg.cluster
    if args.kappa is not None or args.sigma is not None:
        try:
            ccfg = replace(ccfg, kappa=args.kappa if args.kappa is not None else ccfg.kappa,
                           sigma_px=args.sigma if args.sigma is not None else ccfg.sigma_px)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    cfg = replace(cfg, cluster=ccfg)
    if args.image:
        img = LabeledImage.from_json(json.loads(Path(args.image).read_text()))
        phi2 = EmbeddingTable.load(args.features)
        mask = segment_image(pl.pixel_features(img, phi2), img.foreground, cfg.cluster)
        target = Path(args.mask_out or Path(args.image).with_suffix(".mask.json"))
        save_mask(mask, target)
        print(f"{int(mask.max()) + 1} segments -> {target}")
        return
    out = _out(cfg)
    ds = _dataset(out)
    phi2 = EmbeddingTable.load(args.features or out / "step4_phi2.json")
    masks = pl.infer(pl.test_frames(ds, cfg), phi2, cfg)
    mdir = out / "step5_masks"
    mdir.mkdir(exist_ok=True)
    for (s, f), m in sorted(masks.items()):
        save_mask(m, mdir / f"scene{s}_frame{f}.json")
    print(f"{len(masks)} masks -> {mdir}")


def cmd_eval(cfg, args):
    from .cluster import load_mask
    from .prune import parts_only_labeling

    out = _out(cfg)
    ds = _dataset(out)
    frames = pl.test_frames(ds, cfg)
    masks = {(s, img.frame): load_mask(out / "step5_masks" / f"scene{s}_frame{img.frame}.json")
             for s in frames for img in frames[s]}
    labeling = PseudoLabeling.load(out / "step3_pseudolabels.json")
    report = {
        "seed": cfg.seed,
        "note": pl.AGGREGATION_NOTE,
        "pseudo_labels_3d": {"parts_only": pl.eval_3d(ds, parts_only_labeling(ds.graphs)).to_json(),
                             "full": pl.eval_3d(ds, labeling).to_json()},
        "final_2d": {"full": pl.eval_2d(frames, masks).to_json()},
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    text = pl.format_report(report)
    (out / "report.txt").write_text(text)
    print(text)


def _print_run(report, out):
    rep = {k: v for k, v in report.items() if not k.startswith("_")}
    print(pl.format_report(rep))
    print(f"artifacts in {out}")


def cmd_run_full(cfg, args):
    _print_run(pl.run_full(cfg), cfg.out)


def cmd_ablate(cfg, args):
    variants = pl.VARIANTS if args.variant == "all" else (args.variant,)
    _print_run(pl.run_all(cfg, variants), cfg.out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--out", help="run directory")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="segmatch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="synthesize scenes, segment graphs and frames")
    e = sub.add_parser("embed", parents=[common], help="train an embedding table")
    e.add_argument("--stage", type=int, choices=(1, 2), default=1)
    e.add_argument("--tau", type=float)
    e.add_argument("--epochs", type=int)
    e.add_argument("--labels", help="pseudo-label JSON for stage 2")
    sub.add_parser("match", parents=[common], help="match every component pair across scenes")
    pm = sub.add_parser("prune-merge", parents=[common], help="prune matches and merge them into pseudo-labels")
    pm.add_argument("--alpha", type=float)
    pm.add_argument("--t2", type=float)
    pm.add_argument("--isolation", choices=("literal", "evidence", "off"))
    pm.add_argument("--no-pruning", action="store_true")
    t = sub.add_parser("train-phi2", parents=[common], help="train stage-2 features on pseudo-labels")
    t.add_argument("--tau", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--labels")
    i = sub.add_parser("infer", parents=[common], help="cluster test frames (or one image) into segments")
    i.add_argument("--image", help="single LabeledImage JSON")
    i.add_argument("--features", help="stage-2 table JSON")
    i.add_argument("--mask-out")
    i.add_argument("--kappa", type=float)
    i.add_argument("--sigma", type=float)
    sub.add_parser("eval", parents=[common], help="score pseudo-labels and inferred masks")
    sub.add_parser("run-full", parents=[common], help="all stages end to end")
    a = sub.add_parser("ablate", parents=[common], help="full run plus ablation variants")
    a.add_argument("--variant", choices=(*pl.VARIANTS, "all"), default="all")
    return p


COMMANDS = {
    "generate": cmd_generate, "embed": cmd_embed, "match": cmd_match, "prune-merge": cmd_prune_merge,
    "train-phi2": cmd_train_phi2, "infer": cmd_infer, "eval": cmd_eval, "run-full": cmd_run_full, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except (OSError, KeyError, ValueError, RuntimeError) as exc:
        print(f"stage {args.command!r} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
