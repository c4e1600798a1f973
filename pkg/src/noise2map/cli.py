"""Command-line entry point: ``noise2map <subcommand>``.

Subcommands are thin adapters over the library; artifacts go to ``--out``
and logs to stderr. Exit status is 0 on success and 2 on a handled error,
which is reported as a single ``error[<category>]: message`` line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as data_mod
from .config import ExperimentConfig
from .evaluation import RankTable, rank_aggregate, write_report
from .exceptions import ConfigError, Noise2MapError
from .inference import evaluate, export_progression, timestep_sweep
from .model import build_model, count_parameters
from .training import Checkpoint, load_pretrained, pretrain, train_multitask, train_task

logger = logging.getLogger("noise2map")


def resolve_seed(flag, config_seed=None) -> int:
    """``--seed`` beats ``$NOISE2MAP_SEED``, which beats the config file; default 0."""
    if flag is not None:
        return int(flag)
    env = os.environ.get("NOISE2MAP_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"NOISE2MAP_SEED must be an integer, got {env!r}") from exc
    return int(config_seed or 0)


def _config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    spec = data_mod.SynthSpec(
        seed=resolve_seed(args.seed), size=args.size, n_samples=args.n, task=args.task,
        change_fraction=args.change_fraction, n_buildings=(args.min_buildings, args.max_buildings),
        n_val=args.n_val, n_test=args.n_test,
    )
    manifest = data_mod.generate_synthetic(spec, args.out)
    print(f"wrote {spec.n_samples} {spec.task} samples to {args.out} ({len(manifest)} in train split)")


def cmd_pretrain(args):
    cfg = _config(args.config)
    seed = resolve_seed(args.seed, cfg.seed)
    out = _out_dir(args, cfg)
    root = Path(cfg.data.get("pretrain_root") or cfg.data_root("ss"))
    task = "cd" if (root / "A").is_dir() else "ss"
    corpus = data_mod.load_manifest(root, task, cfg.split("train"))
    model = build_model(cfg.unet_config(tasks=("pretrain",)), seed=seed)
    ckpt = pretrain(model, corpus, cfg.pretrain_config(seed), schedule=cfg.schedule_config("ss"),
                    out_dir=out, log_path=out / "pretrain_log.tsv")
    print(f"pretrained {ckpt.epoch} epochs; checkpoint at {out / 'last.pt'}")


def cmd_train(args):
    cfg = _config(args.config)
    task = args.task or cfg.task
    cfg.task = task
    seed = resolve_seed(args.seed, cfg.seed)
    out = _out_dir(args, cfg)
    model = build_model(cfg.unet_config(tasks=cfg.tasks()), seed=seed)
    if args.from_checkpoint:
        n = load_pretrained(model, args.from_checkpoint)
        logger.info("initialized %d tensors from %s", n, args.from_checkpoint)
    tcfg = cfg.train_config(seed)
    k = model.config.out_classes
    log_path = out / "train_log.tsv"

    def split(t, which):
        try:
            return data_mod.load_manifest(cfg.data_root(t), t, cfg.split(which))
        except data_mod.EmptyDatasetError:
            if which == "val":
                return None
            raise

    if task == "mt":
        ckpt = train_multitask(
            model, split("cd", "train"), split("ss", "train"), cfg.multitask_weights(),
            cd_schedule=cfg.schedule_config("cd"), ss_schedule=cfg.schedule_config("ss"), cfg=tcfg,
            cd_class_weights=cfg.class_weights("cd", k), ss_class_weights=cfg.class_weights("ss", k),
            cd_val=split("cd", "val"), ss_val=split("ss", "val"), out_dir=out, log_path=log_path,
            resume=args.resume,
        )
    else:
        ckpt = train_task(
            model, split(task, "train"), split(task, "val"), task=task, schedule=cfg.schedule_config(task),
            cfg=tcfg, class_weights=cfg.class_weights(task, k), out_dir=out, log_path=log_path,
            resume=args.resume,
        )
    print(f"trained {ckpt.epoch} epochs ({ckpt.step} steps); checkpoints in {out}, log {log_path}")


def _eval_task(args, cfg, ckpt):
    heads = [h for h in ckpt.heads if h != "pretrain"]
    task = args.task
    if task is None and len(heads) == 1:
        task = heads[0]
    if task is None and cfg.task != "mt":
        task = cfg.task
    if task is None:
        if len(heads) != 1:
            raise ConfigError(f"checkpoint has heads {heads}; choose one with --task")
        task = heads[0]
    if task not in heads:
        raise ConfigError(f"checkpoint has no {task!r} head (available: {heads})")
    return task


def cmd_eval(args):
    cfg = _config(args.config)
    seed = resolve_seed(args.seed, cfg.seed)
    ckpt = Checkpoint.load(args.checkpoint)
    task = _eval_task(args, cfg, ckpt)
    model = ckpt.build_model()
    schedule = ckpt.schedule(task) if task in ckpt.schedules else cfg.schedule_config(task)
    root = cfg.data_root(task)
    manifest = data_mod.load_manifest(root, task, args.split)
    cm = evaluate(model, manifest, schedule, t=args.timestep, seed=seed)
    out = Path(args.out) if args.out else _out_dir(args, cfg) / f"eval_{task}_{args.split}.json"
    schedule_info = {**schedule.to_dict(), "inference_timestep": schedule.T if args.timestep is None else args.timestep}
    write_report(cm, out, task=task, dataset=f"{root.name}/{args.split}", param_count=count_parameters(model),
                 schedule=schedule_info, seed=seed)
    print(out.read_text(), end="")


def cmd_sweep(args):
    cfg = _config(args.config)
    seed = resolve_seed(args.seed, cfg.seed)
    ckpt = Checkpoint.load(args.checkpoint)
    task = _eval_task(args, cfg, ckpt)
    model = ckpt.build_model()
    schedule = ckpt.schedule(task) if task in ckpt.schedules else cfg.schedule_config(task)
    timesteps = [int(t) for t in args.timesteps.split(",") if t.strip()]
    if not timesteps:
        raise ConfigError("--timesteps must list at least one timestep")
    manifest = data_mod.load_manifest(cfg.data_root(task), task, args.split)
    export = Path(args.export_dir)
    report = timestep_sweep(model, manifest, schedule, timesteps, seed=seed, keep_masks=True,
                            export_dir=export / "masks")
    export_progression(report, manifest.samples(), export)
    summary = {"timesteps": report.timesteps, "seed": report.seed,
               "metrics": [{str(c): m for c, m in row.items()} for row in report.metrics]}
    (export / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    for t, f1 in zip(report.timesteps, report.f1()):
        print(f"t={t}\tf1_class1={f1:.4f}")


def cmd_rank(args):
    entries = rank_aggregate(RankTable.from_csv(args.csv))
    print(f"{'rank':>4}  {'model':<24} {'avg_rank':>8} {'mean_iou':>8}")
    for e in entries:
        print(f"{e.ordinal:>4}  {e.model:<24} {e.average_rank:>8.3f} {e.mean_iou:>8.2f}")
    payload = [{"model": e.model, "rank": e.ordinal, "average_rank": e.average_rank, "mean_iou": e.mean_iou,
                "per_dataset_rank": e.per_dataset_rank} for e in entries]
    out = Path(args.json) if args.json else Path(args.csv).with_suffix(".rank.json")
    out.write_text(json.dumps(payload, indent=2) + "\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="noise2map", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)
    seed_help = "random seed (falls back to $NOISE2MAP_SEED, then the config, then 0)"

    p = sub.add_parser("synth", help="generate a synthetic building-scene corpus", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=["ss", "cd"], default="cd", help="layout to write")
    p.add_argument("--n", type=int, default=32, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--change-fraction", type=float, default=0.5, help="share of buildings changed (cd)")
    p.add_argument("--min-buildings", type=int, default=2, help="fewest buildings per scene")
    p.add_argument("--max-buildings", type=int, default=5, help="most buildings per scene")
    p.add_argument("--n-val", type=int, default=0, help="samples in the val split")
    p.add_argument("--n-test", type=int, default=0, help="samples in the test split")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised denoising pretraining", formatter_class=fmt)
    p.add_argument("--config", default=None, help="experiment config (YAML/JSON)")
    p.add_argument("--out", default=None, help="output directory (default: config 'out')")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised training for ss, cd or both (mt)", formatter_class=fmt)
    p.add_argument("--config", default=None, help="experiment config (YAML/JSON)")
    p.add_argument("--task", choices=["ss", "cd", "mt"], default=None, help="task (default: config 'task')")
    p.add_argument("--from-checkpoint", default=None, help="pretraining checkpoint to initialize the trunk from")
    p.add_argument("--resume", default=None, help="training checkpoint (last.pt) to continue from")
    p.add_argument("--out", default=None, help="output directory (default: config 'out')")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report", formatter_class=fmt)
    p.add_argument("--config", default=None, help="experiment config (YAML/JSON)")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--task", choices=["ss", "cd"], default=None, help="head to evaluate")
    p.add_argument("--split", default="test", help="split to evaluate")
    p.add_argument("--timestep", type=int, default=None, help="inference timestep (default: T)")
    p.add_argument("--out", default=None, help="report path")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="metrics and masks across timesteps", formatter_class=fmt)
    p.add_argument("--config", default=None, help="experiment config (YAML/JSON)")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--task", choices=["ss", "cd"], default=None, help="head to evaluate")
    p.add_argument("--timesteps", default="0,250,500,750,1000", help="comma-separated timesteps")
    p.add_argument("--split", default="test", help="split to evaluate")
    p.add_argument("--export-dir", required=True, help="directory for masks, grids and CSV")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rank", help="cross-dataset rank aggregation from model,dataset,f1,iou CSV",
                       formatter_class=fmt)
    p.add_argument("csv", help="input CSV")
    p.add_argument("--json", default=None, help="ranking JSON path (default: <csv>.rank.json)")
    p.set_defaults(func=cmd_rank)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Noise2MapError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
