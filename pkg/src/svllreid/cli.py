"""Command-line entry point: ``svllreid <command> [options]``.

Every command resolves the config (JSON file plus ``--set`` overrides), echoes
it with its digest on stderr, then acts. Errors exit with status 1; argparse
usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, canonical, digest, load_config
from .data import export_manifest
from .evaluation import pca_project_2d, separation_ratio, write_scatter_csv
from .pipeline import build_manifest, embed_split, evaluate_models, fit_images
from .training import (CheckpointError, Models, MetricsLog, TrainingError, checkpoint_from,
                       compute_id_text_features, load_checkpoint, models_from_checkpoint,
                       run_stage1, run_stage2, save_checkpoint, stage1_config, stage2_config)

log = logging.getLogger("svllreid")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def setup_logging():
    level = os.environ.get("SVLL_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"SVLL_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def resolve_config(args):
    overrides = list(args.set or [])
    if getattr(args, "data", None):
        overrides += ["dataset.synthetic=null", f"dataset.path={json.dumps(args.data)}"]
    if getattr(args, "out", None) and args.command in ("train", "gen-data"):
        overrides.append(f"output={json.dumps(args.out)}")
    cfg = load_config(args.config, overrides)
    print(f"# config {canonical(cfg)}", file=sys.stderr)
    print(f"# config-digest {digest(cfg)}", file=sys.stderr)
    return cfg


def run_header(cfg, stage):
    s1, s2 = cfg["stage1"], cfg["stage2"]
    lam = s1["lambda_lss"] if stage == 1 else s2["lambda_vss"]
    name = "lambda_lss" if stage == 1 else "lambda_vss"
    arm = "baseline" if lam == 0 else "svll"
    return [f"stage {stage}", f"arm {arm} {name}={lam!r}", f"seed {cfg['seed']}",
            f"config-digest {digest(cfg)}"]


def stage_paths(out, stage):
    return (os.path.join(out, f"stage{stage}.ckpt"), os.path.join(out, f"stage{stage}.metrics.tsv"))


def load_models(cfg, path, manifest):
    """Models from a checkpoint, refusing one whose model section differs from the config."""
    ckpt = load_checkpoint(path)
    if ckpt.config["model"] != cfg["model"]:
        raise CheckpointError("checkpoint model dimensions do not match the config model section")
    return models_from_checkpoint(ckpt, manifest.n_identities if manifest else None), ckpt


# ---------------------------------------------------------------- commands

def cmd_show_config(args, cfg):
    print(json.dumps(cfg, indent=2, sort_keys=True))
    print(digest(cfg))
    return 0


def cmd_gen_data(args, cfg):
    if cfg["dataset"]["path"]:
        raise ConfigError("gen-data needs a synthetic dataset section")
    manifest = build_manifest(cfg)
    path = export_manifest(manifest, cfg["output"])
    counts = manifest.counts()
    print(f"identities {manifest.n_identities}")
    for k, v in counts.items():
        print(f"{k} {v}")
    print(f"occluded {manifest.occluded}")
    print(f"manifest {path}")
    return 0


def cmd_train(args, cfg):
    out = cfg["output"]
    os.makedirs(out, exist_ok=True)
    manifest = fit_images(build_manifest(cfg), cfg["model"])
    ckpt_path, metrics_path = stage_paths(out, args.stage)
    start, opt_state = 0, None
    if args.resume:
        ckpt = load_checkpoint(args.resume, expected_digest=digest(cfg))
        if ckpt.stage != args.stage:
            raise CheckpointError(f"--resume checkpoint is stage {ckpt.stage}, not {args.stage}")
        models = models_from_checkpoint(ckpt, manifest.n_identities)
        start, opt_state = ckpt.epoch, ckpt.adam
        metrics = MetricsLog(metrics_path, append=True)
        log.info("resuming stage %d at epoch %d", args.stage, start)
    elif args.stage == 1:
        models = Models(cfg["model"], manifest.n_identities, cfg["seed"])
        metrics = MetricsLog(metrics_path, run_header(cfg, 1))
    else:
        s1_path = args.init or stage_paths(out, 1)[0]
        if not os.path.exists(s1_path):
            raise TrainingError(f"stage 2 needs a stage-1 checkpoint; {s1_path} not found")
        ckpt = load_checkpoint(s1_path, expected_digest=digest(cfg))
        if ckpt.stage != 1:
            raise CheckpointError(f"{s1_path} is not a stage-1 checkpoint")
        models = models_from_checkpoint(ckpt, manifest.n_identities)
        if models.id_text_features is None or ckpt.epoch < cfg["stage1"]["epochs"]:
            raise TrainingError("stage-1 checkpoint is incomplete; finish stage 1 first")
        metrics = MetricsLog(metrics_path, run_header(cfg, 2))

    if args.stage == 1:
        s_cfg = stage1_config(cfg)
        report = run_stage1(manifest, models, s_cfg, metrics, start, args.until_epoch, opt_state)
    else:
        s_cfg = stage2_config(cfg)
        report = run_stage2(manifest, models, s_cfg, metrics, start, args.until_epoch, opt_state)
    for group in ("text", "image") if args.stage == 1 else ("text", "bank"):
        if report.entry_digests[group] != report.exit_digests[group]:
            raise TrainingError(f"frozen group {group!r} changed during stage {args.stage}")
    save_checkpoint(checkpoint_from(models, args.stage, report.epochs_done, cfg, report.optimizer),
                    ckpt_path)
    last = report.losses[-1] if report.losses else float("nan")
    print(f"stage {args.stage} epochs {report.epochs_done}/{s_cfg.epochs} last-loss {last!r}")
    print(f"checkpoint {ckpt_path}")
    print(f"metrics {metrics_path}")
    return 0


def _models_or_fresh(cfg, args, manifest):
    if args.checkpoint:
        return load_models(cfg, args.checkpoint, manifest)[0]
    log.info("no checkpoint given; using freshly initialised encoders")
    return Models(cfg["model"], manifest.n_identities, cfg["seed"])


def cmd_eval(args, cfg):
    manifest = fit_images(build_manifest(cfg), cfg["model"])
    models = _models_or_fresh(cfg, args, manifest)
    report = evaluate_models(models, manifest, tuple(cfg["eval"]["ranks"]))
    text = report.to_json()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    cmc = " ".join(f"rank{r} {v:.4f}" for r, v in sorted(report.cmc.items()))
    print(f"mAP {report.mAP:.4f} {cmc} valid-queries {report.valid_queries}", file=sys.stderr)
    return 0


def cmd_embed(args, cfg):
    manifest = fit_images(build_manifest(cfg), cfg["model"])
    models = _models_or_fresh(cfg, args, manifest)
    emb, ids, cams = embed_split(models, manifest, args.split)
    np.savez(args.out, embeddings=emb, ids=ids, cams=cams)
    print(f"{args.split} {len(ids)} embeddings -> {args.out}")
    return 0


def cmd_project(args, cfg):
    manifest = fit_images(build_manifest(cfg), cfg["model"])
    models = _models_or_fresh(cfg, args, manifest)
    if args.space == "text":
        feats = models.id_text_features
        if feats is None:
            feats = compute_id_text_features(models)
        ids, stage = np.arange(len(feats)), "stage1"
    else:
        q, qi, _ = embed_split(models, manifest, "query")
        g, gi, _ = embed_split(models, manifest, "gallery")
        feats, ids, stage = np.concatenate([q, g]), np.concatenate([qi, gi]), "stage2"
    coords = pca_project_2d(feats)
    write_scatter_csv(args.out, coords, ids, stage)
    line = f"{args.space} {len(ids)} rows -> {args.out}"
    if len(set(ids.tolist())) < len(ids):
        line += f" separation-ratio {separation_ratio(coords, ids):.4f}"
    print(line)
    return 0


COMMANDS = {
    "show-config": cmd_show_config, "gen-data": cmd_gen_data, "train": cmd_train,
    "eval": cmd_eval, "embed": cmd_embed, "project": cmd_project,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are built in)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted override, value parsed as JSON; repeatable")
    common.add_argument("--data", help="ReID directory or manifest.json instead of synthetic data")

    p = argparse.ArgumentParser(prog="svllreid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("show-config", parents=[common], help="print the resolved config and digest")

    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset to disk")
    g.add_argument("--out", help="output directory (default: config output)")

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--out", help="run directory (default: config output)")
    t.add_argument("--resume", help="continue from a partial checkpoint of the same stage")
    t.add_argument("--init", help="stage-1 checkpoint for stage 2 (default: <out>/stage1.ckpt)")
    t.add_argument("--until-epoch", type=int, help="stop after this many epochs (for resuming)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on query/gallery")
    e.add_argument("--checkpoint")
    e.add_argument("--report", help="also write the JSON report here")

    m = sub.add_parser("embed", parents=[common], help="dump embeddings of one split to .npz")
    m.add_argument("--checkpoint")
    m.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    m.add_argument("--out", required=True)

    j = sub.add_parser("project", parents=[common], help="2-D PCA scatter CSV")
    j.add_argument("--checkpoint")
    j.add_argument("--space", choices=("text", "image"), required=True)
    j.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
