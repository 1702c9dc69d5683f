"""Operator interface: train, eval, score, synth, diag, extract-check.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .episodes import SamplerConfig
from .errors import ConfigError, DataError, NumericError
from .features import load_manifest, read_feature_file, read_mask_file
from .metrics import aggregate_seed_reports, render_report_table, report_lines
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    evaluate_model,
    residual_norm_stats,
    score_episode,
    test_episodes,
    upsample_score_map,
    write_pgm,
    write_raw_grid,
)
from .synth import SynthConfig, generate_benchmark
from .training import LossConfig, OptimizerState, TrainConfig, train, write_trace


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dualref", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the seed list with one seed")
        p.add_argument("--k1", type=int, help="normal references per episode")
        p.add_argument("--k2", type=int, help="abnormal references per episode")
        p.add_argument("--proxies", type=int, help="learnable proxy count")
        p.add_argument("--lambda", dest="seg_weight", type=float,
                       help="segmentation loss weight")
        p.add_argument("--out", dest="out_dir", help="output directory")
        p.add_argument("--fpr-limit", dest="fpr_limit", type=float,
                       help="false-positive-rate cap for the region-overlap metric")
        return p

    p_train = common(sub.add_parser("train", help="train on the original domain"))
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--episodes-per-epoch", dest="episodes_per_epoch", type=int)
    p_train.add_argument("--lr", type=float)

    p_eval = common(sub.add_parser("eval", help="evaluate checkpoints on the target domain"))
    p_eval.add_argument("checkpoints", nargs="+", help="checkpoint files, one per seed")
    p_eval.add_argument("--ablate-abnormal", action="store_true",
                        help="zero the attention branch (plain NN baseline)")

    p_score = common(sub.add_parser("score", help="score one test image"))
    p_score.add_argument("checkpoint")
    p_score.add_argument("--image-id", required=True)

    p_synth = common(sub.add_parser("synth", help="generate the synthetic benchmark"))
    p_synth.add_argument("--categories", type=int, default=8)
    p_synth.add_argument("--train-categories", dest="train_categories", type=int, default=5)
    p_synth.add_argument("--images-per-split", dest="images_per_split", type=int, default=10)
    p_synth.add_argument("--shift", type=float, default=0.8)
    p_synth.add_argument("--noise", type=float, default=0.35)

    p_diag = common(sub.add_parser("diag", help="residual-norm histograms and proxy sweep"))
    p_diag.add_argument("checkpoint", nargs="?")
    p_diag.add_argument("--sweep-proxies", dest="sweep_proxies",
                        help="comma list of proxy counts to train and evaluate")

    p_check = common(sub.add_parser("extract-check",
                                    help="validate extractor output against the formats"))
    p_check.add_argument("manifest")
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        key: getattr(args, key, None)
        for key in ("k1", "k2", "proxies", "seg_weight", "out_dir", "fpr_limit",
                    "lr", "epochs", "episodes_per_epoch")
    }
    apply_overrides(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = (args.seed,)
    return cfg


def _checkpoint_path(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"checkpoint_seed{seed}.nagp"


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    cfg.validate_paths(need_train=True)
    manifest = load_manifest(cfg.train_manifest)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        sampler_cfg = SamplerConfig(cfg.k1, cfg.k2, seed, mode="train")
        train_cfg = TrainConfig(cfg.proxies, cfg.epochs, cfg.episodes_per_epoch,
                                cfg.score_fraction)
        loss_cfg = LossConfig(seg_weight=cfg.seg_weight)
        opt = OptimizerState(base_lr=cfg.lr, weight_decay=cfg.weight_decay,
                             milestones=cfg.milestones)
        params, rows = train(manifest, sampler_cfg, train_cfg, loss_cfg, opt, seed,
                             log_every=max(1, cfg.episodes_per_epoch // 4))
        ckpt = _checkpoint_path(cfg, seed)
        save_checkpoint(params, ckpt)
        write_trace(rows, out / f"trace_seed{seed}.tsv")
        print(f"seed {seed}: wrote {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    cfg.validate_paths(need_test=True)
    manifest = load_manifest(cfg.test_manifest)
    checkpoints = list(args.checkpoints)
    if len(checkpoints) == 1 and len(cfg.seeds) > 1:
        checkpoints = checkpoints * len(cfg.seeds)
    if len(checkpoints) != len(cfg.seeds):
        raise ConfigError(
            f"{len(checkpoints)} checkpoints for {len(cfg.seeds)} seeds"
        )
    runs = []
    for seed, ckpt in zip(cfg.seeds, checkpoints):
        params = load_checkpoint(ckpt, mask_value=cfg.mask_value)
        sampler_cfg = SamplerConfig(cfg.k1, cfg.k2, seed, mode="test")
        runs.append(evaluate_model(
            params, manifest, sampler_cfg,
            fpr_limit=cfg.fpr_limit, pro_thresholds=cfg.pro_thresholds,
            per_image_pixel_auroc=cfg.per_image_pixel_auroc,
            score_fraction=cfg.score_fraction,
            ablate_abnormal=getattr(args, "ablate_abnormal", False),
            cache={},
        ))
    rows = aggregate_seed_reports(runs)
    table_rows = [(cat, means, stds if len(runs) > 1 else None)
                  for cat, means, stds in rows]
    print(render_report_table(table_rows))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report_lines(rows), encoding="utf-8")
    print(f"wrote {out / 'report.tsv'}")
    return 0


def cmd_score(args) -> int:
    cfg = _load_run_config(args)
    cfg.validate_paths(need_test=True)
    manifest = load_manifest(cfg.test_manifest)
    params = load_checkpoint(args.checkpoint, mask_value=cfg.mask_value)
    seed = cfg.seeds[0]
    sampler_cfg = SamplerConfig(cfg.k1, cfg.k2, seed, mode="test")
    episodes = {ep.query_id: ep for ep in test_episodes(manifest, sampler_cfg, cache={})}
    if args.image_id not in episodes:
        raise DataError(f"image_id {args.image_id!r} not in the test split")
    ep = episodes[args.image_id]
    rec = next(r for r in manifest.records if r.image_id == args.image_id)
    fused, img_score = score_episode(params, ep, cfg.score_fraction)
    up = upsample_score_map(fused, rec.image_h, rec.image_w)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(up, out / f"{args.image_id}_score.pgm")
    write_raw_grid(up.astype(np.float32), out / f"{args.image_id}_score.nagf")
    print(f"{args.image_id}: image score {img_score:.6f} (label {ep.label})")
    print(f"wrote {out / (args.image_id + '_score.pgm')}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    seed = cfg.seeds[0]
    synth_cfg = SynthConfig(
        categories=args.categories,
        train_categories=args.train_categories,
        train_normals=args.images_per_split,
        test_normals=args.images_per_split,
        test_abnormals_per_type=args.images_per_split,
        anomaly_shift=args.shift,
        noise_sigma=args.noise,
        seed=seed,
    )
    train_path, target_path = generate_benchmark(synth_cfg, cfg.out_dir)
    print(f"wrote {train_path}")
    print(f"wrote {target_path}")
    return 0


def cmd_diag(args) -> int:
    cfg = _load_run_config(args)
    cfg.validate_paths(need_test=True)
    manifest = load_manifest(cfg.test_manifest)
    seed = cfg.seeds[0]
    sampler_cfg = SamplerConfig(cfg.k1, cfg.k2, seed, mode="test")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    episodes = test_episodes(manifest, sampler_cfg, cache={})
    stats = residual_norm_stats(episodes)
    hist_path = out / "residual_norms.tsv"
    with open(hist_path, "w", encoding="utf-8") as fh:
        fh.write("bin_start\tbin_end\tnormal_count\tabnormal_count\n")
        for i in range(len(stats.normal_counts)):
            fh.write(f"{stats.edges[i]:.6f}\t{stats.edges[i + 1]:.6f}"
                     f"\t{stats.normal_counts[i]}\t{stats.abnormal_counts[i]}\n")
    print(f"normal-patch residual norm mean:   {stats.normal_mean:.4f}")
    print(f"abnormal-patch residual norm mean: {stats.abnormal_mean:.4f}")
    print(f"wrote {hist_path}")

    if args.sweep_proxies:
        if not cfg.train_manifest:
            raise ConfigError("proxy sweep needs train_manifest in the config")
        cfg.validate_paths(need_train=True)
        train_manifest = load_manifest(cfg.train_manifest)
        counts = [int(x) for x in args.sweep_proxies.split(",") if x.strip()]
        print(f"{'proxies':>8} {'img AUROC':>10} {'pix AUROC':>10}")
        sweep_path = out / "proxy_sweep.tsv"
        with open(sweep_path, "w", encoding="utf-8") as fh:
            fh.write("proxies\timg_auroc\tpix_auroc\n")
            for m in counts:
                train_cfg = TrainConfig(m, cfg.epochs, cfg.episodes_per_epoch,
                                        cfg.score_fraction)
                opt = OptimizerState(base_lr=cfg.lr, weight_decay=cfg.weight_decay,
                                     milestones=cfg.milestones)
                params, _ = train(train_manifest,
                                  SamplerConfig(cfg.k1, cfg.k2, seed, mode="train"),
                                  train_cfg, LossConfig(seg_weight=cfg.seg_weight),
                                  opt, seed)
                reports = evaluate_model(params, manifest, sampler_cfg,
                                         fpr_limit=cfg.fpr_limit,
                                         pro_thresholds=cfg.pro_thresholds, cache={})
                mean = reports[-1]
                print(f"{m:>8} {mean.image_auroc:>10.4f} {mean.pixel_auroc:>10.4f}")
                fh.write(f"{m}\t{mean.image_auroc:.6f}\t{mean.pixel_auroc:.6f}\n")
        print(f"wrote {sweep_path}")
    return 0


def cmd_extract_check(args) -> int:
    manifest = load_manifest(args.manifest)
    violations = []
    counts: dict[str, dict[str, int]] = {}
    first_c = None
    for rec in manifest.records:
        slot = counts.setdefault(rec.category, {"normal": 0, "abnormal": 0})
        slot["abnormal" if rec.is_abnormal else "normal"] += 1
        try:
            fmap = read_feature_file(rec.feature_path, normalize=False)
            if first_c is None:
                first_c = fmap.c
            elif fmap.c != first_c:
                violations.append(f"{rec.feature_path}: channels {fmap.c} != {first_c}")
            norms = np.linalg.norm(fmap.values, axis=1)
            bad = (np.abs(norms - 1.0) > 1e-5) & (norms > 0)
            if bad.any():
                violations.append(
                    f"{rec.feature_path}: {int(bad.sum())} rows not unit-norm"
                )
            if rec.mask_path:
                mask = read_mask_file(rec.mask_path)
                if mask.num_patches != fmap.num_patches:
                    violations.append(f"{rec.mask_path}: patch count mismatch")
                if rec.is_abnormal and not mask.any_set():
                    violations.append(f"{rec.mask_path}: abnormal mask has no set bits")
        except DataError as exc:
            violations.append(str(exc))
    print(f"{'category':<16} {'normal':>8} {'abnormal':>9}")
    for cat in sorted(counts):
        print(f"{cat:<16} {counts[cat]['normal']:>8} {counts[cat]['abnormal']:>9}")
    print(f"{len(manifest.records)} records, {len(violations)} violations")
    for v in violations:
        print(f"  VIOLATION: {v}")
    return 2 if violations else 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "synth": cmd_synth,
    "diag": cmd_diag,
    "extract-check": cmd_extract_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
