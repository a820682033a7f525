"""``semirest`` command line: synth, build-bank, train, infer and eval.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
import argparse
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from loguru import logger

from . import containers
from .config import SETTING_ALIASES, load_config
from .dataset import load_dataset, read_pnm, synth_dataset, write_pnm
from .errors import ConfigError, DataError, SemirestError
from .memory_bank import read_bank, write_bank
from .metrics import evaluate, write_report
from .pipeline import build_bank, score_image
from .transformer import load_checkpoint, save_checkpoint

MANIFEST = "manifest.json"


def _setup_logging():
    level = os.environ.get("SEMIREST_LOG", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "INFO"
    logger.remove()
    logger.add(sys.stderr, level=level, format="{level: <7} {message}")


@contextmanager
def atomic_dir(out):
    """Build into a sibling temp directory and rename into place on success.

    An existing target is only replaced when it holds a previous run manifest.
    """
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (out / MANIFEST).exists():
        raise ConfigError(f"{out} exists and is not a previous semirest output; refusing to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old.", dir=out.parent))
        os.replace(out, old / "x")
        os.replace(tmp, out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, out)


def write_manifest(folder, args, cfg=None, **extra):
    manifest = {
        "command": args.command,
        "config_path": args.config,
        "dataset": getattr(args, "data", None),
        "output": args.out,
        "seed": args.seed if cfg is None else cfg.seed,
        "setting": None if cfg is None else cfg.setting,
        "config": None if cfg is None else cfg.to_dict(),
    }
    manifest.update(extra)
    (Path(folder) / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _config(args):
    overrides = {"seed": args.seed, "setting": args.setting}
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    n_normal = args.n_normal
    with atomic_dir(args.out) as tmp:
        synth_dataset(tmp, n_normal=n_normal, n_defect=args.n_defect, seed=args.seed or 0, size=args.size)
        write_manifest(tmp, args, n_normal=n_normal, n_defect=args.n_defect, size=args.size)
    logger.info("wrote dataset to {}", args.out)


def cmd_build_bank(args):
    cfg = _config(args)
    split = load_dataset(args.data)
    bank = build_bank(split.train_normal, cfg)
    with atomic_dir(args.out) as tmp:
        write_bank(bank, tmp / "bank.srbk")
        write_manifest(tmp, args, cfg, bank_size=len(bank), bank_dim=bank.dim)
    logger.info("bank of {} entries written to {}", len(bank), args.out)


def _csv_log(path):
    fh = open(path, "w")
    fh.write("step,loss,lr,windows\n")

    def write(row):
        step, loss, lr, windows = row
        fh.write(f"{step},{loss!r},{lr!r},{windows}\n")

    return fh, write


def cmd_train(args):
    from .mixmatch import finetune_semi, replay_semi_loss
    from .training import build_training_data, init_state, replay_loss, state_from_models, train

    cfg = _config(args)
    torch.manual_seed(cfg.seed)
    split = load_dataset(args.data, require_boxes=cfg.setting == "semisupervised")
    bank = read_bank(args.bank)
    with atomic_dir(args.out) as tmp:
        fh, log_row = _csv_log(tmp / "train_log.csv")
        extra = {"bank": args.bank}
        try:
            if cfg.setting == "semisupervised":
                pre_cfg = cfg.for_setting("unsupervised", steps=cfg.pretrain_steps)
                if args.init:
                    live, ema = load_checkpoint(args.init)
                    state = state_from_models(live, ema, cfg)
                    extra["init"] = args.init
                else:
                    pre_data = build_training_data(split, bank, pre_cfg)
                    state, _ = train(pre_data, pre_cfg, on_step=log_row)
                data = build_training_data(split, bank, cfg, real_labels="boxes")
                start = state.step
                state, _ = finetune_semi(data, state, cfg, on_step=log_row)
                if cfg.steps:
                    final = replay_semi_loss(state.model, data, cfg, state.step - 1, state.step - 1 - start)
                    extra.update(final_step=state.step - 1, final_local_step=state.step - 1 - start)
                else:
                    final = None
            else:
                real = "pixels" if cfg.setting == "supervised" else None
                data = build_training_data(split, bank, cfg, real_labels=real)
                state = init_state(cfg)
                if args.init:
                    live, ema = load_checkpoint(args.init)
                    state = state_from_models(live, ema, cfg)
                    extra["init"] = args.init
                state, _ = train(data, cfg, state, on_step=log_row)
                final = replay_loss(state.model, data, cfg, state.step - 1) if cfg.steps else None
                extra.update(final_step=state.step - 1)
        finally:
            fh.close()
        save_checkpoint(tmp / "model.srmd", state.model, state.ema)
        write_manifest(tmp, args, cfg, final_batch_loss=final, steps_done=state.step, **extra)
    if final is not None:
        logger.info("final batch loss {:.6g} after {} steps", final, state.step)
    logger.info("checkpoint written to {}", Path(args.out) / "model.srmd")


def _infer_inputs(args, cfg):
    src = Path(args.images)
    if (src / "train" / "normal").is_dir():
        split = load_dataset(src)
        items = split.test_normal + split.test_defect
        if args.exclude_labeled:
            items = split.test_normal + split.evaluation_defects(cfg.n_labeled)
        return [(it.name, it.image, it.feature_path) for it in items]
    paths = sorted(p for p in src.glob("*") if p.suffix in (".ppm", ".pgm"))
    if not paths:
        raise DataError(f"no .ppm/.pgm images under {src}")
    return [(p.stem, read_pnm(p), None) for p in paths]


def cmd_infer(args):
    cfg = _config(args)
    _, ema = load_checkpoint(args.checkpoint)
    mc = ema.config
    cfg.mu, cfg.step, cfg.rho = mc.mu, mc.step, mc.rho
    bank = read_bank(args.bank)
    inputs = _infer_inputs(args, cfg)

    def run(entry):
        name, image, fpath = entry
        return name, score_image(ema, bank, image, cfg, fpath)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        results = list(pool.map(run, inputs))
    with atomic_dir(args.out) as tmp:
        (tmp / "scores").mkdir()
        (tmp / "previews").mkdir()
        for name, score in results:
            h, w = score.shape
            containers.write_map(tmp / "scores" / f"{name}.srft", score[:, :, None].astype(np.float32), (h, w))
            write_pnm(tmp / "previews" / f"{name}.pgm", np.clip(score, 0.0, 1.0))
        write_manifest(tmp, args, cfg, checkpoint=args.checkpoint, bank=args.bank,
                       images=args.images, count=len(results))
    logger.info("scored {} images into {}", len(results), args.out)


def _stems(folder, suffix):
    return {p.stem: p for p in Path(folder).glob(f"*{suffix}")}


def cmd_eval(args):
    score_dir = Path(args.scores)
    if (score_dir / "scores").is_dir():
        score_dir = score_dir / "scores"
    scores = _stems(score_dir, ".srft")
    truths = _stems(args.truth, ".srlb")
    if not scores:
        raise DataError(f"no score files under {score_dir}")
    missing_truth = sorted(set(scores) - set(truths))
    if missing_truth:
        raise DataError(f"score files without a truth mask: {', '.join(missing_truth)}")
    unscored = sorted(set(truths) - set(scores))
    if unscored and not args.allow_unscored:
        raise DataError(f"truth masks without a score file: {', '.join(unscored)}")
    names = sorted(scores)
    s_maps, t_maps = [], []
    for n in names:
        s, _ = containers.read_map(scores[n], magic=b"SRFT")
        t, _ = containers.read_label_map(truths[n])
        if s.shape[:2] != t.shape:
            raise DataError(f"{n}: score map {s.shape[:2]} does not match truth {t.shape}")
        s_maps.append(s[:, :, 0].astype(np.float64))
        t_maps.append((t == 1).astype(np.int64))
    report = evaluate(s_maps, t_maps, names, fpr_limit=args.fpr_limit, category=args.category)
    if report.degenerate:
        logger.warning("constant score maps: AP and PRO are degenerate")
    with atomic_dir(args.out) as tmp:
        write_report(tmp / "report.csv", [report], per_image=args.per_image)
        write_manifest(tmp, args, scores=args.scores, truth=args.truth,
                       ap=report.ap, pro=report.pro, pixel_auroc=report.pixel_auroc,
                       degenerate=report.degenerate)
    logger.info("AP {:.4f}  PRO {:.4f}  pixel-AUROC {:.4f}", report.ap, report.pro, report.pixel_auroc)


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--setting", choices=sorted(SETTING_ALIASES), help="supervision setting")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-image work")
    common.add_argument("--out", required=True, help="output directory (written atomically)")

    parser = argparse.ArgumentParser(prog="semirest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic desk dataset")
    p.add_argument("--n-normal", type=int, default=32)
    p.add_argument("--n-defect", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-bank", parents=[common], help="build the coreset memory bank")
    p.add_argument("--data", required=True, help="dataset root")
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("train", parents=[common], help="train a classifier checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--init", help="checkpoint to start from (semi-supervised: the pretrained model)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="score images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--images", required=True, help="dataset root (test split) or a folder of images")
    p.add_argument("--exclude-labeled", action="store_true",
                   help="skip the first n_labeled defect images used for training")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="compute AP, PRO and pixel-AUROC")
    p.add_argument("--scores", required=True, help="score directory (or an infer output)")
    p.add_argument("--truth", required=True, help="directory of .srlb masks")
    p.add_argument("--category", default="all")
    p.add_argument("--fpr-limit", type=float, default=0.3)
    p.add_argument("--per-image", action="store_true")
    p.add_argument("--allow-unscored", action="store_true", help="ignore masks that have no score file")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.setting is not None:
        args.setting = SETTING_ALIASES[args.setting]
    torch.set_num_threads(1)
    try:
        args.func(args)
    except SemirestError as exc:
        logger.error("{}", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: {}", exc)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
