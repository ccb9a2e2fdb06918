"""``shapepu`` command line: gen-data, estimate-alpha, train, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .dataset import SPLITS, is_nonempty_dir, load_manifest_spec, load_split, write_dataset
from .gradcheck import TOLERANCE, run_suite
from .metrics import evaluate
from .mixture import EmInputs, em_estimate, em_init
from .model import Adam, Checkpoint, ModelError, SegModel, load_checkpoint, save_checkpoint
from .pgm import write_pgm
from .phantom import UNLABELED, oracle_posteriors
from .train import HISTORY_FIELDS, FitState, fit, predict_masks, predict_probs

log = logging.getLogger("shapepu")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_csv(path: Path, header: list, rows: list) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "size", None) is not None:
        overrides["phantom.size"] = str(args.size)
    if getattr(args, "ablation", None) is not None:
        overrides["ablation"] = args.ablation
    return cfg.with_overrides(overrides) if overrides else cfg


def _data_root(args, cfg) -> Path:
    root = Path(getattr(args, "data", None) or cfg.data_root)
    if not (root / "manifest.txt").is_file():
        raise FileNotFoundError(f"no dataset at {root} (run gen-data first)")
    return root


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg) -> int:
    root = Path(args.out or cfg.data_root)
    if is_nonempty_dir(root):
        if not args.force:
            raise FileExistsError(f"{root} is not empty; pass --force to regenerate")
        # only remove what gen-data itself writes
        for split in SPLITS:
            if (root / split).is_dir():
                shutil.rmtree(root / split)
        (root / "manifest.txt").unlink(missing_ok=True)
    root.mkdir(parents=True, exist_ok=True)
    splits = write_dataset(root, cfg.phantom_spec(), cfg.n_train, cfg.n_val, cfg.n_test, cfg.hash())
    (root / "config.txt").write_text(cfg.to_text())
    print(f"wrote {sum(len(v) for v in splits.values())} samples to {root} (config {cfg.hash()})")
    return EXIT_OK


def cmd_estimate_alpha(args, cfg) -> int:
    root = _data_root(args, cfg)
    data = load_split(root, args.split)
    spec = load_manifest_spec(root)
    c = data.num_classes + 1
    model = None
    if not args.oracle:
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint).model
        else:
            log.warning("no checkpoint given: using a freshly initialised model (diagnostic mode)")
            model = SegModel(data.num_classes, seed=cfg.seed)
        if model.num_classes != data.num_classes:
            raise ModelError(f"checkpoint has {model.num_classes} classes, dataset has {data.num_classes}")
        probs = predict_probs(model, data.normalized())
    rows, traj_rows = [], []
    for k, image_id in enumerate(data.ids):
        scr = data.scribbles[k]
        unl = scr == UNLABELED
        counts = np.bincount(scr[~unl].ravel(), minlength=c)[:c]
        if args.oracle:
            post = oracle_posteriors(spec, image_id, data.images[k], em_init(counts))[unl]
        else:
            post = probs[k][:, unl].T.astype(np.float64)
        post = post / post.sum(axis=1, keepdims=True)
        inputs = EmInputs.from_counts(post, counts)
        res = em_estimate(inputs, cfg.em_tol, cfg.em_max_iters)
        true = data.ratios[k]
        err = float(np.abs(res.alpha - true).sum())
        rows.append(
            [image_id] + [_fmt(float(a)) for a in res.alpha] + [_fmt(float(t)) for t in true]
            + [_fmt(err), res.iterations, int(res.converged), cfg.hash()]
        )
        for it, a in enumerate(res.trajectory):
            traj_rows.append([image_id, it] + [_fmt(float(x)) for x in a])
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    header = (
        ["image_id"] + [f"alpha_est_{j}" for j in range(c)] + [f"alpha_true_{j}" for j in range(c)]
        + ["l1_error", "iterations", "converged", "config_hash"]
    )
    path = out / f"alpha_{args.split}.csv"
    _write_csv(path, header, rows)
    if args.trajectories:
        _write_csv(out / f"alpha_{args.split}_trajectories.csv", ["image_id", "iter"] + [f"alpha_{j}" for j in range(c)], traj_rows)
    mean_err = float(np.mean([float(r[1 + 2 * c]) for r in rows]))
    print(f"{path}: {len(rows)} images, mean L1 alpha error {mean_err:.4f}")
    return EXIT_OK


def _read_history(path: Path) -> list:
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        return list(csv.reader(fh))[1:]


def cmd_train(args, cfg) -> int:
    root = _data_root(args, cfg)
    run = Path(args.out or cfg.run_dir)
    train_set, val_set = load_split(root, "train"), load_split(root, "val")
    tcfg = cfg.train_config()
    chash = cfg.hash()
    state = None
    old_rows: list = []
    if args.resume:
        last = run / "last.ckpt"
        if not last.is_file():
            raise FileNotFoundError(f"nothing to resume: {last} missing")
        ck = load_checkpoint(last)
        if ck.config_hash != chash:
            raise ValueError(f"config hash {chash} differs from the run's {ck.config_hash}")
        opt = Adam(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, ck.optimizer.step_count, ck.optimizer.m, ck.optimizer.v)
        best = load_checkpoint(run / "best.ckpt") if (run / "best.ckpt").is_file() else None
        state = FitState(
            ck.model, opt, ck.epoch + 1, float(ck.extra.get("best_dice", "-1.0")),
            best.model.state() if best is not None else None, best.epoch if best is not None else -1,
        )
        old_rows = [r for r in _read_history(run / "history.csv") if int(r[0]) < state.next_epoch]
        log.info("resuming %s at epoch %d", run, state.next_epoch)
    elif is_nonempty_dir(run):
        if not args.force:
            raise FileExistsError(f"run directory {run} is not empty; use --resume, --force or a new --out")
        for name in ("config.txt", "history.csv", "best.ckpt", "last.ckpt"):
            (run / name).unlink(missing_ok=True)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(cfg.to_text())

    m = train_set.num_classes
    header = list(HISTORY_FIELDS) + [f"val_dice_{c}" for c in range(1, m + 1)] + ["val_mean_dice"]
    rows = list(old_rows)

    def on_epoch(st: FitState, row: dict) -> None:
        rows.append([_fmt(row.get(k)) for k in header])
        _write_csv(run / "history.csv", header, rows)
        extra = {"best_dice": repr(st.best_dice), "best_epoch": str(st.best_epoch)}
        save_checkpoint(run / "last.ckpt", Checkpoint(st.model, st.next_epoch - 1, chash, st.optimizer, extra))
        if st.best_epoch == st.next_epoch - 1:
            save_checkpoint(run / "best.ckpt", Checkpoint(st.model, st.best_epoch, chash, extra={"val_mean_dice": repr(st.best_dice)}))

    model = state.model if state is not None else SegModel(m, seed=cfg.seed)
    best, _ = fit(model, train_set, val_set, tcfg, state=state, on_epoch=on_epoch, config_hash=chash)
    if not (run / "best.ckpt").exists():
        save_checkpoint(run / "best.ckpt", best)
    if not (run / "history.csv").exists():
        _write_csv(run / "history.csv", header, rows)
    print(f"{run}: best val mean Dice {best.extra.get('val_mean_dice')} at epoch {best.epoch} (config {chash})")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    root = _data_root(args, cfg)
    data = load_split(root, args.split)
    ck = load_checkpoint(args.checkpoint)
    if ck.model.num_classes != data.num_classes:
        raise ModelError(f"checkpoint has {ck.model.num_classes} classes, dataset has {data.num_classes}")
    pred = predict_masks(ck.model, data.normalized(), postprocess=not args.no_postprocess)
    out = Path(args.out or ".")
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    rows, dices, hds = [], [], []
    for k, image_id in enumerate(data.ids):
        write_pgm(pred_dir / f"pred_{image_id}.pgm", pred[k], 255)
        res = evaluate(pred[k], data.masks[k], data.num_classes)
        for c in range(1, data.num_classes + 1):
            rows.append([image_id, c, _fmt(res.dice[c]), _fmt(res.hausdorff[c])])
            dices.append(res.dice[c])
            hds.append(res.hausdorff[c])
    hd_ok = [h for h in hds if not math.isnan(h)]
    mean_dice = float(np.mean(dices))
    mean_hd = float(np.mean(hd_ok)) if hd_ok else math.nan
    rows.append(["mean", "all", _fmt(mean_dice), _fmt(mean_hd)])
    path = out / f"eval_{args.split}.csv"
    _write_csv(path, ["image_id", "class", "dice", "hd"], rows)
    (out / "eval_config_hash.txt").write_text(f"config_hash={ck.config_hash}\n")
    print(f"{path}: mean Dice {mean_dice:.4f}, mean HD {mean_hd:.3f} ({'raw' if args.no_postprocess else 'post-processed'})")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    results = run_suite(seeds=args.seeds, base_seed=cfg.seed, corrupt=args.corrupt)
    ok = True
    for r in results:
        print(f"{r.name:22s} worst_rel_error={r.worst:.3e} {'ok' if r.passed else 'FAIL'}")
        ok &= r.passed
    print(f"{'all checks passed' if ok else 'gradient check FAILED'} (tolerance {TOLERANCE:g}, {args.seeds} seeds)")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------- entry point


def _common(suppress: bool) -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; the subcommand
    # copy must not reset values given before it
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file", **kw)
    common.add_argument("--seed", type=int, help="global seed (data, init, augmentation)", **kw)
    common.add_argument("--out", help="output directory", **kw)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs", **kw)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    p = _Parser(prog="shapepu", description=__doc__, parents=[_common(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic phantom dataset")
    g.add_argument("--size", type=int, help="image side length in pixels")

    e = sub.add_parser("estimate-alpha", parents=[common], help="EM class-proportion estimates per image")
    e.add_argument("--data", help="dataset root (default: data_root from config)")
    e.add_argument("--split", choices=SPLITS, default="test")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", help="model checkpoint providing posteriors")
    src.add_argument("--oracle", action="store_true", help="use the generator's exact Bayes posteriors")
    e.add_argument("--trajectories", action="store_true", help="also write per-iteration alpha values")

    t = sub.add_parser("train", parents=[common], help="train a model into a run directory")
    t.add_argument("--data", help="dataset root (default: data_root from config)")
    t.add_argument("--ablation", choices=["l+", "cutout", "l+l-", "cutout+l-", "full"])
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt in the run directory")

    v = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    v.add_argument("--data", help="dataset root (default: data_root from config)")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--split", choices=SPLITS, default="test")
    v.add_argument("--no-postprocess", action="store_true", help="skip largest-component filtering")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: scale one analytic gradient
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "estimate-alpha": cmd_estimate_alpha,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
        cfg = _resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as exc:
        print(f"shapepu: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with cfgmod.thread_limit():
            return COMMANDS[args.command](args, cfg)
    except cfgmod.ConfigError as exc:
        print(f"shapepu: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        log.debug("traceback", exc_info=True)
        print(f"shapepu: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
